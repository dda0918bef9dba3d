use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, len, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    Tensor::zeros(shape.to_vec()).zip_with(g, |_, g| g)
}

impl<'t> Var<'t> {
    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().op(Tensor::scalar(x.sum()), &[*self], move |g, _| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item()))])
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(TensorError::invalid(
                "sum_axes",
                format!("axis {bad} out of range for shape {shape:?}"),
            ));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out = x.sum_to_shape(&out_shape)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            Ok(vec![Some(broadcast_to(g, &shape)?)])
        }))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.mul_scalar(1.0 / n.max(1) as f64))
    }

    /// Maximum along `axis`, kept as a size-1 dimension. Ties route the
    /// gradient to the first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::invalid(
                "max_axis",
                format!("bad axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split(&shape, axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        let data = x.data();
        for o in 0..outer {
            for k in 0..len {
                let row = &data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    let slot = o * inner + i;
                    if v > out[slot] || k == 0 {
                        out[slot] = v;
                        arg[slot] = k;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    gx[(o * len + arg[slot]) * inner + i] = g.data()[slot];
                }
            }
            Ok(vec![Some(Tensor::new(shape.clone(), gx)?)])
        }))
    }
}
