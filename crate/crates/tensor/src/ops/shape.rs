use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape.to_vec())?;
        let orig = x.shape().to_vec();
        Ok(self
            .tape()
            .op(out, &[*self], move |g, _| Ok(vec![Some(g.reshape(orig.clone())?)])))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .tape()
            .op(out, &[*self], move |g, _| Ok(vec![Some(g.permute(&inverse)?)])))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(TensorError::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    /// Flattens the trailing spatial axes of an NCHW map: `[N, C, H*W]`.
    pub fn flatten_spatial(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::invalid("flatten_spatial", format!("expected NCHW, got {s:?}")));
        }
        self.reshape(&[s[0], s[1], s[2] * s[3]])
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::shapes("concat", &base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let out = Tensor::new(shape, data)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().op(out, parts, move |g, need| {
        let mut grads = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for (i, &len) in lens.iter().enumerate() {
            if need[i] {
                let mut gi = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    gi.extend_from_slice(&g.data()[start..start + len * inner]);
                }
                grads.push(Some(Tensor::new(shapes[i].clone(), gi)?));
            } else {
                grads.push(None);
            }
            offset += len;
        }
        Ok(grads)
    }))
}
