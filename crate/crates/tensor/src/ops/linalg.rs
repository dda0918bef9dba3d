use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_shared: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || TensorError::shapes("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let rhs_shared = lead_b.is_empty();
    if !rhs_shared && lead_a != lead_b {
        return Err(err());
    }
    Ok(MatmulDims {
        batch: lead_a.iter().product(),
        m,
        k,
        n,
        rhs_shared,
    })
}

impl<'t> Var<'t> {
    /// Batched matrix product over the last two axes. A rank-2 right-hand
    /// side is shared across the batch.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let d = matmul_dims(a.shape(), b.shape())?;
        let (m, k, n) = (d.m, d.k, d.n);
        let b_stride = if d.rhs_shared { 0 } else { k * n };
        let mut out = vec![0.0; d.batch * m * n];
        for i in 0..d.batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                (k, 1),
                &b.data()[i * b_stride..],
                (n, 1),
                0.0,
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        let mut shape = a.shape()[..a.rank() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        let (batch, shared) = (d.batch, d.rhs_shared);
        Ok(self.tape().op(out, &[*self, *other], move |g, need| {
            let gd = g.data();
            let ga = if need[0] {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &gd[i * m * n..],
                        (n, 1),
                        &b.data()[i * b_stride..],
                        (1, n),
                        0.0,
                        &mut ga[i * m * k..],
                        (k, 1),
                    );
                }
                Some(Tensor::new(a.shape().to_vec(), ga)?)
            } else {
                None
            };
            let gb = if need[1] {
                let mut gb = vec![0.0; b.numel()];
                for i in 0..batch {
                    let off = if shared { 0 } else { i * k * n };
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &a.data()[i * m * k..],
                        (1, k),
                        &gd[i * m * n..],
                        (n, 1),
                        if shared { 1.0 } else { 0.0 },
                        &mut gb[off..],
                        (n, 1),
                    );
                }
                Some(Tensor::new(b.shape().to_vec(), gb)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let len = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut y = x.data().to_vec();
        if len > 0 {
            for row in y.chunks_mut(len) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        let saved = y.clone();
        Ok(self.tape().op(y, &[*self], move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for ((gx, gr), yr) in gx
                .chunks_mut(len)
                .zip(g.data().chunks(len))
                .zip(saved.data().chunks(len))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in gx.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            Ok(vec![Some(Tensor::new(saved.shape().to_vec(), gx)?)])
        }))
    }
}
