use crate::error::Result;
use crate::tape::Var;
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_with(&b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(out, &[*self, *other], move |g, need| {
            Ok(vec![
                need[0].then(|| g.sum_to_shape(&sa)).transpose()?,
                need[1].then(|| g.sum_to_shape(&sb)).transpose()?,
            ])
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_with(&b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(out, &[*self, *other], move |g, need| {
            Ok(vec![
                need[0].then(|| g.sum_to_shape(&sa)).transpose()?,
                need[1]
                    .then(|| g.scale(-1.0).sum_to_shape(&sb))
                    .transpose()?,
            ])
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_with(&b, |x, y| x * y)?;
        Ok(self.tape().op(out, &[*self, *other], move |g, need| {
            let ga = if need[0] {
                Some(g.zip_with(&b, |g, y| g * y)?.sum_to_shape(a.shape())?)
            } else {
                None
            };
            let gb = if need[1] {
                Some(g.zip_with(&a, |g, x| g * x)?.sum_to_shape(b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_with(&b, |x, y| x / y)?;
        Ok(self.tape().op(out, &[*self, *other], move |g, need| {
            let ga = if need[0] {
                Some(g.zip_with(&b, |g, y| g / y)?.sum_to_shape(a.shape())?)
            } else {
                None
            };
            let gb = if need[1] {
                let q = a.zip_with(&b, |x, y| -x / (y * y))?;
                Some(g.zip_with(&q, |g, q| g * q)?.sum_to_shape(b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.tape()
            .op(out, &[*self], |g, _| Ok(vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape()
            .op(out, &[*self], move |g, _| Ok(vec![Some(g.scale(s))]))
    }

    pub fn neg(&self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// Applies `f` element-wise; `df(x, y)` is the local derivative at input
    /// `x` with output `y`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let out = y.clone();
        self.tape().op(out, &[*self], move |g, _| {
            let local = x.zip_with(&y, &df)?;
            Ok(vec![Some(g.zip_with(&local, |g, d| g * d)?)])
        })
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }
}

/// Numerically stable logistic function on plain tensors.
pub fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}
