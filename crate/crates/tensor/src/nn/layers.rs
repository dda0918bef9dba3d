use rand::Rng;

use crate::error::{Result, TensorError};
use crate::nn::params::{Binder, ParamStore};
use crate::ops::conv::ConvGeometry;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        let fan_in = (in_channels * kernel * kernel).max(1) as f64;
        store.insert_param(
            format!("{name}.weight"),
            Tensor::randn([out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
        )?;
        if bias {
            store.insert_param(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        }
        Ok(Self {
            name,
            in_channels,
            out_channels,
            kernel,
            geom: ConvGeometry {
                stride,
                padding: kernel / 2,
            },
            bias,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> Option<String> {
        self.bias.then(|| format!("{}.bias", self.name))
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let w = b.param(&self.weight_name())?;
        let bias = self.bias_name().map(|n| b.param(&n)).transpose()?;
        x.conv2d(&w, bias.as_ref(), self.geom)
    }
}

/// Fully connected layer acting on the last axis: `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        store.insert_param(
            format!("{name}.weight"),
            Tensor::uniform([in_features, out_features], -bound, bound, rng),
        )?;
        if bias {
            store.insert_param(format!("{name}.bias"), Tensor::zeros([out_features]))?;
        }
        Ok(Self {
            name,
            in_features,
            out_features,
            bias,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> Option<String> {
        self.bias.then(|| format!("{}.bias", self.name))
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&b.param(&self.weight_name())?)?;
        match self.bias_name() {
            Some(n) => y.add(&b.param(&n)?),
            None => Ok(y),
        }
    }
}

fn channel_view<'t>(v: &Var<'t>, c: usize) -> Result<Var<'t>> {
    v.reshape(&[1, c, 1, 1])
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, groups: usize, channels: usize) -> Result<Self> {
        let name = name.into();
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(TensorError::invalid(
                "GroupNorm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        store.insert_param(format!("{name}.weight"), Tensor::ones([channels]))?;
        store.insert_param(format!("{name}.bias"), Tensor::zeros([channels]))?;
        Ok(Self {
            name,
            groups,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(TensorError::invalid("GroupNorm", format!("input shape {s:?}")));
        }
        let g = x.reshape(&[s[0], self.groups, s[1] / self.groups * s[2] * s[3]])?;
        let centered = g.sub(&g.mean_axes(&[2])?)?;
        let var = centered.square().mean_axes(&[2])?;
        let normed = centered.mul(&var.add_scalar(self.eps).powf(-0.5))?.reshape(&s)?;
        let gamma = channel_view(&b.param(&format!("{}.weight", self.name))?, self.channels)?;
        let beta = channel_view(&b.param(&format!("{}.bias", self.name))?, self.channels)?;
        normed.mul(&gamma)?.add(&beta)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        store.insert_param(format!("{name}.weight"), Tensor::ones([channels]))?;
        store.insert_param(format!("{name}.bias"), Tensor::zeros([channels]))?;
        store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros([channels]))?;
        store.insert_buffer(format!("{name}.running_var"), Tensor::ones([channels]))?;
        Ok(Self {
            name,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(TensorError::invalid("BatchNorm2d", format!("input shape {s:?}")));
        }
        let c = self.channels;
        let mean_name = format!("{}.running_mean", self.name);
        let var_name = format!("{}.running_var", self.name);
        let normed = if b.training() {
            let mean = x.mean_axes(&[0, 2, 3])?;
            let centered = x.sub(&mean)?;
            let var = centered.square().mean_axes(&[0, 2, 3])?;
            let count = (s[0] * s[2] * s[3]) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = b.buffer(&mean_name)?;
            let rv = b.buffer(&var_name)?;
            let new_mean = rm.zip_with(&mean.value().reshape([c])?, |r, v| (1.0 - m) * r + m * v)?;
            let new_var = rv.zip_with(&var.value().reshape([c])?, |r, v| (1.0 - m) * r + m * v * unbiased)?;
            b.update_buffer(&mean_name, new_mean);
            b.update_buffer(&var_name, new_var);
            centered.mul(&var.add_scalar(self.eps).powf(-0.5))?
        } else {
            let tape = b.tape();
            let mean = tape.constant(b.buffer(&mean_name)?.reshape([1, c, 1, 1])?);
            let inv = b
                .buffer(&var_name)?
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .reshape([1, c, 1, 1])?;
            x.sub(&mean)?.mul(&tape.constant(inv))?
        };
        let gamma = channel_view(&b.param(&format!("{}.weight", self.name))?, c)?;
        let beta = channel_view(&b.param(&format!("{}.bias", self.name))?, c)?;
        normed.mul(&gamma)?.add(&beta)
    }
}

#[derive(Clone, Debug)]
pub enum Norm {
    Group(GroupNorm),
    Batch(BatchNorm2d),
    Identity,
}

impl Norm {
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            Norm::Group(n) => n.forward(b, x),
            Norm::Batch(n) => n.forward(b, x),
            Norm::Identity => Ok(*x),
        }
    }
}
