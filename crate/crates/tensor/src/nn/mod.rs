mod layers;
mod optim;
mod params;

pub use layers::{BatchNorm2d, Conv2d, GroupNorm, Linear, Norm};
pub use optim::{clip_grad_norm, Adam};
pub use params::{BindMode, Binder, ParamStore};
