//! Hybrid prior learning: distillation losses that transfer feature
//! structure from the frozen prior generator (clean input) to the target
//! network (compressed input), the saliency loss, and self-masked learning.
//!
//! Every loss takes the prior side as plain values and detaches it, so
//! gradients only ever reach the target network.

use cisod_tensor::nn::{Binder, Conv2d, ParamStore};
use cisod_tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::resize_area;
use crate::net::SodNet;

/// Standard deviation of the SSIM Gaussian window.
pub const SSIM_SIGMA: f64 = 1.5;
/// Nominal SSIM window side; shrinks to the map size for smaller maps.
pub const SSIM_WINDOW: usize = 11;
/// Smoothing constant of the soft IoU term.
pub const IOU_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HplWeights {
    /// Weight of the relation prior loss.
    pub alpha: f64,
    /// Weight of the location prior loss.
    pub beta: f64,
    pub sml_probability: f64,
}

impl Default for HplWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            sml_probability: 0.10,
        }
    }
}

impl HplWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got α={} β={}",
                self.alpha, self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.sml_probability) {
            return Err(Error::Config(format!(
                "sml_probability {} outside [0, 1]",
                self.sml_probability
            )));
        }
        Ok(())
    }
}

/// One network's view for the distillation losses: its parameters bound to
/// the shared tape plus the pyramid it produced.
#[derive(Clone, Copy)]
pub struct Side<'a, 't, 's> {
    pub net: &'a SodNet,
    pub binder: &'a Binder<'t, 's>,
    pub pyramid: &'a [Var<'t>],
}

/// Relation matrix `R = softmax_v(θ(F)ᵀψ(F) / √d)` and enhanced feature
/// `F̂ = R · φ(F)` over flattened positions.
pub struct RelationState<'t> {
    /// `[B, HW, HW]`, rows sum to one.
    pub r: Var<'t>,
    /// `[B, HW, d]`.
    pub f_hat: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct RelationLayer {
    pub theta: Conv2d,
    pub psi: Conv2d,
    pub phi: Conv2d,
    pub dim: usize,
}

impl RelationLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            theta: Conv2d::new(store, rng, format!("{name}.theta"), cin, dim, 1, 1, true)?,
            psi: Conv2d::new(store, rng, format!("{name}.psi"), cin, dim, 1, 1, true)?,
            phi: Conv2d::new(store, rng, format!("{name}.phi"), cin, dim, 1, 1, true)?,
            dim,
        })
    }

    pub fn state<'t>(&self, b: &Binder<'t, '_>, f: &Var<'t>) -> Result<RelationState<'t>> {
        let q = self.theta.forward(b, f)?.flatten_spatial()?.transpose()?;
        let k = self.psi.forward(b, f)?.flatten_spatial()?;
        let r = q.matmul(&k)?.mul_scalar(1.0 / (self.dim as f64).sqrt()).softmax()?;
        let v = self.phi.forward(b, f)?.flatten_spatial()?.transpose()?;
        let f_hat = r.matmul(&v)?;
        Ok(RelationState { r, f_hat })
    }
}

/// Normalized 2-D Gaussian window of side `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let data = (0..size * size).map(|i| g[i / size] * g[i % size] / total).collect();
    Tensor::new([size, size], data).expect("square window")
}

/// `1 − mean(SSIM)` over every channel and window position of two NCHW
/// maps. The dynamic range `L` of the stability constants is the value range
/// of `y` (the prior side), floored at `1e-6`.
pub fn ssim_loss<'t>(x: &Var<'t>, y: &Var<'t>) -> Result<Var<'t>> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx != sy || sx.len() != 4 {
        return Err(Error::Shape(format!("ssim of {sx:?} vs {sy:?}")));
    }
    let size = SSIM_WINDOW.min(sx[2]).min(sx[3]);
    let window = gaussian_window(size, SSIM_SIGMA);
    let yv = y.value();
    let (lo, hi) = yv
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo).max(1e-6);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mu_x = x.filter2d_valid(&window)?;
    let mu_y = y.filter2d_valid(&window)?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(&mu_y)?;
    let s_xx = x.square().filter2d_valid(&window)?.sub(&mu_xx)?;
    let s_yy = y.square().filter2d_valid(&window)?.sub(&mu_yy)?;
    let s_xy = x.mul(y)?.filter2d_valid(&window)?.sub(&mu_xy)?;
    let num = mu_xy.mul_scalar(2.0).add_scalar(c1).mul(&s_xy.mul_scalar(2.0).add_scalar(c2))?;
    let den = mu_xx.add(&mu_yy)?.add_scalar(c1).mul(&s_xx.add(&s_yy)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean().neg().add_scalar(1.0))
}

pub fn mse<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mse of {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.square().mean())
}

fn levels() -> std::ops::RangeInclusive<usize> {
    2..=5
}

/// Per-level SSIM losses between adapted target and prior features,
/// levels 2..=5 in order.
pub fn short_range_terms<'t>(t: Side<'_, 't, '_>, p: Side<'_, 't, '_>) -> Result<Vec<Var<'t>>> {
    levels()
        .map(|i| {
            let ft = t.net.adapt(t.binder, &t.pyramid[i - 1], i)?;
            let fp = p.net.adapt(p.binder, &p.pyramid[i - 1].detach(), i)?.detach();
            ssim_loss(&ft, &fp)
        })
        .collect()
}

fn sum_vars<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total)
}

pub fn short_range_loss<'t>(t: Side<'_, 't, '_>, p: Side<'_, 't, '_>) -> Result<Var<'t>> {
    sum_vars(&short_range_terms(t, p)?)
}

/// `Σ_i MSE(R_i^t, R_i^p) + MSE(F̂_i^t, F̂_i^p)` over levels 2..=5.
pub fn long_range_loss<'t>(t: Side<'_, 't, '_>, p: Side<'_, 't, '_>) -> Result<Var<'t>> {
    let mut terms = Vec::new();
    for i in levels() {
        let st = t.net.relation(i)?.state(t.binder, &t.pyramid[i - 1])?;
        let sp = p.net.relation(i)?.state(p.binder, &p.pyramid[i - 1].detach())?;
        terms.push(mse(&st.r, &sp.r.detach())?.add(&mse(&st.f_hat, &sp.f_hat.detach())?)?);
    }
    sum_vars(&terms)
}

/// Relation prior loss split into its two components.
pub struct RplLoss<'t> {
    pub short_range: Var<'t>,
    pub long_range: Var<'t>,
    pub total: Var<'t>,
}

pub fn rpl_loss<'t>(t: Side<'_, 't, '_>, p: Side<'_, 't, '_>) -> Result<RplLoss<'t>> {
    let short_range = short_range_loss(t, p)?;
    let long_range = long_range_loss(t, p)?;
    Ok(RplLoss {
        short_range,
        long_range,
        total: short_range.add(&long_range)?,
    })
}

/// Area-downsampled ground truth `[B, 1, h, w]`, kept soft.
pub fn foreground_mask(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = gt.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("ground truth must be [B, 1, H, W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * h * w);
    for i in 0..s[0] {
        let img = &gt.data()[i * plane..(i + 1) * plane];
        data.extend(resize_area(img, s[3], s[2], 1, w, h).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(Tensor::new([s[0], 1, h, w], data)?)
}

/// `MSE(M ⊙ max_k |S_t,k|, M ⊙ max_k |S_p,k|)`.
pub fn lpl_loss<'t>(s_l_t: &Var<'t>, s_l_p: &Var<'t>, mask: &Var<'t>) -> Result<Var<'t>> {
    let (st, sp, sm) = (s_l_t.shape(), s_l_p.shape(), mask.shape());
    if st != sp || st.len() != 4 {
        return Err(Error::Shape(format!("location maps {st:?} vs {sp:?}")));
    }
    if sm != [st[0], 1, st[2], st[3]] {
        return Err(Error::Shape(format!("mask {sm:?} does not match location map {st:?}")));
    }
    let mask = mask.detach();
    let rt = s_l_t.abs().max_axis(1)?.mul(&mask)?;
    let rp = s_l_p.detach().abs().max_axis(1)?.mul(&mask)?;
    mse(&rt, &rp)
}

/// BCE with logits plus the soft IoU loss `1 − (Σpy + ε)/(Σp + Σy − Σpy + ε)`
/// (per image, averaged over the batch).
pub fn saliency_loss<'t>(logits: &Var<'t>, y: &Var<'t>) -> Result<Var<'t>> {
    let s = logits.shape();
    if s != y.shape() || s.len() != 4 {
        return Err(Error::Shape(format!("saliency loss of {s:?} vs {:?}", y.shape())));
    }
    let y = y.detach();
    let bce = logits.softplus().sub(&logits.mul(&y)?)?.mean();
    let p = logits.sigmoid();
    let inter = p.mul(&y)?.sum_axes(&[1, 2, 3])?;
    let union = p.sum_axes(&[1, 2, 3])?.add(&y.sum_axes(&[1, 2, 3])?)?.sub(&inter)?;
    let iou = inter.add_scalar(IOU_EPS).div(&union.add_scalar(IOU_EPS))?;
    Ok(bce.add(&iou.neg().add_scalar(1.0).mean())?)
}

/// 64-bit FNV-1a, used to derive stable per-sample seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Generator for the masking decision of one sample at one step; the same
/// `(seed, id, step)` always yields the same stream.
pub fn sml_rng(seed: u64, id: &str, step: u64) -> ChaCha8Rng {
    let mix = fnv1a(id.as_bytes()) ^ seed.rotate_left(17) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Self-masked learning on one `[3, H, W]` image with its `[1, H, W]`
/// ground truth. With probability `p` every pixel whose ground truth
/// exceeds 0.5 is replaced by `fill`. Returns the (possibly) masked image
/// and whether masking was applied. `p = 0` draws nothing from `rng`.
pub fn self_mask<R: Rng + ?Sized>(
    image: &Tensor,
    gt: &Tensor,
    p: f64,
    fill: [f64; 3],
    rng: &mut R,
) -> Result<(Tensor, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("masking probability {p} outside [0, 1]")));
    }
    let (si, sg) = (image.shape(), gt.shape());
    if si.len() != 3 || si[0] != 3 || sg != [1, si[1], si[2]] {
        return Err(Error::Shape(format!("self_mask image {si:?} with gt {sg:?}")));
    }
    if p == 0.0 || rng.random::<f64>() >= p {
        return Ok((image.clone(), false));
    }
    let plane = si[1] * si[2];
    let mut out = image.clone();
    for (i, &g) in gt.data().iter().enumerate() {
        if g > 0.5 {
            for (c, &f) in fill.iter().enumerate() {
                out.data_mut()[c * plane + i] = f;
            }
        }
    }
    Ok((out, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cisod_tensor::check::{numeric_grad, relative_error};
    use cisod_tensor::nn::BindMode;
    use cisod_tensor::Tape;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 1.0, &mut rng)
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, SSIM_SIGMA);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert_eq!(w.data()[0], w.data()[120]);
        assert_eq!(w.data()[5 * 11], w.data()[5]);
    }

    #[test]
    fn ssim_of_identical_maps_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 3, 12, 9], 1));
        assert!(ssim_loss(&x, &x).unwrap().item().abs() < 1e-12);
        let c = tape.constant(Tensor::full([1, 2, 16, 16], 0.7));
        assert!(ssim_loss(&c, &c).unwrap().item().abs() < 1e-12);
        let other = tape.constant(Tensor::zeros([1, 3, 12, 9]));
        assert!(ssim_loss(&x, &other).is_err());
    }

    #[test]
    fn relation_of_constant_map_is_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = RelationLayer::new(&mut store, &mut rng, "rel", 4, 8).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let f = tape.constant(Tensor::full([1, 4, 3, 5], 0.3));
        let st = layer.state(&b, &f).unwrap();
        assert!(st.r.value().data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-12));
        let single = tape.constant(rand_tensor(&[1, 4, 1, 1], 3));
        let st = layer.state(&b, &single).unwrap();
        assert_eq!(st.r.value().data(), &[1.0]);
        let phi = layer.phi.forward(&b, &single).unwrap();
        assert_eq!(st.f_hat.value().data(), phi.value().data());
    }

    #[test]
    fn relation_by_enumeration() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = RelationLayer::new(&mut store, &mut rng, "rel", 2, 2).unwrap();
        let eye = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.set_param("rel.theta.weight", eye.clone()).unwrap();
        store.set_param("rel.psi.weight", eye).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        // Channels-first 2×2 map; positions u = 0..4 in row-major order.
        let f = [[0.5, -1.0, 2.0, 0.0], [1.5, 0.25, -0.5, 1.0]];
        let st = layer.state(&b, &tape.constant(Tensor::new([1, 2, 2, 2], f.concat()).unwrap())).unwrap();
        let r = st.r.value();
        for u in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|v| (f[0][u] * f[0][v] + f[1][u] * f[1][v]) / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for v in 0..4 {
                assert!((r.data()[u * 4 + v] - logits[v].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lpl_hand_case() {
        let tape = Tape::new();
        // [1, 3, 2, 2]: channel-wise max of |x| per site is [3, 2, 5, 1] / [1, 4, 2, 1].
        let t = tape.leaf(Tensor::new([1, 3, 2, 2], vec![1., -2., 5., 0.5, -3., 1., 0., 1., 2., 2., -4., -1.]).unwrap());
        let p = tape.constant(Tensor::new([1, 3, 2, 2], vec![0., 4., 2., 1., 1., 0., 0., 0., -1., 1., 1., 0.]).unwrap());
        let m = tape.constant(Tensor::new([1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap());
        let loss = lpl_loss(&t, &p, &m).unwrap();
        // Masked sites: (3 − 1)² + (1 − 1)², divided by four sites.
        assert!((loss.item() - 1.0).abs() < 1e-12);
        let zero = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert_eq!(lpl_loss(&t, &p, &zero).unwrap().item(), 0.0);
        assert_eq!(lpl_loss(&t, &t, &m).unwrap().item(), 0.0);
        let bad = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(lpl_loss(&t, &p, &bad).is_err());
    }

    #[test]
    fn saliency_loss_closed_forms() {
        let tape = Tape::new();
        // Logit 0 ⇒ p = 0.5 everywhere; y has 8 of 16 pixels on.
        let z = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let yv: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let y = tape.constant(Tensor::new([1, 1, 4, 4], yv.clone()).unwrap());
        let expect = 2f64.ln() + 1.0 - (4.0 + 1.0) / (8.0 + 8.0 - 4.0 + 1.0);
        assert!((saliency_loss(&z, &y).unwrap().item() - expect).abs() < 1e-12);
        // Saturated correct logits: IoU term vanishes, BCE is tiny.
        let sat = tape.constant(Tensor::new([1, 1, 4, 4], yv.iter().map(|v| if *v > 0.5 { 40.0 } else { -40.0 }).collect()).unwrap());
        assert!(saliency_loss(&sat, &y).unwrap().item() < 1e-12);
        let empty = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let low = tape.constant(Tensor::full([1, 1, 4, 4], -30.0));
        let v = saliency_loss(&low, &empty).unwrap().item();
        assert!(v.is_finite() && v < 1e-10);
    }

    #[test]
    fn saliency_loss_gradient() {
        let y = rand_tensor(&[2, 1, 4, 4], 5).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let z0 = rand_tensor(&[2, 1, 4, 4], 6);
        let f = |z: &Tensor| {
            let tape = Tape::new();
            let x = tape.leaf(z.clone());
            let l = saliency_loss(&x, &tape.constant(y.clone())).unwrap();
            let g = tape.backward(l).unwrap();
            (l.item(), g.get_or_zeros(&x))
        };
        let numeric = numeric_grad(&z0, 1e-6, |z| f(z).0);
        assert!(relative_error(&f(&z0).1, &numeric) < 1e-7);
    }

    #[test]
    fn mask_downsampling_stays_in_range() {
        let gt = Tensor::new([1, 1, 4, 4], (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let m = foreground_mask(&gt, 2, 2).unwrap();
        assert_eq!(m.shape(), &[1, 1, 2, 2]);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((m.mean() - gt.mean()).abs() < 1e-12);
    }

    #[test]
    fn self_mask_paths() {
        let img = rand_tensor(&[3, 4, 4], 7);
        let gt = Tensor::new([1, 4, 4], (0..16).map(|i| if i < 6 { 1.0 } else { 0.2 }).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, applied) = self_mask(&img, &gt, 0.0, [0.5; 3], &mut rng).unwrap();
        assert!(!applied);
        assert_eq!(out, img);
        let (out, applied) = self_mask(&img, &gt, 1.0, [0.1, 0.2, 0.3], &mut rng).unwrap();
        assert!(applied);
        for i in 0..16 {
            for c in 0..3 {
                let v = out.data()[c * 16 + i];
                if i < 6 {
                    assert_eq!(v, [0.1, 0.2, 0.3][c]);
                } else {
                    assert_eq!(v, img.data()[c * 16 + i]);
                }
            }
        }
        assert!(self_mask(&img, &gt, 1.5, [0.0; 3], &mut rng).is_err());
    }

    #[test]
    fn sml_rng_is_reproducible_per_key() {
        let a: u64 = sml_rng(3, "img_01", 10).random();
        let b: u64 = sml_rng(3, "img_01", 10).random();
        let c: u64 = sml_rng(3, "img_01", 11).random();
        let d: u64 = sml_rng(3, "img_02", 10).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
