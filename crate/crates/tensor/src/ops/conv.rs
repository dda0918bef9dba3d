//! Spatial operators on NCHW maps.

use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::invalid(op, format!("expected NCHW, got {shape:?}"))),
    }
}

struct Im2Col {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn fill(&self, x: &[f64], col: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if y < 0
                                || xx < 0
                                || y as usize >= self.h
                                || xx as usize >= self.w
                            {
                                0.0
                            } else {
                                x[(c * self.h + y as usize) * self.w + xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn scatter(&self, col: &[f64], x: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx < 0 || xx as usize >= self.w {
                                continue;
                            }
                            x[(c * self.h + y as usize) * self.w + xx as usize] +=
                                src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation. `weight` is `[out, in, kh, kw]`, `bias` is `[out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        geom: ConvGeometry,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let [n, c, h, wd] = nchw("conv2d", x.shape())?;
        let [o, ci, kh, kw] = nchw("conv2d", w.shape())?;
        if ci != c || geom.stride == 0 {
            return Err(TensorError::shapes("conv2d", x.shape(), w.shape()));
        }
        let (Some(oh), Some(ow)) = (
            out_len(h, kh, geom.stride, geom.padding),
            out_len(wd, kw, geom.stride, geom.padding),
        ) else {
            return Err(TensorError::shapes("conv2d", x.shape(), w.shape()));
        };
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [o] {
                return Err(TensorError::shapes("conv2d bias", b.shape(), &[o]));
            }
        }
        let geo = Im2Col {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.padding,
            oh,
            ow,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_sz = c * h * wd;
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; if geo.is_identity() { 0 } else { rows * cols }];
        for i in 0..n {
            let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
            let src: &[f64] = if geo.is_identity() {
                xi
            } else {
                geo.fill(xi, &mut col);
                &col
            };
            let yi = &mut out[i * o * cols..(i + 1) * o * cols];
            gemm(o, rows, cols, 1.0, w.data(), (rows, 1), src, (cols, 1), 0.0, yi, (cols, 1));
            if let Some(b) = &b {
                for (oc, row) in yi.chunks_mut(cols).enumerate() {
                    let bv = b.data()[oc];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        Ok(self.tape().op(out, &parents, move |g, need| {
            let gd = g.data();
            let mut gx = need[0].then(|| vec![0.0; n * in_sz]);
            let mut gw = need[1].then(|| vec![0.0; o * rows]);
            let mut col = vec![0.0; if geo.is_identity() { 0 } else { rows * cols }];
            let mut gcol = vec![0.0; rows * cols];
            for i in 0..n {
                let gi = &gd[i * o * cols..(i + 1) * o * cols];
                if let Some(gw) = gw.as_mut() {
                    let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
                    let src: &[f64] = if geo.is_identity() {
                        xi
                    } else {
                        geo.fill(xi, &mut col);
                        &col
                    };
                    gemm(o, cols, rows, 1.0, gi, (cols, 1), src, (1, cols), 1.0, gw, (rows, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx[i * in_sz..(i + 1) * in_sz];
                    if geo.is_identity() {
                        gemm(rows, o, cols, 1.0, w.data(), (1, rows), gi, (cols, 1), 0.0, gxi, (cols, 1));
                    } else {
                        gemm(rows, o, cols, 1.0, w.data(), (1, rows), gi, (cols, 1), 0.0, &mut gcol, (cols, 1));
                        geo.scatter(&gcol, gxi);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::new(vec![n, c, h, wd], v)).transpose()?,
                gw.map(|v| Tensor::new(vec![o, c, kh, kw], v)).transpose()?,
            ];
            if need.len() == 3 {
                let mut gb = vec![0.0; o];
                for i in 0..n {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        let start = (i * o + oc) * cols;
                        *gbv += gd[start..start + cols].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Tensor::new(vec![o], gb)?));
            }
            Ok(grads)
        }))
    }

    /// Per-channel "valid" correlation with a fixed `[kh, kw]` kernel.
    pub fn filter2d_valid(&self, kernel: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = nchw("filter2d_valid", x.shape())?;
        let (kh, kw) = match kernel.shape() {
            &[kh, kw] if kh >= 1 && kw >= 1 && kh <= h && kw <= w => (kh, kw),
            s => return Err(TensorError::shapes("filter2d_valid", x.shape(), s)),
        };
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let k = kernel.data().to_vec();
        let planes = n * c;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        let row = &src[(y + i) * w + xx..(y + i) * w + xx + kw];
                        let krow = &k[i * kw..(i + 1) * kw];
                        acc += row.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dst[y * ow + xx] = acc;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let gsrc = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = gsrc[y * ow + xx];
                        for i in 0..kh {
                            for j in 0..kw {
                                dst[(y + i) * w + xx + j] += gv * k[i * kw + j];
                            }
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![n, c, h, w], gx)?)])
        }))
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = nchw("avg_pool", x.shape())?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::invalid(
                "avg_pool",
                format!("factor {k} does not divide {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / k) * ow + xx / k] += x.data()[(p * h + y) * w + xx] * inv;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = g.data()[(p * oh + y / k) * ow + xx / k] * inv;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![n, c, h, w], gx)?)])
        }))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&self, k: usize, geom: ConvGeometry) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = nchw("max_pool2d", x.shape())?;
        let (Some(oh), Some(ow)) = (
            out_len(h, k, geom.stride, geom.padding),
            out_len(w, k, geom.stride, geom.padding),
        ) else {
            return Err(TensorError::invalid("max_pool2d", "window larger than input"));
        };
        let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
        let mut arg = vec![usize::MAX; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let slot = (p * oh + oy) * ow + ox;
                    for i in 0..k {
                        let y = (oy * geom.stride + i) as isize - geom.padding as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for j in 0..k {
                            let xx = (ox * geom.stride + j) as isize - geom.padding as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            let idx = (p * h + y as usize) * w + xx as usize;
                            if x.data()[idx] > out[slot] {
                                out[slot] = x.data()[idx];
                                arg[slot] = idx;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for (slot, &idx) in arg.iter().enumerate() {
                if idx != usize::MAX {
                    gx[idx] += g.data()[slot];
                }
            }
            Ok(vec![Some(Tensor::new(vec![n, c, h, w], gx)?)])
        }))
    }

    /// Bilinear resampling with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = nchw("resize_bilinear", x.shape())?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid("resize_bilinear", "empty output size"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(*self);
        }
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    out[(p * out_h + oy) * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let gv = g.data()[(p * out_h + oy) * out_w + ox];
                        dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                        dst[y1 * w + x1] += gv * ly * lx;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![n, c, h, w], gx)?)])
        }))
    }
}

fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::ConvGeometry;
    use crate::check::{assert_grad_close, numeric_grad};
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let y = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x.data()[((ni * c + ic) * h + y as usize) * wd + xx as usize]
                                            * w.data()[((oc * c + ic) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let x = Tensor::randn([2, 3, 9, 8], 1.0, &mut rng);
            let w = Tensor::randn([4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn([4], 1.0, &mut rng);
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(&tape.constant(w.clone()), Some(&tape.constant(b.clone())), ConvGeometry { stride, padding: pad })
                .unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (k, stride, pad) in [(3, 2, 1), (1, 1, 0)] {
            let x = Tensor::randn([2, 2, 5, 5], 1.0, &mut rng);
            let w = Tensor::randn([3, 2, k, k], 1.0, &mut rng);
            let b = Tensor::randn([3], 1.0, &mut rng);
            let geom = ConvGeometry { stride, padding: pad };
            let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
                let tape = Tape::new();
                let (vx, vw, vb) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
                let loss = vx.conv2d(&vw, Some(&vb), geom).unwrap().square().sum();
                let g = tape.backward(loss).unwrap();
                (loss.item(), [vx, vw, vb].map(|v| g.get(&v).cloned().unwrap()))
            };
            let (_, [gx, gw, gb]) = f(&x, &w, &b);
            assert_grad_close(&gx, &numeric_grad(&x, 1e-6, |t| f(t, &w, &b).0), 1e-6);
            assert_grad_close(&gw, &numeric_grad(&w, 1e-6, |t| f(&x, t, &b).0), 1e-6);
            assert_grad_close(&gb, &numeric_grad(&b, 1e-6, |t| f(&x, &w, t).0), 1e-6);
        }
    }

    #[test]
    fn spatial_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn([1, 2, 6, 6], 1.0, &mut rng);
        let kernel = Tensor::uniform([3, 2], 0.0, 1.0, &mut rng);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let a = v.filter2d_valid(&kernel).unwrap().square().sum();
            let b = v.avg_pool(2).unwrap().resize_bilinear(5, 7).unwrap().square().sum();
            let c = v
                .max_pool2d(3, ConvGeometry { stride: 2, padding: 1 })
                .unwrap()
                .square()
                .sum();
            let d = v.resize_bilinear(12, 12).unwrap().square().sum();
            let loss = a.add(&b).unwrap().add(&c).unwrap().add(&d).unwrap();
            let g = tape.backward(loss).unwrap();
            (loss.item(), g.get(&v).cloned().unwrap())
        };
        let (_, g) = f(&x);
        assert_grad_close(&g, &numeric_grad(&x, 1e-6, |t| f(t).0), 1e-6);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let tape = Tape::new();
        let y = tape
            .constant(Tensor::full([1, 1, 3, 3], 2.5))
            .resize_bilinear(12, 12)
            .unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
