//! Location-aware graph reasoning.
//!
//! The part map `S_P` (stride 4) and the location map `S_L` (stride 8) are
//! projected onto `N` graph nodes each. Every node owns a softmax
//! distribution over spatial sites (the assignment), and its feature is the
//! assignment-weighted sum of a 1×1 value projection. Part nodes attend to
//! location nodes with a residual connection, two graph convolutions mix the
//! nodes, and the result is reprojected onto both maps through the transposed
//! assignments, added back as residuals and fused at stride 4.

use cisod_tensor::nn::{Binder, Conv2d, Linear, ParamStore};
use cisod_tensor::{Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::{upsample_to, ConvBlock, NormKind, HEAD_CHANNELS};

/// Intermediate graph tensors of one forward pass (`B` batch, `N` nodes,
/// `D` node dim, `HW` sites).
pub struct GraphState<'t> {
    /// Location nodes `[B, N, D]`.
    pub v_l: Var<'t>,
    /// Part nodes `[B, N, D]`.
    pub v_p: Var<'t>,
    /// Location reprojection matrix `[B, HW_L, N]`.
    pub m_l: Var<'t>,
    /// Part reprojection matrix `[B, HW_P, N]`.
    pub m_p: Var<'t>,
    /// Attention of part nodes over location nodes `[B, N, N]`.
    pub attention: Var<'t>,
    pub v_hat_p: Var<'t>,
    pub v_r: Var<'t>,
}

/// Projection of a feature map onto graph nodes.
#[derive(Clone, Debug)]
pub struct Projection {
    pub assign: Conv2d,
    pub value: Conv2d,
}

impl Projection {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, nodes: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            assign: Conv2d::new(store, rng, format!("{name}.assign"), HEAD_CHANNELS, nodes, 1, 1, true)?,
            value: Conv2d::new(store, rng, format!("{name}.value"), HEAD_CHANNELS, dim, 1, 1, true)?,
        })
    }

    /// Returns nodes `V = A · value(S)` `[B, N, D]` and the reprojection
    /// matrix `M = Aᵀ` `[B, HW, N]`, where each row of `A` is a softmax over
    /// sites.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, s: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = s.shape();
        if shape.len() != 4 || shape[1] != HEAD_CHANNELS {
            return Err(Error::Shape(format!("graph projection input {shape:?}")));
        }
        let assign = self.assign.forward(b, s)?.flatten_spatial()?.softmax()?;
        let values = self.value.forward(b, s)?.flatten_spatial()?.transpose()?;
        let nodes = assign.matmul(&values)?;
        Ok((nodes, assign.transpose()?))
    }
}

/// One graph convolution: `relu(Linear(Â · V))` with a learned adjacency
/// `A` and `Â = A / rowsum(|A|)`.
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub adjacency: String,
    pub linear: Linear,
}

impl GraphConv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, nodes: usize, dim: usize) -> Result<Self> {
        let noise = Normal::new(0.0, 0.01).expect("valid std");
        let mut adj = Tensor::zeros([nodes, nodes]);
        for (i, v) in adj.data_mut().iter_mut().enumerate() {
            *v = if i / nodes == i % nodes { 1.0 } else { 0.0 } + noise.sample(rng);
        }
        let adjacency = format!("{name}.adjacency");
        store.insert_param(adjacency.clone(), adj)?;
        Ok(Self {
            adjacency,
            linear: Linear::new(store, rng, format!("{name}.linear"), dim, dim, true)?,
        })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, v: &Var<'t>) -> Result<Var<'t>> {
        let a = b.param(&self.adjacency)?;
        let norm = a.abs().sum_axes(&[1])?;
        let a_hat = a.div(&norm)?;
        // (Â · V) computed as (Vᵀ · Âᵀ)ᵀ so the adjacency is shared across the batch.
        let mixed = v.transpose()?.matmul(&a_hat.transpose()?)?.transpose()?;
        Ok(self.linear.forward(b, &mixed)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct LgrBlock {
    pub nodes: usize,
    pub dim: usize,
    pub project_l: Projection,
    pub project_p: Projection,
    pub rho: Linear,
    pub omega: Linear,
    pub eta: Linear,
    pub gcn: [GraphConv; 2],
    /// Node features back to the head width, without bias so that zero
    /// nodes reproject to zero.
    pub reproject: Linear,
    pub fuse_block: ConvBlock,
}

impl LgrBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        nodes: usize,
        dim: usize,
        norm: NormKind,
    ) -> Result<Self> {
        if nodes < 1 || dim < 1 {
            return Err(Error::Config(format!("graph needs nodes ≥ 1 and dim ≥ 1, got {nodes}, {dim}")));
        }
        Ok(Self {
            nodes,
            dim,
            project_l: Projection::new(store, rng, &format!("{name}.project_l"), nodes, dim)?,
            project_p: Projection::new(store, rng, &format!("{name}.project_p"), nodes, dim)?,
            rho: Linear::new(store, rng, format!("{name}.rho"), dim, dim, true)?,
            omega: Linear::new(store, rng, format!("{name}.omega"), dim, dim, true)?,
            eta: Linear::new(store, rng, format!("{name}.eta"), dim, dim, true)?,
            gcn: [
                GraphConv::new(store, rng, &format!("{name}.gcn1"), nodes, dim)?,
                GraphConv::new(store, rng, &format!("{name}.gcn2"), nodes, dim)?,
            ],
            reproject: Linear::new(store, rng, format!("{name}.reproject"), dim, HEAD_CHANNELS, false)?,
            fuse_block: ConvBlock::new(store, rng, &format!("{name}.fuse"), HEAD_CHANNELS, HEAD_CHANNELS, 3, 1, norm)?,
        })
    }

    /// `softmax(ρ(V_P) ω(V_L)ᵀ) η(V_L) + V_P`; returns the output and the
    /// attention matrix.
    pub fn cross_graph_attention<'t>(
        &self,
        b: &Binder<'t, '_>,
        v_p: &Var<'t>,
        v_l: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let q = self.rho.forward(b, v_p)?;
        let k = self.omega.forward(b, v_l)?;
        let attention = q.matmul(&k.transpose()?)?.softmax()?;
        let out = attention.matmul(&self.eta.forward(b, v_l)?)?.add(v_p)?;
        Ok((out, attention))
    }

    pub fn graph_convolve<'t>(&self, b: &Binder<'t, '_>, v: &Var<'t>) -> Result<Var<'t>> {
        let v = self.gcn[0].forward(b, v)?;
        self.gcn[1].forward(b, &v)
    }

    fn check_strides(s_p: &[usize], s_l: &[usize]) -> Result<()> {
        if s_p.len() != 4 || s_l.len() != 4 || s_p[2] != 2 * s_l[2] || s_p[3] != 2 * s_l[3] || s_p[..2] != s_l[..2] {
            return Err(Error::Shape(format!(
                "part map {s_p:?} must be twice the resolution of location map {s_l:?}"
            )));
        }
        Ok(())
    }

    /// `Conv(S_P + U(S_L))` — the fusion without graph reasoning.
    pub fn fuse<'t>(&self, b: &Binder<'t, '_>, s_p: &Var<'t>, s_l: &Var<'t>) -> Result<Var<'t>> {
        Self::check_strides(&s_p.shape(), &s_l.shape())?;
        self.fuse_block.forward(b, &s_p.add(&upsample_to(s_l, s_p)?)?)
    }

    fn reproject_onto<'t>(&self, b: &Binder<'t, '_>, m: &Var<'t>, v_r: &Var<'t>, s: &Var<'t>) -> Result<Var<'t>> {
        let shape = s.shape();
        let feats = m.matmul(&self.reproject.forward(b, v_r)?)?.transpose()?.reshape(&shape)?;
        Ok(feats.add(s)?)
    }

    /// `F_P = M_P V_R + S_P`, `F_L = M_L V_R + S_L`, `S_R = Conv(F_P + U(F_L))`.
    pub fn reproject_fuse<'t>(
        &self,
        b: &Binder<'t, '_>,
        v_r: &Var<'t>,
        m_p: &Var<'t>,
        m_l: &Var<'t>,
        s_p: &Var<'t>,
        s_l: &Var<'t>,
    ) -> Result<Var<'t>> {
        Self::check_strides(&s_p.shape(), &s_l.shape())?;
        let f_p = self.reproject_onto(b, m_p, v_r, s_p)?;
        let f_l = self.reproject_onto(b, m_l, v_r, s_l)?;
        self.fuse(b, &f_p, &f_l)
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, s_p: &Var<'t>, s_l: &Var<'t>) -> Result<(Var<'t>, GraphState<'t>)> {
        Self::check_strides(&s_p.shape(), &s_l.shape())?;
        let (v_l, m_l) = self.project_l.forward(b, s_l)?;
        let (v_p, m_p) = self.project_p.forward(b, s_p)?;
        let (v_hat_p, attention) = self.cross_graph_attention(b, &v_p, &v_l)?;
        let v_r = self.graph_convolve(b, &v_hat_p)?;
        let s_r = self.reproject_fuse(b, &v_r, &m_p, &m_l, s_p, s_l)?;
        Ok((
            s_r,
            GraphState {
                v_l,
                v_p,
                m_l,
                m_p,
                attention,
                v_hat_p,
                v_r,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cisod_tensor::check::{numeric_grad, relative_error};
    use cisod_tensor::nn::BindMode;
    use cisod_tensor::Tape;
    use rand::SeedableRng;

    fn block(nodes: usize) -> (ParamStore, LgrBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blk = LgrBlock::new(&mut store, &mut rng, "lgr", nodes, 32, NormKind::Group).unwrap();
        (store, blk)
    }

    #[test]
    fn constant_map_gives_identical_nodes() {
        let (store, blk) = block(4);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let column = Tensor::randn([1, 32, 1, 1], 1.0, &mut rng);
        let s = tape.constant(column.zip_with(&Tensor::ones([1, 32, 4, 4]), |a, b| a * b).unwrap());
        let (v, m) = blk.project_l.forward(&b, &s).unwrap();
        let v = v.value();
        for n in 1..4 {
            for d in 0..32 {
                assert!((v.data()[n * 32 + d] - v.data()[d]).abs() < 1e-12);
            }
        }
        assert!(m.value().data().iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-12));
    }

    #[test]
    fn single_node_is_weighted_global_average() {
        let (store, blk) = block(1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = tape.constant(Tensor::randn([1, 32, 3, 3], 1.0, &mut rng));
        let (v, m) = blk.project_p.forward(&b, &s).unwrap();
        let weights = m.value();
        assert!((weights.sum() - 1.0).abs() < 1e-12);
        let values = blk.project_p.value.forward(&b, &s).unwrap().value();
        for d in 0..32 {
            let expect: f64 = (0..9).map(|i| weights.data()[i] * values.data()[d * 9 + i]).sum();
            assert!((v.value().data()[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_eta_is_residual_identity() {
        let (mut store, blk) = block(4);
        for name in [blk.eta.weight_name(), blk.eta.bias_name().unwrap()] {
            let shape = store.param(&name).unwrap().shape().to_vec();
            store.set_param(&name, Tensor::zeros(shape)).unwrap();
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vp = tape.constant(Tensor::randn([2, 4, 32], 1.0, &mut rng));
        let vl = tape.constant(Tensor::randn([2, 4, 32], 1.0, &mut rng));
        let (out, _) = blk.cross_graph_attention(&b, &vp, &vl).unwrap();
        assert_eq!(out.value().data(), vp.value().data());
    }

    #[test]
    fn two_node_attention_by_enumeration() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = LgrBlock::new(&mut store, &mut rng, "lgr", 2, 2, NormKind::Group).unwrap();
        for lin in [&blk.rho, &blk.omega, &blk.eta] {
            store.set_param(&lin.weight_name(), Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
            store.set_param(&lin.bias_name().unwrap(), Tensor::zeros([2])).unwrap();
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let p = [[1.0, 0.5], [-0.5, 2.0]];
        let l = [[0.3, -1.0], [1.5, 0.2]];
        let vp = tape.constant(Tensor::new([1, 2, 2], p.concat()).unwrap());
        let vl = tape.constant(Tensor::new([1, 2, 2], l.concat()).unwrap());
        let (out, att) = blk.cross_graph_attention(&b, &vp, &vl).unwrap();
        for i in 0..2 {
            let logits: Vec<f64> = (0..2).map(|j| p[i][0] * l[j][0] + p[i][1] * l[j][1]).collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let a: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            for d in 0..2 {
                let expect = a[0] * l[0][d] + a[1] * l[1][d] + p[i][d];
                assert!((out.value().data()[i * 2 + d] - expect).abs() < 1e-12);
                assert!((att.value().data()[i * 2 + d] - a[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_graph_conv_is_rectified_pass_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gc = GraphConv::new(&mut store, &mut rng, "g", 3, 4, ).unwrap();
        let eye = |n: usize| {
            let mut t = Tensor::zeros([n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
            t
        };
        store.set_param("g.adjacency", eye(3)).unwrap();
        store.set_param("g.linear.weight", eye(4)).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let v = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let out = gc.forward(&b, &tape.constant(v.clone())).unwrap();
        assert_eq!(out.value().data(), v.map(|x| x.max(0.0)).data());
    }

    #[test]
    fn single_node_graph_conv_is_linear_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gc = GraphConv::new(&mut store, &mut rng, "g", 1, 4).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let v = tape.constant(Tensor::randn([2, 1, 4], 1.0, &mut rng));
        let out = gc.forward(&b, &v).unwrap();
        let direct = gc.linear.forward(&b, &v).unwrap().relu();
        for (a, d) in out.value().data().iter().zip(direct.value().data()) {
            assert!((a - d).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_nodes_reduce_to_plain_fusion() {
        let (store, blk) = block(4);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, BindMode::EVAL);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s_p = tape.constant(Tensor::randn([1, 32, 8, 8], 1.0, &mut rng));
        let s_l = tape.constant(Tensor::randn([1, 32, 4, 4], 1.0, &mut rng));
        let (_, g) = blk.forward(&b, &s_p, &s_l).unwrap();
        let zero = tape.constant(Tensor::zeros([1, 4, 32]));
        let out = blk.reproject_fuse(&b, &zero, &g.m_p, &g.m_l, &s_p, &s_l).unwrap();
        let plain = blk.fuse(&b, &s_p, &s_l).unwrap();
        assert_eq!(out.value().data(), plain.value().data());
        let bad = tape.constant(Tensor::zeros([1, 32, 3, 3]));
        assert!(blk.fuse(&b, &s_p, &bad).is_err());
    }

    #[test]
    fn graph_conv_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gc = GraphConv::new(&mut store, &mut rng, "g", 3, 4).unwrap();
        let v0 = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let weights = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let f = |v: &Tensor| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store, BindMode::EVAL);
            let x = tape.leaf(v.clone());
            let loss = gc.forward(&b, &x).unwrap().mul(&tape.constant(weights.clone())).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            (loss.item(), g.get_or_zeros(&x))
        };
        let (_, analytic) = f(&v0);
        let numeric = numeric_grad(&v0, 1e-6, |v| f(v).0);
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
