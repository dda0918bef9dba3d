//! Shared network skeleton of the prior generator and the target network.
//!
//! Both networks are built from the same [`NetworkConfig`] and therefore
//! have identical parameter names and shapes:
//!
//! * `backbone.*` — five-level feature extractor (strides 2..32),
//! * `adapt.{2..5}` — 1×1 channel adapters used by the short-range prior,
//! * `relation.{2..5}.{theta,psi,phi}` — relation projections,
//! * `agg.*` — multi-level aggregation producing the location map `S_L`
//!   (stride 8),
//! * `cm.*` — connection module producing the part map `S_P` (stride 4),
//! * `sal1` / `sal2` — single-channel saliency heads on `S_L` / `S_R`,
//! * `lgr.*` — graph reasoning block producing `S_R` (stride 4).

use std::path::PathBuf;

use cisod_tensor::nn::{BatchNorm2d, Binder, Conv2d, GroupNorm, Norm, ParamStore};
use cisod_tensor::{concat, ConvGeometry, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpl::RelationLayer;
use crate::lgr::{GraphState, LgrBlock};

/// Channel width shared by every head; the graph node dimension must match.
pub const HEAD_CHANNELS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// ResNet-50 with torchvision parameter naming.
    Standard50LayerResidual,
    /// Five stride-2 stages of small widths; cheap enough for unit tests.
    TinyTestBackbone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Group,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub backbone: BackboneKind,
    pub head_channels: usize,
    /// Safetensors file with torchvision ResNet-50 weights.
    pub pretrained_weights_path: Option<PathBuf>,
    pub tiny_widths: [usize; 5],
    /// Normalization inside head blocks (conv → norm → ReLU).
    pub head_norm: NormKind,
    pub graph_nodes: usize,
    pub node_dim: usize,
    /// When false, `S_R = Conv(S_P + U(S_L))` without graph reasoning.
    pub use_lgr: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::TinyTestBackbone,
            head_channels: HEAD_CHANNELS,
            pretrained_weights_path: None,
            tiny_widths: [8, 16, 32, 64, 64],
            head_norm: NormKind::Group,
            graph_nodes: 16,
            node_dim: HEAD_CHANNELS,
            use_lgr: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_channels != HEAD_CHANNELS {
            return Err(Error::Config(format!(
                "head_channels must be {HEAD_CHANNELS}, got {}",
                self.head_channels
            )));
        }
        if self.graph_nodes < 1 {
            return Err(Error::Config("graph_nodes must be at least 1".into()));
        }
        if self.node_dim < 1 {
            return Err(Error::Config("node_dim must be at least 1".into()));
        }
        if self.tiny_widths.contains(&0) {
            return Err(Error::Config("tiny_widths must be positive".into()));
        }
        Ok(())
    }
}

fn group_count(channels: usize) -> usize {
    let g = (channels / 4).clamp(1, 8);
    if channels.is_multiple_of(g) {
        g
    } else {
        1
    }
}

fn make_norm(store: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Result<Norm> {
    Ok(match kind {
        NormKind::Group => Norm::Group(GroupNorm::new(store, name, group_count(channels), channels)?),
        NormKind::Batch => Norm::Batch(BatchNorm2d::new(store, name, channels)?),
    })
}

/// Convolution → normalization → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        norm: NormKind,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, format!("{name}.conv"), cin, cout, kernel, stride, false)?,
            norm: make_norm(store, &format!("{name}.norm"), norm, cout)?,
        })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(b, x)?;
        Ok(self.norm.forward(b, &y)?.relu())
    }
}

/// Resizes `x` to the spatial size of `like` with bilinear interpolation.
pub fn upsample_to<'t>(x: &Var<'t>, like: &Var<'t>) -> Result<Var<'t>> {
    let s = like.shape();
    upsample_size(x, s[2], s[3])
}

pub fn upsample_size<'t>(x: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s[2] == h && s[3] == w {
        return Ok(*x);
    }
    Ok(x.resize_bilinear(h, w)?)
}

#[derive(Clone, Debug)]
struct TinyBackbone {
    stages: Vec<(ConvBlock, ConvBlock)>,
}

impl TinyBackbone {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, widths: [usize; 5]) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("backbone.stage{}", i + 1);
            let down = ConvBlock::new(store, rng, &format!("{name}.down"), cin, w, 3, 2, NormKind::Group)?;
            let refine = ConvBlock::new(store, rng, &format!("{name}.refine"), w, w, 3, 1, NormKind::Group)?;
            stages.push((down, refine));
            cin = w;
        }
        Ok(Self { stages })
    }

    fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut out = Vec::with_capacity(5);
        let mut h = *x;
        for (down, refine) in &self.stages {
            h = refine.forward(b, &down.forward(b, &h)?)?;
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let cout = width * 4;
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, rng, format!("{name}.downsample.0"), cin, cout, 1, stride, false)?,
                BatchNorm2d::new(store, format!("{name}.downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, rng, format!("{name}.conv1"), cin, width, 1, 1, false)?,
            bn1: BatchNorm2d::new(store, format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(store, rng, format!("{name}.conv2"), width, width, 3, stride, false)?,
            bn2: BatchNorm2d::new(store, format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(store, rng, format!("{name}.conv3"), width, cout, 1, 1, false)?,
            bn3: BatchNorm2d::new(store, format!("{name}.bn3"), cout)?,
            downsample,
        })
    }

    fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = self.bn1.forward(b, &self.conv1.forward(b, x)?)?.relu();
        let y = self.bn2.forward(b, &self.conv2.forward(b, &y)?)?.relu();
        let y = self.bn3.forward(b, &self.conv3.forward(b, &y)?)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(b, &conv.forward(b, x)?)?,
            None => *x,
        };
        Ok(y.add(&identity)?.relu())
    }
}

#[derive(Clone, Debug)]
struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    const CHANNELS: [usize; 5] = [64, 256, 512, 1024, 2048];

    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv1 = Conv2d::new(store, rng, "backbone.conv1", 3, 64, 7, 2, false)?;
        let bn1 = BatchNorm2d::new(store, "backbone.bn1", 64)?;
        let mut layers = Vec::new();
        let mut cin = 64;
        for (li, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let mut layer = Vec::new();
            for bi in 0..blocks {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let name = format!("backbone.layer{}.{bi}", li + 1);
                layer.push(Bottleneck::new(store, rng, &name, cin, width, stride)?);
                cin = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let f1 = self.bn1.forward(b, &self.conv1.forward(b, x)?)?.relu();
        let mut h = f1.max_pool2d(3, ConvGeometry { stride: 2, padding: 1 })?;
        let mut out = vec![f1];
        for layer in &self.layers {
            for block in layer {
                h = block.forward(b, &h)?;
            }
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Tiny(TinyBackbone),
    Resnet(ResNet50),
}

/// Multi-level aggregation of levels 3–5 into the location map.
///
/// Each level is first reduced to the head width, then
/// `concat[C1(U(F5)), C2(U(F4) ⊗ U(F5)), C3(F3 ⊗ U(F4) ⊗ U(F5))]` is formed at
/// stride 8 and fused by a 3×3 block to 32 channels.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub reduce: [ConvBlock; 3],
    pub branch: [ConvBlock; 3],
    pub fuse: ConvBlock,
}

impl Aggregation {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: [usize; 3],
        norm: NormKind,
    ) -> Result<Self> {
        let c = HEAD_CHANNELS;
        let reduce = [0, 1, 2].map(|i| ConvBlock::new(store, rng, &format!("agg.reduce{}", i + 3), channels[i], c, 1, 1, norm));
        let branch = [0, 1, 2].map(|i| ConvBlock::new(store, rng, &format!("agg.branch{}", i + 1), c, c, 3, 1, norm));
        let [r3, r4, r5] = reduce;
        let [b1, b2, b3] = branch;
        Ok(Self {
            reduce: [r3?, r4?, r5?],
            branch: [b1?, b2?, b3?],
            fuse: ConvBlock::new(store, rng, "agg.fuse", 3 * c, c, 3, 1, norm)?,
        })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, f3: &Var<'t>, f4: &Var<'t>, f5: &Var<'t>) -> Result<Var<'t>> {
        let (s3, s4, s5) = (f3.shape(), f4.shape(), f5.shape());
        if s4[2] * 2 != s3[2] || s5[2] * 2 != s4[2] || s4[3] * 2 != s3[3] || s5[3] * 2 != s4[3] {
            return Err(Error::Shape(format!(
                "aggregation expects halving levels, got {s3:?}, {s4:?}, {s5:?}"
            )));
        }
        let a3 = self.reduce[0].forward(b, f3)?;
        let a4 = self.reduce[1].forward(b, f4)?;
        let a5 = self.reduce[2].forward(b, f5)?;
        let u4 = upsample_to(&a4, &a3)?;
        let u5 = upsample_to(&a5, &a3)?;
        let b1 = self.branch[0].forward(b, &u5)?;
        let b2 = self.branch[1].forward(b, &u4.mul(&u5)?)?;
        let b3 = self.branch[2].forward(b, &a3.mul(&u4)?.mul(&u5)?)?;
        self.fuse.forward(b, &concat(&[b1, b2, b3], 1)?)
    }
}

/// Top-down connection module: the current map gates projected skip
/// features by element-wise multiplication and a 3×3 block refines the
/// product. Stages run at F3 (stride 8) and F2 (stride 4); F1 enters as a
/// gated residual after average pooling to stride 4.
#[derive(Clone, Debug)]
pub struct ConnectionModule {
    pub project: [Conv2d; 3],
    pub refine: [ConvBlock; 3],
}

impl ConnectionModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: [usize; 3],
        norm: NormKind,
    ) -> Result<Self> {
        let c = HEAD_CHANNELS;
        let mut project = Vec::new();
        let mut refine = Vec::new();
        for (i, &cin) in channels.iter().enumerate() {
            let level = 3 - i;
            project.push(Conv2d::new(store, rng, format!("cm.project{level}"), cin, c, 1, 1, true)?);
            refine.push(ConvBlock::new(store, rng, &format!("cm.refine{level}"), c, c, 3, 1, norm)?);
        }
        let [p3, p2, p1]: [Conv2d; 3] = project.try_into().expect("three levels");
        let [r3, r2, r1]: [ConvBlock; 3] = refine.try_into().expect("three levels");
        Ok(Self {
            project: [p3, p2, p1],
            refine: [r3, r2, r1],
        })
    }

    /// One gating stage: `refine(gate ⊗ project(skip))`; `idx` 0, 1, 2 is
    /// level 3, 2, 1.
    pub fn stage<'t>(&self, b: &Binder<'t, '_>, idx: usize, gate: &Var<'t>, skip: &Var<'t>) -> Result<Var<'t>> {
        let s = self.project[idx].forward(b, skip)?;
        if s.shape() != gate.shape() {
            return Err(Error::Shape(format!(
                "connection gate {:?} vs skip {:?}",
                gate.shape(),
                s.shape()
            )));
        }
        self.refine[idx].forward(b, &gate.mul(&s)?)
    }

    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        s_l: &Var<'t>,
        f3: &Var<'t>,
        f2: &Var<'t>,
        f1: &Var<'t>,
    ) -> Result<Var<'t>> {
        let x3 = self.stage(b, 0, s_l, f3)?;
        let up = upsample_to(&x3, f2)?;
        let x2 = self.stage(b, 1, &up, f2)?;
        let f1_pooled = f1.avg_pool(2)?;
        Ok(x2.add(&self.stage(b, 2, &x2, &f1_pooled)?)?)
    }
}

/// Everything one forward pass produces.
pub struct NetOutput<'t> {
    pub pyramid: Vec<Var<'t>>,
    pub s_l: Var<'t>,
    pub s_p: Var<'t>,
    pub s_r: Var<'t>,
    /// Logits of the location-map prediction at output resolution.
    pub sal1: Var<'t>,
    /// Logits of the final prediction `S_W` at output resolution.
    pub sal2: Var<'t>,
    pub graph: Option<GraphState<'t>>,
}

impl NetOutput<'_> {
    /// `S_W` after the logistic squashing.
    pub fn prediction(&self) -> Tensor {
        cisod_tensor::sigmoid_tensor(&self.sal2.value())
    }
}

#[derive(Clone, Debug)]
pub struct SodNet {
    pub config: NetworkConfig,
    pub store: ParamStore,
    backbone: Backbone,
    pub adapters: Vec<Conv2d>,
    pub relations: Vec<RelationLayer>,
    pub aggregation: Aggregation,
    pub connection: ConnectionModule,
    pub sal1: Conv2d,
    pub lgr: LgrBlock,
    pub sal2: Conv2d,
}

impl SodNet {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (backbone, ch) = match config.backbone {
            BackboneKind::TinyTestBackbone => (
                Backbone::Tiny(TinyBackbone::new(&mut store, &mut rng, config.tiny_widths)?),
                config.tiny_widths,
            ),
            BackboneKind::Standard50LayerResidual => {
                (Backbone::Resnet(ResNet50::new(&mut store, &mut rng)?), ResNet50::CHANNELS)
            }
        };
        let c = HEAD_CHANNELS;
        let norm = config.head_norm;
        let mut adapters = Vec::new();
        let mut relations = Vec::new();
        for level in 2..=5 {
            adapters.push(Conv2d::new(&mut store, &mut rng, format!("adapt.{level}"), ch[level - 1], c, 1, 1, true)?);
            relations.push(RelationLayer::new(&mut store, &mut rng, &format!("relation.{level}"), ch[level - 1], c)?);
        }
        let aggregation = Aggregation::new(&mut store, &mut rng, [ch[2], ch[3], ch[4]], norm)?;
        let connection = ConnectionModule::new(&mut store, &mut rng, [ch[2], ch[1], ch[0]], norm)?;
        let sal1 = Conv2d::new(&mut store, &mut rng, "sal1", c, 1, 1, 1, true)?;
        let lgr = LgrBlock::new(&mut store, &mut rng, "lgr", config.graph_nodes, config.node_dim, norm)?;
        let sal2 = Conv2d::new(&mut store, &mut rng, "sal2", c, 1, 1, 1, true)?;
        let mut net = Self {
            config: config.clone(),
            store,
            backbone,
            adapters,
            relations,
            aggregation,
            connection,
            sal1,
            lgr,
            sal2,
        };
        if let Some(path) = &config.pretrained_weights_path {
            crate::checkpoint::load_backbone_weights(&mut net.store, path)?;
        }
        Ok(net)
    }

    pub fn backbone_channels(&self) -> [usize; 5] {
        match &self.backbone {
            Backbone::Tiny(_) => self.config.tiny_widths,
            Backbone::Resnet(_) => ResNet50::CHANNELS,
        }
    }

    /// Five backbone levels at strides 2, 4, 8, 16, 32.
    pub fn extract_pyramid<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W] input, got {s:?}")));
        }
        if !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by 32",
                s[2], s[3]
            )));
        }
        match &self.backbone {
            Backbone::Tiny(t) => t.forward(b, x),
            Backbone::Resnet(r) => r.forward(b, x),
        }
    }

    /// 1×1 projection of level `level` (2..=5) to the head width.
    pub fn adapt<'t>(&self, b: &Binder<'t, '_>, feature: &Var<'t>, level: usize) -> Result<Var<'t>> {
        if !(2..=5).contains(&level) {
            return Err(Error::Config(format!("adapters exist for levels 2..=5, not {level}")));
        }
        Ok(self.adapters[level - 2].forward(b, feature)?)
    }

    pub fn relation(&self, level: usize) -> Result<&RelationLayer> {
        if !(2..=5).contains(&level) {
            return Err(Error::Config(format!("relation layers exist for levels 2..=5, not {level}")));
        }
        Ok(&self.relations[level - 2])
    }

    pub fn aggregate_location<'t>(&self, b: &Binder<'t, '_>, pyramid: &[Var<'t>]) -> Result<Var<'t>> {
        self.aggregation.forward(b, &pyramid[2], &pyramid[3], &pyramid[4])
    }

    pub fn connect_parts<'t>(&self, b: &Binder<'t, '_>, s_l: &Var<'t>, pyramid: &[Var<'t>]) -> Result<Var<'t>> {
        self.connection.forward(b, s_l, &pyramid[2], &pyramid[1], &pyramid[0])
    }

    /// 1×1 conv of `S_L` to one channel, upsampled to `(h, w)`; logits.
    pub fn predict_sal1<'t>(&self, b: &Binder<'t, '_>, s_l: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        upsample_size(&self.sal1.forward(b, s_l)?, h, w)
    }

    /// 1×1 conv of `S_R` to one channel, upsampled to `(h, w)`; logits.
    pub fn predict_final<'t>(&self, b: &Binder<'t, '_>, s_r: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        upsample_size(&self.sal2.forward(b, s_r)?, h, w)
    }

    /// Full forward pass; saliency logits are produced at `out_size`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>, out_size: (usize, usize)) -> Result<NetOutput<'t>> {
        let pyramid = self.extract_pyramid(b, x)?;
        let s_l = self.aggregate_location(b, &pyramid)?;
        let s_p = self.connect_parts(b, &s_l, &pyramid)?;
        let (s_r, graph) = if self.config.use_lgr {
            let (s_r, g) = self.lgr.forward(b, &s_p, &s_l)?;
            (s_r, Some(g))
        } else {
            (self.lgr.fuse(b, &s_p, &s_l)?, None)
        };
        let sal1 = self.predict_sal1(b, &s_l, out_size.0, out_size.1)?;
        let sal2 = self.predict_final(b, &s_r, out_size.0, out_size.1)?;
        Ok(NetOutput {
            pyramid,
            s_l,
            s_p,
            s_r,
            sal1,
            sal2,
            graph,
        })
    }

    /// Eval-mode prediction `S_W` in `[0, 1]` for an already-normalized batch.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, cisod_tensor::nn::BindMode::EVAL);
        let s = input.shape();
        let out = self.forward(&b, &tape.constant(input.clone()), (s[2], s[3]))?;
        Ok(out.prediction())
    }

    /// Structural compatibility with another network: empty when equal.
    pub fn mismatched_keys(&self, other: &SodNet) -> Vec<String> {
        self.store.mismatched_keys(&other.store)
    }
}

/// Shapes (without batch axis, as `[C, H, W]`) of every named tensor in
/// the forward pass for a square input of side `size`.
pub fn shape_contract(config: &NetworkConfig, size: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let net = SodNet::new(config)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, &net.store, cisod_tensor::nn::BindMode::EVAL);
    let x = tape.constant(Tensor::zeros([1, 3, size, size]));
    let out = net.forward(&b, &x, (size, size))?;
    let mut rows: Vec<(String, Vec<usize>)> = out
        .pyramid
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("F{}", i + 1), f.shape()[1..].to_vec()))
        .collect();
    rows.push(("S_L".into(), out.s_l.shape()[1..].to_vec()));
    rows.push(("S_P".into(), out.s_p.shape()[1..].to_vec()));
    rows.push(("S_R".into(), out.s_r.shape()[1..].to_vec()));
    rows.push(("S_W".into(), out.sal2.shape()[1..].to_vec()));
    Ok(rows)
}
