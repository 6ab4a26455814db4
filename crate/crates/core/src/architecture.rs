//! The full binocular model: shared convolutional patch embedder, a
//! self-attention stack per view, depth-cue rectification blocks on the
//! master path, token reassembly and a multi-scale fusion decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{EpipolarMode, GpcaLayer, Grid, HeatConfig, SelfAttentionLayer, TokenState};
use crate::autodiff::{ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv2d, ConvTranspose2d, Linear, Mlp, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Channel widths of the first two embedder stages.
/// Intensity normalization applied before the first embedder stage.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

const STAGE_CHANNELS: [usize; 2] = [16, 32];

/// Resampling factor applied to a reassembled attention hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookScale {
    Half,
    One,
    Two,
    Four,
}

impl HookScale {
    pub fn as_str(self) -> &'static str {
        match self {
            HookScale::Half => "0.5",
            HookScale::One => "1",
            HookScale::Two => "2",
            HookScale::Four => "4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "0.5" | "1/2" => Ok(HookScale::Half),
            "1" => Ok(HookScale::One),
            "2" => Ok(HookScale::Two),
            "4" => Ok(HookScale::Four),
            other => Err(Error::Config(format!("unsupported hook scale {other:?}"))),
        }
    }

    /// Output side length for an input side length, if integral.
    pub fn apply(self, n: usize) -> Option<usize> {
        match self {
            HookScale::Half => (n.is_multiple_of(2) && n >= 2).then_some(n / 2),
            HookScale::One => Some(n),
            HookScale::Two => Some(2 * n),
            HookScale::Four => Some(4 * n),
        }
    }
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub sa_layers: usize,
    pub dcr_blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Master attention-layer indices tapped for fusion, deepest first.
    pub attention_hooks: Vec<usize>,
    /// Rescale factor per attention hook.
    pub hook_scales: Vec<HookScale>,
    /// Embedder stages tapped for fusion, deepest first.
    pub embedder_hooks: Vec<usize>,
    /// Channel width of the fusion decoder.
    pub features: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub epipolar: EpipolarMode,
}

impl ModelConfig {
    /// Desk-scale preset used for training experiments.
    pub fn toy() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 8,
            dim: 64,
            sa_layers: 2,
            dcr_blocks: 2,
            heads: 2,
            mlp_hidden: 128,
            attention_hooks: vec![5, 3, 1],
            hook_scales: vec![HookScale::Half, HookScale::One, HookScale::Two],
            embedder_hooks: vec![1, 0],
            features: 32,
            depth_min: 2.0,
            depth_max: 80.0,
            epipolar: EpipolarMode::Rectified,
        }
    }

    /// Full-size layout with four SA layers and four rectification blocks.
    pub fn chit8() -> Self {
        Self {
            height: 352,
            width: 1216,
            patch: 16,
            dim: 768,
            sa_layers: 4,
            dcr_blocks: 4,
            heads: 2,
            mlp_hidden: 3072,
            attention_hooks: vec![11, 7, 3],
            hook_scales: vec![HookScale::Half, HookScale::One, HookScale::Two],
            embedder_hooks: vec![1, 0],
            features: 256,
            depth_min: 0.1,
            depth_max: 80.0,
            epipolar: EpipolarMode::Rectified,
        }
    }

    /// Attention layers on the master path.
    pub fn master_layers(&self) -> usize {
        self.sa_layers + 2 * self.dcr_blocks
    }

    /// Attention layers on the reference path.
    pub fn reference_layers(&self) -> usize {
        self.sa_layers + self.dcr_blocks
    }

    /// Reference-path layer aligned with master layer `h`.
    pub fn reference_hook(&self, h: usize) -> usize {
        if h < self.sa_layers {
            h
        } else {
            self.sa_layers + (h - self.sa_layers) / 2
        }
    }

    /// Master layer index of the cross-attention stage of DCR block `k`.
    pub fn gpca_layer(&self, k: usize) -> usize {
        self.sa_layers + 2 * k
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.height / self.patch, self.width / self.patch)
    }

    pub fn heat_config(&self) -> HeatConfig {
        HeatConfig::for_patches(self.grid().patches())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch < 4 || !self.patch.is_multiple_of(4) {
            return bad(format!("patch size {} must be a positive multiple of 4", self.patch));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "image {}×{} not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.dcr_blocks == 0 {
            return bad("at least one rectification block is required".into());
        }
        if self.attention_hooks.is_empty() || self.attention_hooks.len() != self.hook_scales.len() {
            return bad("each attention hook needs exactly one scale".into());
        }
        if let Some(h) = self.attention_hooks.iter().find(|&&h| h >= self.master_layers()) {
            return bad(format!("hook {h} beyond {} master layers", self.master_layers()));
        }
        if let Some(h) = self.embedder_hooks.iter().find(|&&h| h > 1) {
            return bad(format!("embedder hook {h}: only stages 0 and 1 can be tapped"));
        }
        if !(0.0 < self.depth_min && self.depth_min < self.depth_max) {
            return bad(format!("invalid depth range ({}, {})", self.depth_min, self.depth_max));
        }
        let grid = self.grid();
        for &s in &self.hook_scales {
            if s.apply(grid.rows).is_none() || s.apply(grid.cols).is_none() {
                return bad(format!("scale {} on a {}×{} grid", s.as_str(), grid.rows, grid.cols));
            }
        }
        self.level_sizes().map(|_| ())
    }

    /// Spatial size of every fusion level, coarse to fine.
    fn level_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let grid = self.grid();
        let mut sizes: Vec<(usize, usize)> = self
            .hook_scales
            .iter()
            .map(|s| (s.apply(grid.rows).unwrap_or(0), s.apply(grid.cols).unwrap_or(0)))
            .collect();
        for &e in &self.embedder_hooks {
            let f = 2 << e;
            sizes.push((self.height / f, self.width / f));
        }
        for pair in sizes.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if !((h1, w1) == (h0, w0) || (h1, w1) == (2 * h0, 2 * w0)) {
                return Err(Error::Config(format!(
                    "fusion level {h1}×{w1} does not follow {h0}×{w0}"
                )));
            }
        }
        Ok(sizes)
    }
}

/// Three strided convolution stages mapping an image to patch tokens.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub stages: [Conv2d; 3],
    pub class_token: ParamId,
    pub positions: ParamId,
}

/// 2-D sine/cosine table for `N_p + 1` tokens; the class row stays zero.
/// Half the channels encode the grid row, half the column.
pub fn sincos_positions(grid: Grid, dim: usize, amplitude: f64) -> Tensor {
    let mut data = vec![0.0; (grid.patches() + 1) * dim];
    let half = dim / 2;
    let pairs = half / 2;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let row = &mut data[(1 + r * grid.cols + c) * dim..][..dim];
            for (offset, coord) in [(0, r as f64), (half, c as f64)] {
                for k in 0..pairs {
                    let freq = 1.0 / 100f64.powf(k as f64 / pairs as f64);
                    row[offset + 2 * k] = amplitude * (coord * freq).sin();
                    row[offset + 2 * k + 1] = amplitude * (coord * freq).cos();
                }
            }
        }
    }
    Tensor::new(&[grid.patches() + 1, dim], data).expect("table shape")
}

/// Tokens of one view plus the embedder stage activations.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub tokens: TokenState,
    pub stages: [Var; 2],
}

impl Embedder {
    pub fn new(b: &mut Builder<'_, ChaCha8Rng>, cfg: &ModelConfig) -> Self {
        let grid = cfg.grid();
        let last = cfg.patch / 4;
        let stages = b.with_group(ParamGroup::Embedder, |b| {
            [
                Conv2d::new(b, "stage0", 3, STAGE_CHANNELS[0], ConvGeometry::new(3, 2, 1)),
                Conv2d::new(
                    b,
                    "stage1",
                    STAGE_CHANNELS[0],
                    STAGE_CHANNELS[1],
                    ConvGeometry::new(3, 2, 1),
                ),
                Conv2d::new(
                    b,
                    "stage2",
                    STAGE_CHANNELS[1],
                    cfg.dim,
                    ConvGeometry::new(last, last, 0),
                ),
            ]
        });
        Self {
            stages,
            class_token: b.normal("class_token", &[1, cfg.dim], 0.02),
            positions: b.add("positions", sincos_positions(grid, cfg.dim, 1.0)),
        }
    }

    /// Embeds a `3×H×W` image into `N_p + 1` tokens.
    pub fn forward(&self, p: &Bound, image: &Var, patch: usize) -> Result<Embedded> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidShape {
                op: "patch_embed",
                shape: s.to_vec(),
                reason: "expected a 3×H×W image".into(),
            });
        }
        if !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
            return Err(Error::InvalidShape {
                op: "patch_embed",
                shape: s.to_vec(),
                reason: format!("image size not divisible by patch size {patch}"),
            });
        }
        let grid = Grid::new(s[1] / patch, s[2] / patch);
        // Center intensities so random filters respond to texture, not brightness.
        let centered = image.add_scalar(-PIXEL_MEAN).scale(1.0 / PIXEL_STD);
        let s0 = self.stages[0].forward(p, &centered)?.relu();
        let s1 = self.stages[1].forward(p, &s0)?.relu();
        let feat = self.stages[2].forward(p, &s1)?;
        let dim = feat.shape()[0];
        let patches = feat.reshape(&[dim, grid.patches()])?.t()?;
        let tokens = Var::concat(&[&p[self.class_token], &patches], 0)?.add(&p[self.positions])?;
        Ok(Embedded {
            tokens: TokenState::new(tokens, grid)?,
            stages: [s0, s1],
        })
    }
}

/// `t ← t + heat ⊙ MLP([t, t′])`.
pub fn rectify(p: &Bound, mlp: &Mlp, master: &TokenState, retrieved: &Var, heat: &Var) -> Result<TokenState> {
    let t = &master.tokens;
    if retrieved.shape() != t.shape() || heat.shape() != [t.shape()[0], 1] {
        return Err(Error::ShapeMismatch {
            op: "rectify",
            lhs: t.shape().to_vec(),
            rhs: [retrieved.shape(), heat.shape()].concat(),
        });
    }
    let update = mlp.forward(p, &Var::concat(&[t, retrieved], 1)?)?;
    TokenState::new(t.add(&update.mul(heat)?)?, master.grid)
}

/// One depth-cue rectification block.
#[derive(Clone, Debug)]
pub struct DcrBlock {
    pub reference_sa: SelfAttentionLayer,
    pub gpca: GpcaLayer,
    pub blend: Mlp,
    pub master_sa: SelfAttentionLayer,
}

/// Token-to-feature-map projection for one attention hook.
#[derive(Clone, Debug)]
pub struct Reassemble {
    pub proj: Linear,
    pub scale: HookScale,
    pub down: Option<Conv2d>,
    pub up: Option<ConvTranspose2d>,
}

impl Reassemble {
    pub fn new(b: &mut Builder<'_, ChaCha8Rng>, name: &str, dim: usize, features: usize, scale: HookScale) -> Self {
        b.scoped(name, |b| Self {
            proj: Linear::new(b, "proj", 2 * dim, features),
            scale,
            down: (scale == HookScale::Half)
                .then(|| Conv2d::new(b, "down", features, features, ConvGeometry::new(3, 2, 1))),
            up: match scale {
                HookScale::Two => Some(ConvTranspose2d::new(b, "up", features, features, 2)),
                HookScale::Four => Some(ConvTranspose2d::new(b, "up", features, features, 4)),
                _ => None,
            },
        })
    }

    /// Class token concatenated onto every patch token, projected, laid
    /// out on the grid and resampled. Output is `D_l×(rows·s)×(cols·s)`.
    pub fn forward(&self, p: &Bound, x: &TokenState) -> Result<Var> {
        let grid = x.grid;
        let (Some(_), Some(_)) = (self.scale.apply(grid.rows), self.scale.apply(grid.cols)) else {
            return Err(Error::InvalidShape {
                op: "reassemble",
                shape: vec![grid.rows, grid.cols],
                reason: format!("scale {} gives a non-integer size", self.scale.as_str()),
            });
        };
        let n = grid.patches();
        let dim = x.dim();
        let class = x.tokens.narrow(0, 0, 1)?.broadcast_to(&[n, dim])?;
        let joined = Var::concat(&[&x.tokens.narrow(0, 1, n)?, &class], 1)?;
        let feat = self.proj.forward(p, &joined)?.gelu();
        let channels = feat.shape()[1];
        let map = feat.t()?.reshape(&[channels, grid.rows, grid.cols])?;
        match (&self.down, &self.up) {
            (Some(conv), _) => conv.forward(p, &map),
            (_, Some(up)) => up.forward(p, &map),
            _ => Ok(map),
        }
    }
}

/// `x + conv(relu(conv(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualConvUnit {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualConvUnit {
    pub fn new(b: &mut Builder<'_, ChaCha8Rng>, name: &str, features: usize) -> Self {
        b.scoped(name, |b| Self {
            conv1: Conv2d::new(b, "conv1", features, features, ConvGeometry::new(3, 1, 1)),
            conv2: Conv2d::new(b, "conv2", features, features, ConvGeometry::new(3, 1, 1)),
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(p, &x.relu())?;
        x.add(&self.conv2.forward(p, &h.relu())?)
    }
}

/// Multi-scale fusion decoder and depth head, shared by both views.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub units: Vec<ResidualConvUnit>,
    pub head: Conv2d,
    pub out: Conv2d,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Fusion {
    pub fn new(b: &mut Builder<'_, ChaCha8Rng>, levels: usize, features: usize, range: (f64, f64)) -> Self {
        b.scoped("fusion", |b| {
            let units = (0..levels)
                .map(|i| ResidualConvUnit::new(b, &format!("rcu{i}"), features))
                .collect();
            let head = Conv2d::new(b, "head", features, features / 2, ConvGeometry::new(3, 1, 1));
            let out = b.scoped("out", |b| Conv2d {
                weight: b.zeros("weight", &[1, features / 2, 1, 1]),
                bias: b.zeros("bias", &[1]),
                geom: ConvGeometry::new(1, 1, 0),
            });
            Self {
                units,
                head,
                out,
                depth_min: range.0,
                depth_max: range.1,
            }
        })
    }

    /// Fuses coarse-to-fine feature maps into an `H×W` depth map.
    pub fn forward(&self, p: &Bound, maps: &[Var], height: usize, width: usize) -> Result<Var> {
        if maps.len() != self.units.len() || maps.is_empty() {
            return Err(Error::Config(format!(
                "fusion expects {} levels, got {}",
                self.units.len(),
                maps.len()
            )));
        }
        let mut x = self.units[0].forward(p, &maps[0])?;
        for (unit, level) in self.units.iter().zip(maps).skip(1) {
            let (h0, w0) = (x.shape()[1], x.shape()[2]);
            let (h1, w1) = (level.shape()[1], level.shape()[2]);
            if (h1, w1) == (2 * h0, 2 * w0) {
                x = x.resize_bilinear(h1, w1)?;
            } else if (h1, w1) != (h0, w0) {
                return Err(Error::ShapeMismatch {
                    op: "fuse",
                    lhs: x.shape().to_vec(),
                    rhs: level.shape().to_vec(),
                });
            }
            x = x.add(&unit.forward(p, level)?)?;
        }
        let x = x.resize_bilinear(height, width)?;
        let logit = self.out.forward(p, &self.head.forward(p, &x)?.relu())?;
        let logit = logit.reshape(&[height, width])?;
        self.depth_from_logit(&logit)
    }

    /// `1 / (σ(logit)·(1/d_min − 1/d_max) + 1/d_max)`.
    pub fn depth_from_logit(&self, logit: &Var) -> Result<Var> {
        let (lo, hi) = (1.0 / self.depth_max, 1.0 / self.depth_min);
        let inv = logit.sigmoid().scale(hi - lo).add_scalar(lo);
        logit.constant_like(Tensor::ones(logit.shape())).div(&inv)
    }
}

/// Parameter layout of the whole model.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embedder: Embedder,
    pub master_stack: Vec<SelfAttentionLayer>,
    pub reference_stack: Vec<SelfAttentionLayer>,
    pub blocks: Vec<DcrBlock>,
    pub reassemble: Vec<Reassemble>,
    pub stage_proj: Vec<Conv2d>,
    pub fusion: Fusion,
}

/// Model parameters together with their layout.
#[derive(Clone, Debug)]
pub struct ChiT {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

/// What a forward pass should produce.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Also decode the reference view (training).
    pub reference_depth: bool,
    /// DCR block indices whose attention matrices are kept.
    pub record_blocks: Vec<usize>,
    /// Overrides the heat settings derived from the grid.
    pub heat: Option<HeatConfig>,
}

impl ForwardOptions {
    pub fn training() -> Self {
        Self {
            reference_depth: true,
            ..Self::default()
        }
    }

    pub fn inference() -> Self {
        Self::default()
    }
}

/// Attention kept for one rectification block.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub heads: Vec<Var>,
    pub heat: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `H×W`, meters.
    pub depth_master: Var,
    pub depth_reference: Option<Var>,
    /// Per-token heat of the last cross-attention layer, `(N_p+1)×1`.
    pub heat_last: Var,
    pub grid: Grid,
    pub attention: Vec<AttentionRecord>,
    /// Reference-path tokens after every reference layer.
    pub reference_tokens: Vec<Var>,
}

impl ChiT {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let layout = Self::build(&mut b, &cfg)?;
        // parameters live on the f32 grid so checkpoints are exact
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let rounded = params.get(id).round_f32();
            params.set(id, rounded)?;
        }
        Ok(Self { cfg, params, layout })
    }

    fn build(b: &mut Builder<'_, ChaCha8Rng>, cfg: &ModelConfig) -> Result<Layout> {
        let embedder = b.scoped("embedder", |b| Embedder::new(b, cfg));
        let sa = |b: &mut Builder<'_, ChaCha8Rng>, name: &str| {
            SelfAttentionLayer::new(b, name, cfg.dim, cfg.heads, cfg.mlp_hidden)
        };
        // Siamese towers: the reference path reuses the master SA weights, so
        // identical views produce identical tokens at every cross-attention.
        let master_stack = b.scoped("stack", |b| {
            (0..cfg.sa_layers)
                .map(|i| sa(b, &format!("sa{i}")))
                .collect::<Result<Vec<_>>>()
        })?;
        let reference_stack = master_stack.clone();
        let blocks = (0..cfg.dcr_blocks)
            .map(|k| {
                b.scoped(&format!("dcr{k}"), |b| {
                    let gpca = GpcaLayer::new(b, "gpca", cfg.dim, cfg.heads, cfg.epipolar);
                    let blend = Mlp::new(b, "blend", 2 * cfg.dim, cfg.dim, cfg.dim);
                    let shared = sa(b, "sa")?;
                    Ok(DcrBlock {
                        reference_sa: shared.clone(),
                        gpca,
                        blend,
                        master_sa: shared,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reassemble = cfg
            .hook_scales
            .iter()
            .enumerate()
            .map(|(i, &s)| Reassemble::new(b, &format!("reassemble{i}"), cfg.dim, cfg.features, s))
            .collect();
        let stage_proj = cfg
            .embedder_hooks
            .iter()
            .map(|&e| {
                Conv2d::new(
                    b,
                    &format!("stage_proj{e}"),
                    STAGE_CHANNELS[e],
                    cfg.features,
                    ConvGeometry::new(1, 1, 0),
                )
            })
            .collect();
        let levels = cfg.attention_hooks.len() + cfg.embedder_hooks.len();
        let fusion = Fusion::new(b, levels, cfg.features, (cfg.depth_min, cfg.depth_max));
        Ok(Layout {
            embedder,
            master_stack,
            reference_stack,
            blocks,
            reassemble,
            stage_proj,
            fusion,
        })
    }

    /// Runs both towers on a rectified pair (`3×H×W` each, master = left).
    pub fn forward(&self, p: &Bound, left: &Var, right: &Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let expected = [3, cfg.height, cfg.width];
        for img in [left, right] {
            if img.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: expected.to_vec(),
                    rhs: img.shape().to_vec(),
                });
            }
        }
        let l = &self.layout;
        let heat_cfg = opts.heat.unwrap_or_else(|| cfg.heat_config());
        let em = l.embedder.forward(p, left, cfg.patch)?;
        let er = l.embedder.forward(p, right, cfg.patch)?;

        let mut master = em.tokens.clone();
        let mut reference = er.tokens.clone();
        let mut master_out = Vec::with_capacity(cfg.master_layers());
        let mut reference_out = Vec::with_capacity(cfg.reference_layers());
        for (ms, rs) in l.master_stack.iter().zip(&l.reference_stack) {
            master = ms.forward(p, &master)?;
            reference = rs.forward(p, &reference)?;
            master_out.push(master.clone());
            reference_out.push(reference.clone());
        }
        let mut attention = Vec::new();
        let mut heat_last = None;
        for (k, block) in l.blocks.iter().enumerate() {
            let cross = block.gpca.forward(p, &master, &reference, &heat_cfg)?;
            master = rectify(p, &block.blend, &master, &cross.retrieved, &cross.heat)?;
            master_out.push(master.clone());
            master = block.master_sa.forward(p, &master)?;
            master_out.push(master.clone());
            reference = block.reference_sa.forward(p, &reference)?;
            reference_out.push(reference.clone());
            if opts.record_blocks.contains(&k) {
                attention.push(AttentionRecord {
                    block: k,
                    heads: cross.attention.clone(),
                    heat: cross.heat.clone(),
                });
            }
            heat_last = Some(cross.heat);
        }

        let depth_master = self.decode(p, &master_out, &cfg.attention_hooks, &em.stages)?;
        let depth_reference = if opts.reference_depth {
            let hooks: Vec<usize> = cfg.attention_hooks.iter().map(|&h| cfg.reference_hook(h)).collect();
            Some(self.decode(p, &reference_out, &hooks, &er.stages)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            depth_master,
            depth_reference,
            heat_last: heat_last.expect("at least one rectification block"),
            grid: em.tokens.grid,
            attention,
            reference_tokens: reference_out.into_iter().map(|t| t.tokens).collect(),
        })
    }

    fn decode(&self, p: &Bound, layers: &[TokenState], hooks: &[usize], stages: &[Var; 2]) -> Result<Var> {
        let l = &self.layout;
        let mut maps = Vec::with_capacity(hooks.len() + self.cfg.embedder_hooks.len());
        for (&h, re) in hooks.iter().zip(&l.reassemble) {
            maps.push(re.forward(p, &layers[h])?);
        }
        for (&e, proj) in self.cfg.embedder_hooks.iter().zip(&l.stage_proj) {
            maps.push(proj.forward(p, &stages[e])?);
        }
        l.fusion.forward(p, &maps, self.cfg.height, self.cfg.width)
    }

    /// Every polarized basis `U` (one per rectification block).
    pub fn bases(&self) -> Vec<ParamId> {
        self.layout.blocks.iter().map(|b| b.gpca.basis).collect()
    }

    /// Every spectra stack `Λ` (one per rectification block).
    pub fn spectra(&self) -> Vec<ParamId> {
        self.layout.blocks.iter().map(|b| b.gpca.spectra).collect()
    }
}
