//! Attention mechanisms: multi-head self-attention, polarized cross-attention
//! retrieval, epipolar positional scores, the gated blend of the two, and the
//! entropy-based confidence ("heat") of each retrieval.
//!
//! Token matrices are row-major: one token per row, class token in row 0.
//! Attention matrices are row-stochastic with one row per master (query) token
//! and one column per reference (memory) token.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, LayerNorm, Linear, Mlp, ParamId};
use crate::tensor::Tensor;

/// Patch grid of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }
}

/// Tokens of one view: `(N_p + 1) × D`, class token first.
#[derive(Clone, Debug)]
pub struct TokenState {
    pub tokens: Var,
    pub grid: Grid,
}

impl TokenState {
    pub fn new(tokens: Var, grid: Grid) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != grid.patches() + 1 {
            return Err(Error::InvalidShape {
                op: "TokenState",
                shape: tokens.shape().to_vec(),
                reason: format!(
                    "expected {} tokens for a {}×{} grid",
                    grid.patches() + 1,
                    grid.rows,
                    grid.cols
                ),
            });
        }
        Ok(Self { tokens, grid })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    fn with_tokens(&self, tokens: Var) -> Self {
        Self {
            tokens,
            grid: self.grid,
        }
    }
}

/// Scaled dot-product multi-head attention over already-normalized rows.
pub fn multi_head_attention(p: &Bound, x: &Var, qkv: &Linear, proj: &Linear, heads: usize) -> Result<Var> {
    let dim = x.shape()[1];
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("head count {heads} must divide token dim {dim}")));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let qkv_out = qkv.forward(p, x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv_out.narrow(1, h * head_dim, head_dim)?;
        let k = qkv_out.narrow(1, dim + h * head_dim, head_dim)?;
        let v = qkv_out.narrow(1, 2 * dim + h * head_dim, head_dim)?;
        let attn = q.matmul_t(&k)?.scale(scale).softmax();
        outs.push(attn.matmul(&v)?);
    }
    let refs: Vec<&Var> = outs.iter().collect();
    proj.forward(p, &Var::concat(&refs, 1)?)
}

/// Pre-norm transformer block: attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct SelfAttentionLayer {
    pub norm_attn: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl SelfAttentionLayer {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("head count {heads} must divide token dim {dim}")));
        }
        Ok(b.scoped(name, |b| Self {
            norm_attn: LayerNorm::new(b, "norm_attn", dim),
            qkv: Linear::new(b, "qkv", dim, 3 * dim),
            proj: Linear::new(b, "proj", dim, dim),
            norm_mlp: LayerNorm::new(b, "norm_mlp", dim),
            mlp: Mlp::new(b, "mlp", dim, mlp_hidden, dim),
            heads,
        }))
    }

    pub fn forward(&self, p: &Bound, x: &TokenState) -> Result<TokenState> {
        let normed = self.norm_attn.forward(p, &x.tokens)?;
        let attended = multi_head_attention(p, &normed, &self.qkv, &self.proj, self.heads)?;
        let h = x.tokens.add(&attended)?;
        let out = h.add(&self.mlp.forward(p, &self.norm_mlp.forward(p, &h)?)?)?;
        Ok(x.with_tokens(out))
    }
}

/// Values of the polarized operator `G_i = Uᵀ Λ_i U` and the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizedHeadParams {
    /// `U`, D×D, orthogonal at initialization.
    pub basis: Tensor,
    /// One diagonal `Λ_i` per row, s×D.
    pub spectra: Tensor,
    /// `W`, (s·D)×D.
    pub proj: Tensor,
}

impl PolarizedHeadParams {
    /// `U` from a QR factorization of a Gaussian matrix, `Λ = 1 + N(0, 0.02)`,
    /// and `W` the average of the head outputs plus small noise.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        let basis = random_orthogonal(dim, rng);
        let mut spectra = Tensor::randn(&[heads, dim], 0.02, rng);
        spectra.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let mut proj = Tensor::randn(&[heads * dim, dim], 0.02 / (dim as f64).sqrt(), rng);
        for h in 0..heads {
            for i in 0..dim {
                let v = proj.at(&[h * dim + i, i]);
                proj.set(&[h * dim + i, i], v + 1.0 / heads as f64);
            }
        }
        Self { basis, spectra, proj }
    }

    pub fn dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.spectra.shape()[0]
    }
}

/// Polarized operator parameters as variables on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PolarizedVars<'a> {
    pub basis: &'a Var,
    pub spectra: &'a Var,
    pub proj: &'a Var,
}

impl PolarizedVars<'_> {
    fn heads(&self) -> usize {
        self.spectra.shape()[0]
    }

    fn check(&self, dim: usize) -> Result<()> {
        let s = self.heads();
        let ok =
            self.basis.shape() == [dim, dim] && self.spectra.shape() == [s, dim] && self.proj.shape() == [s * dim, dim];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape {
                op: "polarized_attention",
                shape: self.proj.shape().to_vec(),
                reason: format!(
                    "basis {:?} / spectra {:?} / proj {:?} inconsistent with token dim {dim}",
                    self.basis.shape(),
                    self.spectra.shape(),
                    self.proj.shape()
                ),
            })
        }
    }
}

/// Content scores `softmax(β · ξ Uᵀ Λ_i U tᵀ)` for every head, β = 1/√D.
pub fn content_scores(master: &Var, reference: &Var, w: &PolarizedVars<'_>) -> Result<Vec<Var>> {
    let dim = master.shape()[1];
    if reference.shape().len() != 2 || reference.shape()[1] != dim {
        return Err(Error::ShapeMismatch {
            op: "polarized_attention",
            lhs: master.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    w.check(dim)?;
    let beta = 1.0 / (dim as f64).sqrt();
    let master_rot = master.matmul_t(w.basis)?;
    let reference_rot = reference.matmul_t(w.basis)?;
    (0..w.heads())
        .map(|i| {
            let spectrum = w.spectra.narrow(0, i, 1)?;
            let logits = master_rot.mul(&spectrum)?.matmul_t(&reference_rot)?.scale(beta);
            if !logits.value().all_finite() {
                return Err(Error::NonFinite(format!("polarized attention logits in head {i}")));
            }
            Ok(logits.softmax())
        })
        .collect()
}

/// `W · cat_i[A_i t]`.
pub fn retrieve(attention: &[Var], reference: &Var, proj: &Var) -> Result<Var> {
    let per_head = attention
        .iter()
        .map(|a| a.matmul(reference))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var> = per_head.iter().collect();
    Var::concat(&refs, 1)?.matmul(proj)
}

/// Polarized cross-attention retrieval of reference tokens for every master
/// token. Returns the retrieved tokens and the per-head attention matrices.
pub fn polarized_attention(master: &Var, reference: &Var, w: &PolarizedVars<'_>) -> Result<(Var, Vec<Var>)> {
    let attention = content_scores(master, reference, w)?;
    let retrieved = retrieve(&attention, reference, w.proj)?;
    Ok((retrieved, attention))
}

/// Parameterization of the epipolar prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpipolarMode {
    /// Horizontal epipolar lines: logits `−α·δ2²`, only α trainable.
    Rectified,
    /// Quadratic curve `1 + a·δ1 + b·δ2 + c·δ1δ2 + d·δ1² + e·δ2²`.
    Polynomial,
}

impl EpipolarMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EpipolarMode::Rectified => "rectified",
            EpipolarMode::Polynomial => "polynomial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rectified" => Ok(Self::Rectified),
            "polynomial" => Ok(Self::Polynomial),
            other => Err(Error::Config(format!("unknown epipolar mode {other:?}"))),
        }
    }

    /// Number of trainable coefficients.
    pub fn coeff_len(self) -> usize {
        match self {
            EpipolarMode::Rectified => 1,
            EpipolarMode::Polynomial => 5,
        }
    }
}

/// Values of the positional prior and the content/position gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GpcaLayerParams {
    pub mode: EpipolarMode,
    /// `[α]` in rectified mode, `[a, b, c, d, e]` in polynomial mode.
    pub coeffs: Tensor,
    /// `[λ]`.
    pub gate: Tensor,
}

/// Initial locality strength. Adjacent rows start at weight e⁻⁴ relative to
/// the query row, so the prior is close to a hard epipolar line without
/// saturating the softmax.
pub const ALPHA_INIT: f64 = 4.0;

/// Model width whose self-retrieval logit `β‖ξ‖²` the pre-attention norms
/// reproduce at initialization.
const RETRIEVAL_REFERENCE_DIM: f64 = 768.0;

/// Initial gain of the pre-attention norms: `β‖g·ξ̂‖² = g²√D` equals
/// `√768`, so narrow models retrieve as sharply as the full-width one.
pub fn retrieval_gain(dim: usize) -> f64 {
    (RETRIEVAL_REFERENCE_DIM / dim as f64).powf(0.25)
}

impl GpcaLayerParams {
    /// α = [`ALPHA_INIT`] (or the equivalent curve) and λ = 1.
    pub fn init(mode: EpipolarMode) -> Self {
        let coeffs = match mode {
            EpipolarMode::Rectified => Tensor::from_slice(&[ALPHA_INIT]),
            EpipolarMode::Polynomial => Tensor::from_slice(&[0.0, 0.0, 0.0, 0.0, -ALPHA_INIT]),
        };
        Self {
            mode,
            coeffs,
            gate: Tensor::from_slice(&[1.0]),
        }
    }

    /// The full coefficient vector `v_pos` paired with `(1, δ1, δ2, δ1δ2, δ1², δ2²)`.
    pub fn v_pos(&self) -> [f64; 6] {
        let c = self.coeffs.data();
        match self.mode {
            EpipolarMode::Rectified => [0.0, 0.0, 0.0, 0.0, 0.0, -c[0]],
            EpipolarMode::Polynomial => [1.0, c[0], c[1], c[2], c[3], c[4]],
        }
    }
}

/// Relative-position features of reference patch `j` seen from query patch `i`.
pub fn relative_position(grid: Grid, i: usize, j: usize) -> [f64; 6] {
    let (ri, ci) = ((i / grid.cols) as f64, (i % grid.cols) as f64);
    let (rj, cj) = ((j / grid.cols) as f64, (j % grid.cols) as f64);
    let (d1, d2) = (cj - ci, rj - ri);
    [1.0, d1, d2, d1 * d2, d1 * d1, d2 * d2]
}

/// Positional attention `softmax(v_posᵀ r_ij)` over the `N_p × N_p` patch grid.
pub fn positional_scores(grid: Grid, mode: EpipolarMode, coeffs: &Var) -> Result<Var> {
    let n = grid.patches();
    if coeffs.shape() != [mode.coeff_len()] {
        return Err(Error::InvalidShape {
            op: "positional_scores",
            shape: coeffs.shape().to_vec(),
            reason: format!("{} mode takes {} coefficients", mode.as_str(), mode.coeff_len()),
        });
    }
    let logits = match mode {
        EpipolarMode::Rectified => {
            let alpha = coeffs.item();
            if !(alpha > 0.0) {
                return Err(Error::Config(format!("locality strength must be > 0, got {alpha}")));
            }
            let mut sq = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    sq.set(&[i, j], -relative_position(grid, i, j)[5]);
                }
            }
            coeffs.constant_like(sq).mul(coeffs)?
        }
        EpipolarMode::Polynomial => {
            let mut feats = Tensor::zeros(&[n * n, 5]);
            for i in 0..n {
                for j in 0..n {
                    let r = relative_position(grid, i, j);
                    for k in 0..5 {
                        feats.set(&[i * n + j, k], r[k + 1]);
                    }
                }
            }
            let column = coeffs.reshape(&[5, 1])?;
            coeffs
                .constant_like(feats)
                .matmul(&column)?
                .add_scalar(1.0)
                .reshape(&[n, n])?
        }
    };
    Ok(logits.softmax())
}

/// Embeds `N_p × N_p` positional scores into the `(N_p+1) × (N_p+1)` token
/// layout: grid queries give the class column zero mass, the class query is
/// uniform over all reference tokens.
fn embed_positional(scores: &Var) -> Result<Var> {
    let n = scores.shape()[0];
    let zeros = scores.constant_like(Tensor::zeros(&[n, 1]));
    let body = Var::concat(&[&zeros, scores], 1)?;
    let top = scores.constant_like(Tensor::full(&[1, n + 1], 1.0 / (n + 1) as f64));
    Var::concat(&[&top, &body], 0)
}

/// Confidence from attention entropy: `Heat = 1 − σ((H − c)/τ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatConfig {
    pub temperature: f64,
    pub offset: f64,
    pub eps: f64,
}

impl HeatConfig {
    /// `c = ln(N_p)/2`, `τ = ln(N_p)/10`, `ε = 1e-8`.
    pub fn for_patches(patches: usize) -> Self {
        let max_entropy = (patches as f64).ln();
        Self {
            temperature: max_entropy / 10.0,
            offset: max_entropy / 2.0,
            eps: 1e-8,
        }
    }
}

/// Shannon entropy `−Σ p log(p + ε)` of one attention row.
pub fn attention_entropy(row: &[f64], eps: f64) -> Result<f64> {
    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Domain {
            op: "attention_entropy",
        });
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("attention row sums to {total}, not 1")));
    }
    Ok(-row.iter().map(|&p| p * (p + eps).ln()).sum::<f64>())
}

pub fn heat_score(entropy: f64, cfg: &HeatConfig) -> Result<f64> {
    if !entropy.is_finite() {
        return Err(Error::NonFinite(format!("entropy {entropy}")));
    }
    Ok(1.0 - crate::autodiff::sigmoid_scalar((entropy - cfg.offset) / cfg.temperature))
}

/// Row entropies of an `N × M` attention matrix as an `N × 1` variable.
pub fn entropy_rows(attention: &Var, eps: f64) -> Result<Var> {
    let logp = attention.add_scalar(eps).ln()?;
    Ok(attention.mul(&logp)?.sum_axis(1, true)?.neg())
}

/// Per-token heat from the lowest-entropy head; the class token gets 1.
pub fn heat_from_attention(attention: &[Var], cfg: &HeatConfig) -> Result<Var> {
    let entropies = attention
        .iter()
        .map(|a| entropy_rows(a, cfg.eps))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var> = entropies.iter().collect();
    let lowest = Var::concat(&refs, 1)?.min_axis(1, true)?;
    let n = lowest.shape()[0];
    let heat = lowest
        .add_scalar(-cfg.offset)
        .scale(1.0 / cfg.temperature)
        .sigmoid()
        .neg()
        .add_scalar(1.0);
    let class = heat.constant_like(Tensor::ones(&[1, 1]));
    Var::concat(&[&class, &heat.narrow(0, 1, n - 1)?], 0)
}

/// Positional prior and gate as variables.
#[derive(Clone, Copy, Debug)]
pub struct GpcaVars<'a> {
    pub mode: EpipolarMode,
    pub coeffs: &'a Var,
    pub gate: &'a Var,
}

/// Output of one gated positional cross-attention layer.
#[derive(Clone, Debug)]
pub struct GpcaOutput {
    /// Retrieved tokens; row 0 is the reference class token.
    pub retrieved: Var,
    /// Per-head blended attention, `(N_p+1) × (N_p+1)`.
    pub attention: Vec<Var>,
    /// Per-token heat, `(N_p+1) × 1`.
    pub heat: Var,
}

/// Gated positional cross-attention:
/// `A = norm[(1 − σ(λ)) A_cnt + σ(λ) A_pos]` per head, then retrieval with `A`.
pub fn gpca(
    master: &TokenState,
    reference: &TokenState,
    polar: &PolarizedVars<'_>,
    gate: &GpcaVars<'_>,
    heat_cfg: &HeatConfig,
) -> Result<GpcaOutput> {
    if master.grid != reference.grid {
        return Err(Error::Config(format!(
            "master grid {:?} differs from reference grid {:?}",
            master.grid, reference.grid
        )));
    }
    let content = content_scores(&master.tokens, &reference.tokens, polar)?;
    let positional = embed_positional(&positional_scores(master.grid, gate.mode, gate.coeffs)?)?;
    let open = gate.gate.sigmoid();
    let closed = open.neg().add_scalar(1.0);
    let positional_part = positional.mul(&open)?;
    let attention = content
        .iter()
        .map(|a| {
            let blend = a.mul(&closed)?.add(&positional_part)?;
            let sums = blend.sum_axis(1, true)?;
            if sums.value().data().iter().any(|&s| !(s > 0.0)) {
                return Err(Error::NonFinite("zero row sum in gated attention".into()));
            }
            blend.div(&sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let retrieved = retrieve(&attention, &reference.tokens, polar.proj)?;
    let n = retrieved.shape()[0];
    let retrieved = Var::concat(
        &[&reference.tokens.narrow(0, 0, 1)?, &retrieved.narrow(0, 1, n - 1)?],
        0,
    )?;
    let heat = heat_from_attention(&attention, heat_cfg)?;
    Ok(GpcaOutput {
        retrieved,
        attention,
        heat,
    })
}

/// Parameter handles of one gated positional cross-attention layer.
#[derive(Clone, Debug)]
pub struct GpcaLayer {
    pub norm_master: LayerNorm,
    pub norm_reference: LayerNorm,
    pub basis: ParamId,
    pub spectra: ParamId,
    pub proj: ParamId,
    pub coeffs: ParamId,
    pub gate: ParamId,
    pub mode: EpipolarMode,
}

impl GpcaLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize, mode: EpipolarMode) -> Self {
        b.scoped(name, |b| {
            let polar = PolarizedHeadParams::init(dim, heads, b.rng());
            let gp = GpcaLayerParams::init(mode);
            Self {
                norm_master: LayerNorm::with_gain(b, "norm_master", dim, retrieval_gain(dim)),
                norm_reference: LayerNorm::with_gain(b, "norm_reference", dim, retrieval_gain(dim)),
                basis: b.add("basis", polar.basis),
                spectra: b.add("spectra", polar.spectra),
                proj: b.add("proj", polar.proj),
                coeffs: b.add("epipolar", gp.coeffs),
                gate: b.add("gate", gp.gate),
                mode,
            }
        })
    }

    pub fn forward(
        &self,
        p: &Bound,
        master: &TokenState,
        reference: &TokenState,
        heat_cfg: &HeatConfig,
    ) -> Result<GpcaOutput> {
        let m = TokenState::new(self.norm_master.forward(p, &master.tokens)?, master.grid)?;
        let r = TokenState::new(self.norm_reference.forward(p, &reference.tokens)?, reference.grid)?;
        let polar = PolarizedVars {
            basis: &p[self.basis],
            spectra: &p[self.spectra],
            proj: &p[self.proj],
        };
        let gate = GpcaVars {
            mode: self.mode,
            coeffs: &p[self.coeffs],
            gate: &p[self.gate],
        };
        gpca(&m, &r, &polar, &gate, heat_cfg)
    }
}

/// Orthogonal matrix from Gram–Schmidt QR of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor {
    let g = Tensor::randn(&[dim, dim], 1.0, rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for c in 0..dim {
        let mut v: Vec<f64> = (0..dim).map(|r| g.at(&[r, c])).collect();
        // two passes of modified Gram–Schmidt for full f64 orthogonality
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let mut out = Tensor::zeros(&[dim, dim]);
    for (c, col) in q.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out.set(&[r, c], v);
        }
    }
    out
}
