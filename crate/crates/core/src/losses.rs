//! Training objective: photometric reprojection, edge-aware smoothness, and
//! the two regularizers on the polarized-attention operator.

use crate::attention::Grid;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{warp, CameraRig};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mixing and weighting coefficients of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the master-view reprojection term, `ω`.
    pub master: f64,
    /// SSIM share of the photometric error, `κ`.
    pub ssim_mix: f64,
    pub smoothness: f64,
    pub ortho: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            master: 0.6,
            ssim_mix: 0.85,
            smoothness: 1e-4,
            ortho: 1e-7,
            lambda: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.master) || !(0.0..=1.0).contains(&self.ssim_mix) {
            return Err(Error::Config("master weight and ssim mix must lie in [0, 1]".into()));
        }
        if [self.smoothness, self.ortho, self.lambda].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("regularizer weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, x: &Var, y: &Var) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-pixel structural similarity of two `C×H×W` images over 3×3 windows.
pub fn ssim(x: &Var, y: &Var) -> Result<Var> {
    same_shape("ssim", x, y)?;
    let mu_x = x.box_filter3()?;
    let mu_y = y.box_filter3()?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = x.square().box_filter3()?.sub(&mu_xx)?;
    let var_y = y.square().box_filter3()?.sub(&mu_yy)?;
    let cov = x.mul(y)?.box_filter3()?.sub(&mu_xy)?;
    let num = mu_xy
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_xx
        .add(&mu_yy)?
        .add_scalar(SSIM_C1)
        .mul(&var_x.add(&var_y)?.add_scalar(SSIM_C2))?;
    num.div(&den)
}

/// `κ/2·(1 − SSIM) + (1 − κ)·|X − Y|`, averaged over channels. Returns `H×W`.
pub fn photometric_error(x: &Var, y: &Var, kappa: f64) -> Result<Var> {
    let structural = ssim(x, y)?.neg().add_scalar(1.0).scale(kappa / 2.0);
    let l1 = x.sub(y)?.abs().scale(1.0 - kappa);
    structural.add(&l1)?.mean_axis(0, false)
}

/// Mean of `map` over pixels where `mask` is 1; zero when nothing is valid.
pub fn masked_mean(map: &Var, mask: &Tensor) -> Result<Var> {
    let count = mask.sum();
    let masked = map.mul(&map.constant_like(mask.clone()))?;
    Ok(masked.sum().scale(if count > 0.0 { 1.0 / count } else { 0.0 }))
}

/// Both directions of the photometric reprojection objective.
#[derive(Clone, Debug)]
pub struct Reprojection {
    /// `ω·v_m⊙pe_m + (1−ω)·v_r⊙pe_r`, `H×W`.
    pub map: Var,
    /// `ω·mean_valid(pe_m) + (1−ω)·mean_valid(pe_r)`.
    pub loss: Var,
    /// Master view reconstructed from the reference image.
    pub master_warped: Var,
    pub master_valid: Tensor,
    pub reference_valid: Tensor,
}

/// Reprojection error between a stereo pair given both predicted depths.
/// `rig` maps master (target) pixels into the reference view.
pub fn reprojection_loss(
    master: &Var,
    reference: &Var,
    depth_master: &Var,
    depth_reference: &Var,
    rig: &CameraRig,
    weights: &LossWeights,
) -> Result<Reprojection> {
    reprojection_loss_masked(master, reference, depth_master, depth_reference, rig, weights, None)
}

/// [`reprojection_loss`] with additional per-view pixel masks (master,
/// reference) multiplied into the sampling-validity masks, e.g. known
/// occlusions when ground truth is available.
pub fn reprojection_loss_masked(
    master: &Var,
    reference: &Var,
    depth_master: &Var,
    depth_reference: &Var,
    rig: &CameraRig,
    weights: &LossWeights,
    masks: Option<(&Tensor, &Tensor)>,
) -> Result<Reprojection> {
    let omega = weights.master;
    let (master_warped, mut master_valid) = warp(reference, depth_master, rig)?;
    let pe_m = photometric_error(master, &master_warped, weights.ssim_mix)?;
    let (reference_warped, mut reference_valid) = warp(master, depth_reference, &rig.reversed())?;
    let pe_r = photometric_error(reference, &reference_warped, weights.ssim_mix)?;
    if let Some((m, r)) = masks {
        master_valid = master_valid.zip_map(m, |a, b| a * b)?;
        reference_valid = reference_valid.zip_map(r, |a, b| a * b)?;
    }

    let vm = pe_m.constant_like(master_valid.clone());
    let vr = pe_r.constant_like(reference_valid.clone());
    let map = pe_m.mul(&vm)?.scale(omega).add(&pe_r.mul(&vr)?.scale(1.0 - omega))?;
    let loss = masked_mean(&pe_m, &master_valid)?
        .scale(omega)
        .add(&masked_mean(&pe_r, &reference_valid)?.scale(1.0 - omega))?;
    Ok(Reprojection {
        map,
        loss,
        master_warped,
        master_valid,
        reference_valid,
    })
}

/// Edge-aware smoothness of mean-normalized inverse depth. `depth` is `H×W`,
/// `image` is `C×H×W`.
pub fn smoothness_loss(depth: &Var, image: &Var) -> Result<Var> {
    let s = depth.shape();
    if s.len() != 2 || image.shape().len() != 3 || image.shape()[1..] != *s {
        return Err(Error::ShapeMismatch {
            op: "smoothness_loss",
            lhs: s.to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let (h, w) = (s[0], s[1]);
    let inv = depth.constant_like(Tensor::ones(s)).div(depth)?;
    let norm = inv.div(&inv.mean())?;
    let mut total = depth.constant_like(Tensor::scalar(0.0));
    for (axis, len) in [(1, w), (0, h)] {
        if len < 2 {
            continue;
        }
        let dd = norm
            .narrow(axis, 1, len - 1)?
            .sub(&norm.narrow(axis, 0, len - 1)?)?
            .abs();
        let di = image
            .narrow(axis + 1, 1, len - 1)?
            .sub(&image.narrow(axis + 1, 0, len - 1)?)?
            .abs()
            .mean_axis(0, false)?;
        total = total.add(&dd.mul(&di.neg().exp())?.mean())?;
    }
    Ok(total)
}

/// `‖UᵀU − I‖_F / d²`.
pub fn ortho_reg(u: &Var) -> Result<Var> {
    let s = u.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::InvalidShape {
            op: "ortho_reg",
            shape: s.to_vec(),
            reason: "expected a square matrix".into(),
        });
    }
    let d = s[0];
    let defect = u.t()?.matmul(u)?.sub(&u.constant_like(Tensor::eye(d)))?;
    let sq = defect.square().sum();
    // the norm is not differentiable at zero; there sq itself has value and gradient 0
    let frob = if sq.item() > 0.0 { sq.sqrt()? } else { sq };
    Ok(frob.scale(1.0 / (d * d) as f64))
}

/// `‖UᵀU − I‖_F` of a plain matrix.
pub fn ortho_defect(u: &Tensor) -> Result<f64> {
    let m = u.t().matmul(u)?;
    let n = m.shape()[0];
    Ok(m.zip_map(&Tensor::eye(n), |a, b| a - b)?.norm())
}

/// Numerator `Σ|∏_i|Λ_i| − 1|` and denominator `∏_i ‖Λ_i‖_F` of the
/// spectrum regularizer for an `s×D` stack of diagonals.
pub fn lambda_reg_parts(spectra: &Tensor) -> Result<(f64, f64)> {
    if spectra.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "lambda_reg",
            shape: spectra.shape().to_vec(),
            reason: "expected heads × dim".into(),
        });
    }
    let d = spectra.shape()[1];
    let rows: Vec<&[f64]> = spectra.data().chunks(d).collect();
    let num = (0..d)
        .map(|k| (rows.iter().map(|r| r[k].abs()).product::<f64>() - 1.0).abs())
        .sum();
    let den = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .product();
    Ok((num, den))
}

/// Modified Hoyer penalty pulling the element-wise product of the head
/// spectra toward one. `spectra` is `s×D`.
pub fn lambda_reg(spectra: &Var) -> Result<Var> {
    let s = spectra.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op: "lambda_reg",
            shape: s.to_vec(),
            reason: "expected heads × dim".into(),
        });
    }
    let abs = spectra.abs();
    let norms = spectra.square().sum_axis(1, false)?.sqrt()?;
    let mut prod = abs.narrow(0, 0, 1)?;
    let mut den = norms.narrow(0, 0, 1)?;
    for i in 1..s[0] {
        prod = prod.mul(&abs.narrow(0, i, 1)?)?;
        den = den.mul(&norms.narrow(0, i, 1)?)?;
    }
    let num = prod.add_scalar(-1.0).abs().sum();
    num.div(&den.sum())
}

/// [`lambda_reg`] over separate diagonal vectors, which must share a length.
pub fn lambda_reg_vectors(diagonals: &[&Var]) -> Result<Var> {
    let rows: Vec<Var> = diagonals
        .iter()
        .map(|v| v.reshape(&[1, v.value().numel()]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = rows.iter().collect();
    lambda_reg(&Var::concat(&refs, 0)?)
}

/// Per-token heat (`(N+1)×1`, class token first) upsampled to `H×W`.
pub fn heat_mask(heat: &Var, grid: Grid, height: usize, width: usize) -> Result<Var> {
    let n = grid.patches();
    if heat.shape() != [n + 1, 1] {
        return Err(Error::InvalidShape {
            op: "heat_mask",
            shape: heat.shape().to_vec(),
            reason: format!("expected {}×1 heat for a {}×{} grid", n + 1, grid.rows, grid.cols),
        });
    }
    heat.narrow(0, 1, n)?
        .reshape(&[1, grid.rows, grid.cols])?
        .resize_bilinear(height, width)?
        .reshape(&[height, width])
}

/// The four weighted terms and their sum.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub photometric: Var,
    pub smoothness: Var,
    pub ortho: Var,
    pub lambda: Var,
    pub total: Var,
}

/// `mean(m_h ⊙ L_p) + μ_s·L_s + μ_o·L_o + μ_λ·L_Λ`.
pub fn total_loss(
    photometric_map: &Var,
    heat_mask: &Var,
    smoothness: &Var,
    ortho: &Var,
    lambda: &Var,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    same_shape("total_loss", photometric_map, heat_mask)?;
    let photometric = photometric_map.mul(heat_mask)?.mean();
    let total = photometric
        .add(&smoothness.scale(weights.smoothness))?
        .add(&ortho.scale(weights.ortho))?
        .add(&lambda.scale(weights.lambda))?;
    Ok(TotalLoss {
        photometric,
        smoothness: smoothness.clone(),
        ortho: ortho.clone(),
        lambda: lambda.clone(),
        total,
    })
}
