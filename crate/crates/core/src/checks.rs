//! Finite-difference audit of every trainable component and loss term.
//!
//! Each check builds a small instance of a component with random weights,
//! reduces its output to a scalar through a fixed random projection and
//! compares tape gradients against central differences on a random subset of
//! elements of every parameter and differentiable input.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::architecture::{rectify, Embedder, Fusion, HookScale, ModelConfig, Reassemble};
use crate::attention::{
    polarized_attention, random_orthogonal, EpipolarMode, GpcaLayer, Grid, HeatConfig, PolarizedHeadParams,
    PolarizedVars, SelfAttentionLayer, TokenState,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::gradcheck::{finite_diff_at, relative_error};
use crate::losses::{
    heat_mask, lambda_reg, ortho_reg, photometric_error, reprojection_loss, smoothness_loss, total_loss, LossWeights,
};
use crate::nn::{Bound, Builder, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted norm-wise relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Elements probed per tensor; smaller tensors are probed exhaustively.
const PROBES: usize = 24;
/// Fresh instances tried when probes straddle a kink.
const REDRAWS: usize = 4;

/// Outcome for one parameter or input tensor of one component.
#[derive(Clone, Debug)]
pub struct Check {
    pub component: &'static str,
    pub target: String,
    pub seed: u64,
    pub probed: usize,
    pub rel_err: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }

    pub fn line(&self) -> String {
        format!(
            "{:<20} {:<36} seed {:<3} probed {:>3}  rel_err {:.2e}  {}",
            self.component,
            self.target,
            self.seed,
            self.probed,
            self.rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// A component under test: parameters, differentiable inputs and a forward
/// map whose output is reduced by a random projection.
struct Case<F> {
    component: &'static str,
    params: ParamStore,
    inputs: Vec<(&'static str, Tensor)>,
    forward: F,
}

impl<F> Case<F>
where
    F: Fn(&Bound, &[Var]) -> Result<Var>,
{
    fn bind(&self, params: &ParamStore, inputs: &[Tensor], tape: &Tape, grad: bool) -> (Bound, Vec<Var>) {
        let p = if grad {
            params.bind(tape)
        } else {
            params.bind_frozen(tape)
        };
        let xs = inputs
            .iter()
            .map(|t| {
                if grad {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        (p, xs)
    }

    fn project(&self, p: &Bound, xs: &[Var], readout: &Tensor) -> Result<Var> {
        let out = (self.forward)(p, xs)?;
        if out.shape() != readout.shape() {
            return Err(Error::ShapeMismatch {
                op: "gradient check readout",
                lhs: out.shape().to_vec(),
                rhs: readout.shape().to_vec(),
            });
        }
        Ok(out.mul(&out.constant_like(readout.clone()))?.sum())
    }

    fn value(&self, params: &ParamStore, inputs: &[Tensor], readout: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let (p, xs) = self.bind(params, inputs, &tape, false);
        Ok(self.project(&p, &xs, readout)?.item())
    }

    /// `None` when a probed element sits within one step of a kink, in which
    /// case the caller draws a fresh instance.
    fn run(self, seed: u64, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Check>>> {
        let inputs: Vec<Tensor> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let shape = {
            let tape = Tape::new();
            let (p, xs) = self.bind(&self.params, &inputs, &tape, false);
            (self.forward)(&p, &xs)?.shape().to_vec()
        };
        let readout = Tensor::randn(&shape, 1.0, rng);

        let tape = Tape::new();
        let (bound, xs) = self.bind(&self.params, &inputs, &tape, true);
        let grads = self.project(&bound, &xs, &readout)?.backward()?;
        let analytic = |var: &Var, idx: &[usize]| -> Vec<f64> {
            match grads.get(var) {
                Some(g) => idx.iter().map(|&i| g.data()[i]).collect(),
                None => vec![0.0; idx.len()],
            }
        };

        let mut checks = Vec::new();
        for id in self.params.ids() {
            let base = self.params.get(id);
            let idx = probe_indices(base.numel(), rng);
            let objective = |t: &Tensor| {
                let mut store = self.params.clone();
                store.set(id, t.clone())?;
                self.value(&store, &inputs, &readout)
            };
            let Some(rel_err) = compare(objective, base, &idx, &analytic(bound.var(id), &idx))? else {
                return Ok(None);
            };
            checks.push(Check {
                component: self.component,
                target: self.params.name(id).to_string(),
                seed,
                probed: idx.len(),
                rel_err,
            });
        }
        for (j, (name, base)) in self.inputs.iter().enumerate() {
            let idx = probe_indices(base.numel(), rng);
            let objective = |t: &Tensor| {
                let mut xs = inputs.clone();
                xs[j] = t.clone();
                self.value(&self.params, &xs, &readout)
            };
            let Some(rel_err) = compare(objective, base, &idx, &analytic(&xs[j], &idx))? else {
                return Ok(None);
            };
            checks.push(Check {
                component: self.component,
                target: format!("input {name}"),
                seed,
                probed: idx.len(),
                rel_err,
            });
        }
        Ok(Some(checks))
    }
}

/// Relative error of central differences at [`STEP`]. A mismatch that
/// disappears at a sixteenth of the step means the stencil straddles a ReLU
/// kink rather than a wrong derivative; that is reported as `None`.
fn compare<F>(mut objective: F, base: &Tensor, idx: &[usize], analytic: &[f64]) -> Result<Option<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let rel_err = relative_error(analytic, &finite_diff_at(&mut objective, base, STEP, idx)?);
    if rel_err < TOLERANCE {
        return Ok(Some(rel_err));
    }
    let fine = relative_error(analytic, &finite_diff_at(&mut objective, base, STEP / 16.0, idx)?);
    Ok(if fine < TOLERANCE { None } else { Some(rel_err) })
}

/// Draws instances until one has no probe straddling a kink.
fn checked<F>(
    seed: u64,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<Case<F>>,
) -> Result<Vec<Check>>
where
    F: Fn(&Bound, &[Var]) -> Result<Var>,
{
    for _ in 0..REDRAWS {
        let case = make(rng)?;
        if let Some(checks) = case.run(seed, rng)? {
            return Ok(checks);
        }
    }
    Err(Error::Domain { op: "gradient check" })
}

fn probe_indices(numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= PROBES {
        (0..numel).collect()
    } else {
        sample(rng, numel, PROBES).into_vec()
    }
}

/// Builds parameters with a fresh stream, then jitters every entry so that
/// zero-initialized heads and exact identities still carry gradient.
fn build<T>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut Builder<'_, ChaCha8Rng>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let handles = f(&mut Builder::new(&mut store, &mut init));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let value = store.get(id);
        let noise = Tensor::randn(value.shape(), 0.05, rng);
        let jittered = value.zip_map(&noise, |a, b| a + b).expect("same shape");
        store.set(id, jittered).expect("same shape");
    }
    (store, handles)
}

fn flat(v: &Var) -> Result<Var> {
    v.reshape(&[v.shape().iter().product(), 1])
}

const GRID: Grid = Grid { rows: 4, cols: 4 };
const DIM: usize = 16;

fn tokens(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[GRID.patches() + 1, DIM], 1.0, rng)
}

/// Checks every component and loss term once with the given seed.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.extend(checked(seed, rng, |rng| {
        let (params, layer) = build(rng, |b| SelfAttentionLayer::new(b, "sa", 64, 2, 128));
        let layer = layer?;
        Ok(Case {
            component: "self-attention",
            params,
            inputs: vec![("tokens", Tensor::randn(&[17, 64], 1.0, rng))],
            forward: move |p: &Bound, x: &[Var]| Ok(layer.forward(p, &TokenState::new(x[0].clone(), GRID)?)?.tokens),
        })
    })?);

    out.extend(checked(seed, rng, |rng| {
        let (params, ids) = build(rng, |b| {
            let polar = PolarizedHeadParams::init(DIM, 2, b.rng());
            (
                b.add("basis", polar.basis),
                b.add("spectra", polar.spectra),
                b.add("proj", polar.proj),
            )
        });
        Ok(Case {
            component: "polarized-attention",
            params,
            inputs: vec![("master", tokens(rng)), ("reference", tokens(rng))],
            forward: move |p: &Bound, x: &[Var]| {
                let w = PolarizedVars {
                    basis: &p[ids.0],
                    spectra: &p[ids.1],
                    proj: &p[ids.2],
                };
                Ok(polarized_attention(&x[0], &x[1], &w)?.0)
            },
        })
    })?);

    for (component, mode) in [
        ("gpca-rectified", EpipolarMode::Rectified),
        ("gpca-polynomial", EpipolarMode::Polynomial),
    ] {
        out.extend(checked(seed, rng, |rng| {
            let (params, layer) = build(rng, |b| GpcaLayer::new(b, "gpca", DIM, 2, mode));
            let heat_cfg = HeatConfig::for_patches(GRID.patches());
            Ok(Case {
                component,
                params,
                inputs: vec![("master", tokens(rng)), ("reference", tokens(rng))],
                forward: move |p: &Bound, x: &[Var]| {
                    let m = TokenState::new(x[0].clone(), GRID)?;
                    let r = TokenState::new(x[1].clone(), GRID)?;
                    let g = layer.forward(p, &m, &r, &heat_cfg)?;
                    Var::concat(&[&flat(&g.retrieved)?, &g.heat], 0)
                },
            })
        })?);
    }

    out.extend(checked(seed, rng, |rng| {
        let (params, mlp) = build(rng, |b| Mlp::new(b, "blend", 2 * DIM, 2 * DIM, DIM));
        let mut heat = Tensor::uniform(&[GRID.patches() + 1, 1], 0.05, 0.95, rng);
        heat.data_mut()[0] = 1.0;
        Ok(Case {
            component: "blend-mlp",
            params,
            inputs: vec![("master", tokens(rng)), ("retrieved", tokens(rng)), ("heat", heat)],
            forward: move |p: &Bound, x: &[Var]| {
                Ok(rectify(p, &mlp, &TokenState::new(x[0].clone(), GRID)?, &x[1], &x[2])?.tokens)
            },
        })
    })?);

    for scale in [HookScale::Half, HookScale::One, HookScale::Two] {
        out.extend(checked(seed, rng, |rng| {
            let (params, layer) = build(rng, |b| Reassemble::new(b, "reassemble", DIM, 8, scale));
            Ok(Case {
                component: "reassemble",
                params,
                inputs: vec![("tokens", tokens(rng))],
                forward: move |p: &Bound, x: &[Var]| layer.forward(p, &TokenState::new(x[0].clone(), GRID)?),
            })
        })?);
    }

    out.extend(checked(seed, rng, |rng| {
        let (params, fusion) = build(rng, |b| Fusion::new(b, 3, 8, (2.0, 80.0)));
        Ok(Case {
            component: "fusion",
            params,
            inputs: vec![
                ("coarse", Tensor::randn(&[8, 2, 2], 1.0, rng)),
                ("middle", Tensor::randn(&[8, 4, 4], 1.0, rng)),
                ("fine", Tensor::randn(&[8, 8, 8], 1.0, rng)),
            ],
            forward: move |p: &Bound, x: &[Var]| fusion.forward(p, x, 12, 12),
        })
    })?);

    let cfg = ModelConfig {
        height: 16,
        width: 16,
        dim: DIM,
        ..ModelConfig::toy()
    };
    out.extend(checked(seed, rng, |rng| {
        let (params, embedder) = build(rng, |b| Embedder::new(b, &cfg));
        let patch = cfg.patch;
        Ok(Case {
            component: "embedder",
            params,
            inputs: vec![("image", Tensor::uniform(&[3, 16, 16], 0.0, 1.0, rng))],
            forward: move |p: &Bound, x: &[Var]| {
                let e = embedder.forward(p, &x[0], patch)?;
                Var::concat(
                    &[&flat(&e.tokens.tokens)?, &flat(&e.stages[0])?, &flat(&e.stages[1])?],
                    0,
                )
            },
        })
    })?);

    out.extend(loss_checks(seed, rng)?);
    Ok(out)
}

fn loss_case<F>(component: &'static str, inputs: Vec<(&'static str, Tensor)>, forward: F) -> Result<Case<F>> {
    Ok(Case {
        component,
        params: ParamStore::new(),
        inputs,
        forward,
    })
}

fn loss_checks(seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let weights = LossWeights::default();

    out.extend(checked(seed, rng, |rng| {
        let inputs = vec![
            ("x", Tensor::uniform(&[3, 8, 8], 0.0, 1.0, rng)),
            ("y", Tensor::uniform(&[3, 8, 8], 0.0, 1.0, rng)),
        ];
        loss_case("photometric", inputs, move |_: &Bound, x: &[Var]| {
            photometric_error(&x[0], &x[1], weights.ssim_mix)
        })
    })?);

    let rig = CameraRig::rectified(16.0, 16, 12, 0.54);
    out.extend(checked(seed, rng, |rng| {
        let inputs = vec![
            ("master", Tensor::uniform(&[3, 12, 16], 0.0, 1.0, rng)),
            ("reference", Tensor::uniform(&[3, 12, 16], 0.0, 1.0, rng)),
            ("depth_master", Tensor::uniform(&[12, 16], 3.0, 15.0, rng)),
            ("depth_reference", Tensor::uniform(&[12, 16], 3.0, 15.0, rng)),
        ];
        let rig = rig.clone();
        loss_case("reprojection", inputs, move |_: &Bound, x: &[Var]| {
            Ok(reprojection_loss(&x[0], &x[1], &x[2], &x[3], &rig, &weights)?.map)
        })
    })?);

    out.extend(checked(seed, rng, |rng| {
        let inputs = vec![
            ("depth", Tensor::uniform(&[8, 8], 2.0, 20.0, rng)),
            ("image", Tensor::uniform(&[3, 8, 8], 0.0, 1.0, rng)),
        ];
        loss_case("smoothness", inputs, |_: &Bound, x: &[Var]| {
            smoothness_loss(&x[0], &x[1])
        })
    })?);

    out.extend(checked(seed, rng, |rng| {
        let u = random_orthogonal(DIM, rng).zip_map(&Tensor::randn(&[DIM, DIM], 0.05, rng), |a, b| a + b)?;
        loss_case("orthogonality", vec![("basis", u)], |_: &Bound, x: &[Var]| {
            ortho_reg(&x[0])
        })
    })?);

    out.extend(checked(seed, rng, |rng| {
        let spectra = Tensor::randn(&[3, DIM], 0.3, rng).map(|v| v + 1.0);
        loss_case("spectrum", vec![("spectra", spectra)], |_: &Bound, x: &[Var]| {
            lambda_reg(&x[0])
        })
    })?);

    out.extend(checked(seed, rng, |rng| {
        let heat = Tensor::uniform(&[GRID.patches() + 1, 1], 0.0, 1.0, rng);
        loss_case("heat-mask", vec![("heat", heat)], |_: &Bound, x: &[Var]| {
            heat_mask(&x[0], GRID, 12, 12)
        })
    })?);

    out.extend(checked(seed, rng, |rng| {
        let inputs = vec![
            ("photometric", Tensor::uniform(&[8, 8], 0.0, 1.0, rng)),
            ("mask", Tensor::uniform(&[8, 8], 0.0, 1.0, rng)),
            ("smoothness", Tensor::scalar(rng.random())),
            ("ortho", Tensor::scalar(rng.random())),
            ("lambda", Tensor::scalar(rng.random())),
        ];
        loss_case("total", inputs, move |_: &Bound, x: &[Var]| {
            Ok(total_loss(&x[0], &x[1], &x[2], &x[3], &x[4], &weights)?.total)
        })
    })?);
    Ok(out)
}

/// Gradient steps on the orthogonality penalty alone, with Armijo
/// backtracking: the step doubles every iteration and halves until the
/// penalty falls by at least `½·η·‖∇‖²`.
pub fn orthogonality_descent(mut u: Tensor, steps: usize) -> Result<Tensor> {
    let eval = |u: &Tensor| -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let v = tape.param(u.clone());
        let l = ortho_reg(&v)?;
        let g = l
            .backward()?
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(u.shape()));
        Ok((l.item(), g))
    };
    let mut eta = 1.0;
    for _ in 0..steps {
        let (l, g) = eval(&u)?;
        let gg: f64 = g.data().iter().map(|v| v * v).sum();
        if gg == 0.0 {
            break;
        }
        eta *= 2.0;
        loop {
            let cand = u.zip_map(&g, |a, b| a - eta * b)?;
            if eval(&cand)?.0 <= l - 0.5 * eta * gg || eta < 1e-12 {
                u = cand;
                break;
            }
            eta *= 0.5;
        }
    }
    Ok(u)
}
