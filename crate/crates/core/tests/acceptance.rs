//! The eleven acceptance criteria, one report line each.
//!
//! Run with `cargo test -p chit-core --test acceptance -- --nocapture`.
//! The training criteria share one 500-step toy run, which dominates the
//! runtime (a few minutes on one core with the optimized test profile).

use std::time::{Duration, Instant};

use chit_core::architecture::ForwardOptions;
use chit_core::attention::{
    gpca, polarized_attention, positional_scores, random_orthogonal, relative_position, EpipolarMode, GpcaVars, Grid,
    HeatConfig, PolarizedVars, TokenState,
};
use chit_core::checks::{orthogonality_descent, run_suite};
use chit_core::geometry::{fronto_parallel_scene, make_scene, project_coords, two_plane_scene, CameraRig, SceneConfig};
use chit_core::io::Checkpoint;
use chit_core::losses::{heat_mask, lambda_reg, lambda_reg_parts, ortho_defect, ortho_reg, reprojection_loss_masked};
use chit_core::train::{predict, StepStats, TrainConfig, Trainer};
use chit_core::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let (mut total, mut failed, mut worst) = (0, Vec::new(), 0.0f64);
    for seed in 0..3 {
        for check in run_suite(seed)? {
            total += 1;
            worst = worst.max(check.rel_err);
            if !check.passed() {
                failed.push(check.line());
            }
        }
    }
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "{total} checks over 3 seeds, worst rel err {worst:.2e}, {:.1}s",
        elapsed.as_secs_f64()
    );
    for line in &failed {
        detail.push_str("\n    ");
        detail.push_str(line);
    }
    outcome(failed.is_empty() && fast, detail)
}

fn retrieval_identity() -> Result<Outcome> {
    let r = &mut ChaCha8Rng::seed_from_u64(21);
    let (n, d, heads) = (17, 64, 2);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let master = Tensor::randn(&[n, d], 1.0, r);
        let reference = Tensor::randn(&[n, d], 1.0, r);
        let tape = Tape::new();
        let basis = tape.constant(Tensor::eye(d));
        let spectra = tape.constant(Tensor::ones(&[heads, d]));
        // averaging projection: every head retrieves the same thing
        let mut w = Tensor::zeros(&[heads * d, d]);
        for h in 0..heads {
            for k in 0..d {
                w.set(&[h * d + k, k], 1.0 / heads as f64);
            }
        }
        let proj = tape.constant(w);
        let vars = PolarizedVars {
            basis: &basis,
            spectra: &spectra,
            proj: &proj,
        };
        let (retrieved, _) =
            polarized_attention(&tape.constant(master.clone()), &tape.constant(reference.clone()), &vars)?;

        let beta = 1.0 / (d as f64).sqrt();
        let mut expect = vec![0.0; n * d];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| beta * (0..d).map(|k| master.at(&[i, k]) * reference.at(&[j, k])).sum::<f64>())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..d {
                expect[i * d + k] = (0..n).map(|j| e[j] / z * reference.at(&[j, k])).sum();
            }
        }
        worst = worst.max(max_diff(retrieved.value().data(), &expect));
    }
    outcome(worst < 1e-9, format!("max abs diff {worst:.2e} on 5 random 17x64 sets"))
}

fn gate_limits() -> Result<Outcome> {
    let r = &mut ChaCha8Rng::seed_from_u64(22);
    let (grid, d) = (Grid::new(3, 4), 8);
    let n = grid.patches() + 1;
    let master = Tensor::randn(&[n, d], 1.0, r);
    let reference = Tensor::randn(&[n, d], 1.0, r);
    let basis_t = random_orthogonal(d, r);
    let spectra_t = Tensor::uniform(&[2, d], 0.5, 2.0, r);
    let proj_t = Tensor::randn(&[2 * d, d], 0.3, r);

    let mut worst = [0.0f64; 2];
    for (slot, lambda) in [(0, -20.0), (1, 20.0)] {
        let tape = Tape::new();
        let basis = tape.constant(basis_t.clone());
        let spectra = tape.constant(spectra_t.clone());
        let proj = tape.constant(proj_t.clone());
        let coeffs = tape.constant(Tensor::from_slice(&[1.3]));
        let gate = tape.constant(Tensor::from_slice(&[lambda]));
        let polar = PolarizedVars {
            basis: &basis,
            spectra: &spectra,
            proj: &proj,
        };
        let gv = GpcaVars {
            mode: EpipolarMode::Rectified,
            coeffs: &coeffs,
            gate: &gate,
        };
        let m = TokenState::new(tape.constant(master.clone()), grid)?;
        let t = TokenState::new(tape.constant(reference.clone()), grid)?;
        let out = gpca(&m, &t, &polar, &gv, &HeatConfig::for_patches(grid.patches()))?;
        let (_, content) = polarized_attention(&m.tokens, &t.tokens, &polar)?;
        let pos = positional_scores(grid, EpipolarMode::Rectified, &coeffs)?;

        // positional scores over the class-augmented index space
        let mut full = vec![0.0; n * n];
        for v in full.iter_mut().take(n) {
            *v = 1.0 / n as f64;
        }
        for i in 0..grid.patches() {
            for j in 0..grid.patches() {
                full[(i + 1) * n + j + 1] = pos.value().at(&[i, j]);
            }
        }
        for (a, c) in out.attention.iter().zip(&content) {
            let target = if lambda < 0.0 { c.value().data() } else { &full[..] };
            worst[slot] = worst[slot].max(max_diff(a.value().data(), target));
        }
    }
    outcome(
        worst[0] < 1e-6 && worst[1] < 1e-6,
        format!(
            "lambda=-20 vs content {:.2e}, lambda=+20 vs positional {:.2e}",
            worst[0], worst[1]
        ),
    )
}

fn epipolar_focus() -> Result<Outcome> {
    let scores = |grid: Grid, alpha: f64| -> Result<Tensor> {
        let tape = Tape::new();
        let coeffs = tape.constant(Tensor::from_slice(&[alpha]));
        Ok(positional_scores(grid, EpipolarMode::Rectified, &coeffs)?
            .value()
            .clone())
    };
    let grid = Grid::new(5, 4);
    let (mut same_row, mut gap) = (0.0f64, 0.0f64);
    for alpha in [0.3, 1.0, 2.7] {
        let a = scores(grid, alpha)?;
        for i in 0..grid.patches() {
            let own = a.at(&[i, i]);
            for j in 0..grid.patches() {
                let d2 = relative_position(grid, i, j)[2];
                if j / grid.cols == i / grid.cols {
                    same_row = same_row.max((a.at(&[i, j]) - own).abs());
                }
                gap = gap.max(((a.at(&[i, j]) / own).ln() + alpha * d2 * d2).abs());
            }
        }
    }
    let grid = Grid::new(4, 16);
    let a = scores(grid, 50.0)?;
    let mut mass = 1.0f64;
    for i in 0..grid.patches() {
        let row = i / grid.cols;
        mass = mass.min((0..grid.cols).map(|c| a.at(&[i, row * grid.cols + c])).sum());
    }
    outcome(
        same_row < 1e-15 && gap < 1e-9 && mass >= 1.0 - 1e-6,
        format!("same-row spread {same_row:.1e}, log-gap error {gap:.2e}, alpha=50 row mass {mass:.9}"),
    )
}

fn regularizer_values() -> Result<Outcome> {
    let r = &mut ChaCha8Rng::seed_from_u64(23);
    let orth = (0..5)
        .map(|_| ortho_defect(&random_orthogonal(16, r)))
        .collect::<Result<Vec<_>>>()?;
    let orth = orth.into_iter().fold(0.0, f64::max);
    let tape = Tape::new();
    let shear = ortho_reg(&tape.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0])?))?.item();
    let shear_err = (shear - 3f64.sqrt() / 4.0).abs();
    let pair = |v: Vec<f64>| -> Result<(f64, f64)> {
        let t = Tensor::new(&[2, 2], v)?;
        Ok((lambda_reg(&tape.constant(t.clone()))?.item(), lambda_reg_parts(&t)?.1))
    };
    let (recip, recip_den) = pair(vec![5.0, 0.2, 0.2, 5.0])?;
    let (ident, ident_den) = pair(vec![1.0; 4])?;
    outcome(
        orth < 1e-12
            && shear_err < 1e-12
            && recip.abs() < 1e-12
            && ident.abs() < 1e-12
            && (recip_den - 25.0).abs() < 0.1
            && (ident_den - 2.0).abs() < 1e-12,
        format!(
            "L_o(orthogonal) {orth:.1e}, L_o(shear) off by {shear_err:.1e}, L_lambda {recip:.1e}/{ident:.1e}, \
             denominators {recip_den:.2}/{ident_den:.2}"
        ),
    )
}

fn orthogonality_sanity() -> Result<Outcome> {
    let mut worst = f64::INFINITY;
    for seed in 0..3 {
        let r = &mut ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(16, r);
        let u = q.zip_map(&Tensor::randn(&[16, 16], 1.0, r), |a, n| a * (1.0 + 0.05 * n))?;
        let before = ortho_defect(&u)?;
        let after = ortho_defect(&orthogonality_descent(u, 50)?)?;
        worst = worst.min(before / after.max(f64::MIN_POSITIVE));
    }
    outcome(worst >= 100.0, format!("smallest reduction over 3 seeds {worst:.3e}x"))
}

fn warp_consistency() -> Result<Outcome> {
    let cfg = SceneConfig::default();
    let (mut worst_gt, mut increases) = (0.0f64, true);
    for seed in 0..3 {
        let scene = make_scene(seed, &cfg)?;
        let tape = Tape::new();
        let l = tape.constant(scene.left.clone());
        let r = tape.constant(scene.right.clone());
        let (vis_l, vis_r) = (scene.interior_visible_left(), scene.interior_visible_right());
        let eval = |scale: f64| -> Result<f64> {
            let dl = tape.constant(scene.depth_left.map(|d| d * scale));
            let dr = tape.constant(scene.depth_right.map(|d| d * scale));
            let weights = Default::default();
            Ok(
                reprojection_loss_masked(&l, &r, &dl, &dr, &scene.rig, &weights, Some((&vis_l, &vis_r)))?
                    .loss
                    .item(),
            )
        };
        let base = eval(1.0)?;
        worst_gt = worst_gt.max(base);
        for s in [0.9, 1.1] {
            increases &= eval(s)? > base;
        }
    }
    outcome(
        worst_gt < 0.01 && increases,
        format!("ground-truth L_p at most {worst_gt:.2e} on 3 scenes, +-10% depth increases it: {increases}"),
    )
}

fn disparity_law() -> Result<Outcome> {
    let rng = &mut ChaCha8Rng::seed_from_u64(24);
    let shift = |f: f64, b: f64, z: f64| -> Result<f64> {
        let rig = CameraRig::rectified(f, 9, 7, b);
        let tape = Tape::new();
        let (cols, rows) = project_coords(&tape.constant(Tensor::full(&[7, 9], z)), &rig)?;
        let mut worst = 0.0f64;
        for y in 0..7 {
            for x in 0..9 {
                worst = worst.max((x as f64 - cols.value().at(&[y, x]) - f * b / z).abs());
                worst = worst.max((rows.value().at(&[y, x]) - y as f64).abs());
            }
        }
        Ok(worst)
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (f, b, z) = (
            rng.random_range(20.0..500.0),
            rng.random_range(0.05..1.0),
            rng.random_range(1.0..100.0),
        );
        worst = worst.max(shift(f, b, z)?);
    }
    let d = CameraRig::rectified(100.0, 9, 7, 0.54).disparity(27.0);
    let pinned = shift(100.0, 0.54, 27.0)?;
    outcome(
        worst < 1e-9 && pinned < 1e-9 && (d - 2.0).abs() < 1e-9,
        format!("max column error {worst:.1e} over 100 rigs; f=100 b=0.54 Z=27 gives {d:.6} px"),
    )
}

/// Mean of the first and last ten photometric values.
fn moving_averages(curve: &[StepStats]) -> (f64, f64) {
    let avg = |s: &[StepStats]| s.iter().map(|x| x.photometric).sum::<f64>() / s.len() as f64;
    (avg(&curve[..10]), avg(&curve[curve.len() - 10..]))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Trained {
    trainer: Trainer,
    curve: Vec<StepStats>,
    elapsed: Duration,
}

fn toy_training(trained: &Trained) -> Result<Outcome> {
    let (first, last) = moving_averages(&trained.curve);
    let ratio = last / first;
    let cfg = &trained.trainer.cfg;
    let scene = fronto_parallel_scene(1001, &cfg.scene, 8.0)?;
    let depth = predict(&trained.trainer.model, &scene.left, &scene.right)?;
    let med = median(depth.data().to_vec());
    let rel = (med - 8.0).abs() / 8.0;
    let fast = trained.elapsed <= Duration::from_secs(15 * 60);
    outcome(
        ratio <= 0.5 && rel <= 0.2 && fast,
        format!(
            "L_p {first:.4} -> {last:.4} (ratio {ratio:.3}), median on 8 m plane {med:.2} m ({:.1}% off), {:.0}s",
            100.0 * rel,
            trained.elapsed.as_secs_f64()
        ),
    )
}

fn heat_occlusion(trained: &Trained) -> Result<Outcome> {
    let cfg = &trained.trainer.cfg;
    let (z_near, z_far) = (2.5, 30.0);
    let scene = two_plane_scene(7, &cfg.scene, z_near, z_far, 30.0)?;
    let model = &trained.trainer.model;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let opts = ForwardOptions {
        heat: Some(cfg.heat_config()),
        ..ForwardOptions::inference()
    };
    let out = model.forward(
        &p,
        &tape.constant(scene.left.clone()),
        &tape.constant(scene.right.clone()),
        &opts,
    )?;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let heat = heat_mask(&out.heat_last, out.grid, h, w)?;
    // skip the left strip that no right pixel can see at any depth
    let first_col = (cfg.scene.focal * cfg.scene.baseline / z_near).ceil() as usize + 1;
    let (mut band, mut outside) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in first_col..w {
            let v = heat.value().at(&[y, x]);
            if scene.visible_left.at(&[y, x]) == 0.0 {
                band.push(v);
            } else {
                outside.push(v);
            }
        }
    }
    if band.is_empty() {
        return outcome(false, "scene has no occlusion band");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, o) = (mean(&band), mean(&outside));
    outcome(
        b < o,
        format!(
            "mean heat in band {b:.6} ({} px) vs outside {o:.6} ({} px)",
            band.len(),
            outside.len()
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let cfg = TrainConfig {
        steps: 6,
        ..TrainConfig::toy()
    };
    let curve = |t: &mut Trainer, n: usize| -> Result<Vec<String>> {
        (0..n).map(|_| t.train_step().map(|s| s.line())).collect()
    };

    let mut a = Trainer::new(cfg.clone())?;
    let mut b = Trainer::new(cfg.clone())?;
    let (ca, cb) = (curve(&mut a, 6)?, curve(&mut b, 6)?);
    let reruns = ca == cb;

    let bytes = a.checkpoint().to_bytes()?;
    let round_trip = Checkpoint::from_bytes(&bytes)?.to_bytes()? == bytes;

    let mut c = Trainer::new(cfg)?;
    let mut resumed_curve = curve(&mut c, 3)?;
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&c.checkpoint().to_bytes()?)?)?;
    resumed_curve.extend(curve(&mut resumed, 3)?);
    let resume = resumed_curve == ca && resumed.checkpoint().to_bytes()? == bytes;

    outcome(
        reruns && round_trip && resume,
        format!("rerun curves equal: {reruns}, checkpoint bytes round-trip: {round_trip}, resume bit-exact: {resume}"),
    )
}

/// Prints one criterion line and keeps it for the final verdict.
fn report(lines: &mut Vec<(bool, String)>, n: usize, name: &str, result: Result<Outcome>) {
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let line = format!(
        "criterion {n:>2} {name:<28} {} | {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    lines.push((passed, line));
}

#[test]
fn acceptance() {
    let lines = &mut Vec::new();

    report(lines, 1, "gradient oracle", gradient_oracle());
    report(lines, 2, "retrieval identity", retrieval_identity());
    report(lines, 3, "gate limits", gate_limits());
    report(lines, 4, "epipolar focus", epipolar_focus());
    report(lines, 5, "regularizer values", regularizer_values());
    report(lines, 6, "orthogonality descent", orthogonality_sanity());
    report(lines, 7, "warp self-consistency", warp_consistency());
    report(lines, 8, "disparity law", disparity_law());

    let trained = (|| -> Result<Trained> {
        let start = Instant::now();
        let mut trainer = Trainer::new(TrainConfig::toy())?;
        let mut curve = Vec::with_capacity(trainer.cfg.steps);
        while trainer.step < trainer.cfg.steps {
            curve.push(trainer.train_step()?);
        }
        Ok(Trained {
            trainer,
            curve,
            elapsed: start.elapsed(),
        })
    })();
    match &trained {
        Ok(t) => {
            report(lines, 9, "toy training", toy_training(t));
            report(lines, 10, "heat at occlusions", heat_occlusion(t));
        }
        Err(e) => {
            let why = format!("training failed: {e}");
            report(lines, 9, "toy training", outcome(false, why.clone()));
            report(lines, 10, "heat at occlusions", outcome(false, why));
        }
    }
    report(lines, 11, "determinism", determinism());

    let failed: Vec<&str> = lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l.as_str()).collect();
    assert!(failed.is_empty(), "acceptance failures:\n{}", failed.join("\n"));
}
