use chit_core::attention::random_orthogonal;
use chit_core::checks::orthogonality_descent;
use chit_core::geometry::CameraRig;
use chit_core::gradcheck::{finite_diff_grad, relative_error};
use chit_core::losses::{
    lambda_reg, lambda_reg_parts, ortho_defect, ortho_reg, photometric_error, reprojection_loss, smoothness_loss, ssim,
    total_loss, LossWeights, SSIM_C1,
};
use chit_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn photometric_mix_of_constant_images() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3, 5, 5], 0.3));
    let y = x.add_scalar(0.2);
    let s = (2.0 * 0.3 * 0.5 + SSIM_C1) / (0.09 + 0.25 + SSIM_C1);
    let expect = 0.85 / 2.0 * (1.0 - s) + 0.15 * 0.2;
    let pe = photometric_error(&x, &y, 0.85).unwrap();
    assert!(pe.value().data().iter().all(|v| (v - expect).abs() < 1e-12));
    let sm = ssim(&x, &y).unwrap();
    assert!(sm.value().data().iter().all(|v| (v - s).abs() < 1e-12));
}

#[test]
fn smoothness_of_a_ramp_matches_direct_loops() {
    let (h, w) = (4, 6);
    let mut d = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            d.set(&[y, x], 2.0 + 1.5 * x as f64);
        }
    }
    let tape = Tape::new();
    let got = smoothness_loss(&tape.constant(d.clone()), &tape.constant(Tensor::full(&[3, h, w], 0.5)))
        .unwrap()
        .item();

    let inv: Vec<f64> = d.data().iter().map(|z| 1.0 / z).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    let mut dx = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            dx += ((inv[y * w + x + 1] - inv[y * w + x]) / mean).abs();
        }
    }
    // constant image: edge weights are all 1, rows are constant so ∂y vanishes
    let expect = dx / (h * (w - 1)) as f64;
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn orthogonality_gradient_matches_finite_differences() {
    let r = &mut rng(3);
    let u = random_orthogonal(4, r)
        .zip_map(&Tensor::randn(&[4, 4], 0.05, r), |a, b| a + b)
        .unwrap();
    let tape = Tape::new();
    let v = tape.param(u.clone());
    let grad = ortho_reg(&v).unwrap().backward().unwrap().get(&v).unwrap().clone();
    let fd = finite_diff_grad(
        |t| ortho_reg(&Tape::new().constant(t.clone())).map(|l| l.item()),
        &u,
        1e-6,
    )
    .unwrap();
    assert!(relative_error(grad.data(), fd.data()) < 1e-5);
}

#[test]
fn reciprocal_spectra_vanish_and_denominators_differ() {
    let tape = Tape::new();
    let eval = |v: Vec<f64>| {
        let t = Tensor::new(&[2, 2], v).unwrap();
        (
            lambda_reg(&tape.constant(t.clone())).unwrap().item(),
            lambda_reg_parts(&t).unwrap(),
        )
    };
    let (value, (num, den)) = eval(vec![5.0, 0.2, 0.2, 5.0]);
    assert!(value.abs() < 1e-15 && num.abs() < 1e-15);
    assert!((den - 25.04).abs() < 1e-9, "reciprocal pair denominator {den}");
    let (value, (_, den)) = eval(vec![1.0, 1.0, 1.0, 1.0]);
    assert_eq!(value, 0.0);
    assert!((den - 2.0).abs() < 1e-12);

    // any sign pattern of any reciprocal pair
    let r = &mut rng(4);
    for _ in 0..50 {
        let a: Vec<f64> = (0..6).map(|_| r.random_range(0.1..10.0)).collect();
        let mut v: Vec<f64> = a
            .iter()
            .chain(a.iter().map(|x| 1.0 / x).collect::<Vec<_>>().iter())
            .cloned()
            .collect();
        for x in &mut v {
            if r.random_bool(0.5) {
                *x = -*x;
            }
        }
        let t = tape.constant(Tensor::new(&[2, 6], v).unwrap());
        assert!(lambda_reg(&t).unwrap().item().abs() < 1e-14);
    }
}

#[test]
fn total_is_the_weighted_sum_of_its_terms() {
    let r = &mut rng(5);
    let tape = Tape::new();
    let map = Tensor::uniform(&[6, 7], 0.0, 1.0, r);
    let mask = Tensor::uniform(&[6, 7], 0.0, 1.0, r);
    let (ls, lo, ll) = (r.random::<f64>(), r.random::<f64>(), r.random::<f64>());
    let w = LossWeights::default();
    let t = total_loss(
        &tape.constant(map.clone()),
        &tape.constant(mask.clone()),
        &tape.scalar(ls),
        &tape.scalar(lo),
        &tape.scalar(ll),
        &w,
    )
    .unwrap();
    let masked = map.data().iter().zip(mask.data()).map(|(a, b)| a * b).sum::<f64>() / 42.0;
    let expect = masked + w.smoothness * ls + w.ortho * lo + w.lambda * ll;
    assert!((t.total.item() - expect).abs() < 1e-14);
    assert!((t.photometric.item() - masked).abs() < 1e-14);
}

#[test]
fn master_only_weight_ignores_reference_depth() {
    let r = &mut rng(6);
    let rig = CameraRig::rectified(20.0, 16, 12, 0.54);
    let tape = Tape::new();
    let dm = tape.param(Tensor::uniform(&[12, 16], 3.0, 12.0, r));
    let dr = tape.param(Tensor::uniform(&[12, 16], 3.0, 12.0, r));
    let weights = LossWeights {
        master: 1.0,
        ..LossWeights::default()
    };
    let out = reprojection_loss(
        &tape.constant(Tensor::uniform(&[3, 12, 16], 0.0, 1.0, r)),
        &tape.constant(Tensor::uniform(&[3, 12, 16], 0.0, 1.0, r)),
        &dm,
        &dr,
        &rig,
        &weights,
    )
    .unwrap();
    let g = out.loss.backward().unwrap();
    assert!(g.get(&dr).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(g.get(&dm).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn losses_are_nonnegative() {
    let r = &mut rng(7);
    let tape = Tape::new();
    for _ in 0..10 {
        let x = tape.constant(Tensor::uniform(&[3, 6, 6], 0.0, 1.0, r));
        let y = tape.constant(Tensor::uniform(&[3, 6, 6], 0.0, 1.0, r));
        assert!(photometric_error(&x, &y, 0.85)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v >= 0.0));
        let d = tape.constant(Tensor::uniform(&[6, 6], 1.0, 30.0, r));
        assert!(smoothness_loss(&d, &x).unwrap().item() >= 0.0);
        let u = tape.constant(Tensor::randn(&[5, 5], 1.0, r));
        assert!(ortho_reg(&u).unwrap().item() >= 0.0);
        let s = tape.constant(Tensor::randn(&[2, 5], 1.0, r));
        assert!(lambda_reg(&s).unwrap().item() >= 0.0);
    }
}

#[test]
fn fifty_orthogonality_steps_shrink_the_defect_hundredfold() {
    for seed in 0..3 {
        let r = &mut rng(seed);
        let q = random_orthogonal(16, r);
        let u = q
            .zip_map(&Tensor::randn(&[16, 16], 1.0, r), |a, n| a * (1.0 + 0.05 * n))
            .unwrap();
        let before = ortho_defect(&u).unwrap();
        let after = ortho_defect(&orthogonality_descent(u, 50).unwrap()).unwrap();
        assert!(before / after >= 100.0, "seed {seed}: {before} → {after}");
    }
}
