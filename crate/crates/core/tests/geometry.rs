use chit_core::geometry::{
    bilinear_sample, fronto_parallel_scene, make_scene, project_coords, two_plane_scene, warp, SceneConfig,
};
use chit_core::losses::{photometric_error, reprojection_loss_masked, LossWeights};
use chit_core::{Tape, Tensor};

fn mean_abs_masked(a: &Tensor, b: &Tensor, mask: &Tensor) -> f64 {
    let (c, plane) = (a.shape()[0], mask.numel());
    let mut sum = 0.0;
    let mut n = 0.0;
    for ci in 0..c {
        for i in 0..plane {
            if mask.data()[i] > 0.0 {
                sum += (a.data()[ci * plane + i] - b.data()[ci * plane + i]).abs();
                n += 1.0;
            }
        }
    }
    sum / n
}

#[test]
fn fronto_plane_warp_reproduces_left() {
    let cfg = SceneConfig::default();
    let scene = fronto_parallel_scene(3, &cfg, 6.0).unwrap();
    let tape = Tape::new();
    let right = tape.constant(scene.right.clone());
    let depth = tape.constant(scene.depth_left.clone());
    let (warped, valid) = warp(&right, &depth, &scene.rig).unwrap();
    let err = mean_abs_masked(warped.value(), &scene.left, &valid);
    assert!(err < 1e-3, "mean abs error {err}");
}

#[test]
fn ground_truth_depth_minimizes_reprojection() {
    let cfg = SceneConfig::default();
    for seed in 0..3 {
        let scene = make_scene(seed, &cfg).unwrap();
        let tape = Tape::new();
        let l = tape.constant(scene.left.clone());
        let r = tape.constant(scene.right.clone());
        let visible_l = scene.interior_visible_left();
        let visible_r = scene.interior_visible_right();
        let eval = |scale: f64| {
            let dl = tape.constant(scene.depth_left.map(|d| d * scale));
            let dr = tape.constant(scene.depth_right.map(|d| d * scale));
            let masks = (&visible_l, &visible_r);
            reprojection_loss_masked(&l, &r, &dl, &dr, &scene.rig, &LossWeights::default(), Some(masks))
                .unwrap()
                .loss
                .item()
        };
        let base = eval(1.0);
        assert!(base < 0.01, "seed {seed}: {base}");
        for s in [0.9, 1.1, 2.0] {
            assert!(eval(s) > base, "seed {seed} scale {s}");
        }
    }
}

#[test]
fn occlusion_band_width_matches_disparity_difference() {
    let cfg = SceneConfig::default();
    let (z_near, z_far) = (4.0, 16.0);
    let edge = 30.0;
    let scene = two_plane_scene(1, &cfg, z_near, z_far, edge).unwrap();
    let expected = cfg.focal * cfg.baseline * (1.0 / z_near - 1.0 / z_far);
    for row in [5, 32, 60] {
        let occluded = (10..cfg.width)
            .filter(|&x| scene.visible_left.at(&[row, x]) == 0.0)
            .count() as f64;
        assert!(
            (occluded - expected).abs() <= 1.0,
            "row {row}: {occluded} vs {expected}"
        );
    }
}

#[test]
fn validity_mask_marks_out_of_range_columns() {
    let tape = Tape::new();
    let src = tape.constant(Tensor::ones(&[1, 3, 5]));
    let cols = tape.constant(Tensor::new(&[1, 5], vec![-0.5, 0.0, 2.3, 4.0, 4.01]).unwrap());
    let rows = tape.constant(Tensor::zeros(&[1, 5]));
    let (_, mask) = bilinear_sample(&src, &cols, &rows).unwrap();
    assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn disparity_law_random() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let f = rng.random_range(20.0..500.0);
        let b = rng.random_range(0.05..1.0);
        let z = rng.random_range(1.0..100.0);
        let rig = chit_core::geometry::CameraRig::rectified(f, 9, 7, b);
        let tape = Tape::new();
        let (cols, rows) = project_coords(&tape.constant(Tensor::full(&[7, 9], z)), &rig).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert!((x as f64 - cols.value().at(&[y, x]) - f * b / z).abs() < 1e-9);
                assert!((rows.value().at(&[y, x]) - y as f64).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn photometric_error_zero_on_identical() {
    let cfg = SceneConfig::default();
    let scene = make_scene(4, &cfg).unwrap();
    let tape = Tape::new();
    let l = tape.constant(scene.left);
    let pe = photometric_error(&l, &l, 0.85).unwrap();
    assert!(pe.value().data().iter().all(|v| v.abs() < 1e-12));
}
