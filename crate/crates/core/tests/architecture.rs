use std::time::Instant;

use chit_core::architecture::{rectify, ChiT, ForwardOptions, HookScale, ModelConfig, Reassemble};
use chit_core::attention::{Grid, TokenState};
use chit_core::geometry::{make_scene, SceneConfig};
use chit_core::gradcheck::{finite_diff_at, relative_error};
use chit_core::nn::{Builder, Mlp, ParamStore};
use chit_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        dim: 16,
        mlp_hidden: 32,
        features: 8,
        ..ModelConfig::toy()
    }
}

/// Fresh model with every parameter nudged, so the zero-initialized depth
/// head passes gradient and the output depends on the input.
fn jittered(cfg: ModelConfig, seed: u64) -> ChiT {
    let mut model = ChiT::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let v = model.params.get(id);
        let noisy = v
            .zip_map(&Tensor::randn(v.shape(), 0.05, &mut rng), |a, b| a + b)
            .unwrap();
        model.params.set(id, noisy).unwrap();
    }
    model
}

fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
    Tensor::uniform(
        &[3, cfg.height, cfg.width],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[test]
fn reference_path_ignores_the_master_image() {
    let cfg = small();
    let model = jittered(cfg.clone(), 1);
    let right = image(&cfg, 2);
    let run = |left: Tensor| {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let out = model
            .forward(
                &p,
                &tape.constant(left),
                &tape.constant(right.clone()),
                &ForwardOptions::training(),
            )
            .unwrap();
        let tokens: Vec<Tensor> = out.reference_tokens.iter().map(|t| t.value().clone()).collect();
        (
            tokens,
            out.depth_reference.unwrap().value().clone(),
            out.depth_master.value().clone(),
        )
    };
    let (ta, da, ma) = run(image(&cfg, 3));
    let (tb, db, mb) = run(image(&cfg, 4));
    assert_eq!(ta, tb);
    assert_eq!(da, db);
    assert_ne!(ma, mb, "the master depth must depend on the master image");
}

#[test]
fn shared_embedder_maps_identical_views_identically() {
    let cfg = small();
    let model = jittered(cfg.clone(), 5);
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let img = image(&cfg, 6);
    let a = model
        .layout
        .embedder
        .forward(&p, &tape.constant(img.clone()), cfg.patch)
        .unwrap();
    let b = model
        .layout
        .embedder
        .forward(&p, &tape.constant(img), cfg.patch)
        .unwrap();
    assert_eq!(a.tokens.tokens.shape(), [17, 16]);
    assert_eq!(a.tokens.tokens.value(), b.tokens.tokens.value());
}

#[test]
fn depth_stays_in_range_for_random_inputs() {
    let cfg = small();
    for seed in 0..4 {
        let model = jittered(cfg.clone(), seed);
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let out = model
            .forward(
                &p,
                &tape.constant(image(&cfg, 10 + seed).map(|v| 4.0 * v - 1.5)),
                &tape.constant(image(&cfg, 20 + seed)),
                &ForwardOptions::training(),
            )
            .unwrap();
        for d in [&out.depth_master, out.depth_reference.as_ref().unwrap()] {
            assert_eq!(d.shape(), [cfg.height, cfg.width]);
            assert!(d
                .value()
                .data()
                .iter()
                .all(|&z| (cfg.depth_min..=cfg.depth_max).contains(&z)));
        }
    }
}

#[test]
fn identical_views_retrieve_confidently() {
    let cfg = ModelConfig::toy();
    let model = ChiT::new(cfg.clone(), 0).unwrap();
    let scene_cfg = SceneConfig::default();
    let left = make_scene(1, &scene_cfg).unwrap().left;
    let other = make_scene(2, &scene_cfg).unwrap().left;
    let mean_heat = |right: &Tensor| {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let out = model
            .forward(
                &p,
                &tape.constant(left.clone()),
                &tape.constant(right.clone()),
                &ForwardOptions::inference(),
            )
            .unwrap();
        assert!(out.depth_master.value().all_finite());
        let h = out.heat_last.value().data();
        h[1..].iter().sum::<f64>() / (h.len() - 1) as f64
    };
    let same = mean_heat(&left);
    let unrelated = mean_heat(&other);
    assert!(
        same > unrelated,
        "identical views heat {same:.4}, unrelated {unrelated:.4}"
    );
}

#[test]
fn right_pixel_jacobian_matches_finite_differences() {
    let cfg = ModelConfig::toy();
    let model = jittered(cfg.clone(), 7);
    let left = image(&cfg, 8);
    let right = image(&cfg, 9);
    let mean_depth = |r: &Tensor| {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let out = model.forward(
            &p,
            &tape.constant(left.clone()),
            &tape.constant(r.clone()),
            &ForwardOptions::inference(),
        )?;
        Ok(out.depth_master.mean().item())
    };
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let rv = tape.param(right.clone());
    let out = model
        .forward(&p, &tape.constant(left.clone()), &rv, &ForwardOptions::inference())
        .unwrap();
    let g = out.depth_master.mean().backward().unwrap().get(&rv).unwrap().clone();

    let (h, w) = (cfg.height, cfg.width);
    let pixels = [(0, 20, 31), (1, 40, 7), (2, 5, 58)];
    let idx: Vec<usize> = pixels.iter().map(|&(c, y, x)| (c * h + y) * w + x).collect();
    let fd = finite_diff_at(mean_depth, &right, 1e-5, &idx).unwrap();
    let tape_vals: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
    assert!(tape_vals.iter().any(|v| v.abs() > 0.0));
    let err = relative_error(&tape_vals, &fd);
    assert!(err < 1e-3, "tape {tape_vals:?} vs fd {fd:?}: {err:.3e}");
}

#[test]
fn every_hook_level_receives_gradient() {
    let cfg = small();
    let model = jittered(cfg.clone(), 11);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model
        .forward(
            &p,
            &tape.constant(image(&cfg, 12)),
            &tape.constant(image(&cfg, 13)),
            &ForwardOptions::inference(),
        )
        .unwrap();
    let grads = out.depth_master.mean().backward().unwrap();
    let reaches = |prefix: &str| {
        model.params.iter().any(|(id, name, _)| {
            name.starts_with(prefix) && grads.get(p.var(id)).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
        })
    };
    for k in 0..cfg.attention_hooks.len() {
        assert!(reaches(&format!("reassemble{k}.")), "attention hook {k}");
    }
    for k in 0..cfg.embedder_hooks.len() {
        assert!(reaches(&format!("stage_proj{k}.")), "embedder hook {k}");
    }
    assert!(reaches("embedder.stage0.") && reaches("embedder.stage1.") && reaches("embedder.stage2."));
}

#[test]
fn embedder_gradient_matches_finite_differences() {
    let cfg = small();
    let model = jittered(cfg.clone(), 14);
    let (left, right) = (image(&cfg, 15), image(&cfg, 16));
    let id = model.params.find("embedder.stage0.weight").unwrap();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model
        .forward(
            &p,
            &tape.constant(left.clone()),
            &tape.constant(right.clone()),
            &ForwardOptions::inference(),
        )
        .unwrap();
    let g = out
        .depth_master
        .mean()
        .backward()
        .unwrap()
        .get(p.var(id))
        .unwrap()
        .clone();
    let idx = [0, 7, 19, 40, 63];
    let fd = finite_diff_at(
        |t| {
            let mut store = model.params.clone();
            store.set(id, t.clone())?;
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            let out = model.forward(
                &p,
                &tape.constant(left.clone()),
                &tape.constant(right.clone()),
                &ForwardOptions::inference(),
            )?;
            Ok(out.depth_master.mean().item())
        },
        model.params.get(id),
        1e-5,
        &idx,
    )
    .unwrap();
    let tape_vals: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
    assert!(relative_error(&tape_vals, &fd) < 1e-4);
}

#[test]
fn toy_forward_and_backward_is_fast() {
    let cfg = ModelConfig::toy();
    let model = ChiT::new(cfg.clone(), 0).unwrap();
    let (left, right) = (image(&cfg, 1), image(&cfg, 2));
    let start = Instant::now();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model
        .forward(
            &p,
            &tape.constant(left),
            &tape.constant(right),
            &ForwardOptions::training(),
        )
        .unwrap();
    let loss = out
        .depth_master
        .mean()
        .add(&out.depth_reference.unwrap().mean())
        .unwrap();
    loss.backward().unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "forward+backward took {secs:.2} s");
}

#[test]
fn rectification_update_matches_dense_recomputation() {
    let (n, d, hidden) = (5, 6, 9);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mlp = Mlp::new(&mut Builder::new(&mut store, &mut rng), "blend", 2 * d, hidden, d);
    let t = Tensor::randn(&[n, d], 1.0, &mut rng);
    let r = Tensor::randn(&[n, d], 1.0, &mut rng);
    let mut heat = Tensor::uniform(&[n, 1], 0.0, 1.0, &mut rng);
    heat.set(&[0, 0], 1.0);

    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let state = TokenState::new(tape.constant(t.clone()), Grid::new(2, 2)).unwrap();
    let out = rectify(
        &p,
        &mlp,
        &state,
        &tape.constant(r.clone()),
        &tape.constant(heat.clone()),
    )
    .unwrap();

    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let (w1, b1) = (store.get(mlp.fc1.weight), store.get(mlp.fc1.bias));
    let (w2, b2) = (store.get(mlp.fc2.weight), store.get(mlp.fc2.bias));
    for i in 0..n {
        let input: Vec<f64> = (0..d)
            .map(|k| t.at(&[i, k]))
            .chain((0..d).map(|k| r.at(&[i, k])))
            .collect();
        let hid: Vec<f64> = (0..hidden)
            .map(|j| gelu(b1.data()[j] + (0..2 * d).map(|k| input[k] * w1.at(&[k, j])).sum::<f64>()))
            .collect();
        for k in 0..d {
            let m = b2.data()[k] + (0..hidden).map(|j| hid[j] * w2.at(&[j, k])).sum::<f64>();
            let delta = out.tokens.value().at(&[i, k]) - t.at(&[i, k]);
            assert!((delta - heat.at(&[i, 0]) * m).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_tokens_reassemble_to_a_constant_map() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let layers: Vec<Reassemble> = [HookScale::One, HookScale::Two]
        .into_iter()
        .enumerate()
        .map(|(k, s)| Reassemble::new(&mut Builder::new(&mut store, &mut rng), &format!("r{k}"), 8, 4, s))
        .collect();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let tokens = Tensor::new(&[17, 8], row.data().repeat(17)).unwrap();
    let x = TokenState::new(tape.constant(tokens), Grid::new(4, 4)).unwrap();

    let one = layers[0].forward(&p, &x).unwrap();
    assert_eq!(one.shape(), [4, 4, 4]);
    for plane in one.value().data().chunks(16) {
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
    // a 2×2 stride-2 transposed conv tiles one 2×2 pattern over the map
    let two = layers[1].forward(&p, &x).unwrap();
    assert_eq!(two.shape(), [4, 8, 8]);
    let v = two.value();
    for c in 0..4 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(v.at(&[c, y, x]), v.at(&[c, y % 2, x % 2]));
            }
        }
    }
}
