//! Optimizer, training loop, checkpoints and evaluation metrics.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::architecture::{ChiT, ForwardOptions, HookScale, ModelConfig};
use crate::attention::{EpipolarMode, HeatConfig};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{make_scene, SceneConfig, SyntheticScene};
use crate::io::{format_kv, parse_kv, Checkpoint, KvReader, StoredScene};
use crate::losses::{heat_mask, lambda_reg, ortho_reg, reprojection_loss, smoothness_loss, total_loss, LossWeights};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter; `lr` gives the rate per group. With
    /// `quantize`, parameters and moments are rounded to f32 afterwards.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &[Tensor],
        lr: impl Fn(ParamGroup) -> f64,
        quantize: bool,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rate = lr(params.group(id));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = p.clone();
            for (((pv, mv), vv), &gv) in next
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= rate * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                if quantize {
                    *mv = *mv as f32 as f64;
                    *vv = *vv as f32 as f64;
                    *pv = *pv as f32 as f64;
                }
            }
            params.set(id, next)?;
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub weights: LossWeights,
    /// Overrides the grid-derived heat settings.
    pub heat: Option<HeatConfig>,
    pub steps: usize,
    pub batch_size: usize,
    /// Number of distinct training scenes.
    pub scenes: usize,
    pub lr_main: f64,
    pub lr_embedder: f64,
    /// Fraction of training after which both rates drop ×0.1.
    pub decay_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// The desk-scale experiment: 500 steps on 8 scenes.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        let scene = SceneConfig {
            width: model.width,
            height: model.height,
            limits: (model.depth_min, model.depth_max),
            ..SceneConfig::default()
        };
        Self {
            model,
            scene,
            weights: LossWeights::default(),
            heat: None,
            steps: 500,
            batch_size: 2,
            scenes: 8,
            // 3× the full-scale rates, same 10:1 split: 500 steps is far
            // shorter than a 30-epoch schedule.
            lr_main: 3e-4,
            lr_embedder: 3e-5,
            decay_fraction: 2.0 / 3.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.scene.width != self.model.width || self.scene.height != self.model.height {
            return Err(Error::Config("scene size must match the model input size".into()));
        }
        if self.scene.limits != (self.model.depth_min, self.model.depth_max) {
            return Err(Error::Config(
                "scene depth limits must equal the model depth range".into(),
            ));
        }
        if !(self.lr_main > 0.0 && self.lr_embedder > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::Config("decay_fraction must lie in [0, 1]".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.scenes == 0 {
            return Err(Error::Config("steps, batch_size and scenes must be positive".into()));
        }
        if let Some(h) = self.heat {
            if !(h.temperature > 0.0 && h.eps > 0.0) {
                return Err(Error::Config("heat temperature and eps must be positive".into()));
            }
        }
        Ok(())
    }

    /// Steps per pass over the scene set.
    pub fn steps_per_epoch(&self) -> usize {
        self.scenes.div_ceil(self.batch_size)
    }

    pub fn decay_step(&self) -> usize {
        (self.steps as f64 * self.decay_fraction).ceil() as usize
    }

    pub fn learning_rate(&self, group: ParamGroup, step: usize) -> f64 {
        let base = match group {
            ParamGroup::Embedder => self.lr_embedder,
            ParamGroup::Main => self.lr_main,
        };
        if step >= self.decay_step() {
            base * 0.1
        } else {
            base
        }
    }

    pub fn heat_config(&self) -> HeatConfig {
        self.heat.unwrap_or_else(|| self.model.heat_config())
    }

    /// Parses a flat `key=value` config. Starts from the preset named by
    /// `preset` (default `toy`); unknown keys are rejected.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut r = KvReader::new(parse_kv(text)?);
        let mut cfg = Self::toy();
        match r.take_str("preset").as_deref() {
            None | Some("toy") => {}
            Some("chit8") => {
                cfg.model = ModelConfig::chit8();
                cfg.scene.width = cfg.model.width;
                cfg.scene.height = cfg.model.height;
            }
            Some(other) => return Err(Error::Config(format!("unknown preset {other:?}"))),
        }
        let m = &mut cfg.model;
        r.set("model.height", &mut m.height)?;
        r.set("model.width", &mut m.width)?;
        r.set("model.patch", &mut m.patch)?;
        r.set("model.dim", &mut m.dim)?;
        r.set("model.sa_layers", &mut m.sa_layers)?;
        r.set("model.dcr_blocks", &mut m.dcr_blocks)?;
        r.set("model.heads", &mut m.heads)?;
        r.set("model.mlp_hidden", &mut m.mlp_hidden)?;
        r.set_list("model.attention_hooks", &mut m.attention_hooks)?;
        r.set_list("model.embedder_hooks", &mut m.embedder_hooks)?;
        if let Some(s) = r.take_str("model.hook_scales") {
            m.hook_scales = s.split(',').map(HookScale::parse).collect::<Result<_>>()?;
        }
        r.set("model.features", &mut m.features)?;
        r.set("model.depth_min", &mut m.depth_min)?;
        r.set("model.depth_max", &mut m.depth_max)?;
        if let Some(s) = r.take_str("model.epipolar") {
            m.epipolar = EpipolarMode::parse(&s)?;
        }
        let s = &mut cfg.scene;
        s.width = cfg.model.width;
        s.height = cfg.model.height;
        s.limits = (cfg.model.depth_min, cfg.model.depth_max);
        r.set("scene.focal", &mut s.focal)?;
        r.set("scene.baseline", &mut s.baseline)?;
        r.set("scene.depth_near", &mut s.depth_near)?;
        r.set("scene.depth_far", &mut s.depth_far)?;
        r.set("scene.planes", &mut s.planes)?;
        r.set("scene.texture_cell", &mut s.texture_cell)?;
        let w = &mut cfg.weights;
        r.set("loss.master", &mut w.master)?;
        r.set("loss.ssim_mix", &mut w.ssim_mix)?;
        r.set("loss.smoothness", &mut w.smoothness)?;
        r.set("loss.ortho", &mut w.ortho)?;
        r.set("loss.lambda", &mut w.lambda)?;
        let t: Option<f64> = r.take("heat.temperature")?;
        let o: Option<f64> = r.take("heat.offset")?;
        let e: Option<f64> = r.take("heat.eps")?;
        if t.is_some() || o.is_some() || e.is_some() {
            let base = cfg.model.heat_config();
            cfg.heat = Some(HeatConfig {
                temperature: t.unwrap_or(base.temperature),
                offset: o.unwrap_or(base.offset),
                eps: e.unwrap_or(base.eps),
            });
        }
        r.set("train.steps", &mut cfg.steps)?;
        r.set("train.batch_size", &mut cfg.batch_size)?;
        r.set("train.scenes", &mut cfg.scenes)?;
        r.set("train.lr_main", &mut cfg.lr_main)?;
        r.set("train.lr_embedder", &mut cfg.lr_embedder)?;
        r.set("train.decay_fraction", &mut cfg.decay_fraction)?;
        r.set("train.seed", &mut cfg.seed)?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`TrainConfig::from_kv_text`].
    pub fn to_kv_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let m = &self.model;
        let mut pairs = vec![
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.sa_layers", m.sa_layers.to_string()),
            ("model.dcr_blocks", m.dcr_blocks.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_hidden", m.mlp_hidden.to_string()),
            ("model.attention_hooks", list(&m.attention_hooks)),
            (
                "model.hook_scales",
                m.hook_scales.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("model.embedder_hooks", list(&m.embedder_hooks)),
            ("model.features", m.features.to_string()),
            ("model.depth_min", m.depth_min.to_string()),
            ("model.depth_max", m.depth_max.to_string()),
            ("model.epipolar", m.epipolar.as_str().to_string()),
            ("scene.focal", self.scene.focal.to_string()),
            ("scene.baseline", self.scene.baseline.to_string()),
            ("scene.depth_near", self.scene.depth_near.to_string()),
            ("scene.depth_far", self.scene.depth_far.to_string()),
            ("scene.planes", self.scene.planes.to_string()),
            ("scene.texture_cell", self.scene.texture_cell.to_string()),
            ("loss.master", self.weights.master.to_string()),
            ("loss.ssim_mix", self.weights.ssim_mix.to_string()),
            ("loss.smoothness", self.weights.smoothness.to_string()),
            ("loss.ortho", self.weights.ortho.to_string()),
            ("loss.lambda", self.weights.lambda.to_string()),
        ];
        if let Some(h) = self.heat {
            pairs.push(("heat.temperature", h.temperature.to_string()));
            pairs.push(("heat.offset", h.offset.to_string()));
            pairs.push(("heat.eps", h.eps.to_string()));
        }
        pairs.extend([
            ("train.steps", self.steps.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.scenes", self.scenes.to_string()),
            ("train.lr_main", self.lr_main.to_string()),
            ("train.lr_embedder", self.lr_embedder.to_string()),
            ("train.decay_fraction", self.decay_fraction.to_string()),
            ("train.seed", self.seed.to_string()),
        ]);
        format_kv(pairs)
    }

    /// The training scenes, generated deterministically from the seed.
    pub fn training_scenes(&self) -> Result<Vec<SyntheticScene>> {
        (0..self.scenes)
            .map(|i| make_scene(self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &self.scene))
            .collect()
    }
}

/// Loss components of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Validity-masked photometric reprojection loss.
    pub photometric: f64,
    pub smoothness: f64,
    pub ortho: f64,
    pub lambda: f64,
    pub total: f64,
    /// Mean heat over patch tokens of the last cross-attention layer.
    pub mean_heat: f64,
}

impl StepStats {
    pub fn line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.step, self.photometric, self.smoothness, self.ortho, self.lambda, self.total
        )
    }
}

/// Scalar terms of the objective on one stereo pair.
pub struct PairLoss {
    pub photometric: Var,
    pub smoothness: Var,
    pub ortho: Var,
    pub lambda: Var,
    pub total: Var,
    pub mean_heat: f64,
}

/// Forward pass and objective for one pair on an already bound model.
pub fn pair_loss(
    model: &ChiT,
    p: &crate::nn::Bound,
    scene: &SyntheticScene,
    weights: &LossWeights,
    heat: HeatConfig,
) -> Result<PairLoss> {
    let tape = p.vars()[0].tape();
    let left = tape.constant(scene.left.clone());
    let right = tape.constant(scene.right.clone());
    let opts = ForwardOptions {
        heat: Some(heat),
        ..ForwardOptions::training()
    };
    let out = model.forward(p, &left, &right, &opts)?;
    let depth_ref = out
        .depth_reference
        .as_ref()
        .expect("training forward decodes both views");
    let reproj = reprojection_loss(&left, &right, &out.depth_master, depth_ref, &scene.rig, weights)?;
    let cfg = &model.cfg;
    let mask = heat_mask(&out.heat_last, out.grid, cfg.height, cfg.width)?;
    let smooth = smoothness_loss(&out.depth_master, &left)?
        .add(&smoothness_loss(depth_ref, &right)?)?
        .scale(0.5);
    let mut ortho = tape.scalar(0.0);
    for id in model.bases() {
        ortho = ortho.add(&ortho_reg(&p[id])?)?;
    }
    let mut lambda = tape.scalar(0.0);
    for id in model.spectra() {
        lambda = lambda.add(&lambda_reg(&p[id])?)?;
    }
    let total = total_loss(&reproj.map, &mask, &smooth, &ortho, &lambda, weights)?;
    let n = out.grid.patches();
    let mean_heat = out.heat_last.value().data()[1..].iter().sum::<f64>() / n as f64;
    Ok(PairLoss {
        photometric: reproj.loss,
        smoothness: smooth,
        ortho,
        lambda,
        total: total.total,
        mean_heat,
    })
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ChiT,
    pub adam: Adam,
    pub step: usize,
    scenes: Vec<SyntheticScene>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ChiT::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&model.params);
        let scenes = cfg.training_scenes()?;
        Ok(Self {
            cfg,
            model,
            adam,
            step: 0,
            scenes,
        })
    }

    pub fn scenes(&self) -> &[SyntheticScene] {
        &self.scenes
    }

    /// Scene indices used at `step`; a pure function of seed and step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..self.cfg.batch_size)
            .map(|_| rng.random_range(0..self.scenes.len()))
            .collect()
    }

    /// Runs one optimization step.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let heat = self.cfg.heat_config();
        let batch = self.batch_indices(step);
        let inv = 1.0 / batch.len() as f64;
        let mut stats = StepStats {
            step,
            photometric: 0.0,
            smoothness: 0.0,
            ortho: 0.0,
            lambda: 0.0,
            total: 0.0,
            mean_heat: 0.0,
        };
        let mut loss = tape.scalar(0.0);
        for &i in &batch {
            let l = pair_loss(&self.model, &p, &self.scenes[i], &self.cfg.weights, heat)?;
            stats.photometric += l.photometric.item() * inv;
            stats.smoothness += l.smoothness.item() * inv;
            stats.ortho += l.ortho.item() * inv;
            stats.lambda += l.lambda.item() * inv;
            stats.mean_heat += l.mean_heat * inv;
            loss = loss.add(&l.total.scale(inv))?;
        }
        stats.total = loss.item();
        if !stats.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at step {step}", stats.total)));
        }
        let grads = loss.backward()?;
        let grads = collect_grads(&grads, p.vars())?;
        let cfg = &self.cfg;
        self.adam
            .update(&mut self.model.params, &grads, |g| cfg.learning_rate(g, step), true)?;
        self.step += 1;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = self.cfg.to_kv_text();
        let _ = writeln!(config, "state.step={}", self.step);
        let mut records = Vec::with_capacity(3 * self.model.params.len());
        for (_, name, t) in self.model.params.iter() {
            records.push((name.to_string(), t.clone()));
        }
        for (i, (_, name, _)) in self.model.params.iter().enumerate() {
            records.push((format!("adam.m/{name}"), self.adam.m[i].clone()));
            records.push((format!("adam.v/{name}"), self.adam.v[i].clone()));
        }
        Checkpoint { config, records }
    }

    /// Restores model, optimizer and step counter from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, step) = split_config(&ck.config)?;
        let mut trainer = Self::new(cfg)?;
        load_params(&mut trainer.model.params, ck)?;
        let names: Vec<String> = trainer.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (slot, prefix) in [(&mut trainer.adam.m[i], "adam.m/"), (&mut trainer.adam.v[i], "adam.v/")] {
                let t = ck
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("shape mismatch for {prefix}{name}")));
                }
                *slot = t.clone();
            }
        }
        trainer.adam.step = step as u64;
        trainer.step = step;
        Ok(trainer)
    }

    /// Trains until `cfg.steps`, appending to `out/loss_curve.txt` and
    /// writing `out/checkpoint.chit` after every epoch and at the end.
    pub fn run(&mut self, out: &Path, mut progress: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        std::fs::create_dir_all(out)?;
        let curve_path = out.join("loss_curve.txt");
        let fresh = self.step == 0;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&curve_path)?;
        let mut curve = BufWriter::new(file);
        if fresh {
            writeln!(curve, "# step L_p L_s L_o L_lambda total")?;
        }
        let per_epoch = self.cfg.steps_per_epoch();
        let mut all = Vec::new();
        while self.step < self.cfg.steps {
            let stats = self.train_step()?;
            writeln!(curve, "{}", stats.line())?;
            progress(&stats);
            all.push(stats);
            if self.step.is_multiple_of(per_epoch) || self.step == self.cfg.steps {
                curve.flush()?;
                self.checkpoint().save(&out.join("checkpoint.chit"))?;
            }
        }
        curve.flush()?;
        Ok(all)
    }
}

fn collect_grads(grads: &Gradients, vars: &[Var]) -> Result<Vec<Tensor>> {
    vars.iter()
        .map(|v| {
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::NonFinite("missing parameter gradient".into()))
        })
        .collect()
}

/// Splits a checkpoint config block into the training config and step.
pub fn split_config(text: &str) -> Result<(TrainConfig, usize)> {
    let mut step = 0;
    let mut rest = String::new();
    for line in text.lines() {
        match line.trim().strip_prefix("state.step=") {
            Some(v) => step = v.parse().map_err(|_| Error::Format(format!("invalid step {v:?}")))?,
            None => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    Ok((TrainConfig::from_kv_text(&rest)?, step))
}

/// Copies checkpoint records into matching parameters.
pub fn load_params(params: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let t = ck
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
        params
            .set(id, t.clone())
            .map_err(|_| Error::Format(format!("shape mismatch for {name}")))?;
    }
    Ok(())
}

/// Model rebuilt from a checkpoint, ready for inference.
pub fn load_model(ck: &Checkpoint) -> Result<(ChiT, TrainConfig)> {
    let (cfg, _) = split_config(&ck.config)?;
    let mut model = ChiT::new(cfg.model.clone(), cfg.seed)?;
    load_params(&mut model.params, ck)?;
    Ok((model, cfg))
}

/// Master-view depth prediction for one scene.
pub fn predict(model: &ChiT, left: &Tensor, right: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let out = model.forward(
        &p,
        &tape.constant(left.clone()),
        &tape.constant(right.clone()),
        &ForwardOptions::inference(),
    )?;
    Ok(out.depth_master.value().clone())
}

/// Standard depth-error metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

const METRIC_NAMES: [&str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

impl EvalReport {
    fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn to_table(&self) -> String {
        let header = ["AbsRel", "SqRel", "RMSE", "RMSElog", "d<1.25", "d<1.25^2", "d<1.25^3"];
        let mut s = header.iter().map(|h| format!("{h:>10}")).collect::<String>();
        s.push('\n');
        for v in self.values() {
            let _ = write!(s, "{v:>10.4}");
        }
        s.push('\n');
        s
    }

    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(&str, String)> = METRIC_NAMES
            .iter()
            .zip(self.values())
            .map(|(k, v)| (*k, format!("{v:.9}")))
            .collect();
        pairs.push(("pixels", self.pixels.to_string()));
        format_kv(pairs)
    }
}

/// Accumulates metrics over ground-truth pixels in `(0, cap]`; predictions
/// are clamped to `[floor, cap]`.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sums: [f64; 7],
    count: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, floor: f64, cap: f64) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if !(g > 0.0 && g <= cap) {
                continue;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("prediction".into()));
            }
            let p = p.clamp(floor, cap);
            let diff = g - p;
            let ratio = (g / p).max(p / g);
            let s = &mut self.sums;
            s[0] += diff.abs() / g;
            s[1] += diff * diff / g;
            s[2] += diff * diff;
            s[3] += (g.ln() - p.ln()).powi(2);
            s[4] += (ratio < 1.25) as u8 as f64;
            s[5] += (ratio < 1.25f64.powi(2)) as u8 as f64;
            s[6] += (ratio < 1.25f64.powi(3)) as u8 as f64;
            self.count += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(Error::Config("no ground-truth pixels to evaluate".into()));
        }
        let n = self.count as f64;
        let s = self.sums.map(|v| v / n);
        Ok(EvalReport {
            abs_rel: s[0],
            sq_rel: s[1],
            rmse: s[2].sqrt(),
            rmse_log: s[3].sqrt(),
            delta1: s[4],
            delta2: s[5],
            delta3: s[6],
            pixels: self.count,
        })
    }
}

/// Metrics of `pred` against `gt` with ground truth capped at `cap`.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, cap: f64) -> Result<EvalReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, 1e-3, cap)?;
    acc.report()
}

/// Evaluates a model on scenes with ground truth.
pub fn evaluate(model: &ChiT, scenes: &[SyntheticScene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Config("empty scene set".into()));
    }
    let mut acc = MetricAccumulator::default();
    for s in scenes {
        let pred = predict(model, &s.left, &s.right)?;
        acc.add(&pred, &s.depth_left, model.cfg.depth_min, model.cfg.depth_max)?;
    }
    acc.report()
}

/// Evaluates a model on scenes read from disk.
pub fn evaluate_stored(model: &ChiT, scenes: &[StoredScene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Config("empty scene set".into()));
    }
    let mut acc = MetricAccumulator::default();
    for s in scenes {
        let pred = predict(model, &s.left, &s.right)?;
        acc.add(&pred, &s.depth_left, model.cfg.depth_min, model.cfg.depth_max)?;
    }
    acc.report()
}

/// Writes a loss curve in the format produced by [`Trainer::run`].
pub fn write_loss_curve(path: &Path, stats: &[StepStats]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# step L_p L_s L_o L_lambda total")?;
    for s in stats {
        writeln!(f, "{}", s.line())?;
    }
    f.flush()?;
    Ok(())
}
