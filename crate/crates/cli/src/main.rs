use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use chit_core::architecture::ForwardOptions;
use chit_core::checks::run_suite;
use chit_core::geometry::{fronto_parallel_scene, make_scene, two_plane_scene, SyntheticScene};
use chit_core::io::{
    format_kv, parse_kv, read_scene_dir, scene_dirs, write_pfm, write_scene_dir, Checkpoint, KvReader,
};
use chit_core::train::{evaluate_stored, load_model, TrainConfig, Trainer};
use chit_core::{Error, Tape, Tensor};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chit", version, about = "Binocular depth from cross-view retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes; writes checkpoint.chit and loss_curve.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.chit`.
        #[arg(long)]
        resume: bool,
        /// Print a progress line every N steps (0 for none).
        #[arg(long, default_value_t = 25)]
        log_every: usize,
    },
    /// Depth metrics of a checkpoint on scene directories.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A scene directory, or a directory of them.
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Finite-difference check of every trainable component.
    GradCheck {
        /// Check this seed only (default: seeds 0, 1, 2).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render synthetic stereo scenes with ground truth.
    RenderSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one head's cross-attention and the heat map of a block as PFM.
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Rectification block index.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Raised when a result is numerically wrong rather than the request.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<NumericalFailure>()
            || matches!(
                e.downcast_ref::<Error>(),
                Some(Error::NonFinite(_) | Error::Domain { .. } | Error::ZeroInput { .. })
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            config,
            out,
            resume,
            log_every,
        } => train(&config, &out, resume, log_every),
        Command::Eval { ckpt, scenes } => eval(&ckpt, &scenes),
        Command::GradCheck { seed } => grad_check(seed),
        Command::RenderSynthetic { config, out } => render(&config, &out),
        Command::InspectAttention {
            ckpt,
            scene,
            layer,
            head,
            out,
        } => inspect(&ckpt, &scene, layer, head, &out),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn train(config: &Path, out: &Path, resume: bool, log_every: usize) -> anyhow::Result<()> {
    let cfg = TrainConfig::from_kv_text(&read_text(config)?).with_context(|| format!("in {}", config.display()))?;
    let ckpt_path = out.join("checkpoint.chit");
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
        let trainer = Trainer::from_checkpoint(&ck)?;
        if trainer.cfg != cfg {
            bail!("{} was written with a different config", ckpt_path.display());
        }
        trainer
    } else {
        Trainer::new(cfg)?
    };
    eprintln!(
        "training {} parameters for {} steps (from step {})",
        trainer.model.params.numel(),
        trainer.cfg.steps,
        trainer.step
    );
    let stats = trainer.run(out, |s| {
        if log_every > 0 && (s.step + 1) % log_every == 0 {
            eprintln!(
                "step {:>5}  L_p {:.5}  L_s {:.5}  total {:.5}  heat {:.4}",
                s.step + 1,
                s.photometric,
                s.smoothness,
                s.total,
                s.mean_heat
            );
        }
    })?;
    if let Some(last) = stats.last() {
        println!(
            "final step {} photometric {:.6} total {:.6}",
            last.step + 1,
            last.photometric,
            last.total
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn eval(ckpt: &Path, scenes: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (model, _) = load_model(&ck)?;
    let dirs = scene_dirs(scenes).with_context(|| format!("listing {}", scenes.display()))?;
    if dirs.is_empty() {
        bail!("no scene directories under {}", scenes.display());
    }
    let stored = dirs
        .iter()
        .map(|d| read_scene_dir(d).with_context(|| format!("reading scene {}", d.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = evaluate_stored(&model, &stored)?;
    println!("{} scenes", stored.len());
    print!("{}", report.to_table());
    print!("{}", report.to_kv());
    Ok(())
}

fn grad_check(seed: Option<u64>) -> anyhow::Result<()> {
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => (0..3).collect(),
    };
    let mut failed = 0;
    let mut total = 0;
    for seed in seeds {
        for check in run_suite(seed)? {
            println!("{}", check.line());
            total += 1;
            failed += usize::from(!check.passed());
        }
    }
    if failed > 0 {
        return Err(NumericalFailure(format!("{failed} of {total} gradient checks failed")).into());
    }
    println!("all {total} gradient checks passed");
    Ok(())
}

/// `render.*` keys select the scene family; the rest is a training config
/// whose model size and scene settings apply.
struct RenderPlan {
    cfg: TrainConfig,
    kind: String,
    seed: u64,
    count: usize,
    depth: f64,
    z_near: f64,
    z_far: f64,
    edge: f64,
}

fn render_plan(text: &str) -> anyhow::Result<RenderPlan> {
    let map = parse_kv(text)?;
    let (render, rest): (Vec<_>, Vec<_>) = map.into_iter().partition(|(k, _)| k.starts_with("render."));
    let cfg = TrainConfig::from_kv_text(&format_kv(rest.iter().map(|(k, v)| (k.as_str(), v.clone()))))?;
    let mut r = KvReader::new(render.into_iter().collect());
    let mut plan = RenderPlan {
        cfg,
        kind: r.take_str("render.kind").unwrap_or_else(|| "random".into()),
        seed: 0,
        count: 1,
        depth: 8.0,
        z_near: 2.5,
        z_far: 30.0,
        edge: 30.0,
    };
    r.set("render.seed", &mut plan.seed)?;
    r.set("render.count", &mut plan.count)?;
    r.set("render.depth", &mut plan.depth)?;
    r.set("render.z_near", &mut plan.z_near)?;
    r.set("render.z_far", &mut plan.z_far)?;
    r.set("render.edge", &mut plan.edge)?;
    r.finish()?;
    if plan.count == 0 {
        bail!("render.count must be positive");
    }
    Ok(plan)
}

fn render(config: &Path, out: &Path) -> anyhow::Result<()> {
    let plan = render_plan(&read_text(config)?).with_context(|| format!("in {}", config.display()))?;
    let scene_cfg = &plan.cfg.scene;
    let make = |seed: u64| -> anyhow::Result<SyntheticScene> {
        Ok(match plan.kind.as_str() {
            "random" => make_scene(seed, scene_cfg)?,
            "fronto" => fronto_parallel_scene(seed, scene_cfg, plan.depth)?,
            "two-plane" => two_plane_scene(seed, scene_cfg, plan.z_near, plan.z_far, plan.edge)?,
            other => bail!("unknown render.kind {other:?} (random, fronto, two-plane)"),
        })
    };
    if plan.count == 1 {
        write_scene_dir(out, &make(plan.seed)?)?;
        println!("wrote {}", out.display());
    } else {
        for i in 0..plan.count {
            let dir = out.join(format!("scene{i:03}"));
            write_scene_dir(&dir, &make(plan.seed + i as u64)?)?;
        }
        println!("wrote {} scenes under {}", plan.count, out.display());
    }
    Ok(())
}

fn inspect(ckpt: &Path, scene: &Path, layer: usize, head: usize, out: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (model, cfg) = load_model(&ck)?;
    let blocks = model.cfg.dcr_blocks;
    if layer >= blocks {
        bail!("layer {layer} out of range: the model has {blocks} rectification blocks");
    }
    if head >= model.cfg.heads {
        bail!("head {head} out of range: the model has {} heads", model.cfg.heads);
    }
    let stored = read_scene_dir(scene).with_context(|| format!("reading scene {}", scene.display()))?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let opts = ForwardOptions {
        record_blocks: vec![layer],
        heat: Some(cfg.heat_config()),
        ..ForwardOptions::inference()
    };
    let fwd = model.forward(&p, &tape.constant(stored.left), &tape.constant(stored.right), &opts)?;
    let record = &fwd.attention[0];
    write_pfm(out, record.heads[head].value())?;

    // patch heat on the token grid; the class token is dropped
    let grid = fwd.grid;
    let heat = Tensor::new(&[grid.rows, grid.cols], record.heat.value().data()[1..].to_vec())?;
    let heat_path = out.with_extension("heat.pfm");
    write_pfm(&heat_path, &heat)?;
    println!("wrote {} and {}", out.display(), heat_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_errors_are_told_apart_from_usage_errors() {
        let nan = anyhow::Error::from(Error::NonFinite("loss NaN at step 3".into())).context("training");
        assert!(is_numerical(&nan));
        assert!(is_numerical(&NumericalFailure("2 checks failed".into()).into()));
        assert!(!is_numerical(&Error::Config("bad key".into()).into()));
        assert!(!is_numerical(&anyhow::anyhow!("missing file")));
    }

    #[test]
    fn render_keys_are_split_from_the_training_config() {
        let plan = render_plan("render.kind=fronto\nrender.depth=12\ntrain.seed=5\nscene.baseline=0.3").unwrap();
        assert_eq!(plan.kind, "fronto");
        assert_eq!(plan.depth, 12.0);
        assert_eq!(plan.cfg.seed, 5);
        assert_eq!(plan.cfg.scene.baseline, 0.3);
        assert!(render_plan("render.colour=red").is_err());
        assert!(render_plan("render.count=0").is_err());
    }
}
