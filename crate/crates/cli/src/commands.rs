use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cvf_core::engine::{self, EngineError, Method, RunRecord, SweepCell, TrainConfig, VanillaConfig};
use cvf_core::eval;
use cvf_core::model::ToyModel;
use cvf_core::ncu::{self, LayerResidual, NullSpaceBasis};
use cvf_core::world::{self, World, WorldConfig};

use crate::config::Overrides;
use crate::error::{CliError, Result};
use crate::manifest::{sha256_hex, Artifact, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "cvf", version, about = "Contrastive visual forgetting with null-space constrained adapters on a toy multimodal model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic entity world (NSUW).
    GenWorld(GenWorldArgs),
    /// Train the vanilla model until it memorizes every slice (NSUC).
    Train(TrainArgs),
    /// Unlearn the forget split from a vanilla checkpoint.
    Unlearn(UnlearnArgs),
    /// Build a null-space basis offline (NSUB) and verify it.
    NcuInit(NcuInitArgs),
    /// Unlearn the forget split as a sequence of tasks, carrying B.
    Continual(ContinualArgs),
    /// Grid over loss weights, one static run per cell.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// key=value file; keys are the world config fields (n_entities, forget_fraction, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write a JSON mirror next to the world file.
    #[arg(long)]
    pub dump_json: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key=value file: learning_rate (0.02), momentum (0.9), epochs (200),
    /// batch_size (16), grad_clip_norm (5), init_seed, threshold (0.95 or none).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets both the sampler seed and the initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Unlearning settings; flags override the config file.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// key=value file with any of the flag names below (snake_case).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate [default: 0.05]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Epochs per task [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub batch_forget: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub batch_retain: Option<usize>,
    /// Forgetting weight [default: 30]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Retention weight [default: 1]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Push weight inside the forgetting term [default: 1]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Similarity temperature [default: 0.1]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Adapter rank [default: 8]
    #[arg(long)]
    pub r: Option<usize>,
    /// Negative queue capacity [default: 256]
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    /// forget | retain [default: retain]
    #[arg(long)]
    pub queue_source: Option<String>,
    /// Global gradient-norm clip [default: 5]
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Clip used by the nmse method [default: 0.5]
    #[arg(long)]
    pub nmse_grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct UnlearnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    /// cvf-ncu | cvf-random | cvf-only | nmse | ga
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
    /// Precomputed basis; built inline when a null-space method needs one.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct NcuInitArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub r: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the calibration subsample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ContinualArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub tasks: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cvf-ncu")]
    pub method: Method,
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    /// e.g. "alpha=0,0.5,1;beta=0,0.5,1"; keys alpha, beta, lambda.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cvf-ncu")]
    pub method: Method,
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

/// `<path><suffix>`, e.g. `model.nsuc` → `model.nsuc.record.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct Run {
    manifest: RunManifest,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &str, args: &[String], seed: u64, config: serde_json::Value) -> Self {
        Self {
            manifest: RunManifest::new(command, args.to_vec(), seed, config),
            inputs: Vec::new(),
        }
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
        self.manifest.inputs.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        self.inputs.push(std::fs::canonicalize(path).map_err(|e| CliError::input(path, e))?);
        Ok(bytes)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Ok(canon) = std::fs::canonicalize(path) {
            if self.inputs.contains(&canon) {
                return Err(CliError::Config(format!("refusing to overwrite input file {}", path.display())));
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CliError::output(path, e))?;
        self.manifest.output(path, bytes);
        Ok(())
    }

    fn finish(self, path: &Path) -> Result<()> {
        let json = self.manifest.to_json();
        std::fs::write(path, json).map_err(|e| CliError::output(path, e))
    }

    fn world(&mut self, path: &Path) -> Result<World> {
        let bytes = self.read(path)?;
        World::from_bytes(&bytes).map_err(|e| CliError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn model(&mut self, path: &Path) -> Result<ToyModel> {
        let bytes = self.read(path)?;
        ToyModel::from_bytes(&bytes).map_err(|e| CliError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn basis(&mut self, path: &Path) -> Result<NullSpaceBasis> {
        let bytes = self.read(path)?;
        NullSpaceBasis::from_bytes(&bytes).map_err(|e| CliError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn load_overrides(path: Option<&Path>) -> Result<Overrides> {
    path.map(Overrides::load).transpose().map(Option::unwrap_or_default)
}

fn resolve_train(flags: &TrainFlags, method: Method) -> Result<TrainConfig> {
    let mut o = Overrides::default();
    o.set("method", method.name());
    o.set_opt("seed", flags.seed);
    o.set_opt("learning_rate", flags.lr);
    o.set_opt("momentum", flags.momentum);
    o.set_opt("epochs", flags.epochs);
    o.set_opt("batch_size_forget", flags.batch_forget);
    o.set_opt("batch_size_retain", flags.batch_retain);
    o.set_opt("alpha", flags.alpha);
    o.set_opt("beta", flags.beta);
    o.set_opt("lambda", flags.lambda);
    o.set_opt("tau", flags.tau);
    o.set_opt("r", flags.r);
    o.set_opt("queue_capacity", flags.queue_capacity);
    o.set_opt("queue_source", flags.queue_source.as_ref());
    o.set_opt("grad_clip_norm", flags.grad_clip);
    o.set_opt("nmse_grad_clip_norm", flags.nmse_grad_clip);
    let mut cfg = TrainConfig::default();
    load_overrides(flags.config.as_deref())?.merged(&o).apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `--basis` or builds one when the method needs it.
fn obtain_basis(run: &mut Run, path: Option<&Path>, model: &ToyModel, world: &World, cfg: &TrainConfig) -> Result<Option<NullSpaceBasis>> {
    if !cfg.method.needs_basis() {
        return Ok(None);
    }
    let basis = match path {
        Some(p) => run.basis(p)?,
        None => engine::build_ncu_basis(model, world, cfg.r, cfg.seed)?.1,
    };
    if basis.r != cfg.r {
        return Err(CliError::Config(format!("basis has r = {} but the run uses r = {}", basis.r, cfg.r)));
    }
    Ok(Some(basis))
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    step: usize,
    breakdown: &'a cvf_core::losses::LossBreakdown,
}

/// Writes a step dump for a non-finite abort and wraps the error.
fn trap_non_finite<T>(r: std::result::Result<T, EngineError>, out: &Path) -> Result<T> {
    match r {
        Err(e @ EngineError::NonFinite { .. }) => {
            let EngineError::NonFinite { epoch, step, breakdown } = &e else { unreachable!() };
            let dump = sidecar(out, ".nan.json");
            let body = serde_json::to_string_pretty(&NonFiniteDump {
                epoch: *epoch,
                step: *step,
                breakdown,
            })
            .expect("dump serializes");
            std::fs::write(&dump, body).map_err(|err| CliError::output(&dump, err))?;
            Err(CliError::NonFinite { source: e, dump })
        }
        other => Ok(other?),
    }
}

pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    match cli.command {
        Command::GenWorld(a) => gen_world(a, args),
        Command::Train(a) => train(a, args),
        Command::Unlearn(a) => unlearn(a, args),
        Command::NcuInit(a) => ncu_init(a, args),
        Command::Continual(a) => continual(a, args),
        Command::Sweep(a) => sweep(a, args),
    }
}

fn gen_world(a: GenWorldArgs, args: &[String]) -> Result<()> {
    let mut o = Overrides::default();
    o.set_opt("seed", a.seed);
    let mut cfg = WorldConfig::default();
    let file = load_overrides(a.config.as_deref())?;
    file.merged(&o).apply(&mut cfg)?;
    cfg.validate()?;
    let world = world::generate_world(&cfg)?;
    let mut run = Run::new("gen-world", args, cfg.seed, json(&cfg));
    if let Some(c) = &a.config {
        run.read(c)?;
    }
    run.write(&a.out, &world.to_bytes())?;
    if a.dump_json {
        let mirror = serde_json::to_string(&world).expect("world serializes");
        run.write(&sidecar(&a.out, ".json"), mirror.as_bytes())?;
    }
    run.finish(&sidecar(&a.out, ".manifest.json"))
}

#[derive(Serialize)]
struct FailedTraining<'a> {
    error: String,
    report: &'a eval::MetricsReport,
    loss_curve: &'a [f64],
}

fn train(a: TrainArgs, args: &[String]) -> Result<()> {
    let mut o = Overrides::default();
    o.set_opt("seed", a.seed);
    o.set_opt("init_seed", a.seed);
    let mut cfg = VanillaConfig::default();
    load_overrides(a.config.as_deref())?.merged(&o).apply(&mut cfg)?;
    let mut run = Run::new("train", args, cfg.seed, json(&cfg));
    if let Some(c) = &a.config {
        run.read(c)?;
    }
    let world = run.world(&a.world)?;
    let (model, record) = match engine::train_vanilla(&world, &cfg) {
        Err(e @ EngineError::Memorization { .. }) => {
            if let EngineError::Memorization { report, loss_curve, .. } = &e {
                let body = FailedTraining {
                    error: e.to_string(),
                    report,
                    loss_curve,
                };
                let path = sidecar(&a.out, ".failed.json");
                let text = serde_json::to_string_pretty(&body).expect("report serializes");
                std::fs::write(&path, text).map_err(|err| CliError::output(&path, err))?;
            }
            return Err(e.into());
        }
        other => trap_non_finite(other, &a.out)?,
    };
    run.write(&a.out, &model.to_bytes())?;
    run.write(&sidecar(&a.out, ".record.json"), record.to_json().as_bytes())?;
    run.finish(&sidecar(&a.out, ".manifest.json"))
}

fn write_record(run: &mut Run, out: &Path, record: &RunRecord) -> Result<()> {
    run.write(&sidecar(out, ".record.json"), record.to_json().as_bytes())?;
    if let Some(before) = &record.before {
        run.write(&sidecar(out, ".before.json"), before.to_json().as_bytes())?;
    }
    if let Some(after) = record.last_report() {
        run.write(&sidecar(out, ".after.json"), after.to_json().as_bytes())?;
    }
    Ok(())
}

fn unlearn(a: UnlearnArgs, args: &[String]) -> Result<()> {
    let cfg = resolve_train(&a.train, a.method)?;
    let mut run = Run::new("unlearn", args, cfg.seed, json(&cfg));
    if let Some(c) = &a.train.config {
        run.read(c)?;
    }
    let checkpoint = run.model(&a.ckpt)?;
    let world = run.world(&a.world)?;
    let basis = obtain_basis(&mut run, a.basis.as_deref(), &checkpoint, &world, &cfg)?;
    let (model, record) = trap_non_finite(engine::unlearn_static(&checkpoint, &world, &cfg, basis.as_ref()), &a.out)?;
    run.write(&a.out, &model.to_bytes())?;
    write_record(&mut run, &a.out, &record)?;
    run.finish(&sidecar(&a.out, ".manifest.json"))
}

#[derive(Serialize)]
struct VerifyReport {
    r: usize,
    layers: Vec<LayerResidual>,
}

fn ncu_init(a: NcuInitArgs, args: &[String]) -> Result<()> {
    let mut run = Run::new("ncu-init", args, a.seed, serde_json::json!({ "r": a.r, "seed": a.seed }));
    let checkpoint = run.model(&a.ckpt)?;
    let world = run.world(&a.world)?;
    let (dump, basis) = engine::build_ncu_basis(&checkpoint, &world, a.r, a.seed)?;
    let mut adapted = checkpoint.clone();
    ncu::init_lora_ncu(&mut adapted, &basis)?;
    let report = VerifyReport {
        r: a.r,
        layers: ncu::verify_nullspace(&adapted, &dump)?,
    };
    run.write(&a.out, &basis.to_bytes()?)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    run.write(&sidecar(&a.out, ".verify.json"), text.as_bytes())?;
    run.finish(&sidecar(&a.out, ".manifest.json"))
}

fn continual(a: ContinualArgs, args: &[String]) -> Result<()> {
    let cfg = resolve_train(&a.train, a.method)?;
    let mut run = Run::new("continual", args, cfg.seed, json(&cfg));
    if let Some(c) = &a.train.config {
        run.read(c)?;
    }
    let checkpoint = run.model(&a.ckpt)?;
    let mut world = run.world(&a.world)?;
    if world.continual_tasks.as_ref().map(Vec::len) != Some(a.tasks) {
        world = world::partition_continual(&world, a.tasks, cfg.seed)?;
    }
    let basis = obtain_basis(&mut run, a.basis.as_deref(), &checkpoint, &world, &cfg)?;
    let (stages, record) = trap_non_finite(
        engine::unlearn_continual(&checkpoint, &world, &cfg, basis.as_ref()),
        &a.out.join("record.json"),
    )?;
    for s in &stages {
        run.write(&a.out.join(format!("stage_{}.nsuc", s.metrics.stage)), &s.model.to_bytes())?;
    }
    let metrics: Vec<_> = stages.iter().map(|s| s.metrics.clone()).collect();
    let export = eval::export_continual(&metrics);
    run.write(&a.out.join("record.json"), record.to_json().as_bytes())?;
    run.write(&a.out.join("heatmap.csv"), export.heatmap_csv().as_bytes())?;
    run.write(&a.out.join("curves.csv"), export.curves_csv().as_bytes())?;
    run.finish(&a.out.join("manifest.json"))
}

/// Cartesian product of the grid in key order, duplicates removed.
/// Returns the cells and the number of dropped duplicates.
pub fn parse_grid(grid: &str, base: &TrainConfig) -> Result<(Vec<SweepCell>, usize)> {
    let bad = |m: String| CliError::Config(format!("grid {grid:?}: {m}"));
    let mut axes: Vec<(&str, Vec<f64>)> = Vec::new();
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part.split_once('=').ok_or_else(|| bad(format!("expected key=v1,v2 in {part:?}")))?;
        let key = key.trim();
        if !matches!(key, "alpha" | "beta" | "lambda") {
            return Err(bad(format!("unknown key {key:?}")));
        }
        if axes.iter().any(|(k, _)| *k == key) {
            return Err(bad(format!("key {key:?} given twice")));
        }
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(format!("values of {key:?} must be finite numbers >= 0")))?;
        axes.push((key, values));
    }
    if axes.is_empty() {
        return Err(bad("no axes".into()));
    }
    let w = base.weights;
    let mut cells = vec![SweepCell {
        alpha: w.alpha,
        beta: w.beta,
        lambda: w.lambda,
    }];
    for (key, values) in &axes {
        cells = cells
            .iter()
            .flat_map(|c| {
                values.iter().map(move |&v| {
                    let mut c = *c;
                    match *key {
                        "alpha" => c.alpha = v,
                        "beta" => c.beta = v,
                        _ => c.lambda = v,
                    }
                    c
                })
            })
            .collect();
    }
    let total = cells.len();
    let mut seen = std::collections::HashSet::new();
    cells.retain(|c| seen.insert([c.alpha.to_bits(), c.beta.to_bits(), c.lambda.to_bits()]));
    Ok((cells.clone(), total - cells.len()))
}

fn sweep(a: SweepArgs, args: &[String]) -> Result<()> {
    let cfg = resolve_train(&a.train, a.method)?;
    let (cells, dupes) = parse_grid(&a.grid, &cfg)?;
    if dupes > 0 {
        eprintln!("warning: dropped {dupes} duplicate grid cell(s)");
    }
    let mut run = Run::new("sweep", args, cfg.seed, serde_json::json!({ "base": json(&cfg), "cells": json(&cells) }));
    if let Some(c) = &a.train.config {
        run.read(c)?;
    }
    let checkpoint = run.model(&a.ckpt)?;
    let world = run.world(&a.world)?;
    let basis = obtain_basis(&mut run, a.basis.as_deref(), &checkpoint, &world, &cfg)?;
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cells.len());
    let chunk = cells.len().div_ceil(jobs);
    let rows: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|part| s.spawn(|| engine::sweep(&checkpoint, &world, &cfg, basis.as_ref(), part)))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    run.write(&a.out, engine::sweep_csv(&rows).as_bytes())?;
    run.finish(&sidecar(&a.out, ".manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_product_in_key_order() {
        let base = TrainConfig::default();
        let (cells, dupes) = parse_grid("alpha=0,0.5,1;beta=0,0.5,1", &base).unwrap();
        assert_eq!((cells.len(), dupes), (9, 0));
        assert_eq!((cells[1].alpha, cells[1].beta), (0.0, 0.5));
        assert!(cells.iter().all(|c| c.lambda == base.weights.lambda));
    }

    #[test]
    fn duplicate_cells_are_dropped() {
        let (cells, dupes) = parse_grid("alpha=1,1.0,2", &TrainConfig::default()).unwrap();
        assert_eq!((cells.len(), dupes), (2, 1));
    }

    #[test]
    fn malformed_grids_are_config_errors() {
        for g in ["", "alpha", "gamma=1", "alpha=1;alpha=2", "alpha=x", "alpha=-1", "alpha=1,,2"] {
            assert!(matches!(parse_grid(g, &TrainConfig::default()), Err(CliError::Config(_))), "{g}");
        }
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("a/m.nsuc"), ".record.json"), PathBuf::from("a/m.nsuc.record.json"));
    }
}
