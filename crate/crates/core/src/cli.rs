//! The `htc` command line: phantom generation, target building, training,
//! inference, evaluation and montages. Every run leaves a `manifest.json`
//! with the resolved configuration and SHA-256 hashes of what it wrote.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::atomic_write;
use crate::data_io::{generate_phantom, read_raw_dataset, write_raw_dataset, LabeledSlice, PhantomSpec, RawDataset};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::htc_target::{build_htc_dataset, stage_labels, TargetDistribution};
use crate::metrics::{evaluate_stage, MetricsConfig, StageInputs};
use crate::montage::{montage, MontageCase};
use crate::pipeline::{
    load_stage, run_cascade, run_stage, training_crops, Experiment, StageConfig, StageModels, StagePredictor,
    Strategy, SAMPLE_PANELS,
};

pub const MANIFEST: &str = "manifest.json";

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Unparseable command line.
pub const EXIT_USAGE: i32 = 1;
/// The command parsed but failed.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "htc", version, about = "Attention-guided HTC synthesis and cascaded segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a nested-ellipse phantom dataset.
    Phantom(PhantomArgs),
    /// Build HTC target images from a dataset's labels.
    Targets(TargetsArgs),
    /// Train one stage or the whole cascade from an experiment config.
    Train(TrainArgs),
    /// Run trained stages over a dataset and write the cascade label maps.
    Infer(InferArgs),
    /// Compare predicted label maps (and optionally synthetic images) with ground truth.
    Eval(EvalArgs),
    /// Render input/attention/synthetic/target rows of a training run as a PNG.
    Montage(MontageArgs),
}

#[derive(Debug, Args, Serialize)]
struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of slices.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of nested regions.
    #[arg(long, default_value_t = 1)]
    regions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shared source std of every class; class means are fixed 0.1 apart per region around 0.5.
    #[arg(long, default_value_t = 0.15)]
    overlap: f64,
}

#[derive(Debug, Args, Serialize)]
struct TargetsArgs {
    /// Dataset directory whose labels define the targets.
    #[arg(long)]
    data: PathBuf,
    /// Stage k: the foreground is every label >= k.
    #[arg(long, default_value_t = 1)]
    stage: u8,
    #[arg(long = "mu-f", default_value_t = 0.75)]
    mu_f: f64,
    #[arg(long = "sigma-f", default_value_t = 0.05)]
    sigma_f: f64,
    #[arg(long = "mu-b", default_value_t = 0.25)]
    mu_b: f64,
    #[arg(long = "sigma-b", default_value_t = 0.05)]
    sigma_b: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: DATA/targets_stage{k}].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Train only this stage [default: every stage].
    #[arg(long)]
    stage: Option<usize>,
    /// Override the configured strategy: two-stage or end2end.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Override the configured epochs (the switch epoch is clamped to it).
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the experiment and stage seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Pin report timestamps to SOURCE_DATE_EPOCH (0 when unset) so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct InferArgs {
    /// A stage checkpoint (its directory holds the stage) or a training output directory (every stage, as a cascade).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Output dataset directory; labels hold the cascade label maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Dataset directory of predicted label maps.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory of ground-truth label maps.
    #[arg(long)]
    gt: PathBuf,
    /// Dataset directory of synthetic images (requires --target).
    #[arg(long, requires = "target")]
    synthetic: Option<PathBuf>,
    /// Dataset directory of target images; its labels assign the K-S classes.
    #[arg(long, requires = "synthetic")]
    target: Option<PathBuf>,
    /// Report path; a CSV export is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MontageArgs {
    /// Stage directory of a training run, or the run's output directory.
    #[arg(long)]
    run: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Stage to draw when --run is an output directory.
    #[arg(long, default_value_t = 1)]
    stage: usize,
    /// At most this many rows.
    #[arg(long)]
    cases: Option<usize>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse_cli(s).ok_or_else(|| format!("unknown strategy {s:?} (expected two-stage or end2end)"))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => phantom(&a),
        Command::Targets(a) => targets(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a),
        Command::Montage(a) => montage_cmd(&a),
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: serde_json::Value,
    config: serde_json::Value,
    seed: Option<u64>,
    version: &'static str,
    /// Relative path to lowercase hex SHA-256.
    artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every file under `dir` except manifests and temporaries, sorted.
fn files_under(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, base, out)?;
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == MANIFEST || name.ends_with(".tmp") {
            continue;
        }
        let rel = p.strip_prefix(base).unwrap_or(&p);
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.push((rel, p));
    }
    Ok(())
}

/// Writes `dir/manifest.json` over `files` (every file under `dir` when
/// `None`), with paths relative to `dir`.
fn write_manifest(
    dir: &Path,
    command: &str,
    args: &impl Serialize,
    config: serde_json::Value,
    seed: Option<u64>,
    files: Option<&[&Path]>,
) -> Result<PathBuf> {
    let mut listed = Vec::new();
    match files {
        None => files_under(dir, dir, &mut listed)?,
        Some(fs_) => {
            for p in fs_ {
                let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
                listed.push((rel, p.to_path_buf()));
            }
        }
    }
    let mut artifacts = BTreeMap::new();
    for (rel, p) in listed {
        artifacts.insert(rel, sha256_file(&p)?);
    }
    let m = Manifest {
        command,
        args: serde_json::to_value(args)?,
        config,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        artifacts,
    };
    let path = dir.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&m)?;
    json.push(b'\n');
    atomic_write(&path, &json)?;
    Ok(path)
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec::evenly_spaced(a.n, a.size, a.regions, a.overlap, a.seed);
    let samples = generate_phantom(&spec)?;
    let target_index = samples.iter().map(|s| s.target_index).collect();
    let slices: Vec<LabeledSlice> = samples.into_iter().map(|s| s.source).collect();
    let ds = RawDataset::from_slices(&slices, Some(a.seed), serde_json::to_value(&spec)?, Some(target_index))?;
    write_raw_dataset(&a.out, &ds)?;
    write_manifest(&a.out, "phantom", a, serde_json::to_value(&spec)?, Some(a.seed), None)?;
    eprintln!("wrote {} phantom slices to {}", ds.len(), a.out.display());
    Ok(())
}

fn targets(a: &TargetsArgs) -> Result<()> {
    if a.stage == 0 {
        return Err(Error::Argument("stage indices start at 1".into()));
    }
    let ds = read_raw_dataset(&a.data)?;
    let dist = TargetDistribution::binary(a.mu_f, a.sigma_f, a.mu_b, a.sigma_b);
    let fg: Vec<u8> = (a.stage..=u8::MAX).collect();
    let labels: Vec<LabelMap> = ds.labels.iter().map(|l| stage_labels(l, &fg)).collect();
    let images = build_htc_dataset(&labels, &dist, a.seed)?;
    let slices = images
        .into_iter()
        .zip(labels)
        .map(|(img, lab)| LabeledSlice::new(img, lab, ds.meta.spacing, crate::data_io::Modality::Htc))
        .collect::<Result<Vec<_>>>()?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join(format!("targets_stage{}", a.stage)));
    let config = serde_json::json!({ "stage": a.stage, "target": dist, "seed": a.seed });
    let tds = RawDataset::from_slices(&slices, Some(a.seed), config.clone(), ds.meta.target_index.clone())?;
    write_raw_dataset(&out, &tds)?;
    write_manifest(&out, "targets", a, config, Some(a.seed), None)?;
    eprintln!("wrote {} stage-{} targets to {}", tds.len(), a.stage, out.display());
    Ok(())
}

fn apply_overrides(exp: &mut Experiment, a: &TrainArgs) {
    if let Some(seed) = a.seed {
        exp.seed = seed;
        for s in &mut exp.stages {
            s.seed = seed.wrapping_add(s.stage as u64 - 1);
        }
        if let Some(p) = exp.data.phantom.as_mut() {
            p.seed = seed;
        }
    }
    for s in exp.stages.iter_mut().filter(|s| a.stage.map_or(true, |k| k == s.stage)) {
        if let Some(strategy) = a.strategy {
            s.strategy = strategy;
        }
        if let Some(epochs) = a.epochs {
            s.epochs = epochs;
            s.switch_epoch = s.switch_epoch.min(epochs);
        }
    }
    if let Some(out) = &a.out {
        exp.output_dir = out.clone();
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    if a.deterministic && std::env::var_os("SOURCE_DATE_EPOCH").is_none() {
        std::env::set_var("SOURCE_DATE_EPOCH", "0");
    }
    let mut exp = Experiment::load(&a.config)?;
    apply_overrides(&mut exp, a);
    exp.validate()?;
    let selected: Vec<usize> = match a.stage {
        Some(k) if k == 0 || k > exp.stages.len() => {
            return Err(Error::Argument(format!("stage {k} not in 1..={}", exp.stages.len())))
        }
        Some(k) => vec![k - 1],
        None => (0..exp.stages.len()).collect(),
    };
    let (train_slices, val_slices) = exp.load_data()?;
    eprintln!("{} training and {} held-out slices", train_slices.len(), val_slices.len());
    fs::create_dir_all(&exp.output_dir).map_err(Error::io(&exp.output_dir))?;
    for k in selected {
        let stage = &exp.stages[k];
        let tr: Vec<LabeledSlice> = training_crops(&exp.stages, k, &train_slices)?.into_iter().map(|c| c.slice).collect();
        let va: Vec<LabeledSlice> = training_crops(&exp.stages, k, &val_slices)?.into_iter().map(|c| c.slice).collect();
        let dir = exp.output_dir.join(format!("stage{}", stage.stage));
        let result = run_stage(stage, &tr, &va, Some(&dir))?;
        if result.skipped {
            eprintln!("stage {} skipped: no training crops", stage.stage);
        } else if let Some(r) = result.report.as_ref().and_then(|r| r.regions.get("region_1")) {
            eprintln!("stage {} held-out Dice {:.4} ± {:.4}", stage.stage, r.mean, r.std);
        }
    }
    let mut json = serde_json::to_vec_pretty(&exp)?;
    json.push(b'\n');
    atomic_write(&exp.output_dir.join("experiment.json"), &json)?;
    write_manifest(&exp.output_dir, "train", a, serde_json::to_value(&exp)?, Some(exp.seed), None)?;
    Ok(())
}

/// Stage directories of a training output directory, in stage order.
fn stage_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for k in 1.. {
        let d = root.join(format!("stage{k}"));
        if !d.join(crate::pipeline::STAGE_FILE).is_file() {
            break;
        }
        dirs.push(d);
    }
    if dirs.is_empty() {
        return Err(Error::Argument(format!("{} holds no trained stages", root.display())));
    }
    Ok(dirs)
}

fn infer(a: &InferArgs) -> Result<()> {
    let dirs = if a.checkpoint.is_dir() {
        stage_dirs(&a.checkpoint)?
    } else {
        let parent = a.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !a.checkpoint.is_file() {
            return Err(Error::Argument(format!("checkpoint {} not found", a.checkpoint.display())));
        }
        vec![parent.to_path_buf()]
    };
    let loaded = dirs.iter().map(|d| load_stage(d)).collect::<Result<Vec<(StageConfig, StageModels)>>>()?;
    let (stages, models): (Vec<StageConfig>, Vec<StageModels>) = loaded.into_iter().unzip();
    let predictors: Vec<&dyn StagePredictor> = models.iter().map(|m| m as &dyn StagePredictor).collect();
    let input = read_raw_dataset(&a.input)?;
    let slices = input.slices();
    let result = run_cascade(&stages, &predictors, &slices)?;
    let out_slices = slices
        .iter()
        .zip(&result.cases)
        .map(|(s, c)| LabeledSlice::new(s.image.clone(), c.label_map.clone(), s.spacing, s.modality))
        .collect::<Result<Vec<_>>>()?;
    let config = serde_json::json!({ "stages": stages });
    let ds = RawDataset::from_slices(&out_slices, None, config.clone(), None)?;
    write_raw_dataset(&a.out, &ds)?;
    write_manifest(&a.out, "infer", a, config, stages.first().map(|s| s.seed), None)?;
    eprintln!("labelled {} slices with {} stage(s) into {}", ds.len(), stages.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let pred = read_raw_dataset(&a.pred)?;
    let gt = read_raw_dataset(&a.gt)?;
    let images = |dir: &Option<PathBuf>| -> Result<Option<RawDataset>> { dir.as_deref().map(read_raw_dataset).transpose() };
    let (syn, tgt) = (images(&a.synthetic)?, images(&a.target)?);
    let cfg = MetricsConfig {
        spacing: [gt.meta.spacing[0] as f64, gt.meta.spacing[1] as f64],
        ..MetricsConfig::default()
    };
    let report = evaluate_stage(
        &StageInputs {
            predictions: &pred.labels,
            ground_truth: &gt.labels,
            synthetic: syn.as_ref().map(|d| &d.images[..]),
            target: tgt.as_ref().map(|d| &d.images[..]),
            labels: tgt.as_ref().map(|d| &d.labels[..]),
        },
        &cfg,
        serde_json::to_value(a)?,
    )?;
    report.save(&a.report)?;
    let dir = a.report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let csv = a.report.with_extension("csv");
    write_manifest(dir, "eval", a, report.config.clone(), None, Some(&[&a.report, &csv]))?;
    for (name, r) in &report.regions {
        eprintln!("{name}: mean {:.4} std {:.4} (n={})", r.mean, r.std, r.n);
    }
    Ok(())
}

fn montage_cmd(a: &MontageArgs) -> Result<()> {
    let samples = [a.run.join("samples"), a.run.join(format!("stage{}", a.stage)).join("samples")]
        .into_iter()
        .find(|d| d.is_dir())
        .ok_or_else(|| Error::Argument(format!("no samples directory under {}", a.run.display())))?;
    let panels = SAMPLE_PANELS
        .iter()
        .map(|p| read_raw_dataset(&samples.join(p)).map(|d| d.images))
        .collect::<Result<Vec<Vec<Image>>>>()?;
    let n = panels.iter().map(Vec::len).min().unwrap_or(0).min(a.cases.unwrap_or(usize::MAX));
    let cases: Vec<MontageCase> = (0..n)
        .map(|i| MontageCase {
            source: &panels[0][i],
            attention: &panels[1][i],
            synthetic: &panels[2][i],
            target: &panels[3][i],
        })
        .collect();
    montage(&cases, &a.out)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let config = serde_json::json!({ "samples": samples, "cases": n });
    write_manifest(dir, "montage", a, config, None, Some(&[&a.out]))?;
    eprintln!("wrote {n} montage rows to {}", a.out.display());
    Ok(())
}
