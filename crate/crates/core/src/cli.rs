//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single `error[<kind>]: <message>` line on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::evaluator::{self, emit_predictions, emit_report, Layout, ReportRow};
use crate::gridrunner::{
    self, best_cell, collect_results, expand_grid, results_root, retrain_final, run_grid, Cell, CellOutcome, GridSpec,
};
use crate::ingest::{build_manifest, discover_dataset, verify_manifest, Dataset, Manifest, Split};
use crate::model_zoo::{Arch, FineTuneExtent, InitMode, ModelSpec};
use crate::preprocess::{assemble_input, write_triptych, PreprocessConfig, SliceSelector};
use crate::synthkit::{generate_dataset, SynthSpec};
use crate::trainer::{prepare_examples, reload_checkpoint, OptimizerKind, TrainConfig};
use crate::Error;

#[derive(Parser, Debug)]
#[command(name = "ggograde", version, about = "GGO severity grading experiment harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build or verify the per-scan file-count manifest of a dataset.
    Manifest(ManifestArgs),
    /// Write the three-channel model input of one scan as an image.
    Preview(PreviewArgs),
    /// Fine-tune one configuration and evaluate it.
    Train(TrainArgs),
    /// Run an experiment grid.
    Grid(GridArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Retrain the best grid cell on train + unseen validation and predict the test split.
    RetrainFinal(RetrainArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset root holding train/, val/ and test/.
    #[arg(long)]
    pub data: PathBuf,
    /// Label file (default: <data>/labels.csv).
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct PreprocessArgs {
    /// Relative depth of the center slice.
    #[arg(long)]
    pub slice_fraction: Option<f64>,
    /// Skip lung masking.
    #[arg(long)]
    pub no_mask: bool,
    /// Skip center cropping.
    #[arg(long)]
    pub no_crop: bool,
}

impl PreprocessArgs {
    fn apply(&self, mut cfg: PreprocessConfig) -> Result<PreprocessConfig, Error> {
        if let Some(f) = self.slice_fraction {
            cfg.selector = SliceSelector::new(f)?;
        }
        if self.no_mask {
            cfg.apply_mask = false;
        }
        if self.no_crop {
            cfg.apply_crop = false;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    /// Dataset root.
    #[arg(long)]
    pub root: PathBuf,
    /// Write the manifest CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compare the dataset against this manifest CSV.
    #[arg(long)]
    pub verify: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Scan to render.
    #[arg(long)]
    pub scan: String,
    /// Architecture whose input geometry to use.
    #[arg(long, default_value = "ResNet152")]
    pub arch: Arch,
    /// Input side override.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Output image (default: preview_<scan>.png).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

/// Training settings readable from `--config`; flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFileConfig {
    pub arch: Option<Arch>,
    pub extent: Option<FineTuneExtent>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub max_epochs: Option<usize>,
    pub plateau_patience: Option<usize>,
    pub plateau_min_delta: Option<f64>,
    pub seed: Option<u64>,
    pub internal_val_fraction: Option<f64>,
    pub init: Option<InitMode>,
    pub input_size: Option<usize>,
    pub preprocess: Option<PreprocessConfig>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON file with defaults for any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture.
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Fine-tuning extent: last or all.
    #[arg(long)]
    pub extent: Option<FineTuneExtent>,
    /// Batch size.
    #[arg(long)]
    pub bs: Option<usize>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    pub opt: Option<OptimizerKind>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Epoch cap.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation-loss improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Smallest validation-loss decrease that counts as improvement.
    #[arg(long)]
    pub min_delta: Option<f64>,
    /// Seed for initialisation, data split and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of each class held out for internal validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Weight initialisation: pretrained or scratch.
    #[arg(long)]
    pub init: Option<InitMode>,
    /// Input side override.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Results root (default: $GGOGRADE_RESULTS_ROOT or the working directory).
    #[arg(long)]
    pub results_root: Option<PathBuf>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Grid definition JSON (default: the full architecture grid).
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Re-run cells that already have results.
    #[arg(long)]
    pub fresh: bool,
    /// Cells run at once.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Results root (default: $GGOGRADE_RESULTS_ROOT or the working directory).
    #[arg(long)]
    pub results_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by train or grid.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to score: train, unseen_val or test.
    #[arg(long, default_value = "unseen_val")]
    pub split: Split,
    /// Table layout for the printed report: table1, table2 or table3.
    #[arg(long, default_value = "table2")]
    pub layout: Layout,
    /// Output directory (default: <checkpoint dir>/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

#[derive(Args, Debug)]
pub struct RetrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Grid definition the results came from (default: the full grid).
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Results root (default: $GGOGRADE_RESULTS_ROOT or the working directory).
    #[arg(long)]
    pub results_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// 8 training scans per class, 12 slices of 128 px (the default).
    #[arg(long, conflicts_with = "tiny_plus")]
    pub tiny: bool,
    /// 16 training scans per class.
    #[arg(long)]
    pub tiny_plus: bool,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training scans per class.
    #[arg(long)]
    pub scans_per_class: Option<usize>,
    /// Unseen-validation scans per class.
    #[arg(long)]
    pub val_per_class: Option<usize>,
    /// Test scans per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Slice side in pixels.
    #[arg(long)]
    pub side: Option<u32>,
    /// Gaussian noise standard deviation in grey levels.
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Manifest(a) => manifest(a),
        Command::Preview(a) => preview(a),
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::Eval(a) => eval(a),
        Command::RetrainFinal(a) => retrain(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_dataset(d: &DataArgs) -> Result<Dataset, Error> {
    Ok(Dataset::load(&d.data, d.labels.as_deref())?)
}

fn manifest(a: ManifestArgs) -> Result<(), Error> {
    let scans = discover_dataset(&a.root)?;
    let current = build_manifest(&scans);
    if let Some(out) = &a.out {
        current.write_csv(out)?;
        println!("wrote {} ({} scans)", out.display(), current.rows.len());
    }
    if let Some(reference) = &a.verify {
        let expected = Manifest::read_csv(reference)?;
        let discrepancies = verify_manifest(&expected, &a.root)?;
        for d in &discrepancies {
            println!("{d}");
        }
        println!("{} discrepancies", discrepancies.len());
        if !discrepancies.is_empty() {
            return Err(Error::Integrity(format!("{} discrepancies against {}", discrepancies.len(), reference.display())));
        }
    }
    if a.out.is_none() && a.verify.is_none() {
        print!("{}", current.to_csv_string());
    }
    Ok(())
}

fn preview(a: PreviewArgs) -> Result<(), Error> {
    let ds = load_dataset(&a.data)?;
    let volume = ds
        .train
        .iter()
        .chain(&ds.unseen_val)
        .map(|s| &s.volume)
        .chain(&ds.test)
        .find(|v| v.scan_id == a.scan)
        .ok_or_else(|| Error::Usage(format!("no scan named {:?}", a.scan)))?;
    let mut spec = ModelSpec::new(a.arch, InitMode::Scratch);
    if let Some(v) = a.input_size {
        spec = spec.with_v(v);
    }
    spec.validate()?;
    let cfg = a.preprocess.apply(PreprocessConfig::default())?;
    let input = assemble_input(volume, &cfg, &spec)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("preview_{}.png", a.scan)));
    write_triptych(&input, &out)?;
    println!("wrote {} (slice {} of {})", out.display(), input.z, volume.n());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

/// Flag > config file > built-in default.
pub fn resolve_train(a: &TrainArgs) -> Result<Cell, Error> {
    let file: TrainFileConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFileConfig::default(),
    };
    let d = TrainConfig::default();
    let arch = a.arch.or(file.arch).ok_or_else(|| Error::Usage("--arch is required".into()))?;
    let cfg = TrainConfig {
        batch_size: a.bs.or(file.batch_size).unwrap_or(d.batch_size),
        optimizer: a.opt.or(file.optimizer).unwrap_or(d.optimizer),
        lr: a.lr.or(file.lr).unwrap_or(d.lr),
        momentum: a.momentum.or(file.momentum).unwrap_or(d.momentum),
        max_epochs: a.max_epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
        plateau_patience: a.patience.or(file.plateau_patience).unwrap_or(d.plateau_patience),
        plateau_min_delta: a.min_delta.or(file.plateau_min_delta).unwrap_or(d.plateau_min_delta),
        extent: a.extent.or(file.extent).unwrap_or(d.extent),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        internal_val_fraction: a.val_fraction.or(file.internal_val_fraction).unwrap_or(d.internal_val_fraction),
    };
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let mut spec = ModelSpec::new(arch, a.init.or(file.init).unwrap_or(InitMode::Pretrained));
    if let Some(v) = a.input_size.or(file.input_size) {
        spec = spec.with_v(v);
    }
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let preprocess = a.preprocess.apply(file.preprocess.unwrap_or_default())?;
    Ok(Cell { model_spec: spec, train_config: cfg, preprocess })
}

fn print_outcome(outcome: &CellOutcome) {
    match outcome {
        CellOutcome::Completed(c) => {
            println!(
                "{}: {} epochs, best epoch {} (val accuracy {:.4}), unseen F1-macro {:.1}, AUROC {:.1}",
                c.run_id,
                c.train.epoch_log.len(),
                c.train.best_epoch,
                c.train.best_val_accuracy,
                c.unseen.f1_macro,
                c.unseen.auroc_macro
            );
        }
        CellOutcome::Failed(f) => println!("{}: failed: {}", f.run_id, f.reason),
    }
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let cell = resolve_train(&a)?;
    let ds = load_dataset(&a.data)?;
    let root = a.results_root.clone().unwrap_or_else(results_root);
    let outcome = gridrunner::run_cell(&cell, &ds, &root);
    print_outcome(&outcome);
    match outcome {
        CellOutcome::Completed(c) => {
            println!("run directory: {}", gridrunner::run_dir(&root, &c.run_id).display());
            Ok(())
        }
        CellOutcome::Failed(f) => Err(Error::Run(f.reason)),
    }
}

fn load_grid(path: Option<&Path>) -> Result<GridSpec, Error> {
    match path {
        Some(p) => GridSpec::load(p).map_err(|e| Error::Usage(e.to_string())),
        None => Ok(GridSpec::default()),
    }
}

fn grid(a: GridArgs) -> Result<(), Error> {
    let spec = load_grid(a.grid.as_deref())?;
    let cells = expand_grid(&spec).map_err(|e| Error::Usage(e.to_string()))?;
    let ds = load_dataset(&a.data)?;
    let root = a.results_root.unwrap_or_else(results_root);
    let result = run_grid(&cells, &ds, &root, !a.fresh, a.concurrency.unwrap_or(spec.concurrency))?;
    for o in &result.outcomes {
        print_outcome(o);
    }
    println!(
        "{} cells: {} executed, {} resumed, {} failed; summary at {}",
        result.outcomes.len(),
        result.executed,
        result.resumed,
        result.failures().count(),
        root.join("results").join(gridrunner::SUMMARY_FILE).display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let (model, meta) = reload_checkpoint(&a.checkpoint, None)?;
    let ds = load_dataset(&a.data)?;
    let cfg = a.preprocess.apply(PreprocessConfig::default())?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    let run_id = a.checkpoint.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let labeled = match a.split {
        Split::Train => Some(&ds.train),
        Split::UnseenVal => Some(&ds.unseen_val),
        Split::Test => None,
        Split::InternalVal => return Err(Error::Usage("internal_val is drawn per run; evaluate train or unseen_val".into())),
    };
    let predictions = match labeled {
        Some(scans) => {
            let (examples, _) = prepare_examples(scans, &cfg, &model.spec);
            let report = gridrunner::evaluate_model(&run_id, &model, &examples).map_err(Error::Run)?;
            let row = ReportRow {
                model: model.arch().name().to_string(),
                settings: meta.train_config.settings(),
                val: report.clone(),
                unseen: report.clone(),
                test_distribution: None,
            };
            print!("{}", emit_report(&[row], a.layout));
            fs::create_dir_all(&out).map_err(|e| Error::Run(format!("{}: {e}", out.display())))?;
            let path = out.join(format!("{}_report.json", a.split.as_str()));
            fs::write(&path, serde_json::to_string_pretty(&report).expect("serialisable"))
                .map_err(|e| Error::Run(format!("{}: {e}", path.display())))?;
            let inputs: Vec<_> = examples.iter().map(|e| e.input.clone()).collect();
            gridrunner::predict_test(&model, &inputs).map_err(Error::Run)?
        }
        None => {
            let mut inputs = Vec::new();
            for v in &ds.test {
                inputs.push(assemble_input(v, &cfg, &model.spec)?);
            }
            gridrunner::predict_test(&model, &inputs).map_err(Error::Run)?
        }
    };
    let ids: Vec<usize> = predictions.iter().map(|(_, s)| s.id()).collect();
    let path = out.join(format!("{}_predictions.csv", a.split.as_str()));
    emit_predictions(&predictions, &path)?;
    let dist = evaluator::predict_distribution(&ids);
    println!("predicted class distribution {dist:?}; wrote {}", path.display());
    Ok(())
}

fn retrain(a: RetrainArgs) -> Result<(), Error> {
    let spec = load_grid(a.grid.as_deref())?;
    let cells = expand_grid(&spec).map_err(|e| Error::Usage(e.to_string()))?;
    let ds = load_dataset(&a.data)?;
    let root = a.results_root.unwrap_or_else(results_root);
    let result = collect_results(&cells, &root, &ds.manifest_hash());
    let best = best_cell(&result).ok_or_else(|| Error::Run("no completed grid cells for this grid and dataset".into()))?;
    println!("best cell {} ({}, unseen F1-macro {:.1})", best.run_id, best.cell.settings(), best.unseen.f1_macro);
    let fin = retrain_final(&best.cell, &ds, &root)?;
    println!(
        "retrained on {} scans; {} test predictions written to {}",
        fin.union_size,
        fin.predictions.len(),
        fin.predictions_path.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let mut spec = if a.tiny_plus { SynthSpec::tiny_plus() } else { SynthSpec::tiny() };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.scans_per_class {
        spec.n_scans_per_class = n;
    }
    if let Some(n) = a.val_per_class {
        spec.val_scans_per_class = n;
    }
    if let Some(n) = a.test_per_class {
        spec.test_scans_per_class = n;
    }
    if let Some(s) = a.side {
        spec.image_side = s;
    }
    if let Some(n) = a.noise {
        spec.noise_level = n;
    }
    let summary = generate_dataset(&spec, &a.out)?;
    println!("wrote {} scans to {}", summary.scans.len(), a.out.display());
    Ok(())
}
