//! Experiment grid: expansion, execution with resume, aggregation into
//! summary rows and report tables, and the final retrain on train + unseen
//! validation.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluator::{self, emit_predictions, emit_report, emit_report_csv, EvalReport, Layout, ReportRow};
use crate::ingest::{Dataset, LabeledScan};
use crate::model_zoo::{apply_freeze_policy, build_model, Arch, FineTuneExtent, InitMode, Model, ModelSpec};
use crate::preprocess::{assemble_input, PreprocessConfig, PreprocessedInput};
use crate::severity::{Severity, NUM_CLASSES};
use crate::trainer::{
    predict_proba, prepare_examples, reload_checkpoint, split_internal, train, write_run_config, LabeledInput,
    OptimizerKind, TrainConfig, TrainResult,
};

pub const RESULTS_ROOT_ENV: &str = "GGOGRADE_RESULTS_ROOT";
pub const RESULT_FILE: &str = "result.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PREDICTIONS_FILE: &str = "test_predictions.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifestRecord {
    pub run_id: String,
    pub fingerprint: String,
    pub manifest_hash: String,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifestRecord {
    pub fn write(&self, dir: &Path) -> Result<(), GridError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self).expect("serialisable") + "\n").map_err(|e| io_err(&path, e))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `$GGOGRADE_RESULTS_ROOT`, or the working directory.
pub fn results_root() -> PathBuf {
    std::env::var_os(RESULTS_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Argument(String),
    #[error("cannot access {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("final retrain failed: {0}")]
    Retrain(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> GridError {
    GridError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub archs: Vec<Arch>,
    pub extents: Vec<FineTuneExtent>,
    pub batch_sizes: Vec<usize>,
    pub optim_lr_pairs: Vec<(OptimizerKind, f64)>,
    pub seeds: Vec<u64>,
    pub init: InitMode,
    /// Overrides every architecture's canonical input side.
    pub input_size: Option<usize>,
    /// Values for the training fields the grid does not vary.
    pub base: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Cells executed at once.
    pub concurrency: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            archs: Arch::ALL.to_vec(),
            extents: vec![FineTuneExtent::LastLayerOnly, FineTuneExtent::AllLayers],
            batch_sizes: vec![16, 64, 128, 512],
            optim_lr_pairs: vec![(OptimizerKind::Adam, 0.001), (OptimizerKind::Sgd, 0.001)],
            seeds: vec![0],
            init: InitMode::Pretrained,
            input_size: None,
            base: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            concurrency: 1,
        }
    }
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<GridSpec, GridError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| GridError::Argument(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }
}

/// One grid point: everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model_spec: ModelSpec,
    pub train_config: TrainConfig,
    pub preprocess: PreprocessConfig,
}

impl Cell {
    /// SHA-256 of the canonical JSON serialisation.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("serialisable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn settings(&self) -> String {
        self.train_config.settings()
    }

    pub fn run_id(&self) -> String {
        let c = &self.train_config;
        let raw = format!(
            "{}_{}_bs{}_{}_lr{}_seed{}_{}",
            self.model_spec.arch.name(),
            c.extent.as_str(),
            c.batch_size,
            c.optimizer.as_str().to_ascii_lowercase(),
            c.lr,
            c.seed,
            &self.fingerprint()[..8]
        );
        raw.chars().map(|ch| if ch.is_ascii_alphanumeric() || "._-".contains(ch) { ch } else { '-' }).collect()
    }

    fn sort_key(&self) -> (Arch, FineTuneExtent, usize, OptimizerKind) {
        let c = &self.train_config;
        (self.model_spec.arch, c.extent, c.batch_size, c.optimizer)
    }
}

/// Cartesian product of the grid dimensions, deduplicated and sorted by
/// (arch, extent, batch size, optimizer, lr, seed).
pub fn expand_grid(spec: &GridSpec) -> Result<Vec<Cell>, GridError> {
    let dims = [
        ("archs", spec.archs.len()),
        ("extents", spec.extents.len()),
        ("batch_sizes", spec.batch_sizes.len()),
        ("optim_lr_pairs", spec.optim_lr_pairs.len()),
        ("seeds", spec.seeds.len()),
    ];
    if let Some((name, _)) = dims.iter().find(|(_, n)| *n == 0) {
        return Err(GridError::Argument(format!("{name} is empty")));
    }
    let mut cells = Vec::new();
    for &arch in &spec.archs {
        let mut model_spec = ModelSpec::new(arch, spec.init);
        if let Some(v) = spec.input_size {
            model_spec = model_spec.with_v(v);
        }
        model_spec.validate().map_err(|e| GridError::Argument(e.to_string()))?;
        for &extent in &spec.extents {
            for &batch_size in &spec.batch_sizes {
                for &(optimizer, lr) in &spec.optim_lr_pairs {
                    for &seed in &spec.seeds {
                        let train_config = TrainConfig { batch_size, optimizer, lr, extent, seed, ..spec.base.clone() };
                        train_config.validate().map_err(|e| GridError::Argument(e.to_string()))?;
                        cells.push(Cell { model_spec: model_spec.clone(), train_config, preprocess: spec.preprocess.clone() });
                    }
                }
            }
        }
    }
    cells.sort_by(|a, b| {
        a.sort_key()
            .cmp(&b.sort_key())
            .then(a.train_config.lr.total_cmp(&b.train_config.lr))
            .then(a.train_config.seed.cmp(&b.train_config.seed))
    });
    cells.dedup();
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub run_id: String,
    pub fingerprint: String,
    pub cell: Cell,
    pub train: TrainResult,
    pub val: EvalReport,
    pub unseen: EvalReport,
    pub test_distribution: Option<[usize; NUM_CLASSES]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub run_id: String,
    pub fingerprint: String,
    pub cell: Cell,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed(CellResult),
    Failed(CellFailure),
}

impl CellOutcome {
    pub fn run_id(&self) -> &str {
        match self {
            CellOutcome::Completed(c) => &c.run_id,
            CellOutcome::Failed(f) => &f.run_id,
        }
    }

    pub fn fingerprint(&self) -> &str {
        match self {
            CellOutcome::Completed(c) => &c.fingerprint,
            CellOutcome::Failed(f) => &f.fingerprint,
        }
    }
}

/// Contents of `runs/<run_id>/result.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultFile {
    pub fingerprint: String,
    pub manifest_hash: String,
    pub outcome: CellOutcome,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// One entry per cell, in grid order.
    pub outcomes: Vec<CellOutcome>,
    pub executed: usize,
    pub resumed: usize,
}

impl GridResult {
    pub fn cells(&self) -> impl Iterator<Item = &CellResult> {
        self.outcomes.iter().filter_map(|o| match o {
            CellOutcome::Completed(c) => Some(c),
            CellOutcome::Failed(_) => None,
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellFailure> {
        self.outcomes.iter().filter_map(|o| match o {
            CellOutcome::Failed(f) => Some(f),
            CellOutcome::Completed(_) => None,
        })
    }

    /// Table rows for the cells run at `extent`.
    pub fn rows(&self, extent: Option<FineTuneExtent>) -> Vec<ReportRow> {
        self.cells()
            .filter(|c| extent.is_none_or(|e| c.cell.train_config.extent == e))
            .map(|c| ReportRow {
                model: c.cell.model_spec.arch.name().to_string(),
                settings: c.cell.settings(),
                val: c.val.clone(),
                unseen: c.unseen.clone(),
                test_distribution: c.test_distribution,
            })
            .collect()
    }
}

/// Highest unseen-validation F1-macro; the earliest cell wins ties.
pub fn best_cell(result: &GridResult) -> Option<&CellResult> {
    let mut best: Option<&CellResult> = None;
    for c in result.cells() {
        if best.is_none_or(|b| c.unseen.f1_macro > b.unseen.f1_macro) {
            best = Some(c);
        }
    }
    best
}

pub fn run_dir(root: &Path, run_id: &str) -> PathBuf {
    root.join("runs").join(run_id)
}

/// Preprocessed scans for one input geometry.
struct Prepared {
    labeled: HashMap<String, LabeledInput>,
    test: Vec<PreprocessedInput>,
}

type PrepKey = (usize, [u32; 3], [u32; 3]);

fn prep_key(spec: &ModelSpec, cfg: &PreprocessConfig) -> (PrepKey, String) {
    let key = (spec.v, spec.norm_mean.map(f32::to_bits), spec.norm_std.map(f32::to_bits));
    (key, serde_json::to_string(cfg).expect("serialisable"))
}

fn prepare(dataset: &Dataset, spec: &ModelSpec, cfg: &PreprocessConfig) -> Prepared {
    let labeled_scans: Vec<LabeledScan> = dataset.train.iter().chain(&dataset.unseen_val).cloned().collect();
    let (ok, _) = prepare_examples(&labeled_scans, cfg, spec);
    let labeled = ok.into_iter().map(|e| (e.input.scan_id.clone(), e)).collect();
    let mut test = Vec::new();
    for vol in &dataset.test {
        match assemble_input(vol, cfg, spec) {
            Ok(x) => test.push(x),
            Err(e) => log::warn!("skipping test scan {}: {e}", vol.scan_id),
        }
    }
    Prepared { labeled, test }
}

fn lookup(prepared: &Prepared, scans: &[LabeledScan]) -> Vec<LabeledInput> {
    scans.iter().filter_map(|s| prepared.labeled.get(&s.volume.scan_id).cloned()).collect()
}

/// Scores `examples` with `model`.
pub fn evaluate_model(run_id: &str, model: &Model, examples: &[LabeledInput]) -> Result<EvalReport, String> {
    let inputs: Vec<&PreprocessedInput> = examples.iter().map(|e| &e.input).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label.id()).collect();
    let probs = predict_proba(model, &inputs).map_err(|e| e.to_string())?;
    evaluator::evaluate(run_id, &probs, &labels).map_err(|e| e.to_string())
}

/// Predicted grade per test scan.
pub fn predict_test(model: &Model, test: &[PreprocessedInput]) -> Result<Vec<(String, Severity)>, String> {
    let inputs: Vec<&PreprocessedInput> = test.iter().collect();
    let probs = predict_proba(model, &inputs).map_err(|e| e.to_string())?;
    Ok(test
        .iter()
        .zip(probs.chunks_exact(NUM_CLASSES))
        .map(|(x, row)| (x.scan_id.clone(), Severity::from_id(evaluator::argmax(row)).expect("class id")))
        .collect())
}

fn execute_cell(cell: &Cell, run_id: &str, dataset: &Dataset, prepared: &Prepared, dir: &Path) -> Result<CellResult, String> {
    let cfg = &cell.train_config;
    let (tr, va) = split_internal(&dataset.train, cfg.internal_val_fraction, cfg.seed).map_err(|e| e.to_string())?;
    let train_set = lookup(prepared, &tr);
    let val_set = lookup(prepared, &va);
    let unseen_set = lookup(prepared, &dataset.unseen_val);
    let model = build_model(&cell.model_spec, cfg.seed).map_err(|e| e.to_string())?;
    let mut model = apply_freeze_policy(model, cfg.extent);
    let result = train(&mut model, cfg, &train_set, &val_set, dir).map_err(|e| e.to_string())?;
    let (best, _) = reload_checkpoint(&result.checkpoint_path, Some(&cell.model_spec)).map_err(|e| e.to_string())?;
    let val = evaluate_model(run_id, &best, &val_set)?;
    let unseen = if unseen_set.is_empty() {
        return Err("unseen validation split is empty".into());
    } else {
        evaluate_model(run_id, &best, &unseen_set)?
    };
    let test_distribution = if prepared.test.is_empty() {
        None
    } else {
        let preds = predict_test(&best, &prepared.test)?;
        emit_predictions(&preds, &dir.join("eval").join(PREDICTIONS_FILE)).map_err(|e| e.to_string())?;
        let ids: Vec<usize> = preds.iter().map(|(_, s)| s.id()).collect();
        Some(evaluator::predict_distribution(&ids))
    };
    Ok(CellResult {
        run_id: run_id.to_string(),
        fingerprint: cell.fingerprint(),
        cell: cell.clone(),
        train: result,
        val,
        unseen,
        test_distribution,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn run_one(cell: &Cell, dataset: &Dataset, prepared: &Prepared, root: &Path, manifest_hash: &str) -> CellOutcome {
    let run_id = cell.run_id();
    let fingerprint = cell.fingerprint();
    let dir = run_dir(root, &run_id);
    let _ = fs::remove_dir_all(&dir);
    let started_at = now();
    if let Err(e) = write_run_config(&dir, &cell.model_spec, &cell.train_config) {
        log::error!("cannot write config for {run_id}: {e}");
    }
    log::info!("running {run_id}");
    let outcome = match catch_unwind(AssertUnwindSafe(|| execute_cell(cell, &run_id, dataset, prepared, &dir))) {
        Ok(Ok(r)) => CellOutcome::Completed(r),
        Ok(Err(reason)) => CellOutcome::Failed(CellFailure { run_id: run_id.clone(), fingerprint: fingerprint.clone(), cell: cell.clone(), reason }),
        Err(p) => CellOutcome::Failed(CellFailure {
            run_id: run_id.clone(),
            fingerprint: fingerprint.clone(),
            cell: cell.clone(),
            reason: format!("panic: {}", panic_message(p)),
        }),
    };
    if let CellOutcome::Failed(f) = &outcome {
        log::warn!("cell {run_id} failed: {}", f.reason);
    }
    let record = RunManifestRecord {
        run_id: run_id.clone(),
        fingerprint: fingerprint.clone(),
        manifest_hash: manifest_hash.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now(),
    };
    if let Err(e) = record.write(&dir) {
        log::error!("cannot record provenance for {run_id}: {e}");
    }
    let file = ResultFile { fingerprint, manifest_hash: manifest_hash.to_string(), outcome: outcome.clone() };
    let written = fs::create_dir_all(&dir).and_then(|_| {
        fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(&file).expect("serialisable") + "\n")
    });
    if let Err(e) = written {
        log::error!("cannot record result for {run_id}: {e}");
    }
    outcome
}

/// Runs a single cell outside a grid, recording it like a grid cell.
pub fn run_cell(cell: &Cell, dataset: &Dataset, root: &Path) -> CellOutcome {
    let prepared = prepare(dataset, &cell.model_spec, &cell.preprocess);
    run_one(cell, dataset, &prepared, root, &dataset.manifest_hash())
}

/// A previously recorded outcome for `cell`, if it matches the fingerprint
/// and dataset manifest.
pub fn recorded_outcome(cell: &Cell, root: &Path, manifest_hash: &str) -> Option<CellOutcome> {
    let path = run_dir(root, &cell.run_id()).join(RESULT_FILE);
    let text = fs::read_to_string(path).ok()?;
    let file: ResultFile = serde_json::from_str(&text).ok()?;
    (file.fingerprint == cell.fingerprint() && file.manifest_hash == manifest_hash).then_some(file.outcome)
}

/// Recorded outcomes for every cell that has one; missing cells are
/// skipped.
pub fn collect_results(cells: &[Cell], root: &Path, manifest_hash: &str) -> GridResult {
    let outcomes: Vec<CellOutcome> = cells.iter().filter_map(|c| recorded_outcome(c, root, manifest_hash)).collect();
    let resumed = outcomes.len();
    GridResult { outcomes, executed: 0, resumed }
}

/// Runs every cell, writing `runs/<run_id>/` per cell and the aggregate
/// files under `results/`. With `resume`, cells whose result file matches
/// the fingerprint and manifest hash are not re-run (failed cells
/// included). Per-cell errors become failure rows.
pub fn run_grid(
    cells: &[Cell],
    dataset: &Dataset,
    root: &Path,
    resume: bool,
    concurrency: usize,
) -> Result<GridResult, GridError> {
    let manifest_hash = dataset.manifest_hash();
    let mut slots: Vec<Option<CellOutcome>> =
        cells.iter().map(|c| if resume { recorded_outcome(c, root, &manifest_hash) } else { None }).collect();
    let resumed = slots.iter().filter(|s| s.is_some()).count();
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| slots[i].is_none()).collect();
    log::info!("{} cells: {} to run, {resumed} already recorded", cells.len(), pending.len());

    let mut prepared: HashMap<(PrepKey, String), Prepared> = HashMap::new();
    for &i in &pending {
        let key = prep_key(&cells[i].model_spec, &cells[i].preprocess);
        prepared.entry(key).or_insert_with(|| prepare(dataset, &cells[i].model_spec, &cells[i].preprocess));
    }

    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    let workers = concurrency.max(1).min(pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let cell = &cells[i];
                let data = &prepared[&prep_key(&cell.model_spec, &cell.preprocess)];
                let outcome = run_one(cell, dataset, data, root, &manifest_hash);
                done.lock().expect("result lock").push((i, outcome));
            });
        }
    });
    for (i, outcome) in done.into_inner().expect("result lock") {
        slots[i] = Some(outcome);
    }
    let result = GridResult { outcomes: slots.into_iter().map(|s| s.expect("every cell ran")).collect(), executed: pending.len(), resumed };
    write_outputs(&result, root)?;
    Ok(result)
}

fn summary_csv(result: &GridResult) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "run_id",
        "fingerprint",
        "status",
        "model",
        "extent",
        "settings",
        "batch_size",
        "optimizer",
        "lr",
        "seed",
        "epochs_run",
        "best_epoch",
        "best_val_accuracy",
        "stopped_early",
        "val_auroc",
        "unseen_auroc",
        "val_f1_macro",
        "unseen_f1_macro",
        "pred_class_distribution",
        "failure_reason",
    ])
    .expect("in-memory csv");
    for o in &result.outcomes {
        let (cell, status) = match o {
            CellOutcome::Completed(c) => (&c.cell, "completed"),
            CellOutcome::Failed(f) => (&f.cell, "failed"),
        };
        let c = &cell.train_config;
        let mut row = vec![
            o.run_id().to_string(),
            o.fingerprint().to_string(),
            status.to_string(),
            cell.model_spec.arch.name().to_string(),
            c.extent.as_str().to_string(),
            cell.settings(),
            c.batch_size.to_string(),
            c.optimizer.as_str().to_string(),
            c.lr.to_string(),
            c.seed.to_string(),
        ];
        match o {
            CellOutcome::Completed(r) => {
                let dist = r.test_distribution.unwrap_or(r.unseen.pred_class_distribution);
                row.extend([
                    r.train.epoch_log.len().to_string(),
                    r.train.best_epoch.to_string(),
                    format!("{:.4}", r.train.best_val_accuracy),
                    r.train.stopped_early.to_string(),
                    format!("{:.1}", r.val.auroc_macro),
                    format!("{:.1}", r.unseen.auroc_macro),
                    format!("{:.1}", r.val.f1_macro),
                    format!("{:.1}", r.unseen.f1_macro),
                    dist.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
                    String::new(),
                ]);
            }
            CellOutcome::Failed(f) => {
                row.extend(std::iter::repeat_n(String::new(), 9));
                row.push(f.reason.clone());
            }
        }
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Per-architecture best cell by unseen F1-macro, for the class-wise table.
fn best_per_arch(result: &GridResult) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for arch in Arch::ALL {
        let mut best: Option<&CellResult> = None;
        for c in result.cells().filter(|c| c.cell.model_spec.arch == arch) {
            if best.is_none_or(|b| c.unseen.f1_macro > b.unseen.f1_macro) {
                best = Some(c);
            }
        }
        if let Some(c) = best {
            rows.push(ReportRow {
                model: arch.name().to_string(),
                settings: c.cell.settings(),
                val: c.val.clone(),
                unseen: c.unseen.clone(),
                test_distribution: c.test_distribution,
            });
        }
    }
    rows
}

/// `results/summary.csv`, and `table{1,2,3}.{txt,csv}` (last-layer cells,
/// all-layer cells, class-wise F1 of each architecture's best cell).
pub fn write_outputs(result: &GridResult, root: &Path) -> Result<(), GridError> {
    let dir = root.join("results");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))
    };
    write(SUMMARY_FILE, summary_csv(result))?;
    let tables = [
        ("table1", Layout::Table1, result.rows(Some(FineTuneExtent::LastLayerOnly))),
        ("table2", Layout::Table2, result.rows(Some(FineTuneExtent::AllLayers))),
        ("table3", Layout::Table3, best_per_arch(result)),
    ];
    for (name, layout, rows) in tables {
        write(&format!("{name}.txt"), emit_report(&rows, layout))?;
        write(&format!("{name}.csv"), emit_report_csv(&rows, layout))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub run_id: String,
    pub union_size: usize,
    pub train: TrainResult,
    pub predictions_path: PathBuf,
    pub predictions: Vec<(String, Severity)>,
}

/// Retrains `best`'s configuration on train + unseen validation, with the
/// internal validation subset re-drawn from the union, and writes test
/// predictions to `runs/<run_id>-final/eval/test_predictions.csv`.
pub fn retrain_final(best: &Cell, dataset: &Dataset, root: &Path) -> Result<FinalResult, GridError> {
    let fail = |e: String| GridError::Retrain(e);
    let cfg = &best.train_config;
    let union: Vec<LabeledScan> = dataset.train.iter().chain(&dataset.unseen_val).cloned().collect();
    let (tr, va) = split_internal(&union, cfg.internal_val_fraction, cfg.seed).map_err(|e| fail(e.to_string()))?;
    let prepared = prepare(dataset, &best.model_spec, &best.preprocess);
    let run_id = format!("{}-final", best.run_id());
    let dir = run_dir(root, &run_id);
    let _ = fs::remove_dir_all(&dir);
    let started_at = now();
    let model = build_model(&best.model_spec, cfg.seed).map_err(|e| fail(e.to_string()))?;
    let mut model = apply_freeze_policy(model, cfg.extent);
    let result = train(&mut model, cfg, &lookup(&prepared, &tr), &lookup(&prepared, &va), &dir).map_err(|e| fail(e.to_string()))?;
    let (reloaded, _) = reload_checkpoint(&result.checkpoint_path, Some(&best.model_spec)).map_err(|e| fail(e.to_string()))?;
    let predictions = predict_test(&reloaded, &prepared.test).map_err(fail)?;
    let predictions_path = dir.join("eval").join(PREDICTIONS_FILE);
    emit_predictions(&predictions, &predictions_path).map_err(|e| fail(e.to_string()))?;
    RunManifestRecord {
        run_id: run_id.clone(),
        fingerprint: best.fingerprint(),
        manifest_hash: dataset.manifest_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now(),
    }
    .write(&dir)?;
    Ok(FinalResult { run_id, union_size: union.len(), train: result, predictions_path, predictions })
}
