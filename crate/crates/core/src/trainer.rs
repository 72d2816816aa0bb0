//! Fine-tuning loop: cross-entropy, Adam or momentum SGD, plateau early
//! stopping and best-validation-accuracy checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ggograde_nn::{no_grad, softmax_rows, Adam, Optimizer, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluator::settings_string;
use crate::ingest::LabeledScan;
use crate::model_zoo::{Ctx, FineTuneExtent, Model, ModelError, ModelSpec, AUX_LOSS_WEIGHT};
use crate::preprocess::{assemble_input, PreprocessConfig, PreprocessError, PreprocessedInput};
use crate::severity::{Severity, NUM_CLASSES};

/// Batch size for inference passes. Fixed so that logits do not depend on
/// the training batch size.
pub const EVAL_BATCH: usize = 8;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("cannot write {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("cannot load checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint {path} does not match the requested model: {mismatch}")]
    SpecMismatch { path: PathBuf, mismatch: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "ADAM")]
    Adam,
    #[serde(rename = "SGD")]
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "ADAM",
            OptimizerKind::Sgd => "SGD",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(TrainError::Argument(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub extent: FineTuneExtent,
    pub seed: u64,
    pub internal_val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            momentum: 0.9,
            max_epochs: 500,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            extent: FineTuneExtent::AllLayers,
            seed: 0,
            internal_val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Argument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if !(self.plateau_min_delta >= 0.0) {
            return bad(format!("plateau_min_delta must be non-negative, got {}", self.plateau_min_delta));
        }
        if !(self.internal_val_fraction > 0.0 && self.internal_val_fraction < 1.0) {
            return bad(format!("internal_val_fraction must lie in (0, 1), got {}", self.internal_val_fraction));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// `BS16 ADAM LR0.001` style label.
    pub fn settings(&self) -> String {
        settings_string(self.batch_size, self.optimizer.as_str(), self.lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epoch_log: Vec<EpochRecord>,
    pub checkpoint_path: PathBuf,
    pub stopped_early: bool,
}

/// A preprocessed scan with its grade.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInput {
    pub input: PreprocessedInput,
    pub label: Severity,
}

/// Stratified, seeded split into (train, internal validation). Each class
/// with `n >= 2` scans sends `round(fraction * n)`, clamped to `[1, n-1]`,
/// to validation; singleton classes stay in train.
pub fn split_internal(
    scans: &[LabeledScan],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledScan>, Vec<LabeledScan>), TrainError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Argument(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in Severity::ALL {
        let mut members: Vec<&LabeledScan> = scans.iter().filter(|s| s.label == class).collect();
        if members.is_empty() {
            return Err(TrainError::Argument(format!("no {class} scans to split")));
        }
        members.sort_by(|a, b| a.volume.scan_id.cmp(&b.volume.scan_id));
        let n = members.len();
        if n < 2 {
            log::warn!("class {class} has a single scan; it stays in the training subset");
            train.extend(members.into_iter().cloned());
            continue;
        }
        members.shuffle(&mut rng);
        let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        val.extend(members[..n_val].iter().map(|s| (*s).clone()));
        train.extend(members[n_val..].iter().map(|s| (*s).clone()));
    }
    train.sort_by(|a, b| a.volume.scan_id.cmp(&b.volume.scan_id));
    val.sort_by(|a, b| a.volume.scan_id.cmp(&b.volume.scan_id));
    Ok((train, val))
}

/// True when none of the last `patience` losses improved the running best
/// by more than `min_delta`. The first loss always counts as an improvement.
pub fn plateau_detector(val_losses: &[f64], patience: usize, min_delta: f64) -> bool {
    let patience = patience.max(1);
    if val_losses.len() < patience {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut last_improvement = None;
    for (i, &l) in val_losses.iter().enumerate() {
        let improved = if best.is_infinite() { l.is_finite() } else { l < best - min_delta };
        if improved {
            best = l;
            last_improvement = Some(i);
        }
    }
    match last_improvement {
        None => true,
        Some(i) => val_losses.len() - 1 - i >= patience,
    }
}

/// Earliest epoch (1-based) attaining the highest validation accuracy.
pub fn select_best(val_accuracies: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in val_accuracies.iter().enumerate() {
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i + 1, a));
        }
    }
    best
}

/// Preprocesses labelled scans, skipping (and logging) unreadable ones.
pub fn prepare_examples(
    scans: &[LabeledScan],
    cfg: &PreprocessConfig,
    spec: &ModelSpec,
) -> (Vec<LabeledInput>, Vec<(String, PreprocessError)>) {
    let mut ok = Vec::with_capacity(scans.len());
    let mut failed = Vec::new();
    for s in scans {
        match assemble_input(&s.volume, cfg, spec) {
            Ok(input) => ok.push(LabeledInput { input, label: s.label }),
            Err(e) => {
                log::warn!("skipping scan {}: {e}", s.volume.scan_id);
                failed.push((s.volume.scan_id.clone(), e));
            }
        }
    }
    (ok, failed)
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f32]>, tail: &[usize]) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    let mut shape = vec![n];
    shape.extend_from_slice(tail);
    Tensor::new(data, &shape)
}

fn input_tail(model: &Model) -> [usize; 3] {
    [3, model.spec.v, model.spec.v]
}

/// Inference-mode logits for each input, `[N, K]` row-major.
pub fn infer_logits(model: &Model, inputs: &[&PreprocessedInput]) -> Result<Vec<f32>, TrainError> {
    let features = infer_features(model, inputs)?;
    Ok(head_logits(model, &features))
}

/// Softmax probabilities in `f64`, rows summing to one.
pub fn predict_proba(model: &Model, inputs: &[&PreprocessedInput]) -> Result<Vec<f64>, TrainError> {
    let logits: Vec<f64> = infer_logits(model, inputs)?.into_iter().map(f64::from).collect();
    Ok(softmax_rows(&logits, NUM_CLASSES))
}

/// Backbone outputs computed in inference mode, one flat row per input.
struct FeatureCache {
    rows: Vec<Vec<f32>>,
    tail: Vec<usize>,
}

fn infer_features(model: &Model, inputs: &[&PreprocessedInput]) -> Result<FeatureCache, TrainError> {
    let tail = input_tail(model);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(inputs.len());
    let mut feat_tail = Vec::new();
    for chunk in inputs.chunks(EVAL_BATCH) {
        let x = stack(chunk.iter().map(|i| i.pixels.as_slice()), &tail);
        let f = no_grad(|| model.features(&x, &mut Ctx { train: false, rng: &mut rng }))?;
        feat_tail = f.main.shape()[1..].to_vec();
        let per = f.main.numel() / chunk.len();
        rows.extend(f.main.data().chunks_exact(per).map(|r| r.to_vec()));
    }
    Ok(FeatureCache { rows, tail: feat_tail })
}

fn head_logits(model: &Model, cache: &FeatureCache) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(cache.rows.len() * NUM_CLASSES);
    for chunk in cache.rows.chunks(EVAL_BATCH) {
        let f = stack(chunk.iter().map(|r| r.as_slice()), &cache.tail);
        let logits = no_grad(|| model.head(&f, &mut Ctx { train: false, rng: &mut rng }));
        out.extend_from_slice(&logits.data());
    }
    out
}

fn loss_and_accuracy(logits: &[f32], labels: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &t) in logits.chunks_exact(NUM_CLASSES).zip(labels) {
        let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        if crate::evaluator::argmax(&row) == t {
            correct += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

/// Accuracy of the inference-mode predictions on `examples`.
pub fn accuracy(model: &Model, examples: &[LabeledInput]) -> Result<f64, TrainError> {
    let inputs: Vec<&PreprocessedInput> = examples.iter().map(|e| &e.input).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label.id()).collect();
    Ok(loss_and_accuracy(&infer_logits(model, &inputs)?, &labels).1)
}

/// SHA-256 of the pixels and labels of `examples`, in order.
pub fn examples_digest(examples: &[LabeledInput]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.input.scan_id.as_bytes());
        h.update([e.label.id() as u8]);
        for p in &e.input.pixels {
            h.update(p.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Metadata stored alongside checkpoint tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_spec: ModelSpec,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_digest: String,
}

impl CheckpointMeta {
    fn to_map(&self) -> HashMap<String, String> {
        HashMap::from([
            ("model_spec".to_string(), serde_json::to_string(&self.model_spec).expect("serialisable")),
            ("train_config".to_string(), serde_json::to_string(&self.train_config).expect("serialisable")),
            ("epoch".to_string(), self.epoch.to_string()),
            ("val_accuracy".to_string(), format!("{:?}", self.val_accuracy)),
            ("val_digest".to_string(), self.val_digest.clone()),
        ])
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self, String> {
        let get = |k: &str| map.get(k).ok_or_else(|| format!("metadata key {k:?} missing"));
        Ok(CheckpointMeta {
            model_spec: serde_json::from_str(get("model_spec")?).map_err(|e| e.to_string())?,
            train_config: serde_json::from_str(get("train_config")?).map_err(|e| e.to_string())?,
            epoch: get("epoch")?.parse().map_err(|e| format!("epoch: {e}"))?,
            val_accuracy: get("val_accuracy")?.parse().map_err(|e| format!("val_accuracy: {e}"))?,
            val_digest: get("val_digest")?.clone(),
        })
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

#[derive(Serialize)]
struct RunConfig<'a> {
    settings: String,
    model_spec: &'a ModelSpec,
    train_config: &'a TrainConfig,
}

/// Writes `config.json` (effective model and training configuration).
pub fn write_run_config(run_dir: &Path, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(), TrainError> {
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let path = run_dir.join(CONFIG_FILE);
    let body = RunConfig { settings: cfg.settings(), model_spec: spec, train_config: cfg };
    let text = serde_json::to_string_pretty(&body).expect("serialisable");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

fn log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    for r in log {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy);
    }
    s
}

/// Fine-tunes `model` on `train_set`, validating on `val_set` after every
/// epoch. The freeze policy must already match `cfg.extent`. Artifacts go to
/// `run_dir`.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &[LabeledInput],
    val_set: &[LabeledInput],
    run_dir: &Path,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Argument(format!(
            "need non-empty train and validation sets, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    if model.extent() != cfg.extent {
        return Err(TrainError::Argument(format!(
            "model freeze policy is {} but the config asks for {}",
            model.extent(),
            cfg.extent
        )));
    }
    let v = model.spec.v;
    if let Some(bad) = train_set.iter().chain(val_set).find(|e| e.input.v != v) {
        return Err(TrainError::Argument(format!("scan {} was prepared at v={}, model expects {v}", bad.input.scan_id, bad.input.v)));
    }
    write_run_config(run_dir, &model.spec, cfg)?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let log_path = run_dir.join(LOG_FILE);

    let params = model.trainable_params();
    let mut opt: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(params, cfg.lr)),
        OptimizerKind::Sgd => Box::new(Sgd::new(params, cfg.lr, cfg.momentum)),
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let head_only = cfg.extent == FineTuneExtent::LastLayerOnly;
    let train_inputs: Vec<&PreprocessedInput> = train_set.iter().map(|e| &e.input).collect();
    let val_inputs: Vec<&PreprocessedInput> = val_set.iter().map(|e| &e.input).collect();
    let train_labels: Vec<usize> = train_set.iter().map(|e| e.label.id()).collect();
    let val_labels: Vec<usize> = val_set.iter().map(|e| e.label.id()).collect();
    let train_cache = if head_only { Some(infer_features(model, &train_inputs)?) } else { None };
    let val_cache = if head_only { Some(infer_features(model, &val_inputs)?) } else { None };
    let val_digest = examples_digest(val_set);

    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut ctx = Ctx { train: true, rng: &mut dropout_rng };
            let (logits, aux) = match &train_cache {
                Some(cache) => {
                    let f = stack(batch.iter().map(|&i| cache.rows[i].as_slice()), &cache.tail);
                    (model.head(&f, &mut ctx), None)
                }
                None => {
                    let x = stack(batch.iter().map(|&i| train_inputs[i].pixels.as_slice()), &input_tail(model));
                    let out = model.forward(&x, &mut ctx)?;
                    (out.logits, out.aux_logits)
                }
            };
            let mut loss = logits.cross_entropy(&targets);
            if let Some(aux) = aux {
                loss = loss.add(&aux.cross_entropy(&targets).scale(AUX_LOSS_WEIGHT));
            }
            let value = loss.item() as f64;
            if !value.is_finite() {
                opt.zero_grad();
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_sum += value * batch.len() as f64;
            {
                let data = logits.data();
                for (row, &t) in data.chunks_exact(NUM_CLASSES).zip(&targets) {
                    let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                    if crate::evaluator::argmax(&row) == t {
                        correct += 1;
                    }
                }
            }
            loss.backward();
            opt.step();
            opt.zero_grad();
        }
        let val_logits = match &val_cache {
            Some(cache) => head_logits(model, cache),
            None => infer_logits(model, &val_inputs)?,
        };
        let (val_loss, val_accuracy) = loss_and_accuracy(&val_logits, &val_labels);
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let n = train_set.len() as f64;
        log.push(EpochRecord { epoch, train_loss: loss_sum / n, train_accuracy: correct as f64 / n, val_loss, val_accuracy });
        log::info!(
            "epoch {epoch}: train_loss {:.4} train_acc {:.3} val_loss {val_loss:.4} val_acc {val_accuracy:.3}",
            loss_sum / n,
            correct as f64 / n
        );
        if best.is_none_or(|(_, acc)| val_accuracy > acc) {
            best = Some((epoch, val_accuracy));
            let meta = CheckpointMeta {
                model_spec: model.spec.clone(),
                train_config: cfg.clone(),
                epoch,
                val_accuracy,
                val_digest: val_digest.clone(),
            };
            let tmp = run_dir.join(format!("{CHECKPOINT_FILE}.tmp"));
            model.save(&tmp, meta.to_map())?;
            fs::rename(&tmp, &ckpt_path).map_err(|e| io_err(&ckpt_path, e))?;
        }
        fs::write(&log_path, log_csv(&log)).map_err(|e| io_err(&log_path, e))?;
        let losses: Vec<f64> = log.iter().map(|r| r.val_loss).collect();
        if plateau_detector(&losses, cfg.plateau_patience, cfg.plateau_min_delta) {
            stopped_early = true;
            break;
        }
    }
    let accs: Vec<f64> = log.iter().map(|r| r.val_accuracy).collect();
    debug_assert_eq!(select_best(&accs), best);
    let (best_epoch, best_val_accuracy) = best.expect("at least one epoch ran");
    Ok(TrainResult { best_epoch, best_val_accuracy, epoch_log: log, checkpoint_path: ckpt_path, stopped_early })
}

fn spec_mismatch(expected: &ModelSpec, found: &ModelSpec) -> Option<String> {
    let mut diffs = Vec::new();
    if expected.arch != found.arch {
        diffs.push(format!("arch {} != {}", expected.arch, found.arch));
    }
    if expected.v != found.v {
        diffs.push(format!("v {} != {}", expected.v, found.v));
    }
    if expected.num_classes != found.num_classes {
        diffs.push(format!("num_classes {} != {}", expected.num_classes, found.num_classes));
    }
    if expected.norm_mean != found.norm_mean || expected.norm_std != found.norm_std {
        diffs.push("normalisation differs".into());
    }
    if expected.init != found.init {
        diffs.push(format!("init {:?} != {:?}", expected.init, found.init));
    }
    (!diffs.is_empty()).then(|| diffs.join(", "))
}

/// Loads a checkpoint written by [`train`]. With `expected`, the stored
/// model settings must match it.
pub fn reload_checkpoint(path: &Path, expected: Option<&ModelSpec>) -> Result<(Model, CheckpointMeta), TrainError> {
    let err = |reason: String| TrainError::Checkpoint { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(e.to_string()))?;
    let map: HashMap<String, String> = header.metadata().clone().unwrap_or_default();
    let meta = CheckpointMeta::from_map(&map).map_err(err)?;
    if let Some(want) = expected {
        if let Some(mismatch) = spec_mismatch(want, &meta.model_spec) {
            return Err(TrainError::SpecMismatch { path: path.to_path_buf(), mismatch });
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| err(e.to_string()))?;
    let mut model = Model::from_checkpoint(&meta.model_spec, &st, path).map_err(|e| err(e.to_string()))?;
    model.set_extent(meta.train_config.extent);
    Ok((model, meta))
}

/// Reads `log.csv` from a run directory.
pub fn read_log(run_dir: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let path = run_dir.join(LOG_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| io_err(&path, e))?;
    rdr.deserialize().collect::<Result<Vec<EpochRecord>, _>>().map_err(|e| io_err(&path, e))
}

/// Class counts, for logging.
pub fn class_counts(examples: &[LabeledInput]) -> BTreeMap<Severity, usize> {
    let mut m = BTreeMap::new();
    for e in examples {
        *m.entry(e.label).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_examples() {
        let decreasing: Vec<f64> = (0..30).map(|i| 5.0 - 0.1 * i as f64).collect();
        for k in 1..=decreasing.len() {
            assert!(!plateau_detector(&decreasing[..k], 5, 0.01));
        }
        let flat = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
        let fired: Vec<bool> = (1..=flat.len()).map(|k| plateau_detector(&flat[..k], 5, 0.0)).collect();
        assert_eq!(fired, [false, false, false, false, false, false, true]);
        assert!(!plateau_detector(&[0.3], 1, 0.0));
        assert!(plateau_detector(&[0.3, 0.3], 1, 0.0));
    }

    #[test]
    fn settings_label() {
        let cfg = TrainConfig { batch_size: 16, optimizer: OptimizerKind::Adam, lr: 0.001, ..Default::default() };
        assert_eq!(cfg.settings(), "BS16 ADAM LR0.001");
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"ADAM\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { internal_val_fraction: 1.0, ..Default::default() }.validate().is_err());
    }
}
