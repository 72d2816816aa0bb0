//! Scan discovery, label loading and the per-scan file-count manifest.
//!
//! A dataset root holds one directory per split (`train/`, `val/`, `test/`),
//! and each split holds one directory per scan containing its JPEG slices.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::severity::Severity;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("dataset directory {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: malformed row {line}: {reason}")]
    Malformed { path: PathBuf, line: u64, reason: String },
    #[error("label file lists scan {0:?} more than once")]
    DuplicateLabel(String),
    #[error("scan {scan_id:?} has unknown label {token:?}")]
    UnknownLabel { scan_id: String, token: String },
    #[error("no label for {} scan(s): {}", .0.len(), .0.join(", "))]
    MissingLabels(Vec<String>),
    #[error("scan id {0:?} appears in more than one split")]
    DuplicateScanId(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InternalVal,
    UnseenVal,
    Test,
}

impl Split {
    /// Splits that exist as directories under a dataset root.
    pub const ON_DISK: [Split; 3] = [Split::Train, Split::UnseenVal, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InternalVal => "internal_val",
            Split::UnseenVal => "unseen_val",
            Split::Test => "test",
        }
    }

    /// Directory name under the dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InternalVal => "internal_val",
            Split::UnseenVal => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "internal_val" => Ok(Split::InternalVal),
            "unseen_val" | "val" => Ok(Split::UnseenVal),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One patient scan: its slices in axial order. The slice count stands in
/// for the volume depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanVolume {
    pub scan_id: String,
    pub slice_paths: Vec<PathBuf>,
    pub split: Split,
}

impl ScanVolume {
    pub fn n(&self) -> usize {
        self.slice_paths.len()
    }

    /// Empty scans are kept for bookkeeping but never trained on.
    pub fn is_excluded(&self) -> bool {
        self.slice_paths.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledScan {
    pub volume: ScanVolume,
    pub label: Severity,
}

pub fn is_slice_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"))
        .unwrap_or(false)
}

/// Trailing run of ASCII digits in a file stem, without leading zeros.
fn trailing_digits(path: &Path) -> Option<&str> {
    let stem = path.file_stem()?.to_str()?;
    let start = stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let digits = &stem[start..];
    if digits.is_empty() {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    Some(if trimmed.is_empty() { "0" } else { trimmed })
}

fn cmp_numeric(a: &str, b: &str) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// Orders slices by the numeric index at the end of their file stem. If any
/// file lacks an index the whole folder falls back to lexicographic order.
pub fn sort_slices(paths: &mut [PathBuf]) {
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if paths.iter().all(|p| trailing_digits(p).is_some()) {
        paths.sort_by(|a, b| {
            cmp_numeric(trailing_digits(a).unwrap(), trailing_digits(b).unwrap()).then_with(|| name(a).cmp(&name(b)))
        });
    } else {
        paths.sort_by_key(name);
    }
}

/// Numeric slice index used for ordering, if the file name carries one.
pub fn slice_index(path: &Path) -> Option<u128> {
    trailing_digits(path).and_then(|d| d.parse().ok())
}

fn list_slices(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut slices = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_file() && is_slice_file(&path) {
            slices.push(path);
        }
    }
    sort_slices(&mut slices);
    Ok(slices)
}

/// One [`ScanVolume`] per immediate subdirectory of `split_dir`, sorted by
/// scan id.
pub fn discover_scans(split_dir: &Path, split: Split) -> Result<Vec<ScanVolume>, IngestError> {
    if !split_dir.is_dir() {
        return Err(IngestError::MissingRoot(split_dir.to_path_buf()));
    }
    let mut scans = Vec::new();
    for entry in fs::read_dir(split_dir).map_err(io_err(split_dir))? {
        let entry = entry.map_err(io_err(split_dir))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let scan_id = entry.file_name().to_string_lossy().into_owned();
        let slice_paths = list_slices(&path)?;
        if slice_paths.is_empty() {
            log::warn!("scan {scan_id} in {} has no JPEG slices; excluded from training", split_dir.display());
        }
        scans.push(ScanVolume { scan_id, slice_paths, split });
    }
    scans.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    Ok(scans)
}

/// Scans of every split directory present under `root`.
pub fn discover_dataset(root: &Path) -> Result<Vec<ScanVolume>, IngestError> {
    if !root.is_dir() {
        return Err(IngestError::MissingRoot(root.to_path_buf()));
    }
    let mut all = Vec::new();
    for split in Split::ON_DISK {
        let dir = root.join(split.dir_name());
        if dir.is_dir() {
            all.extend(discover_scans(&dir, split)?);
        }
    }
    Ok(all)
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    scan_id: String,
    label: String,
}

/// Reads a `scan_id,label` CSV into a map. Label tokens are grade names (any
/// case) or ids `0..=3`.
pub fn read_label_file(label_file: &Path) -> Result<BTreeMap<String, Severity>, IngestError> {
    let csv_err = |source| IngestError::Csv { path: label_file.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(label_file)
        .map_err(csv_err)?;
    let mut labels = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(csv_err)?;
        let label = row.label.parse::<Severity>().map_err(|_| IngestError::UnknownLabel {
            scan_id: row.scan_id.clone(),
            token: row.label.clone(),
        })?;
        if labels.insert(row.scan_id.clone(), label).is_some() {
            return Err(IngestError::DuplicateLabel(row.scan_id));
        }
    }
    Ok(labels)
}

/// Attaches labels to every non-test scan. Test scans are skipped; any other
/// scan without a label is reported in a single error.
pub fn load_labels(label_file: &Path, scans: &[ScanVolume]) -> Result<Vec<LabeledScan>, IngestError> {
    let labels = read_label_file(label_file)?;
    attach_labels(&labels, scans)
}

pub fn attach_labels(labels: &BTreeMap<String, Severity>, scans: &[ScanVolume]) -> Result<Vec<LabeledScan>, IngestError> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for scan in scans.iter().filter(|s| s.split != Split::Test) {
        match labels.get(&scan.scan_id) {
            Some(&label) => out.push(LabeledScan { volume: scan.clone(), label }),
            None => missing.push(scan.scan_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(IngestError::MissingLabels(missing));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub scan_id: String,
    pub file_count: usize,
    pub split: Split,
}

/// Per-scan slice counts, used to detect files lost in transfer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Discrepancy {
    pub scan_id: String,
    pub split: Split,
    /// `None` when the scan is on disk but not in the manifest.
    pub expected: Option<usize>,
    /// `None` when the manifest lists a scan that is gone from disk.
    pub actual: Option<usize>,
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<usize>| v.map_or_else(|| "absent".to_string(), |c| c.to_string());
        write!(f, "{},{},expected={},actual={}", self.split, self.scan_id, show(self.expected), show(self.actual))
    }
}

pub fn build_manifest(scans: &[ScanVolume]) -> Manifest {
    let mut rows: Vec<ManifestRow> = scans
        .iter()
        .map(|s| ManifestRow { scan_id: s.scan_id.clone(), file_count: s.n(), split: s.split })
        .collect();
    rows.sort_by(|a, b| (a.split, &a.scan_id).cmp(&(b.split, &b.scan_id)));
    Manifest { rows }
}

/// Compares a manifest with the tree under `root`. Only splits named in the
/// manifest are inspected.
pub fn verify_manifest(manifest: &Manifest, root: &Path) -> Result<Vec<Discrepancy>, IngestError> {
    let splits: HashSet<Split> = manifest.rows.iter().map(|r| r.split).collect();
    let mut on_disk: HashMap<(Split, String), usize> = HashMap::new();
    for split in splits {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            continue;
        }
        for scan in discover_scans(&dir, split)? {
            on_disk.insert((split, scan.scan_id.clone()), scan.n());
        }
    }
    let mut out = Vec::new();
    for row in &manifest.rows {
        let actual = on_disk.remove(&(row.split, row.scan_id.clone()));
        if actual != Some(row.file_count) {
            out.push(Discrepancy { scan_id: row.scan_id.clone(), split: row.split, expected: Some(row.file_count), actual });
        }
    }
    let mut extra: Vec<_> = on_disk.into_iter().collect();
    extra.sort();
    for ((split, scan_id), count) in extra {
        out.push(Discrepancy { scan_id, split, expected: None, actual: Some(count) });
    }
    Ok(out)
}

impl Manifest {
    /// `scan_id,file_count,split` with a header row and LF line endings.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv write");
        }
        if self.rows.is_empty() {
            w.write_record(["scan_id", "file_count", "split"]).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_csv_string()).map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Manifest, IngestError> {
        let csv_err = |source| IngestError::Csv { path: path.to_path_buf(), source };
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let rows = reader.deserialize().collect::<Result<Vec<ManifestRow>, _>>().map_err(csv_err)?;
        Ok(Manifest { rows })
    }

    /// SHA-256 of the canonical CSV form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_string().as_bytes()))
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }
}

/// Everything the experiment grid needs from a dataset root.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<LabeledScan>,
    pub unseen_val: Vec<LabeledScan>,
    pub test: Vec<ScanVolume>,
    pub manifest: Manifest,
}

impl Dataset {
    /// Loads `root/{train,val,test}` with labels from `label_file`
    /// (default `root/labels.csv`). Empty scans stay in the manifest but are
    /// dropped from the splits.
    pub fn load(root: &Path, label_file: Option<&Path>) -> Result<Dataset, IngestError> {
        let scans = discover_dataset(root)?;
        let mut seen = HashSet::new();
        for s in &scans {
            if !seen.insert(s.scan_id.as_str()) {
                return Err(IngestError::DuplicateScanId(s.scan_id.clone()));
            }
        }
        let manifest = build_manifest(&scans);
        let default_labels = root.join("labels.csv");
        let labeled = load_labels(label_file.unwrap_or(&default_labels), &scans)?;
        let keep = |s: &LabeledScan| !s.volume.is_excluded();
        let train = labeled.iter().filter(|s| s.volume.split == Split::Train && keep(s)).cloned().collect();
        let unseen_val = labeled.iter().filter(|s| s.volume.split == Split::UnseenVal && keep(s)).cloned().collect();
        let test = scans.into_iter().filter(|s| s.split == Split::Test && !s.is_excluded()).collect();
        Ok(Dataset { root: root.to_path_buf(), train, unseen_val, test, manifest })
    }

    pub fn manifest_hash(&self) -> String {
        self.manifest.hash()
    }
}
