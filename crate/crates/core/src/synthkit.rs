//! Synthetic CT-like scans with planted GGO involvement.
//!
//! Each slice shows a bright body on dark air with two dark elliptical
//! lungs. A fraction `q` of the lung interior is raised to a hazy grey,
//! chosen as the top-`q` quantile of a smooth random field, and the scan is
//! labelled from `q` with the clinical involvement bands.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::Split;
use crate::severity::Severity;

pub const AIR: f64 = 10.0;
pub const BODY: f64 = 180.0;
pub const LUNG: f64 = 20.0;
pub const GGO: f64 = 70.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth argument: {0}")]
    Argument(String),
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_scans_per_class: usize,
    pub val_scans_per_class: usize,
    pub test_scans_per_class: usize,
    pub slices_per_scan: (usize, usize),
    pub image_side: u32,
    pub involvement_thresholds: [f64; 3],
    pub margin: f64,
    pub noise_level: f64,
    pub seed: u64,
    pub jpeg_quality: u8,
}

impl SynthSpec {
    /// 8 training scans per class, 12 slices of 128 px.
    pub fn tiny() -> Self {
        SynthSpec {
            n_scans_per_class: 8,
            val_scans_per_class: 2,
            test_scans_per_class: 2,
            slices_per_scan: (12, 12),
            image_side: 128,
            involvement_thresholds: [0.26, 0.50, 0.75],
            margin: 0.03,
            noise_level: 3.0,
            seed: 0,
            jpeg_quality: 90,
        }
    }

    /// The tiny preset with 16 training scans per class.
    pub fn tiny_plus() -> Self {
        SynthSpec { n_scans_per_class: 16, val_scans_per_class: 4, test_scans_per_class: 4, ..Self::tiny() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let [a, b, c] = self.involvement_thresholds;
        if !(0.0 < a && a < b && b < c && c < 1.0) {
            return Err(SynthError::Argument(format!(
                "involvement thresholds must be strictly increasing in (0, 1), got {:?}",
                self.involvement_thresholds
            )));
        }
        if self.image_side < 64 {
            return Err(SynthError::Argument(format!("image side must be at least 64, got {}", self.image_side)));
        }
        let (lo, hi) = self.slices_per_scan;
        if lo == 0 || lo > hi {
            return Err(SynthError::Argument(format!("invalid slice range {lo}..={hi}")));
        }
        if self.n_scans_per_class == 0 {
            return Err(SynthError::Argument("need at least one training scan per class".into()));
        }
        if !(self.margin >= 0.0) || !(self.noise_level >= 0.0) {
            return Err(SynthError::Argument("margin and noise level must be non-negative".into()));
        }
        if self.jpeg_quality == 0 || self.jpeg_quality > 100 {
            return Err(SynthError::Argument(format!("JPEG quality must be in 1..=100, got {}", self.jpeg_quality)));
        }
        for c in Severity::ALL {
            let (lo, hi) = self.involvement_range(c);
            if lo > hi {
                return Err(SynthError::Argument(format!("margin {} leaves no room for class {c}", self.margin)));
            }
        }
        Ok(())
    }

    /// Interval `q` is drawn from for class `c`, kept `margin` away from
    /// every band edge including the unassigned 70-75% gap.
    pub fn involvement_range(&self, c: Severity) -> (f64, f64) {
        let [a, b, t] = self.involvement_thresholds;
        let m = self.margin;
        match c {
            Severity::Mild => (0.0, a - m),
            Severity::Moderate => (a + m, b - m),
            Severity::Severe => (b + m, SEVERE_UPPER.min(t) - m),
            Severity::Critical => (t + m, 1.0),
        }
    }
}

/// Upper edge of the severe band as graded clinically; the band up to the
/// critical threshold is a gap that is assigned to severe.
pub const SEVERE_UPPER: f64 = 0.70;

/// Grades an involvement fraction with `thresholds = (t1, t2, t3)`:
/// `q < t1` mild, `q <= t2` moderate, `q <= t3` severe, otherwise critical.
pub fn involvement_to_label_with(q: f64, thresholds: [f64; 3]) -> Result<Severity, SynthError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(SynthError::Argument(format!("involvement must lie in [0, 1], got {q}")));
    }
    let [a, b, c] = thresholds;
    Ok(if q < a {
        Severity::Mild
    } else if q <= b {
        Severity::Moderate
    } else if q <= c {
        Severity::Severe
    } else {
        Severity::Critical
    })
}

pub fn involvement_to_label(q: f64) -> Result<Severity, SynthError> {
    involvement_to_label_with(q, [0.26, 0.50, 0.75])
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse { rx: self.rx * s, ry: self.ry * s, ..*self }
    }
}

#[derive(Clone, Copy, Debug)]
struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    weight: f64,
}

/// Per-scan anatomy and GGO texture.
#[derive(Clone, Debug)]
pub struct ScanPhantom {
    side: u32,
    body: Ellipse,
    lungs: [Ellipse; 2],
    bumps: Vec<Bump>,
    q: f64,
    noise_level: f64,
    noise_seed: u64,
}

impl ScanPhantom {
    pub fn random(side: u32, q: f64, noise_level: f64, rng: &mut ChaCha8Rng) -> Self {
        let s = side as f64;
        let c = s / 2.0;
        let jitter = |rng: &mut ChaCha8Rng, v: f64, f: f64| v * (1.0 + rng.random_range(-f..f));
        let body = Ellipse { cx: c, cy: c, rx: jitter(rng, 0.42 * s, 0.03), ry: jitter(rng, 0.36 * s, 0.03) };
        let lung = |rng: &mut ChaCha8Rng, sign: f64| Ellipse {
            cx: c + sign * jitter(rng, 0.17 * s, 0.05),
            cy: jitter(rng, c, 0.03),
            rx: jitter(rng, 0.12 * s, 0.08),
            ry: jitter(rng, 0.22 * s, 0.08),
        };
        let lungs = [lung(rng, -1.0), lung(rng, 1.0)];
        let bumps = (0..10)
            .map(|_| Bump {
                cx: rng.random_range(0.2 * s..0.8 * s),
                cy: rng.random_range(0.2 * s..0.8 * s),
                sigma: rng.random_range(0.06 * s..0.16 * s),
                weight: rng.random_range(0.5..1.5),
            })
            .collect();
        ScanPhantom { side, body, lungs, bumps, q, noise_level, noise_seed: rng.random() }
    }

    fn lungs_at(&self, j: usize, n: usize) -> [Ellipse; 2] {
        let t = (j as f64 + 0.5) / n as f64;
        let s = 0.8 + 0.2 * (std::f64::consts::PI * t).sin();
        [self.lungs[0].scaled(s), self.lungs[1].scaled(s)]
    }

    fn field(&self, x: f64, y: f64, j: usize) -> f64 {
        let drift = j as f64 * 0.6;
        self.bumps
            .iter()
            .map(|b| {
                let dx = x - b.cx - drift;
                let dy = y - b.cy;
                b.weight * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    }

    /// Slice `j` of `n` and its planted lung-interior mask (row-major).
    pub fn render(&self, j: usize, n: usize) -> (GrayImage, Vec<bool>) {
        let side = self.side as usize;
        let lungs = self.lungs_at(j, n);
        let mut base = vec![AIR; side * side];
        let mut lung_mask = vec![false; side * side];
        let mut interior = Vec::new();
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = y * side + x;
                if lungs.iter().any(|l| l.contains(px, py)) {
                    base[i] = LUNG;
                    lung_mask[i] = true;
                    interior.push((self.field(px, py, j), i));
                } else if self.body.contains(px, py) {
                    base[i] = BODY;
                }
            }
        }
        interior.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let affected = (self.q * interior.len() as f64).round() as usize;
        for &(_, i) in interior.iter().take(affected) {
            base[i] = GGO;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = Normal::new(0.0, self.noise_level.max(f64::MIN_POSITIVE)).expect("valid std");
        let img = GrayImage::from_fn(self.side, self.side, |x, y| {
            let mut v = base[y as usize * side + x as usize];
            if self.noise_level > 0.0 {
                v += noise.sample(&mut rng);
            }
            Luma([v.round().clamp(0.0, 255.0) as u8])
        });
        (img, lung_mask)
    }
}

/// A mid-volume slice with involvement `q`, for mask and preprocessing
/// checks.
pub fn synth_slice(side: u32, q: f64, noise_level: f64, seed: u64) -> (GrayImage, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScanPhantom::random(side, q, noise_level, &mut rng).render(0, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScan {
    pub scan_id: String,
    pub split: Split,
    pub q: f64,
    pub label: Severity,
    pub n_slices: usize,
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub scans: Vec<SynthScan>,
    pub label_file: PathBuf,
    pub test_label_file: PathBuf,
}

impl SynthSummary {
    pub fn count(&self, split: Split, label: Severity) -> usize {
        self.scans.iter().filter(|s| s.split == split && s.label == label).count()
    }
}

fn write_err(path: &Path) -> impl Fn(String) -> SynthError + '_ {
    move |reason| SynthError::Write { path: path.to_path_buf(), reason }
}

fn write_jpeg(img: &GrayImage, path: &Path, quality: u8) -> Result<(), SynthError> {
    let file = fs::File::create(path).map_err(|e| write_err(path)(e.to_string()))?;
    let mut enc = JpegEncoder::new_with_quality(BufWriter::new(file), quality);
    enc.encode_image(img).map_err(|e| write_err(path)(e.to_string()))
}

fn write_labels(path: &Path, scans: &[&SynthScan]) -> Result<(), SynthError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| write_err(path)(e.to_string()))?;
    w.write_record(["scan_id", "label"]).map_err(|e| write_err(path)(e.to_string()))?;
    for s in scans {
        w.write_record([s.scan_id.as_str(), s.label.as_str()]).map_err(|e| write_err(path)(e.to_string()))?;
    }
    w.flush().map_err(|e| write_err(path)(e.to_string()))
}

/// Writes `out_dir/{train,val,test}/<scan_id>/<slice>.jpg`, `labels.csv`
/// (train and val) and `test_labels.csv`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plan = [
        (Split::Train, spec.n_scans_per_class),
        (Split::UnseenVal, spec.val_scans_per_class),
        (Split::Test, spec.test_scans_per_class),
    ];
    let mut scans = Vec::new();
    let mut next_id = 0;
    for (split, per_class) in plan {
        let mut classes: Vec<Severity> = Severity::ALL.iter().flat_map(|&c| std::iter::repeat_n(c, per_class)).collect();
        classes.shuffle(&mut rng);
        let split_dir = out_dir.join(split.dir_name());
        fs::create_dir_all(&split_dir).map_err(|e| write_err(&split_dir)(e.to_string()))?;
        for class in classes {
            let (lo, hi) = spec.involvement_range(class);
            let q = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let label = involvement_to_label_with(q, spec.involvement_thresholds)?;
            debug_assert_eq!(label, class);
            let (smin, smax) = spec.slices_per_scan;
            let n = rng.random_range(smin..=smax);
            let scan_id = format!("ct_scan_{next_id}");
            next_id += 1;
            let phantom = ScanPhantom::random(spec.image_side, q, spec.noise_level, &mut rng);
            let dir = split_dir.join(&scan_id);
            fs::create_dir_all(&dir).map_err(|e| write_err(&dir)(e.to_string()))?;
            for j in 0..n {
                let (img, _) = phantom.render(j, n);
                write_jpeg(&img, &dir.join(format!("{j}.jpg")), spec.jpeg_quality)?;
            }
            scans.push(SynthScan { scan_id, split, q, label, n_slices: n });
        }
    }
    let label_file = out_dir.join("labels.csv");
    let labeled: Vec<&SynthScan> = scans.iter().filter(|s| s.split != Split::Test).collect();
    write_labels(&label_file, &labeled)?;
    let test_label_file = out_dir.join("test_labels.csv");
    let test: Vec<&SynthScan> = scans.iter().filter(|s| s.split == Split::Test).collect();
    write_labels(&test_label_file, &test)?;
    Ok(SynthSummary { root: out_dir.to_path_buf(), scans, label_file, test_label_file })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grading_bands() {
        let cases = [
            (0.0, Severity::Mild),
            (0.10, Severity::Mild),
            (0.26, Severity::Moderate),
            (0.50, Severity::Moderate),
            (0.60, Severity::Severe),
            (0.72, Severity::Severe),
            (0.75, Severity::Severe),
            (0.80, Severity::Critical),
            (1.0, Severity::Critical),
        ];
        for (q, want) in cases {
            assert_eq!(involvement_to_label(q).unwrap(), want, "q={q}");
        }
        assert!(involvement_to_label(-0.01).is_err());
        assert!(involvement_to_label(1.01).is_err());
    }

    #[test]
    fn sampling_ranges_avoid_band_edges() {
        let spec = SynthSpec::tiny();
        assert_eq!(spec.involvement_range(Severity::Mild), (0.0, 0.26 - 0.03));
        let (lo, hi) = spec.involvement_range(Severity::Severe);
        assert!((lo - 0.53).abs() < 1e-12 && (hi - 0.67).abs() < 1e-12);
        assert!((spec.involvement_range(Severity::Critical).0 - 0.78).abs() < 1e-12);
    }

    #[test]
    fn planted_fraction_is_exact_before_noise() {
        let (img, lungs) = synth_slice(128, 0.4, 0.0, 3);
        let interior = lungs.iter().filter(|&&l| l).count();
        let hazy = img.pixels().zip(&lungs).filter(|(p, &l)| l && p.0[0] == GGO as u8).count();
        assert_eq!(hazy, (0.4 * interior as f64).round() as usize);
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::tiny();
        s.image_side = 32;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::tiny();
        s.involvement_thresholds = [0.5, 0.26, 0.75];
        assert!(s.validate().is_err());
    }
}
