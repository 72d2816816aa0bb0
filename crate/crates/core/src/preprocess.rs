//! Scan volume to 3-channel network input: center slice selection, lung
//! masking, center cropping, resizing and normalisation.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::ingest::ScanVolume;
use crate::model_zoo::ModelSpec;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("scan {scan_id}: cannot read slice {path}: {source}")]
    Decode {
        scan_id: String,
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Fraction of the way through the volume at which the center slice sits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSelector {
    pub f: f64,
}

impl Default for SliceSelector {
    fn default() -> Self {
        SliceSelector { f: 0.25 }
    }
}

impl SliceSelector {
    pub fn new(f: f64) -> Result<Self, PreprocessError> {
        if !(f > 0.0 && f < 1.0) {
            return Err(PreprocessError::Argument(format!("slice fraction must lie in (0, 1), got {f}")));
        }
        Ok(SliceSelector { f })
    }
}

/// `z = nint(n * f)` with ties to even, clamped into `[0, n - 1]`.
pub fn select_center_index(n: usize, f: f64) -> Result<usize, PreprocessError> {
    if n == 0 {
        return Err(PreprocessError::Argument("volume has no slices".into()));
    }
    let z = (n as f64 * f).round_ties_even();
    Ok((z.max(0.0) as usize).min(n - 1))
}

/// Binary lung mask, row-major, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LungMask {
    pub width: u32,
    pub height: u32,
    pub mask: Vec<u8>,
}

impl LungMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width + x) as usize] != 0
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn touches_border(&self) -> bool {
        let (w, h) = (self.width, self.height);
        (0..w).any(|x| self.get(x, 0) || self.get(x, h - 1)) || (0..h).any(|y| self.get(0, y) || self.get(w - 1, y))
    }

    /// The mask as a 0/255 image.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    /// Zeroes every pixel of `img` outside the mask.
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            if self.get(x, y) {
                *img.get_pixel(x, y)
            } else {
                Luma([0])
            }
        })
    }
}

pub const DEFAULT_MASK_THRESHOLD: u8 = 100;
pub const CLOSING_RADIUS: usize = 2;

/// Foreground pixels grouped into components, in raster order of their first
/// pixel.
fn components(fg: &[bool], w: usize, h: usize, eight: bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn clear_border(fg: &mut [bool], w: usize, h: usize) {
    for comp in components(fg, w, h, true) {
        let on_border = comp.iter().any(|&i| {
            let (x, y) = (i % w, i / w);
            x == 0 || y == 0 || x == w - 1 || y == h - 1
        });
        if on_border {
            for i in comp {
                fg[i] = false;
            }
        }
    }
}

/// Keeps the `k` largest 8-connected components; equal sizes keep the one
/// met first in raster order.
fn keep_largest(fg: &mut [bool], w: usize, h: usize, k: usize) {
    let mut comps = components(fg, w, h, true);
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    for comp in comps.into_iter().skip(k) {
        for i in comp {
            fg[i] = false;
        }
    }
}

fn disk_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}

/// Dilation followed by erosion with a disk, computed in a frame padded by
/// the radius so that erosion never sees the image edge.
fn closing(fg: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let mut padded = vec![false; pw * ph];
    for y in 0..h {
        for x in 0..w {
            padded[(y + r) * pw + x + r] = fg[y * w + x];
        }
    }
    let disk = disk_offsets(r);
    let probe = |src: &[bool], x: usize, y: usize, want: bool| {
        disk.iter().any(|&(dx, dy)| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            let inside = nx >= 0 && ny >= 0 && nx < pw as isize && ny < ph as isize;
            let v = inside && src[ny as usize * pw + nx as usize];
            v == want
        })
    };
    let dilated: Vec<bool> = (0..pw * ph).map(|i| probe(&padded, i % pw, i / pw, true)).collect();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = !probe(&dilated, x + r, y + r, false);
        }
    }
    out
}

/// Background regions not 4-connected to the image border become foreground.
fn fill_holes(fg: &mut [bool], w: usize, h: usize) {
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            let i = y * w + x;
            if border && !fg[i] {
                outside[i] = true;
                queue.push_back(i);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !fg[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    for (f, o) in fg.iter_mut().zip(outside) {
        if !o {
            *f = true;
        }
    }
}

/// Everything after thresholding: border clearing, two largest components,
/// closing, hole filling.
pub fn refine_mask(fg: &[bool], width: u32, height: u32) -> LungMask {
    let (w, h) = (width as usize, height as usize);
    let mut fg = fg.to_vec();
    if w > 0 && h > 0 {
        clear_border(&mut fg, w, h);
        keep_largest(&mut fg, w, h, 2);
        fg = closing(&fg, w, h, CLOSING_RADIUS);
        fill_holes(&mut fg, w, h);
    }
    LungMask { width, height, mask: fg.into_iter().map(u8::from).collect() }
}

/// Dark regions inside the body that do not touch the frame.
pub fn build_lung_mask(slice: &GrayImage, threshold: u8) -> LungMask {
    let fg: Vec<bool> = slice.pixels().map(|p| p.0[0] < threshold).collect();
    refine_mask(&fg, slice.width(), slice.height())
}

/// Centered window of side `floor(side * fraction)`; odd margins put the
/// extra pixel on the trailing edge.
pub fn center_crop(slice: &GrayImage, fraction: f64) -> Result<GrayImage, PreprocessError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PreprocessError::Argument(format!("crop fraction must lie in (0, 1], got {fraction}")));
    }
    let side = |s: u32| (s as f64 * fraction + 1e-9).floor() as u32;
    let (cw, ch) = (side(slice.width()), side(slice.height()));
    if cw < 1 || ch < 1 {
        return Err(PreprocessError::Argument(format!(
            "crop fraction {fraction} leaves no pixels of a {}x{} slice",
            slice.width(),
            slice.height()
        )));
    }
    let x0 = (slice.width() - cw) / 2;
    let y0 = (slice.height() - ch) / 2;
    Ok(imageops::crop_imm(slice, x0, y0, cw, ch).to_image())
}

/// Run-level preprocessing switches, recorded with every result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub selector: SliceSelector,
    pub apply_mask: bool,
    pub apply_crop: bool,
    pub crop_fraction: f64,
    pub mask_threshold: u8,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            selector: SliceSelector::default(),
            apply_mask: true,
            apply_crop: true,
            crop_fraction: 0.9,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedInput {
    /// `3 x v x v`, channel-major.
    pub pixels: Vec<f32>,
    pub v: usize,
    pub scan_id: String,
    pub z: usize,
    pub masked: bool,
    pub cropped: bool,
}

/// Channel sources `(z-1, z, z+1)` clamped into the volume.
pub fn neighbour_indices(n: usize, z: usize) -> [usize; 3] {
    [z.saturating_sub(1), z, (z + 1).min(n - 1)]
}

pub fn load_slice(scan_id: &str, path: &Path) -> Result<GrayImage, PreprocessError> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| PreprocessError::Decode { scan_id: scan_id.to_string(), path: path.to_path_buf(), source })
}

/// Masking, cropping and resizing of one slice, before normalisation.
pub fn prepare_slice(slice: &GrayImage, cfg: &PreprocessConfig, v: u32) -> Result<GrayImage, PreprocessError> {
    let mut img = if cfg.apply_mask {
        build_lung_mask(slice, cfg.mask_threshold).apply(slice)
    } else {
        slice.clone()
    };
    if cfg.apply_crop {
        img = center_crop(&img, cfg.crop_fraction)?;
    }
    if img.width() != v || img.height() != v {
        img = imageops::resize(&img, v, v, FilterType::Triangle);
    }
    Ok(img)
}

pub fn assemble_input(volume: &ScanVolume, cfg: &PreprocessConfig, spec: &ModelSpec) -> Result<PreprocessedInput, PreprocessError> {
    let n = volume.n();
    let z = select_center_index(n, cfg.selector.f)
        .map_err(|_| PreprocessError::Argument(format!("scan {} has no slices", volume.scan_id)))?;
    let v = spec.v;
    let plane = v * v;
    let mut pixels = vec![0f32; 3 * plane];
    for (c, idx) in neighbour_indices(n, z).into_iter().enumerate() {
        let slice = load_slice(&volume.scan_id, &volume.slice_paths[idx])?;
        let img = prepare_slice(&slice, cfg, v as u32)?;
        let (mean, std) = (spec.norm_mean[c], spec.norm_std[c]);
        for (dst, p) in pixels[c * plane..(c + 1) * plane].iter_mut().zip(img.pixels()) {
            *dst = (p.0[0] as f32 / 255.0 - mean) / std;
        }
    }
    Ok(PreprocessedInput {
        pixels,
        v,
        scan_id: volume.scan_id.clone(),
        z,
        masked: cfg.apply_mask,
        cropped: cfg.apply_crop,
    })
}

/// Preprocesses every volume; unreadable scans are returned separately and
/// left out of the batch.
pub fn assemble_batch(
    volumes: &[&ScanVolume],
    cfg: &PreprocessConfig,
    spec: &ModelSpec,
) -> (Vec<PreprocessedInput>, Vec<(String, PreprocessError)>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for vol in volumes {
        match assemble_input(vol, cfg, spec) {
            Ok(x) => ok.push(x),
            Err(e) => {
                log::warn!("skipping scan {}: {e}", vol.scan_id);
                failed.push((vol.scan_id.clone(), e));
            }
        }
    }
    (ok, failed)
}

/// The three channels side by side as an 8-bit PNG, each min-max stretched.
pub fn write_triptych(input: &PreprocessedInput, path: &Path) -> Result<(), PreprocessError> {
    let v = input.v as u32;
    let plane = input.v * input.v;
    let mut out = GrayImage::new(3 * v, v);
    for c in 0..3 {
        let ch = &input.pixels[c * plane..(c + 1) * plane];
        let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (i, &p) in ch.iter().enumerate() {
            let x = c as u32 * v + (i % input.v) as u32;
            let y = (i / input.v) as u32;
            out.put_pixel(x, y, Luma([((p - lo) / span * 255.0).round() as u8]));
        }
    }
    out.save(path).map_err(|source| PreprocessError::Write { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_index_examples() {
        assert_eq!(select_center_index(100, 0.25).unwrap(), 25);
        assert_eq!(select_center_index(2, 0.25).unwrap(), 0);
        assert_eq!(select_center_index(301, 0.25).unwrap(), 75);
        assert_eq!(select_center_index(6, 0.25).unwrap(), 2);
        assert_eq!(select_center_index(10, 0.25).unwrap(), 2);
        assert_eq!(select_center_index(1, 0.99).unwrap(), 0);
        assert!(select_center_index(0, 0.25).is_err());
    }

    #[test]
    fn neighbours_clamp() {
        assert_eq!(neighbour_indices(3, 1), [0, 1, 2]);
        assert_eq!(neighbour_indices(1, 0), [0, 0, 0]);
        assert_eq!(neighbour_indices(100, 25), [24, 25, 26]);
    }

    #[test]
    fn crop_geometry() {
        let img = GrayImage::from_fn(99, 99, |x, y| Luma([((x * 7 + y) % 251) as u8]));
        let c = center_crop(&img, 0.5).unwrap();
        assert_eq!(c.dimensions(), (49, 49));
        assert_eq!(c.get_pixel(0, 0), img.get_pixel(25, 25));
        let c = center_crop(&GrayImage::new(100, 100), 0.5).unwrap();
        assert_eq!(c.dimensions(), (50, 50));
        assert_eq!(center_crop(&img, 1.0).unwrap(), img);
        assert!(center_crop(&GrayImage::new(3, 3), 0.2).is_err());
        assert!(center_crop(&img, 0.0).is_err());
    }

    #[test]
    fn uniform_bright_slice_is_empty() {
        let img = GrayImage::from_pixel(64, 64, Luma([200]));
        assert_eq!(build_lung_mask(&img, 100).area(), 0);
    }

    #[test]
    fn border_touching_region_is_cleared() {
        let img = GrayImage::from_fn(64, 64, |x, _| Luma([if x < 10 { 50 } else { 200 }]));
        assert_eq!(build_lung_mask(&img, 100).area(), 0);
    }

    #[test]
    fn keeps_two_largest_and_fills_holes() {
        let img = GrayImage::from_fn(60, 40, |x, y| {
            let left = (5..20).contains(&x) && (5..35).contains(&y);
            let right = (30..50).contains(&x) && (5..35).contains(&y);
            let speck = (54..56).contains(&x) && (10..12).contains(&y);
            let hole = (10..14).contains(&x) && (15..19).contains(&y);
            Luma([if (left && !hole) || right || speck { 30 } else { 220 }])
        });
        let m = build_lung_mask(&img, 100);
        assert!(m.get(12, 17));
        assert!(!m.get(54, 10));
        assert_eq!(m.area(), 15 * 30 + 20 * 30);
    }

    #[test]
    fn masking_zeroes_background() {
        let img = GrayImage::from_fn(32, 32, |x, y| Luma([if (8..24).contains(&x) && (8..24).contains(&y) { 40 } else { 180 }]));
        let m = build_lung_mask(&img, 100);
        let masked = m.apply(&img);
        for (x, y, p) in masked.enumerate_pixels() {
            if !m.get(x, y) {
                assert_eq!(p.0[0], 0);
            } else {
                assert_eq!(p.0[0], 40);
            }
        }
    }
}
