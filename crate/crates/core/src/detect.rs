//! 2-D lesion detection: tiling, a Laplacian-of-Gaussian blob baseline,
//! soft-NMS aggregation and detection metrics.
//!
//! Boxes use pixel-edge coordinates: pixel `(i, j)` covers `[i, i+1) × [j, j+1)`,
//! so a box centered on pixel center `(i, j)` has center `(i + 0.5, j + 0.5)`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::SubjectMask;

pub const DEFAULT_TILE_SIZE: u32 = 608;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_SOFT_NMS_SIGMA: f64 = 0.5;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.25;
pub const DEFAULT_LOG_SCALES: [f64; 7] = [2.0, 3.0, 4.0, 6.0, 8.0, 11.0, 16.0];
pub const DEFAULT_LOG_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MIN_BOX_PX: f64 = 5.0;

/// Peak scale-normalized LoG response of an ideal disk of unit contrast.
const LOG_DISK_PEAK: f64 = 2.0 / std::f64::consts::E;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Center in pixel-center coordinates (suitable for unprojection).
    pub fn center_pixel(&self) -> (f64, f64) {
        (self.x + self.w / 2.0 - 0.5, self.y + self.h / 2.0 - 0.5)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Intersection with the image rectangle `[0, width] × [0, height]`.
    pub fn clamped(&self, width: u32, height: u32) -> Self {
        let x0 = self.x.clamp(0.0, f64::from(width));
        let y0 = self.y.clamp(0.0, f64::from(height));
        let x1 = (self.x + self.w).clamp(0.0, f64::from(width));
        let y1 = (self.y + self.h).clamp(0.0, f64::from(height));
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.x + other.w <= self.x + self.w && other.y + other.h <= self.y + self.h
    }
}

/// Intersection over union with continuous areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    LogBaseline,
    External,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    /// Key of the enclosing map in `detections.json`; not repeated per entry.
    #[serde(skip)]
    pub image_id: String,
    pub det_id: u32,
    pub bbox: BBox,
    pub score: f64,
    pub source: DetectionSource,
    #[serde(default)]
    pub removed: bool,
    #[serde(default)]
    pub notes: String,
    /// Synthetic lesion that produced a ground-truth box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_id: Option<u32>,
}

impl Detection2D {
    pub fn new(image_id: impl Into<String>, det_id: u32, bbox: BBox, score: f64, source: DetectionSource) -> Self {
        Self {
            image_id: image_id.into(),
            det_id,
            bbox,
            score,
            source,
            removed: false,
            notes: String::new(),
            lesion_id: None,
        }
    }
}

/// Detections keyed by image id, as stored in `detections.json`.
pub type DetectionSet = BTreeMap<String, Vec<Detection2D>>;

pub fn detections_from_json(text: &str) -> Result<DetectionSet> {
    let mut set: DetectionSet = serde_json::from_str(text)?;
    for (id, dets) in set.iter_mut() {
        for d in dets.iter_mut() {
            d.image_id.clone_from(id);
        }
    }
    Ok(set)
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_json(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_detections(path: &Path, set: &DetectionSet) -> Result<()> {
    crate::io::write_json(path, set)
}

// ---------------------------------------------------------------- tiling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: u32,
    pub overlap_fraction: f64,
    pub stride: u32,
    pub image_size: (u32, u32),
    /// Image size after edge padding up to at least one tile.
    pub padded_size: (u32, u32),
    pub offsets: Vec<(u32, u32)>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn tile_rect(&self, index: usize) -> BBox {
        let (x, y) = self.offsets[index];
        BBox::new(f64::from(x), f64::from(y), f64::from(self.tile_size), f64::from(self.tile_size))
    }
}

fn axis_origins(extent: u32, tile: u32, stride: u32) -> Vec<u32> {
    if extent <= tile {
        return vec![0];
    }
    let span = extent - tile;
    let count = span.div_ceil(stride);
    let mut origins: Vec<u32> = (0..count).map(|k| k * stride).collect();
    origins.push(span);
    origins
}

pub fn tile(width: u32, height: u32, tile_size: u32, overlap: f64) -> Result<TileGrid> {
    if tile_size == 0 {
        return Err(Error::param("tile size must be at least 1"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::param(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::param("image must be non-empty"));
    }
    let stride = (f64::from(tile_size) * (1.0 - overlap)).round() as u32;
    if stride == 0 {
        return Err(Error::param("tile stride rounds to zero"));
    }
    let xs = axis_origins(width, tile_size, stride);
    let ys = axis_origins(height, tile_size, stride);
    let offsets = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TileGrid {
        tile_size,
        overlap_fraction: overlap,
        stride,
        image_size: (width, height),
        padded_size: (width.max(tile_size), height.max(tile_size)),
        offsets,
    })
}

// ---------------------------------------------------------------- LoG baseline

/// Single-channel float raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayF32 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayF32 {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "raster size mismatch");
        Self { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Self {
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for y in y0..y0 + h {
            let row = y as usize * self.width as usize;
            data.extend_from_slice(&self.data[row + x0 as usize..row + (x0 + w) as usize]);
        }
        Self::new(w, h, data)
    }
}

/// Rec. 601 luma scaled to `[0, 1]`.
pub fn luma(img: &RgbImage) -> GrayF32 {
    let data = img
        .pixels()
        .map(|p| (0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2])) / 255.0)
        .collect();
    GrayF32::new(img.width(), img.height(), data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with replicated borders.
fn blur(img: &GrayF32, sigma: f64) -> Vec<f32> {
    let (w, h) = (img.width as usize, img.height as usize);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f32;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for (i, kv) in k.iter().enumerate() {
            let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// `σ² ∇²(G_σ ∗ I)` with a 5-point Laplacian; dark blobs give positive values.
fn normalized_log(img: &GrayF32, sigma: f64) -> Vec<f32> {
    let (w, h) = (img.width as usize, img.height as usize);
    let b = blur(img, sigma);
    let s2 = (sigma * sigma) as f32;
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            let c = b[y * w + x];
            let lap = b[y * w + left] + b[y * w + right] + b[up * w + x] + b[down * w + x] - 4.0 * c;
            out[y * w + x] = s2 * lap;
        }
    }
    out
}

/// Vertex of the parabola through three samples, as an offset in `[-0.5, 0.5]`
/// from the middle sample (unit spacing).
fn parabolic_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom < 0.0 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Vertex abscissa of the parabola through three arbitrary points.
fn parabola_vertex(x: [f64; 3], y: [f64; 3]) -> Option<f64> {
    let d1 = (y[1] - y[0]) / (x[1] - x[0]);
    let d2 = (y[2] - y[1]) / (x[2] - x[1]);
    let a = (d2 - d1) / (x[2] - x[0]);
    if a >= 0.0 {
        return None;
    }
    let b = d1 - a * (x[0] + x[1]);
    Some((-b / (2.0 * a)).clamp(x[0], x[2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogParams {
    /// Gaussian scales in pixels, strictly ascending.
    pub scales: Vec<f64>,
    /// Threshold on the normalized response (unit-contrast disk peaks at 1).
    pub threshold: f64,
    /// Boxes narrower or shorter than this are discarded.
    pub min_box_px: f64,
}

impl Default for LogParams {
    fn default() -> Self {
        Self {
            scales: DEFAULT_LOG_SCALES.to_vec(),
            threshold: DEFAULT_LOG_THRESHOLD,
            min_box_px: DEFAULT_MIN_BOX_PX,
        }
    }
}

impl LogParams {
    /// Parameters for images downscaled by `factor` (all pixel sizes scale).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            scales: self.scales.iter().map(|s| s * factor).collect(),
            threshold: self.threshold,
            min_box_px: self.min_box_px * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::param("LoG needs at least one scale"));
        }
        if self.scales.iter().any(|s| !(*s > 0.0)) || self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("LoG scales must be positive and strictly ascending"));
        }
        Ok(())
    }
}

/// A scale-space maximum in image pixel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobPeak {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    /// Normalized response (not clipped).
    pub response: f64,
}

impl BlobPeak {
    pub fn bbox(&self) -> BBox {
        let side = 2.0 * std::f64::consts::SQRT_2 * self.sigma;
        BBox::new(self.x + 0.5 - side / 2.0, self.y + 0.5 - side / 2.0, side, side)
    }

    pub fn score(&self) -> f64 {
        self.response.clamp(0.0, 1.0)
    }
}

/// Scale-space LoG maxima above `params.threshold`, restricted to masked pixels.
pub fn log_peaks(image: &GrayF32, params: &LogParams, mask: Option<&SubjectMask>) -> Result<Vec<BlobPeak>> {
    params.validate()?;
    if let Some(m) = mask {
        if (m.width, m.height) != (image.width, image.height) {
            return Err(Error::Input("mask size differs from image size".into()));
        }
    }
    // restrict work to the mask's bounding box plus the widest kernel support
    let (mut x0, mut y0, mut x1, mut y1) = (0u32, 0u32, image.width, image.height);
    if let Some(m) = mask {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        let Some((a, b, c, d)) = bb else { return Ok(Vec::new()) };
        let margin = (3.0 * params.scales.last().unwrap()).ceil() as u32 + 2;
        x0 = a.saturating_sub(margin);
        y0 = b.saturating_sub(margin);
        x1 = (c + 1 + margin).min(image.width);
        y1 = (d + 1 + margin).min(image.height);
    }
    let crop = image.crop(x0, y0, x1 - x0, y1 - y0);
    let (w, h) = (crop.width as usize, crop.height as usize);
    let norm = 1.0 / LOG_DISK_PEAK;
    let stack: Vec<Vec<f32>> = params.scales.iter().map(|&s| normalized_log(&crop, s)).collect();
    let raw_threshold = (params.threshold * LOG_DISK_PEAK) as f32;
    let ns = stack.len();
    let mut peaks = Vec::new();
    for s in 0..ns {
        for y in 0..h {
            for x in 0..w {
                let v = stack[s][y * w + x];
                if !(v > raw_threshold) {
                    continue;
                }
                if let Some(m) = mask {
                    if !m.get(x0 + x as u32, y0 + y as u32) {
                        continue;
                    }
                }
                let me = (s, y, x);
                let mut is_max = true;
                'nb: for ds in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ss, yy, xx) = (s as i64 + ds, y as i64 + dy, x as i64 + dx);
                            if (ds, dy, dx) == (0, 0, 0)
                                || ss < 0
                                || yy < 0
                                || xx < 0
                                || ss >= ns as i64
                                || yy >= h as i64
                                || xx >= w as i64
                            {
                                continue;
                            }
                            let other = stack[ss as usize][yy as usize * w + xx as usize];
                            let them = (ss as usize, yy as usize, xx as usize);
                            // plateaus resolve to their first sample in (scale, y, x) order
                            if other > v || (other == v && them < me) {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let at = |xx: usize, yy: usize| f64::from(stack[s][yy * w + xx]);
                let vx = f64::from(v);
                let ox = if x > 0 && x + 1 < w {
                    parabolic_offset(at(x - 1, y), vx, at(x + 1, y))
                } else {
                    0.0
                };
                let oy = if y > 0 && y + 1 < h {
                    parabolic_offset(at(x, y - 1), vx, at(x, y + 1))
                } else {
                    0.0
                };
                let sigma = if s > 0 && s + 1 < ns {
                    let ls = [s - 1, s, s + 1].map(|k| params.scales[k].ln());
                    let rs = [s - 1, s, s + 1].map(|k| f64::from(stack[k][y * w + x]));
                    parabola_vertex(ls, rs).map_or(params.scales[s], f64::exp)
                } else {
                    params.scales[s]
                };
                peaks.push(BlobPeak {
                    x: f64::from(x0) + x as f64 + ox,
                    y: f64::from(y0) + y as f64 + oy,
                    sigma,
                    response: vx * norm,
                });
            }
        }
    }
    Ok(peaks)
}

/// LoG blob detections with boxes of side `2√2·σ`, clamped to the image and
/// filtered by `params.min_box_px`. Ids follow descending score.
pub fn detect_blobs_log(
    image_id: &str,
    image: &GrayF32,
    params: &LogParams,
    mask: Option<&SubjectMask>,
) -> Result<Vec<Detection2D>> {
    let mut peaks = log_peaks(image, params, mask)?;
    peaks.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.x.total_cmp(&b.x))
            .then(a.y.total_cmp(&b.y))
    });
    let mut out = Vec::new();
    for p in peaks {
        let bbox = p.bbox().clamped(image.width, image.height);
        if bbox.w < params.min_box_px || bbox.h < params.min_box_px {
            continue;
        }
        out.push(Detection2D::new(
            image_id,
            out.len() as u32,
            bbox,
            p.score(),
            DetectionSource::LogBaseline,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------- soft-NMS

/// Outcome of soft-NMS for one input detection.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftNmsEntry {
    pub detection: Detection2D,
    /// Score after all decays applied before it was selected or dropped.
    pub decayed_score: f64,
    pub kept: bool,
}

fn tie_order(a: &Detection2D, b: &Detection2D) -> Ordering {
    a.bbox
        .x
        .total_cmp(&b.bbox.x)
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.det_id.cmp(&b.det_id))
        .then(a.image_id.cmp(&b.image_id))
}

/// Gaussian soft-NMS with the full decay trace. Kept entries come first in
/// selection order, followed by dropped entries in drop order.
pub fn soft_nms_detailed(dets: &[Detection2D], sigma: f64, score_floor: f64) -> Vec<SoftNmsEntry> {
    let mut pending: Vec<(Detection2D, f64)> = dets.iter().map(|d| (d.clone(), d.score)).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    // anything starting below the floor never takes part
    pending.retain(|(d, s)| {
        if *s < score_floor {
            dropped.push(SoftNmsEntry {
                detection: d.clone(),
                decayed_score: *s,
                kept: false,
            });
            false
        } else {
            true
        }
    });
    while !pending.is_empty() {
        let best = (0..pending.len())
            .max_by(|&i, &j| {
                pending[i]
                    .1
                    .total_cmp(&pending[j].1)
                    .then_with(|| tie_order(&pending[j].0, &pending[i].0))
            })
            .expect("non-empty");
        let (sel, sel_score) = pending.swap_remove(best);
        let mut rest = Vec::with_capacity(pending.len());
        for (d, s) in pending.drain(..) {
            let o = iou(&sel.bbox, &d.bbox);
            let decayed = s * (-(o * o) / sigma).exp();
            if decayed < score_floor {
                dropped.push(SoftNmsEntry {
                    detection: d,
                    decayed_score: decayed,
                    kept: false,
                });
            } else {
                rest.push((d, decayed));
            }
        }
        pending = rest;
        kept.push(SoftNmsEntry {
            detection: sel,
            decayed_score: sel_score,
            kept: true,
        });
    }
    kept.extend(dropped);
    kept
}

/// Survivors of Gaussian soft-NMS, in selection order, with their input
/// scores. Keeping input scores makes the operation idempotent.
pub fn soft_nms(dets: &[Detection2D], sigma: f64, score_floor: f64) -> Vec<Detection2D> {
    soft_nms_detailed(dets, sigma, score_floor)
        .into_iter()
        .filter(|e| e.kept)
        .map(|e| e.detection)
        .collect()
}

/// Translates tile-local boxes into image coordinates, clamps them, and runs
/// soft-NMS over the union. Ids are renumbered in selection order.
pub fn merge_tile_detections(
    per_tile: &[((u32, u32), Vec<Detection2D>)],
    grid: &TileGrid,
    sigma: f64,
    score_floor: f64,
) -> Vec<Detection2D> {
    let (w, h) = grid.image_size;
    let mut all = Vec::new();
    for ((ox, oy), dets) in per_tile {
        for d in dets {
            let mut d = d.clone();
            d.bbox = d.bbox.translated(f64::from(*ox), f64::from(*oy)).clamped(w, h);
            if d.bbox.w > 0.0 && d.bbox.h > 0.0 {
                d.det_id = all.len() as u32;
                all.push(d);
            }
        }
    }
    let mut merged = soft_nms(&all, sigma, score_floor);
    for (i, d) in merged.iter_mut().enumerate() {
        d.det_id = i as u32;
    }
    merged
}

/// Tiled LoG detection of one image. The scale space is computed once for the
/// whole image; each tile reports the peaks whose centers fall in its
/// interior, and the per-tile lists are merged with soft-NMS.
#[allow(clippy::too_many_arguments)]
pub fn detect_tiled(
    image_id: &str,
    image: &GrayF32,
    mask: Option<&SubjectMask>,
    params: &LogParams,
    grid: &TileGrid,
    sigma: f64,
    score_floor: f64,
) -> Result<Vec<Detection2D>> {
    let whole = detect_blobs_log(image_id, image, params, mask)?;
    let ts = f64::from(grid.tile_size);
    let per_tile: Vec<((u32, u32), Vec<Detection2D>)> = grid
        .offsets
        .iter()
        .map(|&(ox, oy)| {
            let local = whole
                .iter()
                .filter(|d| {
                    let (cx, cy) = (d.bbox.x + d.bbox.w / 2.0, d.bbox.y + d.bbox.h / 2.0);
                    cx >= f64::from(ox) && cx < f64::from(ox) + ts && cy >= f64::from(oy) && cy < f64::from(oy) + ts
                })
                .map(|d| {
                    let mut d = d.clone();
                    d.bbox = d.bbox.translated(-f64::from(ox), -f64::from(oy));
                    d
                })
                .collect();
            ((ox, oy), local)
        })
        .collect();
    Ok(merge_tile_detections(&per_tile, grid, sigma, score_floor))
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub ap50: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_detections: usize,
    pub n_ground_truth: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub per_image: Vec<ImageMetrics>,
}

fn rank_order(a: &Detection2D, b: &Detection2D) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| tie_order(a, b))
}

/// Greedy matching in descending score order; returns the true-positive flag
/// of each detection in ranked order.
fn match_ranked(ranked: &[&Detection2D], gts: &[&Detection2D], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-points interpolated average precision from ranked TP flags.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        points.push((hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64));
    }
    // precision envelope, right to left
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Per-image AP@`iou_threshold`, precision and recall at `score_threshold`,
/// averaged over images. Removed detections are ignored.
///
/// Conventions for degenerate images: with neither ground truth nor
/// detections every metric is 1; with no detections precision is 0; with no
/// ground truth recall is 1 and AP and precision are 0 if anything was detected.
pub fn evaluate(dets: &DetectionSet, gts: &DetectionSet, iou_threshold: f64, score_threshold: f64) -> Result<EvalReport> {
    let det_keys: Vec<&String> = dets.keys().collect();
    let gt_keys: Vec<&String> = gts.keys().collect();
    if det_keys != gt_keys {
        let missing: Vec<&String> = gt_keys.iter().filter(|k| !dets.contains_key(k.as_str())).copied().collect();
        let extra: Vec<&String> = det_keys.iter().filter(|k| !gts.contains_key(k.as_str())).copied().collect();
        return Err(Error::Input(format!(
            "image ids differ between detections and ground truth (missing detections for {missing:?}, no ground truth for {extra:?})"
        )));
    }
    if gts.is_empty() {
        return Err(Error::UndefinedMetric("no images to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let gt: Vec<&Detection2D> = gt.iter().filter(|g| !g.removed).collect();
        let mut ranked: Vec<&Detection2D> = dets[id].iter().filter(|d| !d.removed).collect();
        ranked.sort_by(|a, b| rank_order(a, b));
        let tp = match_ranked(&ranked, &gt, iou_threshold);
        let ap = average_precision(&tp, gt.len());
        let operating: Vec<bool> = ranked
            .iter()
            .zip(&tp)
            .filter(|(d, _)| d.score >= score_threshold)
            .map(|(_, &t)| t)
            .collect();
        let hits = operating.iter().filter(|&&t| t).count();
        let precision = match (operating.len(), gt.len()) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (n, _) => hits as f64 / n as f64,
        };
        let recall = if gt.is_empty() { 1.0 } else { hits as f64 / gt.len() as f64 };
        per_image.push(ImageMetrics {
            image_id: id.clone(),
            ap50: ap,
            precision,
            recall,
            n_detections: operating.len(),
            n_ground_truth: gt.len(),
            true_positives: hits,
        });
    }
    let n = per_image.len() as f64;
    Ok(EvalReport {
        map50: per_image.iter().map(|m| m.ap50).sum::<f64>() / n,
        precision: per_image.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: per_image.iter().map(|m| m.recall).sum::<f64>() / n,
        iou_threshold,
        score_threshold,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(id: u32, x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection2D {
        Detection2D::new("img", id, BBox::new(x, y, w, h), score, DetectionSource::External)
    }

    fn one_image(d: Vec<Detection2D>) -> DetectionSet {
        BTreeMap::from([("img".to_string(), d)])
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 10.0, 10.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tiling_examples() {
        assert_eq!(tile(608, 608, 608, 0.5).unwrap().offsets, vec![(0, 0)]);
        assert_eq!(tile(912, 608, 608, 0.5).unwrap().offsets, vec![(0, 0), (304, 0)]);
        let g = tile(4000, 6000, 608, 0.5).unwrap();
        assert_eq!(g.len(), 247);
        assert_eq!(g.stride, 304);
        let small = tile(100, 50, 608, 0.5).unwrap();
        assert_eq!(small.offsets, vec![(0, 0)]);
        assert_eq!(small.padded_size, (608, 608));
        assert!(tile(10, 10, 0, 0.5).is_err());
        assert!(tile(10, 10, 8, 1.0).is_err());
    }

    #[test]
    fn soft_nms_fixtures() {
        let one = vec![det(0, 0.0, 0.0, 10.0, 10.0, 0.7)];
        assert_eq!(soft_nms(&one, 0.5, 0.25), one);

        let disjoint = vec![det(0, 0.0, 0.0, 10.0, 10.0, 0.9), det(1, 50.0, 0.0, 10.0, 10.0, 0.8)];
        let out = soft_nms_detailed(&disjoint, 0.5, 0.25);
        assert!(out.iter().all(|e| e.kept && e.decayed_score == e.detection.score));

        let same = vec![det(0, 0.0, 0.0, 10.0, 10.0, 0.9), det(1, 0.0, 0.0, 10.0, 10.0, 0.8)];
        let out = soft_nms_detailed(&same, 0.5, 0.2);
        assert!(out[0].kept && out[0].detection.det_id == 0);
        assert!(!out[1].kept);
        assert!((out[1].decayed_score - 0.1083).abs() < 5e-5);
    }

    #[test]
    fn soft_nms_ties_prefer_smaller_x_then_y() {
        let d = vec![
            det(0, 5.0, 0.0, 10.0, 10.0, 0.5),
            det(1, 0.0, 3.0, 10.0, 10.0, 0.5),
            det(2, 0.0, 1.0, 10.0, 10.0, 0.5),
        ];
        let out = soft_nms_detailed(&d, 0.5, 0.0);
        assert_eq!(out[0].detection.det_id, 2);
    }

    #[test]
    fn evaluate_fixture_from_hand_enumeration() {
        let gts = one_image(vec![
            det(0, 0.0, 0.0, 10.0, 10.0, 1.0),
            det(1, 100.0, 0.0, 10.0, 10.0, 1.0),
            det(2, 200.0, 0.0, 10.0, 10.0, 1.0),
        ]);
        let dets = one_image(vec![
            det(0, 0.0, 0.0, 10.0, 10.0, 0.9),
            det(1, 50.0, 50.0, 10.0, 10.0, 0.8),
            det(2, 100.0, 0.0, 10.0, 10.0, 0.7),
        ]);
        let r = evaluate(&dets, &gts, 0.5, 0.0).unwrap();
        assert!((r.map50 - 5.0 / 9.0).abs() < 1e-12);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_trivial_cases() {
        let gts = one_image(vec![det(0, 0.0, 0.0, 10.0, 10.0, 1.0), det(1, 30.0, 0.0, 10.0, 10.0, 1.0)]);
        let perfect = evaluate(&gts, &gts, 0.5, 0.0).unwrap();
        assert_eq!((perfect.map50, perfect.precision, perfect.recall), (1.0, 1.0, 1.0));
        let none = evaluate(&one_image(vec![]), &gts, 0.5, 0.0).unwrap();
        assert_eq!((none.map50, none.recall), (0.0, 0.0));
        let other = BTreeMap::from([("other".to_string(), vec![])]);
        assert!(matches!(evaluate(&other, &gts, 0.5, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn removed_detections_are_ignored() {
        let gts = one_image(vec![det(0, 0.0, 0.0, 10.0, 10.0, 1.0)]);
        let mut fp = det(1, 50.0, 50.0, 10.0, 10.0, 0.99);
        fp.removed = true;
        let dets = one_image(vec![fp, det(0, 0.0, 0.0, 10.0, 10.0, 0.5)]);
        assert_eq!(evaluate(&dets, &gts, 0.5, 0.0).unwrap().precision, 1.0);
    }

    #[test]
    fn detections_json_schema() {
        let mut d = det(3, 1.0, 2.0, 3.0, 4.0, 0.5);
        d.notes = "monitor".into();
        let set = one_image(vec![d.clone()]);
        let text = serde_json::to_string(&set).unwrap();
        assert_eq!(
            text,
            r#"{"img":[{"det_id":3,"bbox":[1.0,2.0,3.0,4.0],"score":0.5,"source":"external","removed":false,"notes":"monitor"}]}"#
        );
        let back = detections_from_json(&text).unwrap();
        assert_eq!(back["img"][0], d);
    }

    fn disk_image(w: u32, h: u32, disks: &[(f64, f64, f64)]) -> GrayF32 {
        let mut data = vec![0.9f32; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                for &(cx, cy, r) in disks {
                    if (f64::from(x) - cx).hypot(f64::from(y) - cy) <= r {
                        data[(y * w + x) as usize] = 0.2;
                    }
                }
            }
        }
        GrayF32::new(w, h, data)
    }

    fn fine_scales() -> Vec<f64> {
        (0..12).map(|i| 2.0 * 1.2f64.powi(i)).collect()
    }

    #[test]
    fn constant_image_has_no_blobs() {
        let img = GrayF32::new(64, 64, vec![0.5; 64 * 64]);
        assert!(detect_blobs_log("c", &img, &LogParams::default(), None).unwrap().is_empty());
    }

    #[test]
    fn disk_scale_matches_radius_over_sqrt2() {
        let r = 8.0;
        let img = disk_image(96, 96, &[(48.0, 48.0, r)]);
        let params = LogParams {
            scales: fine_scales(),
            threshold: 0.1,
            min_box_px: 5.0,
        };
        let peaks = log_peaks(&img, &params, None).unwrap();
        assert_eq!(peaks.len(), 1, "{peaks:?}");
        let p = peaks[0];
        assert!((p.x - 48.0).abs() < 0.5 && (p.y - 48.0).abs() < 0.5);
        // one scale step of the sweep
        assert!((p.sigma / (r / std::f64::consts::SQRT_2)).ln().abs() < 1.2f64.ln(), "sigma {}", p.sigma);
    }

    #[test]
    fn separated_disks_give_two_detections() {
        let r = 5.0;
        let img = disk_image(128, 64, &[(30.0, 32.0, r), (30.0 + 4.5 * r, 32.0, r)]);
        let d = detect_blobs_log("two", &img, &LogParams::default(), None).unwrap();
        assert_eq!(d.len(), 2, "{d:?}");
    }

    #[test]
    fn mask_restricts_detections() {
        let img = disk_image(64, 64, &[(20.0, 20.0, 5.0), (44.0, 44.0, 5.0)]);
        let mut mask = SubjectMask::full(64, 64);
        for y in 0..32 {
            for x in 0..32 {
                mask.values[y * 64 + x] = false;
            }
        }
        let d = detect_blobs_log("m", &img, &LogParams::default(), Some(&mask)).unwrap();
        assert_eq!(d.len(), 1);
        let (cx, cy) = d[0].bbox.center_pixel();
        assert!((cx - 44.0).abs() < 1.0 && (cy - 44.0).abs() < 1.0);
    }

    #[test]
    fn tiled_detection_merges_duplicates() {
        let img = disk_image(200, 120, &[(100.0, 60.0, 6.0), (20.0, 20.0, 4.0)]);
        let grid = tile(200, 120, 80, 0.5).unwrap();
        let d = detect_tiled("t", &img, None, &LogParams::default(), &grid, 0.5, 0.25).unwrap();
        assert_eq!(d.len(), 2);
    }
}
