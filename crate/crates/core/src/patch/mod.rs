//! Auxiliary patch classifier: window sampling with the mask-overlap class
//! rule, class-balanced weighting, epoch assembly and training.

mod net;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use net::{PatchNet, PatchNetConfig};
pub use train::{train_patch_classifier, PatchTrainConfig, PatchTrainReport};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{load_mask, ExamRecord, Finding, Manifest, Split, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchClass {
    Malignant,
    Benign,
    Outside,
    Negative,
}

impl PatchClass {
    pub const ALL: [PatchClass; 4] =
        [PatchClass::Malignant, PatchClass::Benign, PatchClass::Outside, PatchClass::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<PatchClass> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    OutsideImage,
    AllZero,
    MixedFindings,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub min_side: f64,
    pub max_side: f64,
    /// Degrees.
    pub max_angle: f64,
}

impl SamplerConfig {
    pub fn desk() -> Self {
        SamplerConfig { patch_size: 64, min_side: 32.0, max_side: 96.0, max_angle: 30.0 }
    }

    pub fn paper() -> Self {
        SamplerConfig { patch_size: 256, min_side: 128.0, max_side: 384.0, max_angle: 30.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !(self.min_side > 0.0 && self.min_side <= self.max_side) || self.max_angle < 0.0 {
            return Err(Error::Config(format!("invalid patch sampler settings {self:?}")));
        }
        Ok(())
    }
}

/// A square window of side `side` centred on `(cy, cx)` rotated by
/// `angle` degrees, in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub cy: f64,
    pub cx: f64,
    pub side: f64,
    pub angle: f64,
}

impl Window {
    fn axes(&self) -> (f64, f64) {
        let (s, c) = self.angle.to_radians().sin_cos();
        (c, s)
    }

    /// Corners as `(y, x)`.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (c, s) = self.axes();
        let h = self.side / 2.0;
        [(-h, -h), (-h, h), (h, h), (h, -h)].map(|(ly, lx)| (self.cy + lx * s + ly * c, self.cx + lx * c - ly * s))
    }

    pub fn inside_image(&self, height: usize, width: usize) -> bool {
        let eps = 1e-9;
        self.corners().iter().all(|&(y, x)| {
            y >= -eps && x >= -eps && y <= height as f64 + eps && x <= width as f64 + eps
        })
    }

    /// Whether the point lies in the closed window.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (c, s) = self.axes();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let h = self.side / 2.0 + 1e-9;
        (dx * c + dy * s).abs() <= h && (-dx * s + dy * c).abs() <= h
    }

    /// Pixels whose centres lie in the window.
    pub fn pixels(&self, height: usize, width: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let corners = self.corners();
        let lo = |f: fn(&(f64, f64)) -> f64, max: usize| {
            let v = corners.iter().map(f).fold(f64::INFINITY, f64::min);
            (v - 0.5).floor().max(0.0).min(max as f64) as usize
        };
        let hi = |f: fn(&(f64, f64)) -> f64, max: usize| {
            let v = corners.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            ((v - 0.5).ceil() + 1.0).max(0.0).min(max as f64) as usize
        };
        let (y0, y1) = (lo(|p| p.0, height), hi(|p| p.0, height));
        let (x0, x1) = (lo(|p| p.1, width), hi(|p| p.1, width));
        (y0..y1)
            .flat_map(move |i| (x0..x1).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.contains(i as f64 + 0.5, j as f64 + 0.5))
    }
}

/// Benign and malignant masks of one image; `None` means empty.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskPair<'a> {
    pub benign: Option<&'a Image>,
    pub malignant: Option<&'a Image>,
}

impl MaskPair<'_> {
    pub fn is_empty(&self) -> bool {
        self.benign.is_none() && self.malignant.is_none()
    }
}

/// How an image contributes patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageRole {
    /// A biopsied, visible breast: lesion and outside patches.
    Segmented,
    /// An exam without biopsied findings: negative patches.
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `patch_size * patch_size` pixels, row-major.
    pub pixels: Vec<f32>,
    pub class: PatchClass,
    pub source: String,
    pub window: Window,
}

pub fn draw_window<R: Rng>(height: usize, width: usize, cfg: &SamplerConfig, rng: &mut R) -> Window {
    let cy = rng.random_range(0.0..height as f64);
    let cx = rng.random_range(0.0..width as f64);
    let side = if cfg.max_side > cfg.min_side { rng.random_range(cfg.min_side..=cfg.max_side) } else { cfg.min_side };
    let angle = if cfg.max_angle > 0.0 { rng.random_range(-cfg.max_angle..=cfg.max_angle) } else { 0.0 };
    Window { cy, cx, side, angle }
}

/// Overlap class of a window: a segmented image yields malignant or
/// benign when the window covers pixels of only that mask, outside when it
/// covers none; windows covering both kinds are rejected.
pub fn classify_window(
    w: &Window,
    masks: MaskPair<'_>,
    role: ImageRole,
    height: usize,
    width: usize,
) -> std::result::Result<PatchClass, Rejection> {
    if role == ImageRole::Negative {
        return Ok(PatchClass::Negative);
    }
    let hits = |m: Option<&Image>| m.is_some_and(|m| w.pixels(height, width).any(|(i, j)| m.get(i, j) > 0.0));
    match (hits(masks.malignant), hits(masks.benign)) {
        (true, true) => Err(Rejection::MixedFindings),
        (true, false) => Ok(PatchClass::Malignant),
        (false, true) => Ok(PatchClass::Benign),
        (false, false) => Ok(PatchClass::Outside),
    }
}

/// Resample the window to `size x size` with bilinear interpolation.
pub fn extract_patch(image: &Image, w: &Window, size: usize) -> Vec<f32> {
    let (c, s) = w.axes();
    let step = w.side / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for a in 0..size {
        let ly = (a as f64 + 0.5) * step - w.side / 2.0;
        for b in 0..size {
            let lx = (b as f64 + 0.5) * step - w.side / 2.0;
            out.push(image.sample_bilinear(w.cy + lx * s + ly * c, w.cx + lx * c - ly * s));
        }
    }
    out
}

/// Draw one window and turn it into a labelled patch, or report why the
/// draw was rejected.
pub fn sample_patch<R: Rng>(
    image: &Image,
    masks: MaskPair<'_>,
    role: ImageRole,
    source: &str,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> std::result::Result<PatchSample, Rejection> {
    let w = draw_window(image.height, image.width, cfg, rng);
    patch_at(image, masks, role, source, w, cfg.patch_size)
}

pub fn patch_at(
    image: &Image,
    masks: MaskPair<'_>,
    role: ImageRole,
    source: &str,
    w: Window,
    patch_size: usize,
) -> std::result::Result<PatchSample, Rejection> {
    if !w.inside_image(image.height, image.width) {
        return Err(Rejection::OutsideImage);
    }
    let class = classify_window(&w, masks, role, image.height, image.width)?;
    let pixels = extract_patch(image, &w, patch_size);
    if pixels.iter().all(|&v| v == 0.0) {
        return Err(Rejection::AllZero);
    }
    Ok(PatchSample { pixels, class, source: source.to_string(), window: w })
}

/// `w_c = (1/N_c) / sum_j (1/N_j)`, the normalised inverse class frequency.
pub fn class_weights(counts: [usize; 4]) -> Result<[f64; 4]> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Undefined(format!("class {c} has zero count; weights are undefined")));
    }
    let inv = counts.map(|n| 1.0 / n as f64);
    let total: f64 = inv.iter().sum();
    Ok(inv.map(|v| v / total))
}

/// Per-class patch counts for one epoch, in `PatchClass` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub counts: [usize; 4],
}

impl EpochPlan {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Candidate patches per class.
#[derive(Clone, Debug, Default)]
pub struct PatchPools {
    pub pools: [Vec<PatchSample>; 4],
    pub rejections: RejectionCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RejectionCounts {
    pub outside_image: usize,
    pub all_zero: usize,
    pub mixed_findings: usize,
}

impl RejectionCounts {
    fn add(&mut self, r: Rejection) {
        match r {
            Rejection::OutsideImage => self.outside_image += 1,
            Rejection::AllZero => self.all_zero += 1,
            Rejection::MixedFindings => self.mixed_findings += 1,
        }
    }
}

impl PatchPools {
    pub fn sizes(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.pools[i].len())
    }

    pub fn push(&mut self, s: PatchSample) {
        self.pools[s.class.index()].push(s);
    }
}

/// Sample an epoch: exactly `plan.counts[c]` patches of class `c`, drawn
/// with replacement when the pool is smaller than the request, then
/// shuffled.
pub fn build_epoch<'a, R: Rng>(
    pools: &'a PatchPools,
    plan: &EpochPlan,
    rng: &mut R,
) -> Result<Vec<&'a PatchSample>> {
    if plan.total() == 0 {
        return Err(Error::InvalidArgument("epoch plan requests no patches".into()));
    }
    let mut out = Vec::with_capacity(plan.total());
    for class in PatchClass::ALL {
        let want = plan.counts[class.index()];
        let pool = &pools.pools[class.index()];
        if want == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(Error::InvalidArgument(format!("no {class:?} patches available for a plan asking {want}")));
        }
        if pool.len() >= want {
            out.extend(pool.choose_multiple(rng, want));
        } else {
            out.extend((0..want).map(|_| &pool[rng.random_range(0..pool.len())]));
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// How many windows to draw per image when filling pools.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolConfig {
    pub draws_segmented: usize,
    pub draws_negative: usize,
    /// Upper bound on each pool's size.
    pub max_pool: usize,
    /// Upper bound on how many negative exams are visited.
    pub max_negative_exams: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { draws_segmented: 48, draws_negative: 2, max_pool: 3000, max_negative_exams: 600 }
    }
}

/// Role of one view image of an exam, or `None` when it contributes no
/// patches (occult breasts, and the unbiopsied side of a biopsied exam).
pub fn image_role(exam: &ExamRecord, view: View) -> Option<ImageRole> {
    let b = exam.breast(view.side());
    if !exam.is_biopsied() {
        Some(ImageRole::Negative)
    } else if b.biopsied && !b.occult {
        Some(ImageRole::Segmented)
    } else {
        None
    }
}

/// Fill patch pools from the images of one split. Each image has its own
/// seeded random stream so the result does not depend on scheduling.
pub fn build_pools(
    manifest: &Manifest,
    root: &Path,
    split: Split,
    sampler: &SamplerConfig,
    cfg: &PoolConfig,
    seed: u64,
) -> Result<PatchPools> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exams = manifest.split(split);
    let mut negatives: Vec<&ExamRecord> = exams.iter().copied().filter(|e| !e.is_biopsied()).collect();
    negatives.shuffle(&mut rng);
    negatives.truncate(cfg.max_negative_exams);
    let negative_ids: std::collections::HashSet<&str> = negatives.iter().map(|e| e.exam_id.as_str()).collect();
    let mut jobs = Vec::new();
    for e in exams {
        for view in View::ALL {
            match image_role(e, view) {
                Some(ImageRole::Segmented) => jobs.push((e, view, ImageRole::Segmented, cfg.draws_segmented)),
                Some(ImageRole::Negative) if negative_ids.contains(e.exam_id.as_str()) => {
                    jobs.push((e, view, ImageRole::Negative, cfg.draws_negative))
                }
                _ => {}
            }
        }
    }
    let results: Vec<(Vec<PatchSample>, RejectionCounts)> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(e, view, role, draws))| -> Result<_> {
            let img = e.load_view(root, view)?;
            let ben = load_mask(root, &e.exam_id, view, Finding::Benign)?;
            let mal = load_mask(root, &e.exam_id, view, Finding::Malignant)?;
            let masks = MaskPair { benign: ben.as_ref(), malignant: mal.as_ref() };
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64 + 1);
            let source = format!("{}_{}", e.exam_id, view.token());
            let mut got = Vec::new();
            let mut rej = RejectionCounts::default();
            for _ in 0..draws {
                match sample_patch(&img, masks, role, &source, &mut r, sampler) {
                    Ok(s) => got.push(s),
                    Err(why) => rej.add(why),
                }
            }
            Ok((got, rej))
        })
        .collect::<Result<_>>()?;
    let mut pools = PatchPools::default();
    for (samples, rej) in results {
        pools.rejections.outside_image += rej.outside_image;
        pools.rejections.all_zero += rej.all_zero;
        pools.rejections.mixed_findings += rej.mixed_findings;
        for s in samples {
            pools.push(s);
        }
    }
    for pool in &mut pools.pools {
        if pool.len() > cfg.max_pool {
            pool.shuffle(&mut rng);
            pool.truncate(cfg.max_pool);
        }
    }
    log::info!(
        "patch pools {:?} (rejected: {} outside image, {} all-zero, {} mixed findings)",
        pools.sizes(),
        pools.rejections.outside_image,
        pools.rejections.all_zero,
        pools.rejections.mixed_findings
    );
    Ok(pools)
}

/// Patch cache: concatenated records of `u32 class, u32 side` followed by
/// `side * side` f32 pixels, all little-endian.
pub fn write_patch_cache(path: &Path, samples: &[&PatchSample], side: usize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        if s.pixels.len() != side * side {
            return Err(Error::Shape(format!("patch has {} pixels, expected {side}x{side}", s.pixels.len())));
        }
        let mut rec = Vec::with_capacity(8 + 4 * s.pixels.len());
        rec.extend_from_slice(&(s.class.index() as u32).to_le_bytes());
        rec.extend_from_slice(&(side as u32).to_le_bytes());
        for v in &s.pixels {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&rec).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_patch_cache(path: &Path) -> Result<Vec<(PatchClass, usize, Vec<f32>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut at = 0;
    let u32_at = |b: &[u8], i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]) as usize;
    while at < bytes.len() {
        if at + 8 > bytes.len() {
            return Err(Error::format(path, "truncated patch record header"));
        }
        let class = PatchClass::from_index(u32_at(&bytes, at))
            .ok_or_else(|| Error::format(path, "patch class out of range"))?;
        let side = u32_at(&bytes, at + 4);
        at += 8;
        let n = side * side * 4;
        if at + n > bytes.len() {
            return Err(Error::format(path, "truncated patch pixels"));
        }
        let px = bytes[at..at + n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        at += n;
        out.push((class, side, px));
    }
    Ok(out)
}
