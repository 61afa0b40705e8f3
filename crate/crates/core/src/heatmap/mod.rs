//! Sliding-window heatmaps from the patch classifier.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::image::Image;
use crate::manifest::{ExamRecord, Finding, Manifest, Side, Split, View};
use crate::patch::{PatchNet, PatchNetConfig};

const MAGIC: &[u8; 4] = b"MSHM";
const VERSION: u32 = 1;

/// Strides along one axis so that windows of `patch` pixels tile `extent`
/// exactly, none longer than `prefixed_stride`. When the fixed stride
/// leaves a remainder, one extra step is added and the overlap is spread
/// evenly, with `overlap % steps` randomly chosen strides one pixel short.
pub fn stride_list<R: Rng>(extent: usize, patch: usize, prefixed_stride: usize, rng: &mut R) -> Result<Vec<usize>> {
    if prefixed_stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if extent < patch {
        return Err(Error::InvalidArgument(format!("image extent {extent} is smaller than patch {patch}")));
    }
    let mut steps = (extent - patch) / prefixed_stride;
    let remaining = (extent - patch) % prefixed_stride;
    if remaining == 0 {
        return Ok(vec![prefixed_stride; steps]);
    }
    steps += 1;
    let overlap = prefixed_stride - remaining;
    let avg = prefixed_stride - overlap / steps;
    let mut list = vec![avg; steps];
    for i in sample(rng, steps, overlap % steps) {
        list[i] -= 1;
    }
    Ok(list)
}

/// Window grid of one image: per-axis stride lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StridePlan {
    pub vertical: Vec<usize>,
    pub horizontal: Vec<usize>,
    pub patch_size: usize,
    pub prefixed_stride: usize,
}

impl StridePlan {
    pub fn new<R: Rng>(height: usize, width: usize, patch_size: usize, prefixed_stride: usize, rng: &mut R) -> Result<Self> {
        Ok(StridePlan {
            vertical: stride_list(height, patch_size, prefixed_stride, rng)?,
            horizontal: stride_list(width, patch_size, prefixed_stride, rng)?,
            patch_size,
            prefixed_stride,
        })
    }

    /// Window `k` starts at the sum of the first `k` strides.
    fn starts(list: &[usize]) -> Vec<usize> {
        let mut out = vec![0];
        let mut at = 0;
        for s in list {
            at += s;
            out.push(at);
        }
        out
    }

    /// Top-left corners of every window, row-major.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        let ys = Self::starts(&self.vertical);
        let xs = Self::starts(&self.horizontal);
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        let v: usize = self.vertical.iter().sum();
        let h: usize = self.horizontal.iter().sum();
        if v + self.patch_size != height || h + self.patch_size != width {
            return Err(Error::Shape(format!(
                "stride plan covers {}x{} but the image is {height}x{width}",
                v + self.patch_size,
                h + self.patch_size
            )));
        }
        Ok(())
    }
}

/// Anything that maps square patches to (malignant, benign) probabilities.
pub trait PatchScorer: Sync {
    fn score(&self, pixels: &[f32], n: usize, side: usize) -> Result<Vec<(f32, f32)>>;
}

impl PatchScorer for PatchNet {
    fn score(&self, pixels: &[f32], n: usize, side: usize) -> Result<Vec<(f32, f32)>> {
        Ok(self.predict(pixels, n, side)?.into_iter().map(|p| (p[0], p[1])).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub malignant: Vec<f32>,
    pub benign: Vec<f32>,
    pub source: String,
    pub checkpoint: String,
}

impl Heatmap {
    pub fn plane(&self, f: Finding) -> &[f32] {
        match f {
            Finding::Malignant => &self.malignant,
            Finding::Benign => &self.benign,
        }
    }

    pub fn plane_image(&self, f: Finding) -> Image {
        Image { height: self.height, width: self.width, data: self.plane(f).to_vec() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(MAGIC)?;
        put(&VERSION.to_le_bytes())?;
        put(&(self.height as u32).to_le_bytes())?;
        put(&(self.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.malignant.len());
        for v in self.malignant.iter().chain(&self.benign) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Heatmap> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a heatmap file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(Error::format(path, format!("unsupported version {}", word(4))));
        }
        let (height, width) = (word(8), word(12));
        let n = height * width;
        if bytes.len() != 16 + 8 * n {
            return Err(Error::format(path, format!("expected {} bytes for {height}x{width}", 16 + 8 * n)));
        }
        let vals: Vec<f32> = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Heatmap {
            height,
            width,
            malignant: vals[..n].to_vec(),
            benign: vals[n..].to_vec(),
            source: stem,
            checkpoint: String::new(),
        })
    }
}

fn crop(image: &Image, top: usize, left: usize, side: usize, out: &mut Vec<f32>) {
    for y in top..top + side {
        let row = y * image.width;
        out.extend_from_slice(&image.data[row + left..row + left + side]);
    }
}

fn accumulate(
    image: &Image,
    scorer: &dyn PatchScorer,
    windows: &[(usize, usize)],
    side: usize,
    batch: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let n = image.height * image.width;
    let mut sums = vec![[0f64; 2]; n];
    let mut counts = vec![0u32; n];
    let mut pixels = Vec::with_capacity(batch.max(1) * side * side);
    for chunk in windows.chunks(batch.max(1)) {
        pixels.clear();
        for &(top, left) in chunk {
            crop(image, top, left, side, &mut pixels);
        }
        let probs = scorer.score(&pixels, chunk.len(), side)?;
        if probs.len() != chunk.len() {
            return Err(Error::Graph(format!("scorer returned {} results for {} windows", probs.len(), chunk.len())));
        }
        for (&(top, left), &(pm, pb)) in chunk.iter().zip(&probs) {
            if !(0.0..=1.0).contains(&pm) || !(0.0..=1.0).contains(&pb) {
                return Err(Error::NonFinite(format!("patch probabilities ({pm}, {pb}) outside [0, 1]")));
            }
            for y in top..top + side {
                for x in left..left + side {
                    let i = y * image.width + x;
                    sums[i][0] += pm as f64;
                    sums[i][1] += pb as f64;
                    counts[i] += 1;
                }
            }
        }
    }
    let mut mal = Vec::with_capacity(n);
    let mut ben = Vec::with_capacity(n);
    for (s, &c) in sums.iter().zip(&counts) {
        if c == 0 {
            return Err(Error::Graph("heatmap pixel not covered by any window".into()));
        }
        mal.push((s[0] / c as f64) as f32);
        ben.push((s[1] / c as f64) as f32);
    }
    Ok((mal, ben))
}

/// Slide the scorer over `image` on the grid of `plan`, averaging the
/// malignant and benign probabilities of every window covering a pixel.
pub fn generate_heatmaps(image: &Image, scorer: &dyn PatchScorer, plan: &StridePlan, batch: usize) -> Result<Heatmap> {
    plan.check(image.height, image.width)?;
    let (malignant, benign) = accumulate(image, scorer, &plan.windows(), plan.patch_size, batch)?;
    Ok(Heatmap {
        height: image.height,
        width: image.width,
        malignant,
        benign,
        source: String::new(),
        checkpoint: String::new(),
    })
}

/// Breast-level (malignant, benign) score: the largest pixel value over
/// all of the breast's heatmaps.
pub fn heatmap_breast_score(heatmaps: &[&Heatmap]) -> Result<(f32, f32)> {
    if heatmaps.is_empty() {
        return Err(Error::InvalidArgument("breast score needs at least one heatmap".into()));
    }
    let max = |f: Finding| heatmaps.iter().flat_map(|h| h.plane(f).iter().copied()).fold(0f32, f32::max);
    Ok((max(Finding::Malignant), max(Finding::Benign)))
}

/// Index of the checkpoint with the highest mean of (malignant AUC,
/// benign AUC); ties go to the earliest.
pub fn best_checkpoint(aucs: &[(f64, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(m, b)) in aucs.iter().enumerate() {
        let v = (m + b) / 2.0;
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::InvalidArgument("no checkpoints to choose from".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapConfig {
    pub patch_size: usize,
    pub prefixed_stride: usize,
    pub batch: usize,
}

impl HeatmapConfig {
    pub fn desk() -> Self {
        HeatmapConfig { patch_size: 64, prefixed_stride: 18, batch: 64 }
    }

    pub fn paper() -> Self {
        HeatmapConfig { patch_size: 256, prefixed_stride: 70, batch: 16 }
    }
}

pub fn heatmap_path(dir: &Path, exam_id: &str, view: View) -> PathBuf {
    dir.join(format!("{exam_id}_{}.mshm", view.token()))
}

/// Per-image random stream for the stride decrements, keyed by the exam's
/// manifest position so any subset reproduces the full run.
fn image_rng(seed: u64, exam_index: usize, view: View) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((exam_index * 4 + view.index()) as u64 + 1);
    r
}

fn view_heatmap(
    exam: &ExamRecord,
    exam_index: usize,
    view: View,
    root: &Path,
    scorer: &dyn PatchScorer,
    cfg: &HeatmapConfig,
    seed: u64,
) -> Result<Heatmap> {
    let img = exam.load_view(root, view)?;
    let plan = StridePlan::new(img.height, img.width, cfg.patch_size, cfg.prefixed_stride, &mut image_rng(seed, exam_index, view))?;
    let mut h = generate_heatmaps(&img, scorer, &plan, cfg.batch)?;
    h.source = format!("{}_{}", exam.exam_id, view.token());
    Ok(h)
}

fn jobs<'a>(manifest: &'a Manifest, splits: &[Split]) -> Vec<(usize, &'a ExamRecord, View)> {
    manifest
        .exams
        .iter()
        .enumerate()
        .filter(|(_, e)| splits.contains(&e.split))
        .flat_map(|(i, e)| View::ALL.into_iter().map(move |v| (i, e, v)))
        .collect()
}

/// Write one heatmap file per image of the chosen splits into `out_dir`.
/// Returns the number of files written.
pub fn write_split_heatmaps(
    manifest: &Manifest,
    root: &Path,
    splits: &[Split],
    scorer: &dyn PatchScorer,
    cfg: &HeatmapConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let work = jobs(manifest, splits);
    work.par_iter().try_for_each(|&(i, e, v)| {
        let h = view_heatmap(e, i, v, root, scorer, cfg, seed)?;
        h.write(&heatmap_path(out_dir, &e.exam_id, v))
    })?;
    Ok(work.len())
}

/// Heatmap-based (malignant, benign) score per breast of the chosen splits,
/// keyed by exam id and side in manifest order.
pub fn heatmap_breast_scores(
    manifest: &Manifest,
    root: &Path,
    splits: &[Split],
    scorer: &dyn PatchScorer,
    cfg: &HeatmapConfig,
    seed: u64,
) -> Result<Vec<(String, Side, f32, f32)>> {
    let work = jobs(manifest, splits);
    let per_view: Vec<(f32, f32)> = work
        .par_iter()
        .map(|&(i, e, v)| heatmap_breast_score(&[&view_heatmap(e, i, v, root, scorer, cfg, seed)?]))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, chunk) in per_view.chunks(4).enumerate() {
        let exam = work[k * 4].1;
        for side in Side::BOTH {
            let (mut m, mut b) = (0f32, 0f32);
            for v in View::ALL.into_iter().filter(|v| v.side() == side) {
                m = m.max(chunk[v.index()].0);
                b = b.max(chunk[v.index()].1);
            }
            out.push((exam.exam_id.clone(), side, m, b));
        }
    }
    Ok(out)
}

/// Score every patch checkpoint on the validation split and return the
/// index of the best along with each checkpoint's (malignant, benign) AUC.
pub fn select_patch_checkpoint(
    checkpoints: &[PathBuf],
    net: &PatchNetConfig,
    manifest: &Manifest,
    root: &Path,
    cfg: &HeatmapConfig,
    seed: u64,
) -> Result<(usize, Vec<(f64, f64)>)> {
    if checkpoints.len() == 1 {
        return Ok((0, Vec::new()));
    }
    let mut aucs = Vec::new();
    for path in checkpoints {
        let model = PatchNet::load(net.clone(), path)?;
        let scores = heatmap_breast_scores(manifest, root, &[Split::Val], &model, cfg, seed)?;
        let mut pm = Vec::new();
        let mut pb = Vec::new();
        let mut lm = Vec::new();
        let mut lb = Vec::new();
        for (id, side, m, b) in &scores {
            let labels = manifest.get(id).expect("scored exam is in the manifest").breast(*side);
            pm.push(*m as f64);
            pb.push(*b as f64);
            lm.push(labels.malignant);
            lb.push(labels.benign);
        }
        let pair = (roc_auc(&pm, &lm)?, roc_auc(&pb, &lb)?);
        log::info!("{}: malignant AUC {:.4}, benign AUC {:.4}", path.display(), pair.0, pair.1);
        aucs.push(pair);
    }
    Ok((best_checkpoint(&aucs)?, aucs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Constant(f32, f32);
    impl PatchScorer for Constant {
        fn score(&self, _: &[f32], n: usize, _: usize) -> Result<Vec<(f32, f32)>> {
            Ok(vec![(self.0, self.1); n])
        }
    }

    /// Scores a window by its mean pixel, so windows differ by position.
    struct MeanPixel;
    impl PatchScorer for MeanPixel {
        fn score(&self, px: &[f32], n: usize, side: usize) -> Result<Vec<(f32, f32)>> {
            Ok(px
                .chunks(side * side)
                .take(n)
                .map(|c| {
                    let m = c.iter().sum::<f32>() / c.len() as f32;
                    (m, 1.0 - m)
                })
                .collect())
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn hand_traced_strides() {
        assert_eq!(stride_list(466, 256, 70, &mut rng()).unwrap(), vec![70, 70, 70]);
        assert_eq!(stride_list(300, 256, 70, &mut rng()).unwrap(), vec![44]);
        let mut l = stride_list(401, 256, 70, &mut rng()).unwrap();
        assert_eq!(l.iter().sum::<usize>(), 145);
        l.sort();
        assert_eq!(l, vec![48, 48, 49]);
        assert!(stride_list(256, 256, 70, &mut rng()).unwrap().is_empty());
        assert!(stride_list(255, 256, 70, &mut rng()).is_err());
    }

    #[test]
    fn decrements_follow_the_seed() {
        let draw = |s| stride_list(1001, 256, 70, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(draw(1), draw(1));
        assert!((0..20).any(|s| draw(s) != draw(1)));
    }

    proptest! {
        #[test]
        fn stride_invariants(extent in 16usize..900, patch in 16usize..80, stride in 1usize..40) {
            prop_assume!(extent >= patch);
            let l = stride_list(extent, patch, stride, &mut rng()).unwrap();
            prop_assert_eq!(l.iter().sum::<usize>(), extent - patch);
            prop_assert!(l.iter().all(|&s| s <= stride));
            if let (Some(lo), Some(hi)) = (l.iter().min(), l.iter().max()) {
                prop_assert!(hi - lo <= 1);
            }
        }
    }

    #[test]
    fn constant_scorer_gives_constant_planes() {
        let img = Image::new(40, 30, (0..1200).map(|i| (i % 11) as f32 / 10.0).collect()).unwrap();
        let plan = StridePlan::new(40, 30, 16, 7, &mut rng()).unwrap();
        let h = generate_heatmaps(&img, &Constant(0.7, 0.1), &plan, 5).unwrap();
        assert!(h.malignant.iter().all(|&v| (v - 0.7).abs() < 1e-7));
        assert!(h.benign.iter().all(|&v| (v - 0.1).abs() < 1e-7));
        let single = StridePlan::new(16, 16, 16, 7, &mut rng()).unwrap();
        let one = generate_heatmaps(&Image::zeros(16, 16), &Constant(0.3, 0.6), &single, 4).unwrap();
        assert_eq!(one.malignant, vec![0.3; 256]);
    }

    #[test]
    fn three_windows_average_pairwise() {
        struct Seq;
        impl PatchScorer for Seq {
            fn score(&self, px: &[f32], n: usize, side: usize) -> Result<Vec<(f32, f32)>> {
                // The window's left column encodes its position.
                Ok(px.chunks(side * side).take(n).map(|c| ([0.2, 0.6, 1.0][c[0] as usize], 0.0)).collect())
            }
        }
        let mut img = Image::zeros(4, 8);
        for y in 0..4 {
            for x in 0..8 {
                img.set(y, x, (x / 2) as f32);
            }
        }
        let plan = StridePlan { vertical: vec![], horizontal: vec![2, 2], patch_size: 4, prefixed_stride: 2 };
        let h = generate_heatmaps(&img, &Seq, &plan, 2).unwrap();
        let row: Vec<f32> = h.malignant[..8].to_vec();
        let want = [0.2, 0.2, 0.4, 0.4, 0.8, 0.8, 1.0, 1.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{row:?}");
        }
    }

    #[test]
    fn order_of_windows_does_not_matter() {
        let img = Image::new(48, 40, (0..1920).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
        let plan = StridePlan::new(48, 40, 16, 5, &mut rng()).unwrap();
        let mut w = plan.windows();
        let a = accumulate(&img, &MeanPixel, &w, 16, 7).unwrap();
        w.reverse();
        let b = accumulate(&img, &MeanPixel, &w, 16, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plan_must_match_image() {
        let plan = StridePlan::new(40, 30, 16, 7, &mut rng()).unwrap();
        assert!(matches!(generate_heatmaps(&Image::zeros(41, 30), &MeanPixel, &plan, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn breast_score_is_max() {
        let mk = |m: f32| Heatmap {
            height: 1,
            width: 3,
            malignant: vec![0.0, m, 0.1],
            benign: vec![0.0; 3],
            source: String::new(),
            checkpoint: String::new(),
        };
        assert_eq!(heatmap_breast_score(&[&mk(0.0), &mk(0.0)]).unwrap(), (0.1, 0.0));
        assert_eq!(heatmap_breast_score(&[&mk(0.3), &mk(0.9)]).unwrap().0, 0.9);
        assert!(heatmap_breast_score(&[]).is_err());
    }

    #[test]
    fn checkpoint_choice() {
        assert_eq!(best_checkpoint(&[(0.9, 0.5), (0.6, 0.9)]).unwrap(), 1);
        assert_eq!(best_checkpoint(&[(0.7, 0.7), (0.6, 0.8)]).unwrap(), 0);
        assert_eq!(best_checkpoint(&[(0.5, 0.5)]).unwrap(), 0);
        assert!(best_checkpoint(&[]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let img = Image::new(20, 18, (0..360).map(|i| (i % 9) as f32 / 8.0).collect()).unwrap();
        let plan = StridePlan::new(20, 18, 8, 4, &mut rng()).unwrap();
        let h = generate_heatmaps(&img, &MeanPixel, &plan, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mshm");
        h.write(&p).unwrap();
        let back = Heatmap::read(&p).unwrap();
        assert_eq!((back.malignant, back.benign), (h.malignant, h.benign));
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MSHM");
        assert_eq!(bytes.len(), 16 + 8 * 360);
        std::fs::write(&p, &bytes[..100]).unwrap();
        assert!(matches!(Heatmap::read(&p), Err(Error::Format { .. })));
    }
}
