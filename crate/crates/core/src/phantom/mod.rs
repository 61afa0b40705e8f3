//! Procedural phantom screening exams: four-view 16-bit images, lesion
//! masks, per-breast labels and a manifest.

mod render;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use render::{finding_index, render_exam, Dims, ExamSpec, LesionKind, LesionSpec, RenderedExam};

use crate::error::{Error, Result};
use crate::image::{encode_pgm16, encode_pgm8};
use crate::manifest::{
    mask_rel_path, AgeBand, BreastLabels, Density, ExamRecord, Finding, Manifest, Side, Split, View,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub exams: usize,
    /// Fraction of exams with a biopsied breast.
    pub biopsied_fraction: f64,
    /// Fraction of biopsied exams whose finding is malignant.
    pub malignant_fraction: f64,
    /// Fraction of malignant breasts that also carry a benign finding.
    pub both_fraction: f64,
    /// Fraction of biopsied exams whose lesions are not rendered.
    pub occult_fraction: f64,
    /// Train, val, test.
    pub split_ratios: [f64; 3],
    pub cc_dims: Dims,
    pub mlo_dims: Dims,
    /// Lesion radius range as a fraction of the CC height.
    pub lesion_radius: (f64, f64),
    pub birads_noise: f64,
    pub density_coupling: f64,
    /// Probability that a patient contributes a second exam.
    pub repeat_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            exams: 2000,
            biopsied_fraction: 0.025,
            malignant_fraction: 0.17,
            both_fraction: 0.2,
            occult_fraction: 0.328,
            split_ratios: [0.8, 0.1, 0.1],
            cc_dims: Dims::new(224, 162),
            mlo_dims: Dims::new(248, 146),
            lesion_radius: (0.025, 0.05),
            birads_noise: 0.1,
            density_coupling: 0.5,
            repeat_fraction: 0.3,
        }
    }
}

impl PhantomConfig {
    /// Full-scale crop sizes.
    pub fn paper_dims() -> (Dims, Dims) {
        (Dims::new(2677, 1942), Dims::new(2974, 1748))
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        frac("biopsied_fraction", self.biopsied_fraction)?;
        frac("malignant_fraction", self.malignant_fraction)?;
        frac("both_fraction", self.both_fraction)?;
        frac("occult_fraction", self.occult_fraction)?;
        frac("density_coupling", self.density_coupling)?;
        frac("repeat_fraction", self.repeat_fraction)?;
        if !(0.0..1.0).contains(&self.birads_noise) {
            return Err(Error::Config(format!("birads_noise must lie in [0, 1), got {}", self.birads_noise)));
        }
        if self.split_ratios.iter().any(|r| *r < 0.0) || self.split_ratios.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("split ratios must be non-negative with a positive sum".into()));
        }
        let (lo, hi) = self.lesion_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid lesion radius range ({lo}, {hi})")));
        }
        for d in [self.cc_dims, self.mlo_dims] {
            if d.height < 32 || d.width < 24 {
                return Err(Error::Config(format!("image dims {}x{} too small", d.height, d.width)));
            }
        }
        let r_min = lo * self.cc_dims.height as f64;
        let r_max = hi * self.cc_dims.height as f64;
        if r_min < 1.5 {
            return Err(Error::Config(format!(
                "lesion radius {r_min:.2}px is below 1.5px at {}x{}",
                self.cc_dims.height, self.cc_dims.width
            )));
        }
        let room = 0.2 * self.cc_dims.width.min(self.mlo_dims.width) as f64;
        if 2.0 * r_max > room {
            return Err(Error::Config(format!(
                "lesion radius {r_max:.1}px is too large for images {}x{}",
                self.cc_dims.height, self.cc_dims.width
            )));
        }
        Ok(())
    }

    fn split_targets(&self) -> [usize; 3] {
        let total: f64 = self.split_ratios.iter().sum();
        let n = self.exams;
        let a = (n as f64 * self.split_ratios[0] / total).round() as usize;
        let b = ((n as f64 * self.split_ratios[1] / total).round() as usize).min(n - a.min(n));
        [a.min(n), b, n - a.min(n) - b]
    }
}

/// BI-RADS-like assessment: 0 when a breast holds a malignant finding, 2
/// for benign-only, 1 for clean; then replaced by a uniformly chosen other
/// category with probability `noise_rate`.
pub fn assign_birads<R: Rng>(breasts: &[BreastLabels; 2], rng: &mut R, noise_rate: f64) -> u8 {
    let clean = if breasts.iter().any(|b| b.malignant) {
        0
    } else if breasts.iter().any(|b| b.benign) {
        2
    } else {
        1
    };
    if noise_rate > 0.0 && rng.random::<f64>() < noise_rate {
        let others: Vec<u8> = (0..3).filter(|&c| c != clean).collect();
        others[rng.random_range(0..2)]
    } else {
        clean
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug)]
pub struct Generated {
    pub manifest: Manifest,
    pub files: usize,
    pub hash: String,
}

struct Plan {
    record: ExamRecord,
    spec: ExamSpec,
    index: u64,
}

fn exam_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index + 1);
    r
}

fn pick<R: Rng, T: Copy>(rng: &mut R, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|x| x.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in items {
        if u < w {
            return v;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

fn plan_exams(cfg: &PhantomConfig, seed: u64) -> Vec<Plan> {
    let n = cfg.exams;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Patients with one or two exams, shared attributes per patient.
    let mut patient_of = Vec::with_capacity(n);
    let mut patients: Vec<(usize, AgeBand, Density)> = Vec::new();
    while patient_of.len() < n {
        let pid = patients.len();
        let size = if patient_of.len() + 1 < n && rng.random::<f64>() < cfg.repeat_fraction { 2 } else { 1 };
        let age = pick(
            &mut rng,
            &[
                (AgeBand::Under40, 0.08),
                (AgeBand::Forties, 0.27),
                (AgeBand::Fifties, 0.30),
                (AgeBand::Sixties, 0.23),
                (AgeBand::Over70, 0.12),
            ],
        );
        let density = pick(
            &mut rng,
            &[
                (Density::Fatty, 0.10),
                (Density::Scattered, 0.40),
                (Density::Heterogeneous, 0.40),
                (Density::Extreme, 0.10),
            ],
        );
        patients.push((size, age, density));
        for _ in 0..size {
            patient_of.push(pid);
        }
    }

    // Greedy patient-to-split assignment against exact targets.
    let targets = cfg.split_targets();
    let mut remaining = targets.map(|t| t as isize);
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Train; patients.len()];
    for pid in order {
        let size = patients[pid].0 as isize;
        let best = (0..3)
            .filter(|&s| remaining[s] >= size)
            .max_by_key(|&s| (remaining[s], std::cmp::Reverse(s)))
            .unwrap_or_else(|| (0..3).max_by_key(|&s| (remaining[s], std::cmp::Reverse(s))).unwrap());
        remaining[best] -= size;
        split_of[pid] = Split::ALL[best];
    }

    // Exact label counts through seeded shuffles.
    let n_biopsied = (n as f64 * cfg.biopsied_fraction).round() as usize;
    let n_malignant = (n_biopsied as f64 * cfg.malignant_fraction).round() as usize;
    let n_occult = (n_biopsied as f64 * cfg.occult_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let biopsied = &idx[..n_biopsied];
    let mut kinds = vec![0u8; n]; // 0 clean, 1 benign, 2 malignant
    for (k, &e) in biopsied.iter().enumerate() {
        kinds[e] = if k < n_malignant { 2 } else { 1 };
    }
    let mut occ: Vec<usize> = biopsied.to_vec();
    occ.shuffle(&mut rng);
    let mut occult = vec![false; n];
    for &e in &occ[..n_occult] {
        occult[e] = true;
    }

    let (r_lo, r_hi) = (
        cfg.lesion_radius.0 * cfg.cc_dims.height as f64,
        cfg.lesion_radius.1 * cfg.cc_dims.height as f64,
    );
    let mut plans = Vec::with_capacity(n);
    for e in 0..n {
        let mut erng = exam_rng(seed, e as u64);
        let (_, age, density) = patients[patient_of[e]];
        let mut breasts = [BreastLabels::default(); 2];
        let mut lesions = Vec::new();
        if kinds[e] > 0 {
            let side = if erng.random::<bool>() { Side::Left } else { Side::Right };
            let b = &mut breasts[side.index()];
            b.biopsied = true;
            b.occult = occult[e];
            if kinds[e] == 2 {
                b.malignant = true;
                b.benign = erng.random::<f64>() < cfg.both_fraction;
            } else {
                b.benign = true;
            }
            let findings: Vec<Finding> = [Finding::Benign, Finding::Malignant]
                .into_iter()
                .filter(|f| b.has(*f))
                .collect();
            if !b.occult {
                for f in findings {
                    let kind = pick(
                        &mut erng,
                        &[
                            (LesionKind::Mass, 21.0),
                            (LesionKind::CalcificationCluster, 26.0),
                            (LesionKind::Asymmetry, 12.0),
                        ],
                    );
                    let size = erng.random_range(r_lo..=r_hi);
                    lesions.push(LesionSpec::random(kind, f, side, size, &mut erng));
                }
            }
        }
        let birads = assign_birads(&breasts, &mut erng, cfg.birads_noise);
        let exam_id = format!("E{e:06}");
        let record = ExamRecord {
            paths: View::ALL.map(|v| format!("images/{exam_id}_{}.pgm", v.token())),
            exam_id,
            patient_id: format!("P{:06}", patient_of[e]),
            split: split_of[patient_of[e]],
            age_band: age,
            density,
            breasts,
            birads,
        };
        let spec = ExamSpec {
            density,
            density_coupling: cfg.density_coupling,
            breast_scale: [erng.random_range(0.85..1.0), erng.random_range(0.85..1.0)],
            lesions,
        };
        plans.push(Plan { record, spec, index: e as u64 });
    }
    plans
}

fn to_u16(v: f32) -> u16 {
    if v <= 0.0 {
        0
    } else {
        ((v as f64 * 65535.0).round() as u32).clamp(1, 65535) as u16
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Generate a dataset under `out`. Rendering runs on the current rayon
/// pool; output bytes do not depend on scheduling.
pub fn generate_dataset(cfg: &PhantomConfig, seed: u64, out: &Path) -> Result<Generated> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let plans = plan_exams(cfg, seed);
    if !plans.is_empty() {
        for sub in ["images", "masks"] {
            let d = out.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let files: Vec<usize> = plans
        .par_iter()
        .map(|p| -> Result<usize> {
            let mut rng = exam_rng(seed ^ 0x9e37_79b9_7f4a_7c15, p.index);
            let r = render_exam(&p.spec, cfg.cc_dims, cfg.mlo_dims, &mut rng)?;
            let mut written = 0;
            for view in View::ALL {
                let img = &r.images[view.index()];
                let samples: Vec<u16> = img.data.iter().map(|&v| to_u16(v)).collect();
                write_file(
                    &p.record.image_path(out, view),
                    &encode_pgm16(img.height, img.width, &samples),
                )?;
                written += 1;
                for f in [Finding::Benign, Finding::Malignant] {
                    if let Some(m) = r.mask(view, f) {
                        let px: Vec<u8> = m.data.iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
                        let path = out.join(mask_rel_path(&p.record.exam_id, view, f));
                        write_file(&path, &encode_pgm8(m.height, m.width, &px))?;
                        written += 1;
                    }
                }
            }
            Ok(written)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { exams: plans.into_iter().map(|p| p.record).collect() };
    manifest.write(&out.join("manifest.csv"))?;
    let hash = dataset_hash(out)?;
    Ok(Generated { manifest, files: files.iter().sum::<usize>() + 1, hash })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file under `root` in sorted relative-path order,
/// hashing each path and its length-prefixed contents.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(root.join(&rel)).map_err(|e| Error::io(&rel, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
