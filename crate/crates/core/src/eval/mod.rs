//! Evaluation: AUC metrics, populations, derived scores, the hybrid
//! reader-model analysis and CSV exports.

mod metrics;
mod population;
mod readers;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub use metrics::{pearson, pr_auc, pr_curve, roc_auc, roc_curve};
pub use population::{subpopulation, Population};
pub use readers::{calibrated_reader, calibrated_readers, simulate_readers, ReaderMatrix, ReaderSkill};

use crate::breast::{BreastModel, ExamInput, Tap};
use crate::error::{Error, Result};
use crate::manifest::{ExamRecord, Finding, Manifest, Side};

pub const PREDICTIONS_HEADER: &str = "exam_id,side,p_malignant,p_benign,model_id";
pub const METRICS_HEADER: &str = "population,task,auc,pr_auc,breasts,positives";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub exam_id: String,
    pub side: Side,
    pub p_malignant: f64,
    pub p_benign: f64,
    pub model_id: String,
}

/// Two records per exam from a `[L-ben, L-mal, R-ben, R-mal]` vector.
pub fn records_from_vector(exam_id: &str, p: [f32; 4], model_id: &str) -> [PredictionRecord; 2] {
    Side::BOTH.map(|s| PredictionRecord {
        exam_id: exam_id.to_string(),
        side: s,
        p_malignant: p[2 * s.index() + 1] as f64,
        p_benign: p[2 * s.index()] as f64,
        model_id: model_id.to_string(),
    })
}

pub fn predictions_to_csv(records: &[PredictionRecord]) -> String {
    let mut s = String::from(PREDICTIONS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.exam_id, r.side.letter(), r.p_malignant, r.p_benign, r.model_id);
    }
    s
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    std::fs::write(path, predictions_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTIONS_HEADER) {
        return Err(Error::format(path, "missing predictions header"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |why: String| Error::format(path, format!("line {}: {why}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let prob = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| bad(format!("bad probability {s:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!("probability {v} outside [0, 1]")));
            }
            Ok(v)
        };
        let r = PredictionRecord {
            exam_id: f[0].to_string(),
            side: f[1].parse().map_err(|_| bad(format!("bad side {:?}", f[1])))?,
            p_malignant: prob(f[2])?,
            p_benign: prob(f[3])?,
            model_id: f[4].to_string(),
        };
        if !seen.insert((r.exam_id.clone(), r.side, r.model_id.clone())) {
            return Err(bad(format!("duplicate record for {} {}", r.exam_id, r.side.letter())));
        }
        out.push(r);
    }
    Ok(out)
}

/// Probability that a breast was biopsied at all.
pub fn biopsy_score(p_mal: f64, p_ben: f64) -> f64 {
    p_mal.max(p_ben)
}

/// Malignant share of the two finding probabilities.
pub fn malignant_vs_benign_score(p_mal: f64, p_ben: f64) -> Result<f64> {
    if p_mal + p_ben <= 0.0 {
        return Err(Error::Undefined("malignant-vs-benign score of two zero probabilities".into()));
    }
    Ok(p_mal / (p_mal + p_ben))
}

pub fn hybrid_scores(reader: &[f64], model: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if reader.len() != model.len() {
        return Err(Error::InvalidArgument(format!("{} reader scores for {} model scores", reader.len(), model.len())));
    }
    Ok(reader.iter().zip(model).map(|(r, m)| lambda * r + (1.0 - lambda) * m).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub auc: f64,
    pub pr_auc: f64,
}

/// Hybrid AUC and PR AUC for lambda = 0, 0.01, ..., 0.99.
pub fn lambda_sweep(reader: &[f64], model: &[f64], labels: &[bool]) -> Result<Vec<SweepPoint>> {
    (0..100)
        .map(|i| {
            let lambda = i as f64 / 100.0;
            let h = hybrid_scores(reader, model, lambda)?;
            Ok(SweepPoint { lambda, auc: roc_auc(&h, labels)?, pr_auc: pr_auc(&h, labels)? })
        })
        .collect()
}

/// Lambda with the highest AUC in a sweep; ties go to the smallest.
pub fn best_lambda(sweep: &[SweepPoint]) -> Option<SweepPoint> {
    sweep.iter().copied().fold(None, |best, p| match best {
        Some(b) if b.auc >= p.auc => Some(b),
        _ => Some(p),
    })
}

/// Pearson correlations between the four per-exam prediction streams,
/// ordered `[L-ben, L-mal, R-ben, R-mal]`.
pub fn prediction_correlations(vectors: &[[f64; 4]]) -> Result<[[f64; 4]; 4]> {
    if vectors.len() < 3 {
        return Err(Error::InvalidArgument("correlations need at least 3 exams".into()));
    }
    let streams: Vec<Vec<f64>> = (0..4).map(|k| vectors.iter().map(|v| v[k]).collect()).collect();
    let mut m = [[1.0; 4]; 4];
    for i in 0..4 {
        for j in i + 1..4 {
            let r = pearson(&streams[i], &streams[j])?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

/// Per-exam `[L-ben, L-mal, R-ben, R-mal]` vectors of one model, in the
/// order exams first appear.
pub fn exam_vectors(records: &[PredictionRecord]) -> Vec<(String, [f64; 4])> {
    let mut order = Vec::new();
    let mut map: HashMap<&str, [f64; 4]> = HashMap::new();
    for r in records {
        let v = map.entry(&r.exam_id).or_insert_with(|| {
            order.push(r.exam_id.clone());
            [0.0; 4]
        });
        v[2 * r.side.index()] = r.p_benign;
        v[2 * r.side.index() + 1] = r.p_malignant;
    }
    order.into_iter().map(|id| { let v = map[id.as_str()]; (id, v) }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub population: String,
    pub task: String,
    pub auc: f64,
    pub pr_auc: f64,
    pub breasts: usize,
    pub positives: usize,
}

/// Scores and labels of the breasts in `ids`, looked up in `records` and
/// `manifest`.
pub struct Scored {
    pub p_malignant: Vec<f64>,
    pub p_benign: Vec<f64>,
    pub malignant: Vec<bool>,
    pub benign: Vec<bool>,
    pub biopsied: Vec<bool>,
}

pub fn gather(records: &[PredictionRecord], manifest: &Manifest, ids: &[(String, Side)]) -> Result<Scored> {
    let by_id: HashMap<(&str, Side), &PredictionRecord> = records.iter().map(|r| ((r.exam_id.as_str(), r.side), r)).collect();
    let exams: HashMap<&str, &ExamRecord> = manifest.exams.iter().map(|e| (e.exam_id.as_str(), e)).collect();
    let mut s = Scored { p_malignant: vec![], p_benign: vec![], malignant: vec![], benign: vec![], biopsied: vec![] };
    for (id, side) in ids {
        let r = by_id
            .get(&(id.as_str(), *side))
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for {id} {}", side.letter())))?;
        let e = exams.get(id.as_str()).ok_or_else(|| Error::InvalidArgument(format!("exam {id} not in manifest")))?;
        let b = e.breast(*side);
        s.p_malignant.push(r.p_malignant);
        s.p_benign.push(r.p_benign);
        s.malignant.push(b.has(Finding::Malignant));
        s.benign.push(b.has(Finding::Benign));
        s.biopsied.push(b.biopsied);
    }
    Ok(s)
}

/// Malignant and benign AUC rows for one population, plus the biopsy task
/// on screening and malignant-vs-benign on one-class biopsied breasts.
/// Tasks whose labels are single-class are skipped with a warning.
pub fn population_metrics(records: &[PredictionRecord], manifest: &Manifest, name: &str, ids: &[(String, Side)]) -> Result<Vec<MetricRow>> {
    let s = gather(records, manifest, ids)?;
    let mut tasks: Vec<(&str, Vec<f64>, &[bool])> =
        vec![("malignant", s.p_malignant.clone(), &s.malignant), ("benign", s.p_benign.clone(), &s.benign)];
    let biopsy: Vec<f64> = s.p_malignant.iter().zip(&s.p_benign).map(|(&m, &b)| biopsy_score(m, b)).collect();
    if name == "screening" {
        tasks.push(("biopsy", biopsy, &s.biopsied));
    }
    if name == "one_class_biopsied" {
        let mvb = s
            .p_malignant
            .iter()
            .zip(&s.p_benign)
            .map(|(&m, &b)| malignant_vs_benign_score(m, b))
            .collect::<Result<Vec<f64>>>()?;
        tasks.push(("malignant_vs_benign", mvb, &s.malignant));
    }
    let mut rows = Vec::new();
    for (task, scores, labels) in tasks {
        match (roc_auc(&scores, labels), pr_auc(&scores, labels)) {
            (Ok(auc), Ok(pr)) => rows.push(MetricRow {
                population: name.to_string(),
                task: task.to_string(),
                auc,
                pr_auc: pr,
                breasts: labels.len(),
                positives: labels.iter().filter(|&&l| l).count(),
            }),
            (Err(e), _) | (_, Err(e)) => log::warn!("{name}/{task} skipped: {e}"),
        }
    }
    Ok(rows)
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{},{}", r.population, r.task, r.auc, r.pr_auc, r.breasts, r.positives);
    }
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "missing metrics header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("bad metrics row {line:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(MetricRow {
                population: f[0].to_string(),
                task: f[1].to_string(),
                auc: f[2].parse().map_err(|_| bad())?,
                pr_auc: f[3].parse().map_err(|_| bad())?,
                breasts: f[4].parse().map_err(|_| bad())?,
                positives: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Curve points as CSV with the given header.
pub fn curve_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in points {
        let _ = writeln!(s, "{a:.6},{b:.6}");
    }
    s
}

/// Activations at `tap` for each `(exam_id, input)` as CSV: `exam_id`
/// followed by one column per activation. No exams gives the header alone.
pub fn activations_csv(model: &BreastModel, exams: &[(String, ExamInput)], tap: Tap) -> Result<String> {
    let width = 4 * model.config.column.output_dim();
    let mut s = String::from("exam_id");
    for i in 0..width {
        let _ = write!(s, ",a{i:04}");
    }
    s.push('\n');
    for chunk in exams.chunks(8) {
        let inputs: Vec<&ExamInput> = chunk.iter().map(|(_, x)| x).collect();
        let rows = model.activations(&inputs, tap)?;
        for ((id, _), row) in chunk.iter().zip(rows) {
            if row.len() != width {
                return Err(Error::Shape(format!("activation row of {} values, expected {width}", row.len())));
            }
            s.push_str(id);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn export_activations(path: &Path, model: &BreastModel, exams: &[(String, ExamInput)], tap: Tap) -> Result<()> {
    let text = activations_csv(model, exams, tap)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_exam(seed: usize) -> ExamInput {
        use crate::breast::ViewInput;
        use crate::image::Image;
        use crate::manifest::{View, ViewKind};
        std::array::from_fn(|v| {
            let (h, w) = if View::ALL[v].kind() == ViewKind::Cc { (36, 28) } else { (40, 24) };
            let px = (0..h * w).map(|i| ((i * 31 + seed * 977 + v * 13) % 101) as f32 / 101.0).collect();
            ViewInput { planes: vec![Image::new(h, w, px).unwrap()] }
        })
    }

    #[test]
    fn activation_export_rows() {
        use crate::breast::{ModelConfig, Task, Variant};
        let mut cfg = ModelConfig::new(Variant::ViewWise, Task::Cancer, 1).unwrap();
        cfg.column.channels = vec![4, 4, 8, 8, 8, 8];
        let model = BreastModel::new(cfg, 1).unwrap();
        let empty = activations_csv(&model, &[], Tap::ColumnConcat).unwrap();
        assert_eq!(empty.lines().count(), 1);
        assert_eq!(empty.trim_end().split(',').count(), 1 + 32);
        let exams = vec![("a".to_string(), tiny_exam(1)), ("b".to_string(), tiny_exam(2)), ("a".to_string(), tiny_exam(1))];
        for tap in [Tap::ColumnConcat, Tap::Fc1Concat] {
            let csv = activations_csv(&model, &exams, tap).unwrap();
            let rows: Vec<&str> = csv.lines().collect();
            assert_eq!(rows.len(), 4);
            assert!(rows[1..].iter().all(|r| r.split(',').count() == 33));
            assert_eq!(rows[1], rows[3]);
            assert_ne!(rows[1], rows[2]);
        }
    }

    #[test]
    fn derived_scores() {
        assert_eq!(biopsy_score(0.3, 0.7), 0.7);
        assert_eq!(biopsy_score(0.0, 0.0), 0.0);
        assert!((malignant_vs_benign_score(0.3, 0.1).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(malignant_vs_benign_score(0.42, 0.42).unwrap(), 0.5);
        let a = malignant_vs_benign_score(0.2, 0.7).unwrap();
        let b = malignant_vs_benign_score(0.2 * 3.5, 0.7 * 3.5).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(malignant_vs_benign_score(0.0, 0.0).is_err());
    }

    #[test]
    fn hybrid_endpoints() {
        let r = [0.8, 0.1, 0.35];
        let m = [0.4, 0.9, 0.05];
        assert!((hybrid_scores(&r, &m, 0.5).unwrap()[0] - 0.6).abs() < 1e-15);
        assert_eq!(hybrid_scores(&r, &m, 0.0).unwrap(), m);
        assert_eq!(hybrid_scores(&r, &m, 1.0).unwrap(), r);
        assert!(hybrid_scores(&r, &m[..2], 0.5).is_err());
        assert!(hybrid_scores(&r, &m, 1.5).is_err());
    }

    #[test]
    fn sweep_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.3).collect();
        let r: Vec<f64> = l.iter().map(|&x| x as u8 as f64 * 0.3 + rng.random::<f64>()).collect();
        let m: Vec<f64> = l.iter().map(|&x| x as u8 as f64 * 0.6 + rng.random::<f64>()).collect();
        let s = lambda_sweep(&r, &m, &l).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s[99].lambda, 0.99);
        assert_eq!(s[0].auc, roc_auc(&m, &l).unwrap());
        assert!(best_lambda(&s).unwrap().auc >= s[0].auc);
    }

    #[test]
    fn correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<[f64; 4]> = (0..10_000)
            .map(|_| {
                let a = rng.random::<f64>();
                [a, a, rng.random(), rng.random()]
            })
            .collect();
        let c = prediction_correlations(&v).unwrap();
        assert!((c[0][1] - 1.0).abs() < 1e-12);
        for (i, j) in [(0, 2), (0, 3), (1, 2), (2, 3)] {
            assert!(c[i][j].abs() < 0.05);
            assert_eq!(c[i][j], c[j][i]);
        }
        assert!(prediction_correlations(&v[..2]).is_err());
    }

    #[test]
    fn predictions_roundtrip_and_validation() {
        let recs: Vec<PredictionRecord> = records_from_vector("e1", [0.1, 0.2, 0.3, 0.4], "m").into_iter().collect();
        assert_eq!((recs[0].p_benign, recs[1].p_malignant), (0.1f32 as f64, 0.4f32 as f64));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_predictions(&p, &recs).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), recs);
        std::fs::write(&p, format!("{PREDICTIONS_HEADER}\ne1,L,1.5,0.1,m\n")).unwrap();
        assert!(read_predictions(&p).is_err());
        std::fs::write(&p, format!("{PREDICTIONS_HEADER}\ne1,L,0.5,0.1,m\ne1,L,0.5,0.1,m\n")).unwrap();
        assert!(read_predictions(&p).is_err());
    }
}
