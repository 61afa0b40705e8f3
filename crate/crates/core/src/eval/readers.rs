//! Synthetic readers for the hybrid analysis. These are simulated score
//! streams with a tunable AUC, not a model of human reading.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::metrics::roc_auc;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReaderSkill {
    pub separation: f64,
    pub noise: f64,
}

/// Readers by breasts.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaderMatrix {
    pub scores: Vec<Vec<f64>>,
    pub skills: Vec<ReaderSkill>,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn scores_for(labels: &[bool], skill: ReaderSkill, draws: &[f64]) -> Vec<f64> {
    labels
        .iter()
        .zip(draws)
        .map(|(&l, &z)| logistic(skill.separation * if l { 0.5 } else { -0.5 } + skill.noise * z))
        .collect()
}

/// One score per breast: `sigmoid(separation * (label - 1/2) + noise * z)`.
pub fn simulate_readers<R: Rng>(labels: &[bool], skills: &[ReaderSkill], rng: &mut R) -> ReaderMatrix {
    let scores = skills
        .iter()
        .map(|&s| {
            let draws: Vec<f64> = labels.iter().map(|_| StandardNormal.sample(rng)).collect();
            scores_for(labels, s, &draws)
        })
        .collect();
    ReaderMatrix { scores, skills: skills.to_vec() }
}

/// A reader whose realized AUC on `labels` is within 0.005 of `target`,
/// or within one pair's worth of AUC when there are too few breasts for
/// that. The noise draws are fixed first, which makes the AUC monotone in
/// the separation, and the separation is then found by bisection.
pub fn calibrated_reader<R: Rng>(labels: &[bool], target: f64, rng: &mut R) -> Result<(ReaderSkill, Vec<f64>)> {
    if !(0.5..=0.999).contains(&target) {
        return Err(Error::InvalidArgument(format!("reader AUC target {target} is not attainable")));
    }
    let draws: Vec<f64> = labels.iter().map(|_| StandardNormal.sample(rng)).collect();
    let auc = |sep: f64| -> Result<(f64, Vec<f64>)> {
        let s = scores_for(labels, ReaderSkill { separation: sep, noise: 1.0 }, &draws);
        Ok((roc_auc(&s, labels)?, s))
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while auc(hi)?.0 < target {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::InvalidArgument(format!("reader AUC target {target} is not attainable")));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if auc(mid)?.0 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ((got, scores), sep) = {
        let (a, b) = (auc(lo)?, auc(hi)?);
        if (a.0 - target).abs() < (b.0 - target).abs() { (a, lo) } else { (b, hi) }
    };
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let step = 1.0 / (pos * (labels.len() as f64 - pos));
    if (got - target).abs() > 0.005f64.max(step) {
        return Err(Error::Undefined(format!("reader calibration reached {got:.4} for target {target}")));
    }
    Ok((ReaderSkill { separation: sep, noise: 1.0 }, scores))
}

/// Calibrated readers for each target AUC.
pub fn calibrated_readers<R: Rng>(labels: &[bool], targets: &[f64], rng: &mut R) -> Result<ReaderMatrix> {
    let mut m = ReaderMatrix { scores: Vec::new(), skills: Vec::new() };
    for &t in targets {
        let (skill, scores) = calibrated_reader(labels, t, rng)?;
        m.skills.push(skill);
        m.scores.push(scores);
    }
    Ok(m)
}
