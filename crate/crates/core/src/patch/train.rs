use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_epoch, class_weights, EpochPlan, PatchNet, PatchPools, PatchSample};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Graph, Mode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchTrainConfig {
    pub epochs: usize,
    pub save_every: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub plan: EpochPlan,
    pub seed: u64,
}

impl PatchTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.save_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("patch training needs epochs, save_every and batch_size >= 1".into()));
        }
        self.adam.validate()?;
        class_weights(self.plan.counts).map(|_| ())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PatchTrainReport {
    pub checkpoints: Vec<PathBuf>,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Stack patches into a `[N, 1, S, S]` tensor plus their class indices.
pub(crate) fn batch_tensor(batch: &[&PatchSample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = batch.len();
    let px = batch.first().map_or(0, |s| s.pixels.len());
    let side = (px as f64).sqrt().round() as usize;
    if side * side != px || batch.iter().any(|s| s.pixels.len() != px) {
        return Err(Error::Shape("patches in a batch must be equal-sized squares".into()));
    }
    let mut data = Vec::with_capacity(n * px);
    for s in batch {
        data.extend_from_slice(&s.pixels);
    }
    Ok((Tensor::new(vec![n, 1, side, side], data)?, batch.iter().map(|s| s.class.index()).collect()))
}

/// Weighted cross-entropy loss of `net` on `batch`.
#[cfg(test)]
pub(crate) fn batch_loss(net: &mut PatchNet, batch: &[&PatchSample], weights: &[f32], mode: Mode) -> Result<f64> {
    let (x, labels) = batch_tensor(batch)?;
    let mut g = Graph::inference();
    let xv = g.input(x)?;
    let logits = net.forward(&mut g, xv, mode)?;
    let loss = g.weighted_softmax_cross_entropy(logits, &labels, weights)?;
    Ok(g.value(loss).item() as f64)
}

/// Train with weighted cross-entropy, the weights derived from the epoch
/// plan's class counts. A checkpoint is written every `save_every` epochs
/// and after the final epoch. `on_step` runs after each optimizer step.
pub fn train_patch_classifier(
    net: &mut PatchNet,
    pools: &PatchPools,
    cfg: &PatchTrainConfig,
    out_dir: &Path,
    mut on_step: impl FnMut(&mut PatchNet),
) -> Result<PatchTrainReport> {
    cfg.validate()?;
    let weights: Vec<f32> = class_weights(cfg.plan.counts)?.iter().map(|&w| w as f32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut report = PatchTrainReport::default();
    for epoch in 0..cfg.epochs {
        let samples = build_epoch(pools, &cfg.plan, &mut rng)?;
        let mut total = 0.0;
        let mut steps = 0;
        for batch in samples.chunks(cfg.batch_size) {
            let (x, labels) = batch_tensor(batch)?;
            let mut g = Graph::new();
            let xv = g.input(x)?;
            let step = (|| {
                let logits = net.forward(&mut g, xv, Mode::Train)?;
                let loss = g.weighted_softmax_cross_entropy(logits, &labels, &weights)?;
                let value = g.value(loss).item() as f64;
                let grads = g.backward(loss)?;
                adam.step(&mut net.store, &grads)?;
                Ok::<_, Error>(value)
            })();
            let value = match step {
                Ok(v) if v.is_finite() => v,
                Ok(v) => return Err(Error::Diverged { epoch, reason: format!("loss {v}") }),
                Err(Error::NonFinite(why)) => return Err(Error::Diverged { epoch, reason: why }),
                Err(e) => return Err(e),
            };
            report.step_losses.push(value);
            total += value;
            steps += 1;
            on_step(net);
        }
        let mean = total / steps as f64;
        report.epoch_losses.push(mean);
        log::info!("patch epoch {} loss {mean:.5}", epoch + 1);
        if (epoch + 1) % cfg.save_every == 0 || epoch + 1 == cfg.epochs {
            let path = out_dir.join(format!("patch_e{:05}.ckpt", epoch + 1));
            net.save(&path)?;
            report.checkpoints.push(path);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{PatchClass, PatchNetConfig, Window};
    use crate::tensor::ParamKind;

    /// Separable toy patches: each class has its own brightness band.
    fn toy_pools(per_class: usize, side: usize) -> PatchPools {
        let mut pools = PatchPools::default();
        let mut k = 0u32;
        for c in PatchClass::ALL {
            for _ in 0..per_class {
                k = k.wrapping_mul(1664525).wrapping_add(1013904223);
                let jitter = (k >> 8) as f32 / (1u32 << 24) as f32 * 0.05;
                let level = 0.15 + 0.22 * c.index() as f32 + jitter;
                pools.push(PatchSample {
                    pixels: (0..side * side).map(|i| level + 0.02 * ((i % 7) as f32 / 7.0)).collect(),
                    class: c,
                    source: String::new(),
                    window: Window { cy: 0.0, cx: 0.0, side: side as f64, angle: 0.0 },
                });
            }
        }
        pools
    }

    fn cfg(epochs: usize, save_every: usize, lr: f64) -> PatchTrainConfig {
        PatchTrainConfig {
            epochs,
            save_every,
            batch_size: 20,
            adam: AdamConfig { lr, ..Default::default() },
            plan: EpochPlan { counts: [50, 50, 50, 50] },
            seed: 9,
        }
    }

    #[test]
    fn checkpoint_count_is_ceiling() {
        let pools = toy_pools(60, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(5, 2, 1e-3);
        c.plan = EpochPlan { counts: [2, 2, 2, 2] };
        let mut net = PatchNet::new(PatchNetConfig::default(), 1).unwrap();
        let r = train_patch_classifier(&mut net, &pools, &c, dir.path(), |_| {}).unwrap();
        assert_eq!(r.checkpoints.len(), 3);
        assert_eq!(r.epoch_losses.len(), 5);
        assert!(r.checkpoints[2].ends_with("patch_e00005.ckpt"));
    }

    #[test]
    fn full_set_loss_falls_on_most_steps() {
        let pools = toy_pools(50, 16);
        let all: Vec<&PatchSample> = pools.pools.iter().flatten().collect();
        let weights = [0.25f32; 4];
        let dir = tempfile::tempdir().unwrap();
        let mut net = PatchNet::new(PatchNetConfig::default(), 2).unwrap();
        let full = |n: &mut PatchNet| {
            let mut probe = PatchNet::new(n.config.clone(), 0).unwrap();
            probe.store = n.store.clone();
            batch_loss(&mut probe, &all, &weights, Mode::Train).unwrap()
        };
        let mut losses = vec![full(&mut net)];
        train_patch_classifier(&mut net, &pools, &cfg(1, 1, 3e-3), dir.path(), |n| losses.push(full(n))).unwrap();
        assert_eq!(losses.len(), 11);
        let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(falls * 10 >= 8 * (losses.len() - 1), "{losses:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_trainables() {
        let pools = toy_pools(20, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut net = PatchNet::new(PatchNetConfig::default(), 4).unwrap();
        let before = net.store.clone();
        train_patch_classifier(&mut net, &pools, &cfg(1, 1, 0.0), dir.path(), |_| {}).unwrap();
        let mut buffers_moved = false;
        for ((_, a), (_, b)) in before.entries().zip(net.store.entries()) {
            match a.kind {
                ParamKind::Trainable => assert_eq!(a.value, b.value, "{}", a.name),
                ParamKind::Buffer => buffers_moved |= a.value != b.value,
            }
        }
        assert!(buffers_moved);
    }
}
