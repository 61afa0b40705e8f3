use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    load_checkpoint, softmax_rows, save_checkpoint, Graph, Layer, LayerSpec, Mode, ParamStore, Params,
    Tensor, Var,
};

/// Six weighted layers: four conv-BN-ReLU stages (max-pooled between
/// stages, global average pooled after the last) and two linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchNetConfig {
    pub widths: [usize; 4],
    pub hidden: usize,
}

impl Default for PatchNetConfig {
    fn default() -> Self {
        PatchNetConfig { widths: [16, 32, 64, 64], hidden: 64 }
    }
}

pub struct PatchNet {
    pub config: PatchNetConfig,
    pub store: ParamStore<f32>,
    stages: Vec<(Layer, Layer)>,
    fc1: Layer,
    fc2: Layer,
}

impl PatchNet {
    pub fn new(config: PatchNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.widths.iter().enumerate() {
            let conv = Layer::build(LayerSpec::conv(cin, c, 3, 1, 1), &format!("patch.conv{i}"), &mut store, &mut rng)?;
            let bn = Layer::build(LayerSpec::batchnorm(c), &format!("patch.bn{i}"), &mut store, &mut rng)?;
            stages.push((conv, bn));
            cin = c;
        }
        let fc1 = Layer::build(
            LayerSpec::Linear { in_features: cin, out_features: config.hidden },
            "patch.fc1",
            &mut store,
            &mut rng,
        )?;
        let fc2 = Layer::build(
            LayerSpec::Linear { in_features: config.hidden, out_features: 4 },
            "patch.fc2",
            &mut store,
            &mut rng,
        )?;
        Ok(PatchNet { config, store, stages, fc1, fc2 })
    }

    fn run_layers(
        stages: &[(Layer, Layer)],
        fc1: &Layer,
        fc2: &Layer,
        g: &mut Graph<f32>,
        p: &mut Params<'_>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        let last = stages.len() - 1;
        for (i, (conv, bn)) in stages.iter().enumerate() {
            h = p.apply(conv, g, &[h])?;
            h = p.apply(bn, g, &[h])?;
            h = g.relu(h)?;
            if i < last {
                h = g.maxpool2d(h, 2, 2)?;
            }
        }
        h = g.global_avgpool(h)?;
        h = p.apply(fc1, g, &[h])?;
        h = g.relu(h)?;
        p.apply(fc2, g, &[h])
    }

    /// Logits `[N, 4]` for a `[N, 1, S, S]` input, recording a trainable
    /// graph.
    pub fn forward(&mut self, g: &mut Graph<f32>, x: Var, mode: Mode) -> Result<Var> {
        let mut p = Params::Mut(&mut self.store, mode);
        Self::run_layers(&self.stages, &self.fc1, &self.fc2, g, &mut p, x)
    }

    /// Class probabilities for `n` square patches of side `side`, packed
    /// row-major in `pixels`.
    pub fn predict(&self, pixels: &[f32], n: usize, side: usize) -> Result<Vec<[f32; 4]>> {
        if pixels.len() != n * side * side {
            return Err(Error::Shape(format!("{} pixels for {n} patches of side {side}", pixels.len())));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(vec![n, 1, side, side], pixels.to_vec())?)?;
        let mut p = Params::Shared(&self.store);
        let logits = Self::run_layers(&self.stages, &self.fc1, &self.fc2, &mut g, &mut p, x)?;
        let probs = softmax_rows(g.value(logits).data(), 4);
        Ok(probs.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    pub fn load(config: PatchNetConfig, path: &Path) -> Result<Self> {
        let mut net = PatchNet::new(config, 0)?;
        load_checkpoint(path, &mut net.store)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_are_distributions_and_roundtrip() {
        let net = PatchNet::new(PatchNetConfig::default(), 3).unwrap();
        let px: Vec<f32> = (0..3 * 64 * 64).map(|i| ((i * 31) % 17) as f32 / 17.0).collect();
        let p = net.predict(&px, 3, 64).unwrap();
        for row in &p {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        net.save(&path).unwrap();
        let back = PatchNet::load(PatchNetConfig::default(), &path).unwrap();
        assert_eq!(back.predict(&px, 3, 64).unwrap(), p);
    }
}
