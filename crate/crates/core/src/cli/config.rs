//! Flat `key=value` run configuration with per-profile defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::breast::{ModelConfig, Task, Variant};
use crate::error::{Error, Result};
use crate::heatmap::HeatmapConfig;
use crate::patch::{EpochPlan, PatchNetConfig, PatchTrainConfig, PoolConfig, SamplerConfig};
use crate::phantom::{Dims, PhantomConfig};
use crate::tensor::AdamConfig;
use crate::train::TrainRunConfig;

/// Keys and desk-profile defaults.
const DESK: &[(&str, &str)] = &[
    ("seed", "7"),
    ("data.exams", "2000"),
    ("data.biopsied_fraction", "0.025"),
    ("data.malignant_fraction", "0.17"),
    ("data.both_fraction", "0.2"),
    ("data.occult_fraction", "0.328"),
    ("data.split", "0.8,0.1,0.1"),
    ("data.cc_dims", "224x162"),
    ("data.mlo_dims", "248x146"),
    ("data.lesion_radius", "0.025,0.05"),
    ("data.birads_noise", "0.1"),
    ("data.density_coupling", "0.5"),
    ("data.repeat_fraction", "0.3"),
    ("patch.size", "64"),
    ("patch.min_side", "32"),
    ("patch.max_side", "96"),
    ("patch.max_angle", "30"),
    ("patch.widths", "16,32,64,64"),
    ("patch.hidden", "64"),
    ("patch.epochs", "40"),
    ("patch.save_every", "10"),
    ("patch.batch_size", "100"),
    ("patch.lr", "5e-4"),
    ("patch.per_class", "500"),
    ("patch.draws_segmented", "48"),
    ("patch.draws_negative", "2"),
    ("patch.max_pool", "3000"),
    ("patch.max_negative_exams", "600"),
    ("heatmap.stride", "18"),
    ("heatmap.batch", "64"),
    ("model.variant", "view_wise"),
    ("model.heatmaps", "true"),
    ("optim.beta1", "0.9"),
    ("optim.beta2", "0.999"),
    ("optim.eps", "1e-8"),
    ("train.lr", "1e-5"),
    ("train.weight_decay", "3.1622776601683795e-5"),
    ("train.batch_size", "4"),
    ("train.patience", "20"),
    ("train.max_epochs", "60"),
    ("train.max_offset", "8"),
    ("train.tta_samples", "10"),
    ("train.ensemble_size", "5"),
    ("train.pretrained", "true"),
    ("train.birads_batch_size", "24"),
    ("train.birads_max_epochs", "60"),
    ("train.birads_epoch_exams", "0"),
    ("train.eval_batch", "8"),
    ("eval.reader_biopsied", "368"),
    ("eval.reader_normal", "372"),
    ("eval.readers", "14"),
    ("eval.reader_auc_range", "0.705,0.860"),
];

/// Paper-profile overrides of the desk defaults.
const PAPER: &[(&str, &str)] = &[
    ("data.cc_dims", "2677x1942"),
    ("data.mlo_dims", "2974x1748"),
    ("patch.size", "256"),
    ("patch.min_side", "128"),
    ("patch.max_side", "384"),
    ("heatmap.stride", "70"),
    ("heatmap.batch", "16"),
    ("train.max_offset", "100"),
    ("train.max_epochs", "1000"),
    ("train.birads_max_epochs", "1000"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> = DESK.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        match name {
            "desk" => {}
            "paper" => {
                for (k, v) in PAPER {
                    values.insert(k.to_string(), v.to_string());
                }
            }
            other => return Err(Error::Config(format!("unknown profile {other:?}"))),
        }
        Ok(RunConfig { profile: name.to_string(), values })
    }

    /// Parse config text over the defaults of the profile it names (desk
    /// when it names none).
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut profile = "desk".to_string();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "profile" {
                profile = v.to_string();
            } else {
                pairs.push((k.to_string(), v.to_string()));
            }
        }
        let mut cfg = RunConfig::profile(&profile)?;
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        if k.trim() == "profile" {
            return Err(Error::Config("set the profile in the config file or with --profile".into()));
        }
        self.set(k.trim(), v.trim())
    }

    /// Fully resolved text, keys sorted.
    pub fn to_text(&self) -> String {
        let mut s = format!("profile={}\n", self.profile);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.values.get(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        raw.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw: String = self.get(key)?;
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}"))))
            .collect()
    }

    fn pair(&self, key: &str) -> Result<(f64, f64)> {
        match self.list::<f64>(key)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(Error::Config(format!("{key} needs two comma-separated numbers"))),
        }
    }

    fn dims(&self, key: &str) -> Result<Dims> {
        let raw: String = self.get(key)?;
        let bad = || Error::Config(format!("{key}: expected HxW, got {raw:?}"));
        let (h, w) = raw.split_once('x').ok_or_else(bad)?;
        Ok(Dims::new(h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn phantom(&self) -> Result<PhantomConfig> {
        let split = self.list::<f64>("data.split")?;
        if split.len() != 3 {
            return Err(Error::Config("data.split needs three ratios".into()));
        }
        let cfg = PhantomConfig {
            exams: self.get("data.exams")?,
            biopsied_fraction: self.get("data.biopsied_fraction")?,
            malignant_fraction: self.get("data.malignant_fraction")?,
            both_fraction: self.get("data.both_fraction")?,
            occult_fraction: self.get("data.occult_fraction")?,
            split_ratios: [split[0], split[1], split[2]],
            cc_dims: self.dims("data.cc_dims")?,
            mlo_dims: self.dims("data.mlo_dims")?,
            lesion_radius: self.pair("data.lesion_radius")?,
            birads_noise: self.get("data.birads_noise")?,
            density_coupling: self.get("data.density_coupling")?,
            repeat_fraction: self.get("data.repeat_fraction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let s = SamplerConfig {
            patch_size: self.get("patch.size")?,
            min_side: self.get("patch.min_side")?,
            max_side: self.get("patch.max_side")?,
            max_angle: self.get("patch.max_angle")?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn pools(&self) -> Result<PoolConfig> {
        Ok(PoolConfig {
            draws_segmented: self.get("patch.draws_segmented")?,
            draws_negative: self.get("patch.draws_negative")?,
            max_pool: self.get("patch.max_pool")?,
            max_negative_exams: self.get("patch.max_negative_exams")?,
        })
    }

    pub fn patch_net(&self) -> Result<PatchNetConfig> {
        match self.list::<usize>("patch.widths")?.as_slice() {
            &[a, b, c, d] if a * b * c * d > 0 => Ok(PatchNetConfig { widths: [a, b, c, d], hidden: self.get("patch.hidden")? }),
            _ => Err(Error::Config("patch.widths needs four positive widths".into())),
        }
    }

    pub fn patch_train(&self) -> Result<PatchTrainConfig> {
        let n: usize = self.get("patch.per_class")?;
        let cfg = PatchTrainConfig {
            epochs: self.get("patch.epochs")?,
            save_every: self.get("patch.save_every")?,
            batch_size: self.get("patch.batch_size")?,
            adam: AdamConfig {
                lr: self.get("patch.lr")?,
                beta1: self.get("optim.beta1")?,
                beta2: self.get("optim.beta2")?,
                eps: self.get("optim.eps")?,
                ..AdamConfig::default()
            },
            plan: EpochPlan { counts: [n; 4] },
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn heatmap(&self) -> Result<HeatmapConfig> {
        let cfg = HeatmapConfig {
            patch_size: self.get("patch.size")?,
            prefixed_stride: self.get("heatmap.stride")?,
            batch: self.get("heatmap.batch")?,
        };
        if cfg.prefixed_stride == 0 || cfg.batch == 0 {
            return Err(Error::Config("heatmap.stride and heatmap.batch must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn use_heatmaps(&self) -> Result<bool> {
        self.get("model.heatmaps")
    }

    pub fn model(&self, task: Task) -> Result<ModelConfig> {
        let variant: Variant = match task {
            Task::Birads => Variant::ViewWise,
            Task::Cancer => self.get::<String>("model.variant")?.parse()?,
        };
        let channels = if task == Task::Cancer && self.use_heatmaps()? { 3 } else { 1 };
        let mut m = ModelConfig::new(variant, task, channels)?;
        m.profile = self.profile.clone();
        Ok(m)
    }

    pub fn train(&self, task: Task) -> Result<TrainRunConfig> {
        let mut t = match task {
            Task::Cancer => TrainRunConfig::cancer(),
            Task::Birads => TrainRunConfig::birads(),
        };
        t.lr = self.get("train.lr")?;
        t.weight_decay = self.get("train.weight_decay")?;
        t.betas = (self.get("optim.beta1")?, self.get("optim.beta2")?);
        t.eps = self.get("optim.eps")?;
        t.patience = self.get("train.patience")?;
        t.max_offset = self.get("train.max_offset")?;
        t.tta_samples = self.get("train.tta_samples")?;
        t.ensemble_size = self.get("train.ensemble_size")?;
        t.eval_batch = self.get("train.eval_batch")?;
        t.seed = self.seed()?;
        match task {
            Task::Cancer => {
                t.batch_size = self.get("train.batch_size")?;
                t.max_epochs = self.get("train.max_epochs")?;
            }
            Task::Birads => {
                t.batch_size = self.get("train.birads_batch_size")?;
                t.max_epochs = self.get("train.birads_max_epochs")?;
                let cap: usize = self.get("train.birads_epoch_exams")?;
                t.epoch_exams = (cap > 0).then_some(cap);
            }
        }
        t.validate()?;
        Ok(t)
    }

    pub fn reader_targets(&self) -> Result<Vec<f64>> {
        let n: usize = self.get("eval.readers")?;
        let (lo, hi) = self.pair("eval.reader_auc_range")?;
        if n == 0 || lo > hi {
            return Err(Error::Config("eval.readers must be >= 1 with an ordered AUC range".into()));
        }
        Ok((0..n).map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_valid_configs() {
        for p in ["desk", "paper"] {
            let c = RunConfig::profile(p).unwrap();
            c.phantom().unwrap();
            c.sampler().unwrap();
            c.patch_train().unwrap();
            c.model(Task::Cancer).unwrap();
            c.train(Task::Birads).unwrap();
            assert_eq!(c.reader_targets().unwrap().len(), 14);
        }
        let w: f64 = RunConfig::profile("desk").unwrap().get("train.weight_decay").unwrap();
        assert!((w - 10f64.powf(-4.5)).abs() < 1e-18);
    }

    #[test]
    fn text_roundtrip_and_rejections() {
        let mut c = RunConfig::parse("profile=desk\n# comment\ndata.exams = 40\n").unwrap();
        assert_eq!(c.get::<usize>("data.exams").unwrap(), 40);
        c.apply_override("seed=9").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert!(RunConfig::parse("data.exam=40").is_err());
        assert!(RunConfig::parse("profile=huge").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(c.apply_override("seed").is_err());
        c.set("data.cc_dims", "12by3").unwrap();
        assert!(c.phantom().is_err());
    }

    #[test]
    fn adam_moments_are_overridable() {
        let mut c = RunConfig::profile("desk").unwrap();
        let t = c.train(Task::Cancer).unwrap();
        assert_eq!((t.betas, t.eps), ((0.9, 0.999), 1e-8));
        c.set("optim.beta1", "0.8").unwrap();
        c.set("optim.eps", "1e-6").unwrap();
        assert_eq!(c.train(Task::Cancer).unwrap().betas.0, 0.8);
        let p = c.patch_train().unwrap().adam;
        assert_eq!((p.beta1, p.beta2, p.eps), (0.8, 0.999, 1e-6));
        c.set("optim.beta2", "1.0").unwrap();
        assert!(c.train(Task::Cancer).is_err() && c.patch_train().is_err());
    }
}
