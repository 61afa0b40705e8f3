//! Breast model training: balanced epochs, augmentation, early stopping,
//! test-time augmentation and ensembling.

mod augment;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::augment_window;

use crate::breast::{BreastModel, ExamInput, ModelConfig, Targets, Task, ViewInput};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::heatmap::{heatmap_path, Heatmap};
use crate::manifest::{ExamRecord, Finding, Manifest, Split, View};
use crate::tensor::{AdamConfig, AdamState, Graph, Mode, ParamStore};

pub const LOG_HEADER: &str = "epoch,split,label,auc,loss";
pub const LABEL_NAMES: [&str; 4] = ["left_benign", "left_malignant", "right_benign", "right_malignant"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub task: Task,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adam moment decay rates and epsilon.
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub max_offset: f64,
    pub tta_samples: usize,
    pub ensemble_size: usize,
    /// Cap on exams shown per BI-RADS epoch; all training exams when `None`.
    pub epoch_exams: Option<usize>,
    pub eval_batch: usize,
}

impl TrainRunConfig {
    pub fn cancer() -> Self {
        TrainRunConfig {
            task: Task::Cancer,
            lr: 1e-5,
            weight_decay: 10f64.powf(-4.5),
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 4,
            patience: 20,
            max_epochs: 60,
            seed: 0,
            max_offset: 8.0,
            tta_samples: 10,
            ensemble_size: 5,
            epoch_exams: None,
            eval_batch: 8,
        }
    }

    pub fn birads() -> Self {
        TrainRunConfig { task: Task::Birads, batch_size: 24, ..Self::cancer() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.tta_samples == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch size, TTA samples and max epochs must be >= 1".into()));
        }
        if self.ensemble_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("ensemble size and eval batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.max_offset >= 0.0) {
            return Err(Error::Config("learning rate, weight decay and offset must be non-negative".into()));
        }
        self.adam().validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Where the model inputs of an exam live on disk.
#[derive(Clone, Debug)]
pub struct ExamSource {
    pub root: PathBuf,
    /// Directory of heatmap files; heatmaps become input channels 2 and 3.
    pub heatmaps: Option<PathBuf>,
}

impl ExamSource {
    pub fn channels(&self) -> usize {
        if self.heatmaps.is_some() { 3 } else { 1 }
    }

    pub fn load(&self, exam: &ExamRecord) -> Result<ExamInput> {
        let mut views = Vec::with_capacity(4);
        for v in View::ALL {
            let img = exam.load_view(&self.root, v)?;
            let mut planes = vec![img];
            if let Some(dir) = &self.heatmaps {
                let h = Heatmap::read(&heatmap_path(dir, &exam.exam_id, v))?;
                if (h.height, h.width) != (planes[0].height, planes[0].width) {
                    return Err(Error::Shape(format!("heatmap of {} {v} does not match its image", exam.exam_id)));
                }
                planes.push(h.plane_image(Finding::Malignant));
                planes.push(h.plane_image(Finding::Benign));
            }
            views.push(ViewInput { planes });
        }
        Ok(views.try_into().expect("four views"))
    }
}

fn augment_exam<R: Rng>(input: &ExamInput, max_offset: f64, rng: &mut R) -> ExamInput {
    std::array::from_fn(|v| {
        let p = &input[v].planes;
        ViewInput { planes: augment_window(p, (p[0].height, p[0].width), max_offset, rng) }
    })
}

/// Every biopsied exam plus an equal number of randomly chosen exams
/// without biopsy, shuffled. Returns indices into `exams`.
pub fn subsample_epoch<R: Rng>(exams: &[&ExamRecord], rng: &mut R) -> Result<Vec<usize>> {
    let biopsied: Vec<usize> = (0..exams.len()).filter(|&i| exams[i].is_biopsied()).collect();
    if biopsied.is_empty() {
        return Err(Error::InvalidArgument("no biopsied exams in the training split".into()));
    }
    let others: Vec<usize> = (0..exams.len()).filter(|&i| !exams[i].is_biopsied()).collect();
    if others.len() < biopsied.len() {
        log::warn!("only {} exams without biopsy for {} biopsied; using all", others.len(), biopsied.len());
    }
    let mut out = biopsied.clone();
    out.extend(others.choose_multiple(rng, biopsied.len()).copied());
    out.shuffle(rng);
    Ok(out)
}

fn targets(task: Task, exams: &[&ExamRecord]) -> Targets {
    match task {
        Task::Cancer => Targets::Labels(exams.iter().map(|e| e.label_vector()).collect()),
        Task::Birads => Targets::Classes(exams.iter().map(|e| e.birads as usize).collect()),
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mean loss and probabilities of `exams` in eval mode, batched.
fn evaluate(
    model: &BreastModel,
    exams: &[&ExamRecord],
    inputs: &[ExamInput],
    batch: usize,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(exams.len());
    for (ex, inp) in exams.chunks(batch).zip(inputs.chunks(batch)) {
        let refs: Vec<&ExamInput> = inp.iter().collect();
        let (l, p) = model.evaluate(&refs, &targets(model.config.task, ex))?;
        loss += l * ex.len() as f64;
        probs.extend(p);
    }
    Ok((loss / exams.len().max(1) as f64, probs))
}

/// Per-label validation AUCs and their mean. Labels without both classes
/// are skipped with a warning.
pub fn validation_aucs(task: Task, exams: &[&ExamRecord], probs: &[Vec<f32>]) -> Result<(Vec<(String, f64)>, f64)> {
    let mut aucs = Vec::new();
    let k = if task == Task::Cancer { 4 } else { 3 };
    for j in 0..k {
        let scores: Vec<f64> = probs.iter().map(|p| p[j] as f64).collect();
        let (name, labels): (String, Vec<bool>) = match task {
            Task::Cancer => (LABEL_NAMES[j].into(), exams.iter().map(|e| e.label_vector()[j] > 0.5).collect()),
            Task::Birads => (format!("birads_{j}_vs_rest"), exams.iter().map(|e| e.birads as usize == j).collect()),
        };
        match roc_auc(&scores, &labels) {
            Ok(a) => aucs.push((name, a)),
            Err(Error::Undefined(why)) => log::warn!("validation {name} skipped: {why}"),
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(Error::Undefined("no validation label has both classes".into()));
    }
    let mean = aucs.iter().map(|a| a.1).sum::<f64>() / aucs.len() as f64;
    Ok((aucs, mean))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_aucs: Vec<(String, f64)>,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

fn log_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{},train,all,,{:.6}", r.epoch, r.train_loss);
        for (name, auc) in &r.val_aucs {
            let _ = writeln!(s, "{},val,{name},{auc:.6},{:.6}", r.epoch, r.val_loss);
        }
        let _ = writeln!(s, "{},val,mean,{:.6},{:.6}", r.epoch, r.metric, r.val_loss);
    }
    s
}

/// Train `model` in place, early-stopping on the mean validation AUC.
/// `best.ckpt` and `log.csv` are written to `out_dir` as training goes;
/// the model ends with the best epoch's parameters. Each epoch shows all
/// biopsied training exams plus as many unbiopsied ones (cancer task), or
/// the training split capped at `epoch_exams` (BI-RADS task).
pub fn train_model(
    model: &mut BreastModel,
    manifest: &Manifest,
    source: &ExamSource,
    cfg: &TrainRunConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.config.task != cfg.task {
        return Err(Error::Config("model task and training task differ".into()));
    }
    if model.config.input_channels != source.channels() {
        return Err(Error::Config(format!(
            "model takes {} channels but the data provides {}",
            model.config.input_channels,
            source.channels()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = manifest.split(Split::Train);
    let val = manifest.split(Split::Val);
    let val_inputs: Vec<ExamInput> = val.par_iter().map(|e| source.load(e)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam());
    let mut report = TrainReport { best_metric: f64::NEG_INFINITY, ..Default::default() };
    let mut best: Option<ParamStore<f32>> = None;
    let mut since_best = 0;
    let best_path = out_dir.join("best.ckpt");
    let log_path = out_dir.join("log.csv");
    for epoch in 1..=cfg.max_epochs {
        let order: Vec<usize> = match cfg.task {
            Task::Cancer => subsample_epoch(&train, &mut rng)?,
            Task::Birads => {
                let mut all: Vec<usize> = (0..train.len()).collect();
                all.shuffle(&mut rng);
                all.truncate(cfg.epoch_exams.unwrap_or(all.len()));
                all
            }
        };
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let exams: Vec<&ExamRecord> = chunk.iter().map(|&i| train[i]).collect();
            let inputs: Vec<ExamInput> = exams
                .par_iter()
                .enumerate()
                .map(|(k, e)| {
                    let mut r = stream_rng(cfg.seed, ((epoch as u64) << 32) | (b * cfg.batch_size + k) as u64);
                    Ok(augment_exam(&source.load(e)?, cfg.max_offset, &mut r))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&ExamInput> = inputs.iter().collect();
            let step = (|| {
                let mut g = Graph::new();
                let out = model.forward(&mut g, &refs, Mode::Train)?;
                let loss = model.loss(&mut g, &out, &targets(cfg.task, &exams))?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {value}")));
                }
                let grads = g.backward(loss)?;
                adam.step(&mut model.store, &grads)?;
                Ok(value)
            })();
            match step {
                Ok(v) => total += v * exams.len() as f64,
                Err(Error::NonFinite(why)) => {
                    if let Some(b) = best {
                        model.store = b;
                    }
                    return Err(Error::Diverged { epoch, reason: why });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = total / order.len() as f64;
        let (val_loss, probs) = evaluate(model, &val, &val_inputs, cfg.eval_batch)?;
        let (val_aucs, metric) = validation_aucs(cfg.task, &val, &probs)?;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val AUC {metric:.4}");
        report.history.push(EpochRecord { epoch, train_loss, val_loss, val_aucs, metric });
        if metric > report.best_metric + 1e-6 {
            report.best_metric = metric;
            report.best_epoch = epoch;
            since_best = 0;
            model.save(&best_path)?;
            best = Some(model.store.clone());
        } else {
            since_best += 1;
        }
        std::fs::write(&log_path, log_csv(&report.history)).map_err(|e| Error::io(&log_path, e))?;
        if since_best >= cfg.patience {
            break;
        }
    }
    if let Some(b) = best {
        model.store = b;
    }
    Ok(report)
}

/// BI-RADS pretraining of a one-channel view_wise model from `seed`.
pub fn pretrain_birads(
    manifest: &Manifest,
    root: &Path,
    cfg: &TrainRunConfig,
    out_dir: &Path,
) -> Result<(BreastModel, TrainReport)> {
    let mc = ModelConfig::new(crate::breast::Variant::ViewWise, Task::Birads, 1)?;
    let mut model = BreastModel::new(mc, cfg.seed)?;
    let source = ExamSource { root: root.to_path_buf(), heatmaps: None };
    let report = train_model(&mut model, manifest, &source, cfg, out_dir)?;
    Ok((model, report))
}

/// Cancer model initialization.
pub enum Init<'a> {
    /// Columns from a pretrained model, heads fresh from the run seed.
    Pretrained(&'a BreastModel),
    Random,
}

pub fn train_cancer_model(
    manifest: &Manifest,
    source: &ExamSource,
    config: ModelConfig,
    init: Init<'_>,
    cfg: &TrainRunConfig,
    out_dir: &Path,
) -> Result<(BreastModel, TrainReport)> {
    let mut model = match init {
        Init::Pretrained(src) => BreastModel::transfer_from(src, config, cfg.seed)?,
        Init::Random => BreastModel::new(config, cfg.seed)?,
    };
    let report = train_model(&mut model, manifest, source, cfg, out_dir)?;
    Ok((model, report))
}

/// Mean prediction over `n` randomly augmented copies of `input`.
pub fn predict_tta<R: Rng>(model: &BreastModel, input: &ExamInput, rng: &mut R, n: usize, max_offset: f64) -> Result<Vec<f32>> {
    if n == 0 {
        return Err(Error::InvalidArgument("TTA needs at least one sample".into()));
    }
    let copies: Vec<ExamInput> = (0..n).map(|_| augment_exam(input, max_offset, rng)).collect();
    let refs: Vec<&ExamInput> = copies.iter().collect();
    let probs = model.predict(&refs)?;
    Ok(mean_rows(&probs))
}

fn mean_rows(rows: &[Vec<f32>]) -> Vec<f32> {
    let k = rows[0].len();
    (0..k).map(|j| (rows.iter().map(|r| r[j] as f64).sum::<f64>() / rows.len() as f64) as f32).collect()
}

/// Mean of the members' TTA predictions.
pub fn ensemble_predict<R: Rng>(
    members: &[BreastModel],
    input: &ExamInput,
    rng: &mut R,
    n: usize,
    max_offset: f64,
) -> Result<Vec<f32>> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("ensemble has no members".into()));
    }
    let per = members.iter().map(|m| predict_tta(m, input, rng, n, max_offset)).collect::<Result<Vec<_>>>()?;
    Ok(mean_rows(&per))
}

/// Ensemble predictions for `exams`, each exam with its own random stream
/// so results do not depend on scheduling.
pub fn predict_exams(
    members: &[BreastModel],
    exams: &[&ExamRecord],
    source: &ExamSource,
    n: usize,
    max_offset: f64,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    exams
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let input = source.load(e)?;
            ensemble_predict(members, &input, &mut stream_rng(seed, i as u64 + 1), n, max_offset)
        })
        .collect()
}
