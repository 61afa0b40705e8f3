//! Command-line pipeline: every subcommand reads the resolved run config,
//! writes into its own directory under the run root and prints one summary
//! line on stdout.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::RunConfig;

use crate::breast::{BreastModel, ModelConfig, Task};
use crate::error::{Error, Result};
use crate::eval::{
    best_lambda, calibrated_readers, curve_csv, gather, hybrid_scores, lambda_sweep, metrics_to_csv, population_metrics, read_metrics,
    read_predictions, records_from_vector, subpopulation, write_predictions, MetricRow, Population, pr_curve, roc_auc, roc_curve,
};
use crate::heatmap::{select_patch_checkpoint, write_split_heatmaps};
use crate::manifest::{ExamRecord, Manifest, Split};
use crate::patch::{build_pools, train_patch_classifier, PatchNet};
use crate::phantom::generate_dataset;
use crate::train::{pretrain_birads, predict_exams, train_cancer_model, ExamSource, Init};

#[derive(Parser, Debug)]
#[command(name = "mscope", version, about = "Two-stage screening mammography classifier on phantom exams")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default constant set (desk or paper) when no config file names one.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Override one config key, e.g. `--set train.lr=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    /// Dataset root; defaults to $MSCOPE_DATA_DIR, then ./data.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Run root holding every stage's outputs.
    #[arg(long, global = true, default_value = "runs")]
    pub run: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelSel {
    /// Add the two heatmap channels (defaults to model.heatmaps).
    #[arg(long)]
    pub heatmaps: Option<bool>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the phantom dataset.
    GenData {
        /// Output root; defaults to the data root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the patch classifier and keep periodic checkpoints.
    TrainPatch {
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Pick the best patch checkpoint on validation and write heatmaps.
    GenHeatmaps,
    /// Pretrain a view_wise model on BI-RADS labels.
    PretrainBirads,
    /// Train one cancer model ensemble member.
    TrainCancer {
        #[command(flatten)]
        model: ModelSel,
        #[arg(long, default_value_t = 0)]
        member: usize,
        /// pretrained or random (defaults to train.pretrained).
        #[arg(long)]
        init: Option<String>,
    },
    /// Train every missing ensemble member.
    Ensemble {
        #[command(flatten)]
        model: ModelSel,
        #[arg(long)]
        init: Option<String>,
    },
    /// Ensemble predictions with test-time augmentation.
    Predict {
        #[command(flatten)]
        model: ModelSel,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// AUC and PRAUC of the predictions on a population.
    Evaluate {
        #[command(flatten)]
        model: ModelSel,
        #[arg(long, default_value = "screening")]
        population: String,
    },
    /// Simulated readers and model-reader hybrids.
    ReaderStudy {
        #[command(flatten)]
        model: ModelSel,
    },
    /// Table of every evaluated model and population.
    Report,
}

/// Parse `argv` (program name first), run and return the exit code:
/// 0 on success, 1 for user errors, 2 for broken invariants.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

/// Run a parsed command and return its summary line.
pub fn execute(cli: &Cli) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Ctx::new(&cli.global, &cli.command)?;
    pool.install(|| ctx.dispatch(&cli.command))
}

struct Ctx<'a> {
    g: &'a Global,
    cfg: RunConfig,
    data: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn model_dir_name(heatmaps: bool) -> &'static str {
    if heatmaps {
        "image_heatmaps"
    } else {
        "image_only"
    }
}

impl<'a> Ctx<'a> {
    fn new(g: &'a Global, cmd: &Command) -> Result<Self> {
        let mut cfg = match (&g.config, &g.profile) {
            (Some(path), None) => RunConfig::load(path)?,
            (Some(path), Some(p)) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::parse(&format!("{text}\nprofile={p}\n"))?
            }
            (None, p) => RunConfig::profile(p.as_deref().unwrap_or("desk"))?,
        };
        for kv in &g.set {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = g.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Command::TrainPatch { patch_size, epochs, save_every } = cmd {
            for (k, v) in [("patch.size", patch_size), ("patch.epochs", epochs), ("patch.save_every", save_every)] {
                if let Some(v) = v {
                    cfg.set(k, &v.to_string())?;
                }
            }
        }
        let data = g
            .data
            .clone()
            .or_else(|| std::env::var_os("MSCOPE_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        Ok(Ctx { g, cfg, data })
    }

    fn dispatch(&self, cmd: &Command) -> Result<String> {
        match cmd {
            Command::GenData { out } => self.gen_data(out.as_deref().unwrap_or(&self.data)),
            Command::TrainPatch { .. } => self.train_patch(),
            Command::GenHeatmaps => self.gen_heatmaps(),
            Command::PretrainBirads => self.pretrain_birads(),
            Command::TrainCancer { model, member, init } => {
                let heat = self.heatmaps(model)?;
                let dir = self.member_dir(heat, *member);
                self.claim(&dir)?;
                self.train_member(heat, *member, init.as_deref())
            }
            Command::Ensemble { model, init } => self.ensemble(model, init.as_deref()),
            Command::Predict { model, split } => self.predict(model, split),
            Command::Evaluate { model, population } => self.evaluate(model, population),
            Command::ReaderStudy { model } => self.reader_study(model),
            Command::Report => self.report(),
        }
    }

    /// Refuse to overwrite `dir` unless forced, in which case it is cleared.
    fn claim(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            if !self.g.force {
                return Err(Error::InvalidArgument(format!("{} exists (pass --force to replace it)", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.txt"), &self.cfg.to_text())
    }

    /// Refuse to overwrite a single output file unless forced.
    fn claim_file(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.g.force {
            return Err(Error::InvalidArgument(format!("{} exists (pass --force to replace it)", path.display())));
        }
        Ok(())
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::read(&self.data.join("manifest.csv"))
    }

    fn heatmaps(&self, sel: &ModelSel) -> Result<bool> {
        match sel.heatmaps {
            Some(h) => Ok(h),
            None => self.cfg.use_heatmaps(),
        }
    }

    fn model_dir(&self, heat: bool) -> PathBuf {
        self.g.run.join(model_dir_name(heat))
    }

    fn member_dir(&self, heat: bool, member: usize) -> PathBuf {
        self.model_dir(heat).join("members").join(format!("m{member:02}"))
    }

    fn source(&self, heat: bool) -> Result<ExamSource> {
        let heatmaps = if heat {
            let dir = self.g.run.join("heatmaps");
            if !dir.join("selection.csv").exists() {
                return Err(Error::InvalidArgument(format!("no heatmaps in {} (run gen-heatmaps first)", dir.display())));
            }
            Some(dir)
        } else {
            None
        };
        Ok(ExamSource { root: self.data.clone(), heatmaps })
    }

    fn model_config(&self, heat: bool) -> Result<ModelConfig> {
        let variant = self.cfg.model(Task::Cancer)?.variant;
        let mut c = ModelConfig::new(variant, Task::Cancer, if heat { 3 } else { 1 })?;
        c.profile = self.cfg.profile.clone();
        Ok(c)
    }

    fn gen_data(&self, out: &Path) -> Result<String> {
        if out.join("manifest.csv").exists() {
            if !self.g.force {
                return Err(Error::InvalidArgument(format!("{} exists (pass --force to replace it)", out.display())));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        let phantom = self.cfg.phantom()?;
        let gen = generate_dataset(&phantom, self.cfg.seed()?, out)?;
        write(&out.join("hash.txt"), &format!("{}\n", gen.hash))?;
        write(&out.join("config.txt"), &self.cfg.to_text())?;
        Ok(format!("gen-data: {} exams, {} files, hash {}", gen.manifest.exams.len(), gen.files, gen.hash))
    }

    fn patch_checkpoints(&self) -> Result<Vec<PathBuf>> {
        let dir = self.g.run.join("patch");
        let mut ckpts: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        ckpts.sort();
        if ckpts.is_empty() {
            return Err(Error::InvalidArgument(format!("no patch checkpoints in {}", dir.display())));
        }
        Ok(ckpts)
    }

    fn train_patch(&self) -> Result<String> {
        let manifest = self.manifest()?;
        let dir = self.g.run.join("patch");
        let sampler = self.cfg.sampler()?;
        let tc = self.cfg.patch_train()?;
        let net_cfg = self.cfg.patch_net()?;
        self.claim(&dir)?;
        let seed = self.cfg.seed()?;
        let pools = build_pools(&manifest, &self.data, Split::Train, &sampler, &self.cfg.pools()?, seed)?;
        let mut net = PatchNet::new(net_cfg, seed)?;
        let report = train_patch_classifier(&mut net, &pools, &tc, &dir, |_| {})?;
        let mut log = String::from("epoch,loss\n");
        for (i, l) in report.epoch_losses.iter().enumerate() {
            let _ = writeln!(log, "{},{l:.6}", i + 1);
        }
        write(&dir.join("losses.csv"), &log)?;
        Ok(format!(
            "train-patch: pools {:?}, {} checkpoints, final loss {:.4}",
            pools.sizes(),
            report.checkpoints.len(),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        ))
    }

    fn gen_heatmaps(&self) -> Result<String> {
        let manifest = self.manifest()?;
        let ckpts = self.patch_checkpoints()?;
        let hcfg = self.cfg.heatmap()?;
        let net_cfg = self.cfg.patch_net()?;
        let dir = self.g.run.join("heatmaps");
        self.claim(&dir)?;
        let seed = self.cfg.seed()?;
        let (best, aucs) = select_patch_checkpoint(&ckpts, &net_cfg, &manifest, &self.data, &hcfg, seed)?;
        let mut sel = String::from("checkpoint,val_auc_malignant,val_auc_benign,selected\n");
        for (i, p) in ckpts.iter().enumerate() {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let (m, b) = aucs.get(i).copied().unwrap_or((f64::NAN, f64::NAN));
            let _ = writeln!(sel, "{name},{m:.6},{b:.6},{}", i == best);
        }
        let net = PatchNet::load(net_cfg, &ckpts[best])?;
        let n = write_split_heatmaps(&manifest, &self.data, Split::ALL, &net, &hcfg, seed, &dir)?;
        write(&dir.join("selection.csv"), &sel)?;
        Ok(format!("gen-heatmaps: checkpoint {} selected, {n} heatmaps written", ckpts[best].display()))
    }

    fn pretrain_birads(&self) -> Result<String> {
        let manifest = self.manifest()?;
        let tc = self.cfg.train(Task::Birads)?;
        let dir = self.g.run.join("birads");
        self.claim(&dir)?;
        let (model, report) = pretrain_birads(&manifest, &self.data, &tc, &dir)?;
        write(&dir.join("model.txt"), &model.config.to_text())?;
        Ok(format!(
            "pretrain-birads: best epoch {} of {}, validation AUC {:.4}",
            report.best_epoch,
            report.history.len(),
            report.best_metric
        ))
    }

    fn train_member(&self, heat: bool, member: usize, init: Option<&str>) -> Result<String> {
        let manifest = self.manifest()?;
        let source = self.source(heat)?;
        let mc = self.model_config(heat)?;
        let mut tc = self.cfg.train(Task::Cancer)?;
        tc.seed = tc.seed.wrapping_add(member as u64);
        let pretrained = match init {
            None => self.cfg.get::<bool>("train.pretrained")?,
            Some("pretrained") => true,
            Some("random") => false,
            Some(other) => return Err(Error::InvalidArgument(format!("--init must be pretrained or random, got {other:?}"))),
        };
        let dir = self.member_dir(heat, member);
        write(&self.model_dir(heat).join("model.txt"), &mc.to_text())?;
        let source_model = if pretrained {
            let ckpt = self.g.run.join("birads").join("best.ckpt");
            if !ckpt.exists() {
                return Err(Error::InvalidArgument(format!("{} missing (run pretrain-birads or pass --init random)", ckpt.display())));
            }
            Some(BreastModel::load(self.cfg.model(Task::Birads)?, &ckpt)?)
        } else {
            None
        };
        let init = match &source_model {
            Some(m) => Init::Pretrained(m),
            None => Init::Random,
        };
        let (_, report) = train_cancer_model(&manifest, &source, mc, init, &tc, &dir)?;
        Ok(format!(
            "train-cancer: {} member {member}, best epoch {} of {}, validation AUC {:.4}",
            model_dir_name(heat),
            report.best_epoch,
            report.history.len(),
            report.best_metric
        ))
    }

    fn ensemble(&self, sel: &ModelSel, init: Option<&str>) -> Result<String> {
        let heat = self.heatmaps(sel)?;
        let size: usize = self.cfg.train(Task::Cancer)?.ensemble_size;
        let mut trained = Vec::new();
        for k in 0..size {
            let dir = self.member_dir(heat, k);
            if dir.join("best.ckpt").exists() && !self.g.force {
                continue;
            }
            self.claim_or_clear(&dir)?;
            self.train_member(heat, k, init)?;
            trained.push(k);
        }
        if trained.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} exists with all {size} members (pass --force to retrain)",
                self.model_dir(heat).display()
            )));
        }
        Ok(format!("ensemble: {} trained members {trained:?} of {size}", model_dir_name(heat)))
    }

    /// Clear a partially written member directory before retraining it.
    fn claim_or_clear(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.txt"), &self.cfg.to_text())
    }

    fn members(&self, heat: bool) -> Result<Vec<BreastModel>> {
        let mc = self.model_config(heat)?;
        let root = self.model_dir(heat).join("members");
        let mut paths: Vec<PathBuf> = match fs::read_dir(&root) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path().join("best.ckpt"))).filter(|p| p.exists()).collect(),
            Err(_) => Vec::new(),
        };
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no trained members under {}", root.display())));
        }
        paths.iter().map(|p| BreastModel::load(mc.clone(), p)).collect()
    }

    fn predict(&self, sel: &ModelSel, split: &str) -> Result<String> {
        let heat = self.heatmaps(sel)?;
        let split: Split = split.parse()?;
        let manifest = self.manifest()?;
        let out = self.model_dir(heat).join("predictions.csv");
        self.claim_file(&out)?;
        let members = self.members(heat)?;
        let source = self.source(heat)?;
        let tc = self.cfg.train(Task::Cancer)?;
        let exams = manifest.split(split);
        let probs = predict_exams(&members, &exams, &source, tc.tta_samples, tc.max_offset, self.cfg.seed()?)?;
        let name = model_dir_name(heat);
        let records: Vec<_> = exams
            .iter()
            .zip(&probs)
            .flat_map(|(e, p)| records_from_vector(&e.exam_id, [p[0], p[1], p[2], p[3]], name))
            .collect();
        write_predictions(&out, &records)?;
        Ok(format!("predict: {name}, {} members, {} exams -> {}", members.len(), exams.len(), out.display()))
    }

    /// Predictions of a model and the manifest exams they cover.
    fn predicted(&self, heat: bool) -> Result<(Manifest, Vec<crate::eval::PredictionRecord>)> {
        let manifest = self.manifest()?;
        let path = self.model_dir(heat).join("predictions.csv");
        if !path.exists() {
            return Err(Error::InvalidArgument(format!("{} missing (run predict first)", path.display())));
        }
        Ok((manifest, read_predictions(&path)?))
    }

    fn covered<'m>(manifest: &'m Manifest, records: &[crate::eval::PredictionRecord]) -> Vec<&'m ExamRecord> {
        let ids: std::collections::HashSet<&str> = records.iter().map(|r| r.exam_id.as_str()).collect();
        manifest.exams.iter().filter(|e| ids.contains(e.exam_id.as_str())).collect()
    }

    fn evaluate(&self, sel: &ModelSel, population: &str) -> Result<String> {
        let heat = self.heatmaps(sel)?;
        let pop: Population = population.parse()?;
        let (manifest, records) = self.predicted(heat)?;
        let dir = self.model_dir(heat);
        let name = pop.name();
        let out = dir.join(format!("metrics_{name}.csv"));
        self.claim_file(&out)?;
        let exams = Self::covered(&manifest, &records);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed()?);
        let ids = subpopulation(&exams, pop, &mut rng)?;
        let rows = population_metrics(&records, &manifest, &name, &ids)?;
        let scored = gather(&records, &manifest, &ids)?;
        for (task, scores, labels) in [
            ("malignant", &scored.p_malignant, &scored.malignant),
            ("benign", &scored.p_benign, &scored.benign),
        ] {
            if let (Ok(roc), Ok(pr)) = (roc_curve(scores, labels), pr_curve(scores, labels)) {
                write(&dir.join(format!("roc_{name}_{task}.csv")), &curve_csv("fpr,tpr", &roc))?;
                write(&dir.join(format!("pr_{name}_{task}.csv")), &curve_csv("recall,precision", &pr))?;
            }
        }
        write(&out, &metrics_to_csv(&rows))?;
        let parts: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.task, r.auc)).collect();
        Ok(format!("evaluate: {} on {name} ({} breasts): {}", model_dir_name(heat), ids.len(), parts.join(", ")))
    }

    fn reader_study(&self, sel: &ModelSel) -> Result<String> {
        let heat = self.heatmaps(sel)?;
        let (manifest, records) = self.predicted(heat)?;
        let out = self.model_dir(heat).join("reader_study.csv");
        self.claim_file(&out)?;
        let exams = Self::covered(&manifest, &records);
        let pop = Population::ReaderStudy {
            biopsied: self.cfg.get("eval.reader_biopsied")?,
            normal: self.cfg.get("eval.reader_normal")?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed()?);
        let ids = subpopulation(&exams, pop, &mut rng)?;
        let scored = gather(&records, &manifest, &ids)?;
        let labels = &scored.malignant;
        let model_auc = roc_auc(&scored.p_malignant, labels)?;
        let readers = calibrated_readers(labels, &self.cfg.reader_targets()?, &mut rng)?;
        let mut csv = String::from("reader,reader_auc,hybrid_auc,best_lambda,best_hybrid_auc\n");
        let _ = writeln!(csv, "model,{model_auc:.6},,,");
        let mut improved = 0;
        for (i, scores) in readers.scores.iter().enumerate() {
            let r_auc = roc_auc(scores, labels)?;
            let h_auc = roc_auc(&hybrid_scores(scores, &scored.p_malignant, 0.5)?, labels)?;
            let best = best_lambda(&lambda_sweep(scores, &scored.p_malignant, labels)?)
                .ok_or_else(|| Error::Undefined("empty lambda sweep".into()))?;
            if h_auc >= r_auc {
                improved += 1;
            }
            let _ = writeln!(csv, "reader_{:02},{r_auc:.6},{h_auc:.6},{:.2},{:.6}", i + 1, best.lambda, best.auc);
        }
        write(&out, &csv)?;
        Ok(format!(
            "reader-study: model AUC {model_auc:.4}; hybrid at 0.5 matches or beats {improved} of {} readers",
            readers.scores.len()
        ))
    }

    fn report(&self) -> Result<String> {
        let columns = [("screening", "malignant"), ("screening", "benign"), ("biopsied", "malignant"), ("biopsied", "benign")];
        let mut table = format!(
            "{:<16} {:>11} {:>11} {:>11} {:>11}\n{:<16} {:>11} {:>11} {:>11} {:>11}\n",
            "", "screening", "", "biopsied", "", "model", "malignant", "benign", "malignant", "benign"
        );
        let mut models = 0;
        for heat in [false, true] {
            let dir = self.model_dir(heat);
            let mut rows: Vec<MetricRow> = Vec::new();
            for pop in ["screening", "biopsied"] {
                let p = dir.join(format!("metrics_{pop}.csv"));
                if p.exists() {
                    rows.extend(read_metrics(&p)?);
                }
            }
            if rows.is_empty() {
                continue;
            }
            models += 1;
            let _ = write!(table, "{:<16}", model_dir_name(heat));
            for (pop, task) in columns {
                match rows.iter().find(|r| r.population == pop && r.task == task) {
                    Some(r) => {
                        let _ = write!(table, " {:>11.3}", r.auc);
                    }
                    None => {
                        let _ = write!(table, " {:>11}", "-");
                    }
                }
            }
            table.push('\n');
        }
        if models == 0 {
            return Err(Error::InvalidArgument(format!("no metrics under {} (run evaluate first)", self.g.run.display())));
        }
        write(&self.g.run.join("report.txt"), &table)?;
        print!("{table}");
        Ok(format!("report: {models} models -> {}", self.g.run.join("report.txt").display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mscope", "--no-such-flag", "report"]), 1);
        assert_eq!(run(["mscope", "fly"]), 1);
        assert_eq!(run(["mscope", "--help"]), 0);
    }

    #[test]
    fn bad_config_key_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().to_str().unwrap();
        assert_eq!(run(["mscope", "--run", run_dir, "--set", "train.nope=1", "report"]), 1);
        assert_eq!(run(["mscope", "--run", run_dir, "report"]), 1);
    }
}
