//! Four-view breast-level model: one shared column per view kind, left
//! views mirrored before entry, and one of four fusion heads.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::column::{Column, ColumnConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Side, View, ViewKind};
use crate::tensor::{
    load_checkpoint, save_checkpoint, sigmoid, softmax_rows, Graph, Layer, LayerSpec, Mode, ParamStore, Params,
    Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    ViewWise,
    ImageWise,
    BreastWise,
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ViewWise, Variant::ImageWise, Variant::BreastWise, Variant::Joint];

    pub fn token(self) -> &'static str {
        match self {
            Variant::ViewWise => "view_wise",
            Variant::ImageWise => "image_wise",
            Variant::BreastWise => "breast_wise",
            Variant::Joint => "joint",
        }
    }

    /// Widths of the hidden fully connected activations, one entry per
    /// head instance. With a 256-wide column these sum to 1024.
    pub fn hidden_sizes(self, column_dim: usize) -> Vec<usize> {
        match self {
            Variant::ViewWise => vec![2 * column_dim; 2],
            Variant::ImageWise => vec![column_dim; 4],
            Variant::BreastWise => vec![2 * column_dim; 2],
            Variant::Joint => vec![4 * column_dim],
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Four independent sigmoid labels `[L-ben, L-mal, R-ben, R-mal]`.
    Cancer,
    /// Three-way softmax over assessments 0, 1, 2.
    Birads,
}

impl Task {
    pub fn token(self) -> &'static str {
        match self {
            Task::Cancer => "cancer",
            Task::Birads => "birads",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cancer" => Ok(Task::Cancer),
            "birads" => Ok(Task::Birads),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task: Task,
    pub input_channels: usize,
    pub profile: String,
    pub column: ColumnConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, task: Task, input_channels: usize) -> Result<Self> {
        let cfg = ModelConfig {
            variant,
            task,
            input_channels,
            profile: "desk".into(),
            column: ColumnConfig::resnet22(input_channels),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::Config(format!("input_channels must be 1 or 3, got {}", self.input_channels)));
        }
        if self.column.input_channels != self.input_channels {
            return Err(Error::Config("column and model disagree on input channels".into()));
        }
        if self.task == Task::Birads && self.variant != Variant::ViewWise {
            return Err(Error::Config("BI-RADS pretraining uses the view_wise variant".into()));
        }
        if !matches!(self.profile.as_str(), "desk" | "paper") {
            return Err(Error::Config(format!("unknown profile {:?}", self.profile)));
        }
        Ok(())
    }

    /// Flat `key=value` text.
    pub fn to_text(&self) -> String {
        format!(
            "variant={}\ntask={}\ninput_channels={}\nprofile={}\n",
            self.variant,
            self.task.token(),
            self.input_channels,
            self.profile
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (mut variant, mut task, mut channels, mut profile) = (None, Task::Cancer, None, "desk".to_string());
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            match k.trim() {
                "variant" => variant = Some(v.trim().parse()?),
                "task" => task = v.trim().parse()?,
                "input_channels" => {
                    channels = Some(v.trim().parse().map_err(|_| Error::Config(format!("bad input_channels {v:?}")))?)
                }
                "profile" => profile = v.trim().to_string(),
                other => return Err(Error::Config(format!("unknown model key {other:?}"))),
            }
        }
        let mut cfg = ModelConfig::new(
            variant.ok_or_else(|| Error::Config("model config lacks variant".into()))?,
            task,
            channels.ok_or_else(|| Error::Config("model config lacks input_channels".into()))?,
        )?;
        cfg.profile = profile;
        cfg.validate()?;
        Ok(cfg)
    }

    fn outputs(&self) -> usize {
        match self.task {
            Task::Cancer => 4,
            Task::Birads => 3,
        }
    }
}

/// One view's input planes: the image, then optionally the malignant and
/// benign heatmaps. All planes share dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewInput {
    pub planes: Vec<Image>,
}

/// Views indexed by `View::index`, in their stored orientation.
pub type ExamInput = [ViewInput; 4];

struct Head {
    fc1: Layer,
    fc2: Layer,
    /// Label slots of the task output this head predicts, per logit column.
    slots: Vec<usize>,
}

impl Head {
    fn build(name: &str, input: usize, hidden: usize, slots: Vec<usize>, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fc1 = Layer::build(LayerSpec::Linear { in_features: input, out_features: hidden }, &format!("{name}.fc1"), store, rng)?;
        let fc2 = Layer::build(
            LayerSpec::Linear { in_features: hidden, out_features: slots.len() },
            &format!("{name}.fc2"),
            store,
            rng,
        )?;
        Ok(Head { fc1, fc2, slots })
    }

    fn run(&self, g: &mut Graph<f32>, p: &mut Params<'_>, x: Var) -> Result<(Var, Var)> {
        let h = p.apply(&self.fc1, g, &[x])?;
        let h = g.relu(h)?;
        let out = p.apply(&self.fc2, g, &[h])?;
        Ok((h, out))
    }
}

struct Net {
    cc: Column,
    mlo: Column,
    heads: Vec<Head>,
}

/// Graph nodes of one batched forward pass.
pub struct ForwardOutput {
    /// Logits of each head application with the task slots they predict.
    pub logits: Vec<(Var, Vec<usize>)>,
    /// `[B, 4 * column_dim]`, views in model order.
    pub column_concat: Var,
    /// `[B, total hidden]`, hidden head activations.
    pub fc1_concat: Var,
}

impl Net {
    fn forward(&self, cfg: &ModelConfig, g: &mut Graph<f32>, p: &mut Params<'_>, cc: Var, mlo: Var) -> Result<ForwardOutput> {
        let b = g.shape(cc)[0] / 2;
        let rc = self.cc.forward(g, p, cc)?;
        let rm = self.mlo.forward(g, p, mlo)?;
        let lcc = g.slice_rows(rc, 0, b)?;
        let rcc = g.slice_rows(rc, b, b)?;
        let lmlo = g.slice_rows(rm, 0, b)?;
        let rmlo = g.slice_rows(rm, b, b)?;
        let column_concat = g.concat(&[lcc, rcc, lmlo, rmlo])?;
        let mut logits = Vec::new();
        let mut hidden = Vec::new();
        match cfg.variant {
            Variant::ViewWise | Variant::Joint => {
                let inputs = if cfg.variant == Variant::Joint {
                    vec![column_concat]
                } else {
                    vec![g.concat(&[lcc, rcc])?, g.concat(&[lmlo, rmlo])?]
                };
                for (head, x) in self.heads.iter().zip(inputs) {
                    let (h, out) = head.run(g, p, x)?;
                    hidden.push(h);
                    logits.push((out, head.slots.clone()));
                }
            }
            Variant::ImageWise => {
                // Rows of rc / rm are [left; right], so one head call covers
                // both sides of a view kind.
                for (head, x) in self.heads.iter().zip([rc, rm]) {
                    let (h, out) = head.run(g, p, x)?;
                    hidden.push(g.slice_rows(h, 0, b)?);
                    hidden.push(g.slice_rows(h, b, b)?);
                    logits.push((g.slice_rows(out, 0, b)?, side_slots(Side::Left)));
                    logits.push((g.slice_rows(out, b, b)?, side_slots(Side::Right)));
                }
            }
            Variant::BreastWise => {
                let x = g.concat(&[rc, rm])?;
                let (h, out) = self.heads[0].run(g, p, x)?;
                hidden.push(g.slice_rows(h, 0, b)?);
                hidden.push(g.slice_rows(h, b, b)?);
                logits.push((g.slice_rows(out, 0, b)?, side_slots(Side::Left)));
                logits.push((g.slice_rows(out, b, b)?, side_slots(Side::Right)));
            }
        }
        let fc1_concat = g.concat(&hidden)?;
        Ok(ForwardOutput { logits, column_concat, fc1_concat })
    }
}

fn side_slots(side: Side) -> Vec<usize> {
    vec![2 * side.index(), 2 * side.index() + 1]
}

pub struct BreastModel {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    net: Net,
}

impl BreastModel {
    /// Fresh model. Column weights are drawn from `seed`; head weights from
    /// an independent stream of the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cc = Column::build(config.column.clone(), "cc", &mut store, &mut rng)?;
        let mlo = Column::build(config.column.clone(), "mlo", &mut store, &mut rng)?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
        head_rng.set_stream(1);
        let heads = Self::build_heads(&config, &mut store, &mut head_rng)?;
        Ok(BreastModel { config, store, net: Net { cc, mlo, heads } })
    }

    fn build_heads(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Vec<Head>> {
        let d = cfg.column.output_dim();
        let all: Vec<usize> = (0..cfg.outputs()).collect();
        match cfg.variant {
            Variant::ViewWise => Ok(vec![
                Head::build("head.cc", 2 * d, 2 * d, all.clone(), store, rng)?,
                Head::build("head.mlo", 2 * d, 2 * d, all, store, rng)?,
            ]),
            Variant::ImageWise => Ok(vec![
                Head::build("head.cc", d, d, vec![0, 1], store, rng)?,
                Head::build("head.mlo", d, d, vec![0, 1], store, rng)?,
            ]),
            Variant::BreastWise => Ok(vec![Head::build("head.breast", 2 * d, 2 * d, vec![0, 1], store, rng)?]),
            Variant::Joint => Ok(vec![Head::build("head.joint", 4 * d, 4 * d, all, store, rng)?]),
        }
    }

    /// Stack a batch of exams into the CC and MLO column inputs, each
    /// `[2B, C, H, W]` with all left views (mirrored) before all right views.
    pub fn batch_inputs(&self, exams: &[&ExamInput]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if exams.is_empty() {
            return Err(Error::InvalidArgument("empty exam batch".into()));
        }
        let c = self.config.input_channels;
        let stack = |kind: ViewKind| -> Result<Tensor<f32>> {
            let first = &exams[0][View::of(Side::Left, kind).index()].planes[0];
            let (h, w) = (first.height, first.width);
            let mut data = Vec::with_capacity(2 * exams.len() * c * h * w);
            for side in Side::BOTH {
                for e in exams {
                    let v = &e[View::of(side, kind).index()];
                    if v.planes.len() != c {
                        return Err(Error::Shape(format!("model expects {c} input planes, got {}", v.planes.len())));
                    }
                    for plane in &v.planes {
                        if (plane.height, plane.width) != (h, w) {
                            return Err(Error::Shape(format!(
                                "{kind:?} planes must all be {h}x{w}, got {}x{}",
                                plane.height, plane.width
                            )));
                        }
                        if side == Side::Left {
                            for row in plane.data.chunks_exact(w) {
                                data.extend(row.iter().rev());
                            }
                        } else {
                            data.extend_from_slice(&plane.data);
                        }
                    }
                }
            }
            Tensor::new(vec![2 * exams.len(), c, h, w], data)
        };
        Ok((stack(ViewKind::Cc)?, stack(ViewKind::Mlo)?))
    }

    /// Trainable forward pass; running statistics update in `Train` mode.
    pub fn forward(&mut self, g: &mut Graph<f32>, exams: &[&ExamInput], mode: Mode) -> Result<ForwardOutput> {
        let (cc, mlo) = self.batch_inputs(exams)?;
        let cc = g.input(cc)?;
        let mlo = g.input(mlo)?;
        let mut p = Params::Mut(&mut self.store, mode);
        self.net.forward(&self.config, g, &mut p, cc, mlo)
    }

    fn infer_graph(&self, exams: &[&ExamInput]) -> Result<(Graph<f32>, ForwardOutput)> {
        let (cc, mlo) = self.batch_inputs(exams)?;
        let mut g = Graph::inference();
        let cc = g.input(cc)?;
        let mlo = g.input(mlo)?;
        let mut p = Params::Shared(&self.store);
        let out = self.net.forward(&self.config, &mut g, &mut p, cc, mlo)?;
        Ok((g, out))
    }

    /// Mean loss over head applications: binary cross-entropy against the
    /// four breast labels, or softmax cross-entropy against BI-RADS classes.
    pub fn loss(&self, g: &mut Graph<f32>, out: &ForwardOutput, targets: &Targets) -> Result<Var> {
        let mut terms = Vec::new();
        for (logits, slots) in &out.logits {
            let b = g.shape(*logits)[0];
            let t = match (self.config.task, targets) {
                (Task::Cancer, Targets::Labels(l)) => {
                    if l.len() != b {
                        return Err(Error::Shape(format!("{} label rows for batch {b}", l.len())));
                    }
                    let t: Vec<f32> = l.iter().flat_map(|row| slots.iter().map(move |&s| row[s])).collect();
                    g.bce_with_logits(*logits, &t)?
                }
                (Task::Birads, Targets::Classes(c)) => g.weighted_softmax_cross_entropy(*logits, c, &[1.0; 3])?,
                _ => return Err(Error::InvalidArgument("targets do not match the model task".into())),
            };
            terms.push(t);
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t)?;
        }
        g.scale(sum, 1.0 / terms.len() as f32)
    }

    /// Task probabilities from evaluated logits: per slot, the mean over the
    /// heads that predict it.
    pub fn probabilities(&self, g: &Graph<f32>, out: &ForwardOutput) -> Vec<Vec<f32>> {
        let k = self.config.outputs();
        let b = g.shape(out.logits[0].0)[0];
        let mut sum = vec![vec![0f64; k]; b];
        let mut count = vec![0usize; k];
        for (logits, slots) in &out.logits {
            let vals = g.value(*logits).data();
            let probs = match self.config.task {
                Task::Cancer => vals.iter().map(|&z| sigmoid(z)).collect(),
                Task::Birads => softmax_rows(vals, slots.len()),
            };
            for (i, row) in probs.chunks_exact(slots.len()).enumerate() {
                for (&s, &v) in slots.iter().zip(row) {
                    sum[i][s] += v as f64;
                }
            }
            for &s in slots {
                count[s] += 1;
            }
        }
        sum.into_iter().map(|row| row.iter().zip(&count).map(|(s, &c)| (s / c as f64) as f32).collect()).collect()
    }

    /// Eval-mode probabilities, one row per exam.
    pub fn predict(&self, exams: &[&ExamInput]) -> Result<Vec<Vec<f32>>> {
        let (g, out) = self.infer_graph(exams)?;
        Ok(self.probabilities(&g, &out))
    }

    /// Eval-mode loss and probabilities.
    pub fn evaluate(&self, exams: &[&ExamInput], targets: &Targets) -> Result<(f64, Vec<Vec<f32>>)> {
        let (mut g, out) = self.infer_graph(exams)?;
        let loss = self.loss(&mut g, &out, targets)?;
        Ok((g.value(loss).item() as f64, self.probabilities(&g, &out)))
    }

    /// Eval-mode activations at a tap, one row per exam.
    pub fn activations(&self, exams: &[&ExamInput], tap: Tap) -> Result<Vec<Vec<f32>>> {
        let (g, out) = self.infer_graph(exams)?;
        let v = match tap {
            Tap::ColumnConcat => out.column_concat,
            Tap::Fc1Concat => out.fc1_concat,
        };
        let width = g.shape(v)[1];
        Ok(g.value(v).data().chunks_exact(width).map(|r| r.to_vec()).collect())
    }

    /// Per-view column representations in model order, eval mode.
    pub fn column_outputs(&self, exam: &ExamInput) -> Result<[Vec<f32>; 4]> {
        let rows = self.activations(&[exam], Tap::ColumnConcat)?;
        let d = self.config.column.output_dim();
        Ok(std::array::from_fn(|i| rows[0][i * d..(i + 1) * d].to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = BreastModel::new(config, 0)?;
        load_checkpoint(path, &mut m.store)?;
        Ok(m)
    }

    /// A model for `config` whose columns come from `source` (typically a
    /// one-channel BI-RADS model) and whose heads are freshly drawn from
    /// `seed`. A one-channel stem kernel is copied into every input channel.
    pub fn transfer_from(source: &BreastModel, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = BreastModel::new(config, seed)?;
        let src_col = &source.config.column;
        let dst_col = &m.config.column;
        let mut a = src_col.clone();
        a.input_channels = dst_col.input_channels;
        if a != *dst_col {
            return Err(Error::Shape("source and target columns differ beyond the stem".into()));
        }
        let stems = [m.net.cc.stem_weight_name(), m.net.mlo.stem_weight_name()];
        for (_, e) in source.store.entries() {
            if !(e.name.starts_with("cc.") || e.name.starts_with("mlo.")) {
                continue;
            }
            let id = m
                .store
                .id(&e.name)
                .ok_or_else(|| Error::Shape(format!("target model lacks parameter {}", e.name)))?;
            if stems.contains(&e.name) {
                let s = e.value.shape();
                let target_c = m.config.input_channels;
                if s[1] != target_c && s[1] != 1 {
                    return Err(Error::Shape(format!("cannot widen a {}-channel stem to {target_c}", s[1])));
                }
                let (o, k) = (s[0], s[2] * s[3]);
                let src = e.value.data();
                let per = s[1] * k;
                let mut data = Vec::with_capacity(o * target_c * k);
                for oc in 0..o {
                    for c in 0..target_c {
                        let from = if s[1] == 1 { 0 } else { c };
                        data.extend_from_slice(&src[oc * per + from * k..oc * per + (from + 1) * k]);
                    }
                }
                m.store.set(id, Tensor::new(vec![o, target_c, s[2], s[3]], data)?)?;
            } else {
                m.store.set(id, e.value.clone())?;
            }
        }
        Ok(m)
    }
}

/// Training targets for a batch.
pub enum Targets {
    /// `[L-ben, L-mal, R-ben, R-mal]` per exam.
    Labels(Vec<[f32; 4]>),
    /// BI-RADS class per exam.
    Classes(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    ColumnConcat,
    Fc1Concat,
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column_concat" => Ok(Tap::ColumnConcat),
            "fc1_concat" => Ok(Tap::Fc1Concat),
            _ => Err(Error::InvalidArgument(format!("unknown activation tap {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn img(h: usize, w: usize, seed: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| ((i * 7919 + seed * 104729) % 1000) as f32 / 1000.0).collect()).unwrap()
    }

    fn exam(c: usize, seed: usize) -> ExamInput {
        std::array::from_fn(|v| {
            let (h, w) = if View::ALL[v].kind() == ViewKind::Cc { (40, 32) } else { (44, 28) };
            ViewInput { planes: (0..c).map(|k| img(h, w, seed * 17 + v * 5 + k)).collect() }
        })
    }

    fn small(variant: Variant, task: Task, c: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(variant, task, c).unwrap();
        cfg.column.channels = vec![4, 4, 8, 8, 8, 8];
        cfg
    }

    #[test]
    fn hidden_sizes_total_1024() {
        for v in Variant::ALL {
            assert_eq!(v.hidden_sizes(256).iter().sum::<usize>(), 1024, "{v}");
        }
    }

    #[test]
    fn every_variant_emits_four_probabilities() {
        for v in Variant::ALL {
            let m = BreastModel::new(small(v, Task::Cancer, 1), 3).unwrap();
            let e = [exam(1, 0), exam(1, 1)];
            let p = m.predict(&[&e[0], &e[1]]).unwrap();
            assert_eq!(p.len(), 2);
            for row in &p {
                assert_eq!(row.len(), 4);
                assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
            }
            let fc1 = m.activations(&[&e[0]], Tap::Fc1Concat).unwrap();
            assert_eq!(fc1[0].len(), v.hidden_sizes(8).iter().sum::<usize>());
        }
    }

    #[test]
    fn view_wise_is_mean_of_branches() {
        let m = BreastModel::new(small(Variant::ViewWise, Task::Cancer, 1), 5).unwrap();
        let e = exam(1, 2);
        let (g, out) = m.infer_graph(&[&e]).unwrap();
        let branch = |k: usize| -> Vec<f32> { g.value(out.logits[k].0).data().iter().map(|&z| sigmoid(z)).collect() };
        let (a, b) = (branch(0), branch(1));
        let p = m.probabilities(&g, &out);
        for i in 0..4 {
            assert_eq!(p[0][i], ((a[i] as f64 + b[i] as f64) / 2.0) as f32);
        }
    }

    #[test]
    fn mirrored_left_matches_right() {
        let m = BreastModel::new(small(Variant::Joint, Task::Cancer, 3), 1).unwrap();
        let mut e = exam(3, 4);
        for kind in [ViewKind::Cc, ViewKind::Mlo] {
            let r = e[View::of(Side::Right, kind).index()].clone();
            e[View::of(Side::Left, kind).index()] =
                ViewInput { planes: r.planes.iter().map(Image::flip_horizontal).collect() };
        }
        let cols = m.column_outputs(&e).unwrap();
        assert_eq!(cols[View::LCc.index()], cols[View::RCc.index()]);
        assert_eq!(cols[View::LMlo.index()], cols[View::RMlo.index()]);
    }

    #[test]
    fn transfer_widens_stem() {
        let src = BreastModel::new(small(Variant::ViewWise, Task::Birads, 1), 7).unwrap();
        let a = BreastModel::transfer_from(&src, small(Variant::ViewWise, Task::Cancer, 3), 1).unwrap();
        let b = BreastModel::transfer_from(&src, small(Variant::ViewWise, Task::Cancer, 3), 2).unwrap();
        let one = exam(1, 9);
        let three: ExamInput = std::array::from_fn(|v| {
            let p = &one[v].planes[0];
            ViewInput { planes: vec![p.clone(), Image::zeros(p.height, p.width), Image::zeros(p.height, p.width)] }
        });
        let s = src.column_outputs(&one).unwrap();
        let t = a.column_outputs(&three).unwrap();
        for (x, y) in s.iter().flatten().zip(t.iter().flatten()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
        let mut heads_differ = false;
        for ((_, ea), (_, eb)) in a.store.entries().zip(b.store.entries()) {
            if ea.name.starts_with("head.") {
                heads_differ |= ea.value != eb.value;
            } else {
                assert_eq!(ea.value, eb.value, "{}", ea.name);
            }
        }
        assert!(heads_differ);
        let same = BreastModel::transfer_from(&src, small(Variant::ViewWise, Task::Cancer, 1), 1).unwrap();
        assert_eq!(same.column_outputs(&one).unwrap(), s);
        let mut other = small(Variant::ViewWise, Task::Cancer, 1);
        other.column.channels[3] = 16;
        assert!(BreastModel::transfer_from(&src, other, 1).is_err());
    }

    #[test]
    fn zero_input_with_fresh_statistics_is_finite() {
        let m = BreastModel::new(small(Variant::ImageWise, Task::Cancer, 1), 2).unwrap();
        let z: ExamInput = std::array::from_fn(|v| {
            let (h, w) = if View::ALL[v].kind() == ViewKind::Cc { (40, 32) } else { (44, 28) };
            ViewInput { planes: vec![Image::zeros(h, w)] }
        });
        let p = m.predict(&[&z]).unwrap();
        assert!(p[0].iter().all(|v| v.is_finite()));
        // Zero images reach the column output only through biases and
        // batchnorm shifts.
        let cols = m.column_outputs(&z).unwrap();
        assert_eq!(cols[0], cols[1]);
    }

    #[test]
    fn channel_mismatch_and_config_text() {
        let m = BreastModel::new(small(Variant::BreastWise, Task::Cancer, 3), 2).unwrap();
        assert!(matches!(m.predict(&[&exam(1, 0)]), Err(Error::Shape(_))));
        let cfg = ModelConfig::new(Variant::ImageWise, Task::Cancer, 3).unwrap();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("variant=fancy\ninput_channels=1").is_err());
        assert!(ModelConfig::from_text("variant=joint\ninput_channels=2").is_err());
        assert!(ModelConfig::new(Variant::Joint, Task::Birads, 1).is_err());
    }

    #[test]
    fn training_step_keeps_buffers_out_of_adam() {
        let mut m = BreastModel::new(small(Variant::ViewWise, Task::Birads, 1), 2).unwrap();
        let e = [exam(1, 0), exam(1, 1)];
        let mut g = Graph::new();
        let out = m.forward(&mut g, &[&e[0], &e[1]], Mode::Train).unwrap();
        let loss = m.loss(&mut g, &out, &Targets::Classes(vec![0, 2])).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, _) in grads.params() {
            assert_eq!(m.store.entry(id).kind, ParamKind::Trainable);
        }
    }
}
