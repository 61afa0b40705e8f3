//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line and
//! fails when its criterion does not hold.
//!
//! Criteria 8 and 9 share one end-to-end run of the command-line pipeline
//! on a 2,000-exam phantom dataset; it takes tens of minutes on one core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use mscope::breast::{BreastModel, ExamInput, ModelConfig, Task, Variant, ViewInput};
use mscope::cli::{self, RunConfig};
use mscope::eval::{pr_auc, read_metrics, roc_auc};
use mscope::heatmap::{generate_heatmaps, stride_list, PatchScorer, StridePlan};
use mscope::image::Image;
use mscope::manifest::{Finding, View};
use mscope::patch::class_weights;
use mscope::tensor::{Graph, Layer, LayerSpec, Mode, ParamKind, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    // Straight to stderr so the line shows without --nocapture.
    let line = format!("criterion {n:>2}: {} {name} [{detail}]\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

// 1. Stride list fuzz and hand traces.

#[test]
fn criterion_01_stride_list() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = Vec::new();
    for extent in 256..=256 + 5000 {
        let s = stride_list(extent, 256, 70, &mut rng).unwrap();
        let sum: usize = s.iter().sum();
        let (lo, hi) = (s.iter().min().copied().unwrap_or(0), s.iter().max().copied().unwrap_or(0));
        if sum != extent - 256 || hi > 70 || hi - lo > 1 {
            bad.push(extent);
        }
    }
    let hand = stride_list(466, 256, 70, &mut rng).unwrap() == vec![70, 70, 70]
        && stride_list(300, 256, 70, &mut rng).unwrap() == vec![44]
        && {
            let mut s = stride_list(401, 256, 70, &mut rng).unwrap();
            s.sort_unstable();
            s == vec![48, 48, 49]
        };
    let secs = t.elapsed().as_secs_f64();
    verdict(1, "stride list", bad.is_empty() && hand && secs < 1.0, format!("{} bad extents, hand traces {hand}, {secs:.3}s", bad.len()));
}

// 2. Gradient audit in f64.

struct Net {
    conv: Layer,
    bn: Layer,
    conv2: Layer,
    fc: Layer,
}

const LABELS: [usize; 3] = [2, 0, 1];
const WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

fn loss_and_grads(net: &Net, store: &mut ParamStore<f64>, x: &Tensor<f64>, grads: bool) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut g = Graph::new();
    let xv = g.input_tracked(x.clone()).unwrap();
    let h = net.conv.forward(&mut g, store, &[xv], Mode::Train).unwrap();
    let h = net.bn.forward(&mut g, store, &[h], Mode::Train).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.maxpool2d(h, 2, 2).unwrap();
    let h = net.conv2.forward(&mut g, store, &[h], Mode::Train).unwrap();
    let h = g.global_avgpool(h).unwrap();
    let logits = net.fc.forward(&mut g, store, &[h], Mode::Train).unwrap();
    let loss = g.weighted_softmax_cross_entropy(logits, &LABELS, &WEIGHTS).unwrap();
    let value = g.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    let gr = g.backward(loss).unwrap();
    let mut out = vec![("input".to_string(), gr.input(xv).unwrap().data().to_vec())];
    for (id, e) in store.entries() {
        if e.kind == ParamKind::Trainable {
            let d = gr.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; e.value.numel()]);
            out.push((e.name.clone(), d));
        }
    }
    (value, out)
}

fn max_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Net {
        conv: Layer::build(LayerSpec::conv(2, 3, 3, 1, 1), "conv", &mut store, &mut rng).unwrap(),
        bn: Layer::build(LayerSpec::batchnorm(3), "bn", &mut store, &mut rng).unwrap(),
        conv2: Layer::build(LayerSpec::conv(3, 4, 3, 2, 1), "conv2", &mut store, &mut rng).unwrap(),
        fc: Layer::build(LayerSpec::Linear { in_features: 4, out_features: 3 }, "fc", &mut store, &mut rng).unwrap(),
    };
    let x = Tensor::from_fn(&[3, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
    let (_, analytic) = loss_and_grads(&net, &mut store, &x, true);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    };
    for (i, &a) in analytic[0].1.iter().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        check(a, loss_and_grads(&net, &mut store, &xp, false).0, loss_and_grads(&net, &mut store, &xm, false).0);
    }
    for (name, grad) in &analytic[1..] {
        let id = store.id(name).unwrap();
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = loss_and_grads(&net, &mut store, &x, false).0;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = loss_and_grads(&net, &mut store, &x, false).0;
            store.get_mut(id).data_mut()[i] = orig;
            check(a, plus, minus);
        }
    }
    worst
}

#[test]
fn criterion_02_gradient_audit() {
    let t = Instant::now();
    let worst = (0..5).map(max_relative_error).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    verdict(2, "gradient audit", worst < 1e-4 && secs < 60.0, format!("max relative error {worst:.2e} over 5 seeds, {secs:.2}s"));
}

// 3. AUC oracles.

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2.0 * p as f64 * n as f64)
}

/// Sweep thresholds from high to low; each distinct score adds its recall
/// gain times the precision of everything scored at or above it.
fn threshold_sweep_pr_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
        let all = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / pos;
        area += (recall - prev_recall) * (tp / all);
        prev_recall = recall;
    }
    area
}

#[test]
fn criterion_03_auc_oracles() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut roc_bad, mut pr_worst) = (0, 0.0f64);
    for k in 0..100 {
        let n = rng.random_range(2..=200);
        // Every fourth instance draws from only three score levels.
        let levels = if k % 4 == 0 { 3 } else { 1_000_000 };
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        if roc_auc(&scores, &labels).unwrap() != pair_count_auc(&scores, &labels) {
            roc_bad += 1;
        }
        pr_worst = pr_worst.max((pr_auc(&scores, &labels).unwrap() - threshold_sweep_pr_auc(&scores, &labels)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        3,
        "AUC oracles",
        roc_bad == 0 && pr_worst < 1e-9 && secs < 10.0,
        format!("{roc_bad} ROC mismatches, max PR deviation {pr_worst:.1e}, {secs:.2}s"),
    );
}

// 4. Class weights.

#[test]
fn criterion_04_class_weights() {
    let w = class_weights([20, 35, 5000, 4945]).unwrap();
    let want = [0.63312, 0.36179, 0.0025325, 0.0025607];
    let dev = w.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let sum_err = (w.iter().sum::<f64>() - 1.0).abs();
    verdict(4, "class weights", dev < 1e-5 && sum_err < 1e-12, format!("weights {w:?}, sum error {sum_err:.1e}"));
}

// 5. Shape conformance at full scale.

#[test]
fn criterion_05_shapes() {
    let cfg = RunConfig::profile("paper").unwrap();
    let dims = |key: &str| -> (usize, usize) {
        let s: String = cfg.get(key).unwrap();
        let (h, w) = s.split_once('x').unwrap();
        (h.parse().unwrap(), w.parse().unwrap())
    };
    let column = ModelConfig::new(Variant::ViewWise, Task::Cancer, 1).unwrap().column;
    let table: [(&str, [usize; 3], [usize; 3]); 6] = [
        ("Conv7x7", [1339, 971, 16], [1487, 874, 16]),
        ("ResBlock 0", [670, 486, 16], [744, 437, 16]),
        ("ResBlock 1", [335, 243, 32], [372, 219, 32]),
        ("ResBlock 2", [168, 122, 64], [186, 110, 64]),
        ("ResBlock 3", [84, 61, 128], [93, 55, 128]),
        ("ResBlock 4", [42, 31, 256], [47, 28, 256]),
    ];
    let (ch, cw) = dims("data.cc_dims");
    let (mh, mw) = dims("data.mlo_dims");
    let cc = column.shape_trace(ch, cw).unwrap();
    let mlo = column.shape_trace(mh, mw).unwrap();
    let hwc = |s: [usize; 3]| [s[1], s[2], s[0]];
    let mut mismatches = Vec::new();
    for (i, (name, want_cc, want_mlo)) in table.iter().enumerate() {
        let ok = cc.get(i).is_some_and(|r| r.0 == *name && hwc(r.1) == *want_cc)
            && mlo.get(i).is_some_and(|r| r.0 == *name && hwc(r.1) == *want_mlo);
        if !ok {
            mismatches.push(*name);
        }
    }
    verdict(
        5,
        "shape conformance",
        mismatches.is_empty() && cc.len() == 6 && mlo.len() == 6,
        format!("{} of 6 rows match for both views", 6 - mismatches.len()),
    );
}

// 6. Heatmap oracle.

/// Malignant score is the patch mean, benign the fraction of bright pixels.
struct Stub;

impl PatchScorer for Stub {
    fn score(&self, pixels: &[f32], n: usize, side: usize) -> mscope::Result<Vec<(f32, f32)>> {
        Ok(pixels
            .chunks(side * side)
            .take(n)
            .map(|p| {
                let mean = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
                let bright = p.iter().filter(|&&v| v > 0.7).count() as f64 / p.len() as f64;
                (mean as f32, bright as f32)
            })
            .collect())
    }
}

#[test]
fn criterion_06_heatmap_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut in_range = true;
    for _ in 0..12 {
        let (h, w) = (rng.random_range(20..=64), rng.random_range(20..=64));
        let patch = rng.random_range(4..=h.min(w));
        let stride = rng.random_range(1..=patch);
        let img = Image::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
        let plan = StridePlan::new(h, w, patch, stride, &mut rng).unwrap();
        let got = generate_heatmaps(&img, &Stub, &plan, 7).unwrap();
        // Brute force: score every window from the image directly, then
        // average, per pixel, over the windows that contain it.
        let mut ys = vec![0];
        for s in &plan.vertical {
            ys.push(ys.last().unwrap() + s);
        }
        let mut xs = vec![0];
        for s in &plan.horizontal {
            xs.push(xs.last().unwrap() + s);
        }
        let mut windows = Vec::new();
        for &y0 in &ys {
            for &x0 in &xs {
                let mut sum = 0.0f64;
                let mut bright = 0usize;
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        let v = img.get(y, x);
                        sum += v as f64;
                        bright += usize::from(v > 0.7);
                    }
                }
                let area = (patch * patch) as f64;
                windows.push((y0, x0, sum / area, bright as f64 / area));
            }
        }
        for y in 0..h {
            for x in 0..w {
                let cover: Vec<_> = windows.iter().filter(|c| y >= c.0 && y < c.0 + patch && x >= c.1 && x < c.1 + patch).collect();
                let m = cover.iter().map(|c| c.2).sum::<f64>() / cover.len() as f64;
                let b = cover.iter().map(|c| c.3).sum::<f64>() / cover.len() as f64;
                let (gm, gb) = (got.plane(Finding::Malignant)[y * w + x] as f64, got.plane(Finding::Benign)[y * w + x] as f64);
                worst = worst.max((gm - m).abs()).max((gb - b).abs());
                in_range &= (0.0..=1.0).contains(&gm) && (0.0..=1.0).contains(&gb);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        6,
        "heatmap oracle",
        worst < 1e-6 && in_range && secs < 10.0,
        format!("max deviation {worst:.1e}, values in [0,1]: {in_range}, {secs:.2}s"),
    );
}

// 7. Transfer fidelity and mirrored-pair equality.

fn plane(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn dims_of(v: View) -> (usize, usize) {
    match v {
        View::LCc | View::RCc => (64, 48),
        _ => (72, 44),
    }
}

#[test]
fn criterion_07_transfer_and_mirroring() {
    let t = Instant::now();
    let source = BreastModel::new(ModelConfig::new(Variant::ViewWise, Task::Birads, 1).unwrap(), 11).unwrap();
    let target = BreastModel::transfer_from(&source, ModelConfig::new(Variant::ViewWise, Task::Cancer, 3).unwrap(), 12).unwrap();
    let planes: Vec<Image> = View::ALL.iter().map(|&v| plane(dims_of(v).0, dims_of(v).1, v.index() as u64)).collect();
    let one: ExamInput = std::array::from_fn(|i| ViewInput { planes: vec![planes[i].clone()] });
    let three: ExamInput = std::array::from_fn(|i| {
        let z = Image::zeros(planes[i].height, planes[i].width);
        ViewInput { planes: vec![planes[i].clone(), z.clone(), z] }
    });
    let a = source.column_outputs(&one).unwrap();
    let b = target.column_outputs(&three).unwrap();
    let transfer_dev = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);

    // Right views are the left views mirrored.
    let mirrored: ExamInput = std::array::from_fn(|i| {
        let v = View::ALL[i];
        let left = View::of(mscope::manifest::Side::Left, v.kind());
        let p = &planes[left.index()];
        ViewInput { planes: vec![if v == left { p.clone() } else { p.flip_horizontal() }] }
    });
    let cols = source.column_outputs(&mirrored).unwrap();
    let exact = cols[View::LCc.index()] == cols[View::RCc.index()] && cols[View::LMlo.index()] == cols[View::RMlo.index()];
    let secs = t.elapsed().as_secs_f64();
    verdict(
        7,
        "transfer fidelity",
        transfer_dev < 1e-6 && exact && secs < 30.0,
        format!("max column deviation {transfer_dev:.1e}, mirrored pairs equal: {exact}, {secs:.2}s"),
    );
}

// 8 and 9. Desk end-to-end run through the command line.

/// Pinned configuration of the end-to-end run.
const DESK_RUN: &str = "\
profile=desk
seed=7
data.exams=2000
data.biopsied_fraction=0.2
data.malignant_fraction=0.4
data.occult_fraction=0.1
data.split=0.6,0.15,0.25
data.cc_dims=112x82
data.mlo_dims=124x73
data.lesion_radius=0.05,0.065
patch.size=32
patch.min_side=16
patch.max_side=48
patch.epochs=40
patch.save_every=10
patch.batch_size=50
heatmap.stride=12
train.lr=1e-3
train.batch_size=8
train.patience=4
train.max_epochs=10
train.max_offset=4
train.tta_samples=2
train.ensemble_size=1
train.pretrained=false
eval.reader_biopsied=90
eval.reader_normal=90
eval.readers=14
eval.reader_auc_range=0.765,0.795
";

fn run_cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("mscope").chain(args.iter().copied()).map(String::from).collect();
    cli::run(argv)
}

struct Pipeline {
    run: PathBuf,
    minutes: f64,
    failures: Vec<String>,
}

fn desk_pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk_run");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = root.join("config.txt");
        std::fs::write(&config, DESK_RUN).unwrap();
        let run = root.join("run");
        let (c, d, r) = (config.to_str().unwrap(), root.join("data"), run.to_str().unwrap());
        let d = d.to_str().unwrap();
        let common = ["--config", c, "--data", d, "--run", r];
        let t = Instant::now();
        let mut failures = Vec::new();
        let mut step = |args: &[&str]| {
            let mut all: Vec<&str> = args.to_vec();
            all.extend_from_slice(&common);
            let code = run_cli(&all);
            if code != 0 {
                failures.push(format!("{} exited {code}", args.join(" ")));
            }
        };
        step(&["gen-data"]);
        step(&["train-patch"]);
        step(&["gen-heatmaps"]);
        for heat in ["true", "false"] {
            step(&["ensemble", "--heatmaps", heat]);
            step(&["predict", "--heatmaps", heat]);
            for pop in ["screening", "biopsied"] {
                step(&["evaluate", "--heatmaps", heat, "--population", pop]);
            }
        }
        step(&["reader-study", "--heatmaps", "true"]);
        step(&["report"]);
        Pipeline { run, minutes: t.elapsed().as_secs_f64() / 60.0, failures }
    })
}

fn malignant_auc(run: &Path, model: &str, pop: &str) -> f64 {
    let rows = read_metrics(&run.join(model).join(format!("metrics_{pop}.csv"))).unwrap_or_default();
    rows.iter().find(|r| r.task == "malignant").map_or(f64::NAN, |r| r.auc)
}

#[test]
fn criterion_08_desk_end_to_end() {
    let p = desk_pipeline();
    let heat = malignant_auc(&p.run, "image_heatmaps", "screening");
    let image = malignant_auc(&p.run, "image_only", "screening");
    let heat_bio = malignant_auc(&p.run, "image_heatmaps", "biopsied");
    let checks = [heat >= 0.85, image >= 0.75, heat - image >= 0.02, heat_bio < heat];
    let detail = format!(
        "image+heatmaps {heat:.4}, image-only {image:.4}, gap {:+.4}, biopsied {heat_bio:.4}; checks (a-d) {checks:?}; {:.1} min{}",
        heat - image,
        p.minutes,
        if p.failures.is_empty() { String::new() } else { format!("; {}", p.failures.join("; ")) }
    );
    verdict(8, "desk end-to-end", p.failures.is_empty() && checks.iter().all(|&c| c), detail);
}

#[test]
fn criterion_09_hybrid() {
    let p = desk_pipeline();
    let path = p.run.join("image_heatmaps").join("reader_study.csv");
    let text = std::fs::read_to_string(&path).unwrap_or_default();
    let mut readers = Vec::new();
    for line in text.lines().skip(1).filter(|l| l.starts_with("reader_")) {
        let f: Vec<&str> = line.split(',').collect();
        readers.push((f[1].parse::<f64>().unwrap(), f[2].parse::<f64>().unwrap()));
    }
    let calibrated = readers.iter().all(|r| (r.0 - 0.78).abs() <= 0.02);
    let improved = readers.iter().filter(|r| r.1 >= r.0).count();
    verdict(
        9,
        "hybrid beats readers",
        readers.len() == 14 && calibrated && improved == 14,
        format!("{} readers, calibrated to 0.78 +/- 0.02: {calibrated}, hybrid >= reader for {improved}", readers.len()),
    );
}

// 10. Byte-identical reruns.

const TINY_RUN: &str = "\
profile=desk
seed=5
data.exams=40
data.biopsied_fraction=0.5
data.malignant_fraction=0.5
data.occult_fraction=0.1
data.split=0.5,0.25,0.25
data.cc_dims=64x48
data.mlo_dims=68x44
data.lesion_radius=0.04,0.06
patch.size=16
patch.min_side=8
patch.max_side=24
patch.widths=4,4,8,8
patch.hidden=8
patch.epochs=2
patch.save_every=1
patch.per_class=20
patch.batch_size=16
heatmap.stride=8
train.max_epochs=1
train.birads_max_epochs=1
train.batch_size=4
train.birads_batch_size=4
train.tta_samples=2
train.ensemble_size=2
train.eval_batch=4
eval.reader_biopsied=3
eval.reader_normal=3
eval.readers=3
";

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_pipeline(root: &Path, force: bool) -> Vec<String> {
    let config = root.join("config.txt");
    std::fs::write(&config, TINY_RUN).unwrap();
    let (c, d, r) = (config.to_str().unwrap().to_string(), root.join("data"), root.join("run"));
    let (d, r) = (d.to_str().unwrap().to_string(), r.to_str().unwrap().to_string());
    let mut failures = Vec::new();
    let steps: [&[&str]; 11] = [
        &["gen-data"],
        &["train-patch"],
        &["gen-heatmaps"],
        &["pretrain-birads"],
        &["train-cancer", "--heatmaps", "true"],
        &["ensemble", "--heatmaps", "false"],
        &["predict", "--heatmaps", "true"],
        &["predict", "--heatmaps", "false"],
        &["evaluate", "--heatmaps", "false", "--population", "screening"],
        &["reader-study", "--heatmaps", "false"],
        &["report"],
    ];
    for s in steps {
        let mut args: Vec<&str> = s.to_vec();
        args.extend_from_slice(&["--config", &c, "--data", &d, "--run", &r, "--jobs", "1"]);
        if force {
            args.push("--force");
        }
        let code = run_cli(&args);
        if code != 0 {
            failures.push(format!("{} exited {code}", s.join(" ")));
        }
    }
    failures
}

#[test]
fn criterion_10_reproducible_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let mut failures = tiny_pipeline(&a, false);
    let first = snapshot(&a);
    // Rerunning without --force must refuse rather than overwrite.
    let refused = run_cli(&["gen-data", "--data", a.join("data").to_str().unwrap()]) == 1;
    failures.extend(tiny_pipeline(&a, true));
    failures.extend(tiny_pipeline(&b, false));
    let again = snapshot(&a);
    let other = snapshot(&b);
    let differing: Vec<String> = first
        .iter()
        .filter(|(k, v)| again.get(*k) != Some(v) || other.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_files = first.keys().eq(again.keys()) && first.keys().eq(other.keys());
    let kinds = ["manifest.csv", ".ckpt", "predictions.csv", ".mshm"]
        .iter()
        .all(|k| first.keys().any(|p| p.to_string_lossy().ends_with(k)));
    verdict(
        10,
        "reproducible reruns",
        failures.is_empty() && refused && differing.is_empty() && same_files && kinds,
        format!(
            "{} files compared, {} differ, refusal without --force: {refused}{}",
            first.len(),
            differing.len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
}
