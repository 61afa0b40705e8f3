//! Python bindings: the run config, patch and breast models, heatmaps,
//! metrics and the command-line entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mscope::breast::{ExamInput, ModelConfig, Task, Variant, ViewInput};
use mscope::heatmap::{generate_heatmaps, StridePlan};
use mscope::image::Image;
use mscope::manifest::Finding;
use mscope::patch::PatchNetConfig;

fn err(e: mscope::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn image(rows: Vec<Vec<f32>>) -> PyResult<Image> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows differ in length"));
    }
    Image::new(h, w, rows.into_iter().flatten().collect()).map_err(err)
}

fn rows(img: &Image) -> Vec<Vec<f32>> {
    img.data.chunks(img.width.max(1)).map(|r| r.to_vec()).collect()
}

#[pyclass(name = "RunConfig")]
struct PyRunConfig(mscope::cli::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (profile = "desk"))]
    fn new(profile: &str) -> PyResult<Self> {
        mscope::cli::RunConfig::profile(profile).map(Self).map_err(err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        mscope::cli::RunConfig::parse(text).map(Self).map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.0.get(key).map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

#[pyclass(name = "PatchNet")]
struct PyPatchNet(mscope::patch::PatchNet);

#[pymethods]
impl PyPatchNet {
    #[new]
    #[pyo3(signature = (widths = [16, 32, 64, 64], hidden = 64, seed = 0))]
    fn new(widths: [usize; 4], hidden: usize, seed: u64) -> PyResult<Self> {
        mscope::patch::PatchNet::new(PatchNetConfig { widths, hidden }, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, widths = [16, 32, 64, 64], hidden = 64))]
    fn load(path: PathBuf, widths: [usize; 4], hidden: usize) -> PyResult<Self> {
        mscope::patch::PatchNet::load(PatchNetConfig { widths, hidden }, &path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// Class probabilities (malignant, benign, outside any lesion,
    /// negative image) for each square patch.
    fn predict(&self, patches: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<[f32; 4]>> {
        let side = patches.first().map_or(0, |p| p.len());
        let n = patches.len();
        let mut px = Vec::with_capacity(n * side * side);
        for p in patches {
            let img = image(p)?;
            if img.height != side || img.width != side {
                return Err(PyValueError::new_err("patches must be square and share one size"));
            }
            px.extend(img.data);
        }
        self.0.predict(&px, n, side).map_err(err)
    }

    /// (malignant, benign) heatmap planes of one image.
    #[pyo3(signature = (image_rows, patch_size, stride, seed = 0, batch = 64))]
    fn heatmap(
        &self,
        image_rows: Vec<Vec<f32>>,
        patch_size: usize,
        stride: usize,
        seed: u64,
        batch: usize,
    ) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let img = image(image_rows)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = StridePlan::new(img.height, img.width, patch_size, stride, &mut rng).map_err(err)?;
        let h = generate_heatmaps(&img, &self.0, &plan, batch).map_err(err)?;
        Ok((rows(&h.plane_image(Finding::Malignant)), rows(&h.plane_image(Finding::Benign))))
    }
}

#[pyclass(name = "BreastModel")]
struct PyBreastModel(mscope::breast::BreastModel);

fn model_config(variant: &str, task: &str, channels: usize) -> PyResult<ModelConfig> {
    let v: Variant = variant.parse().map_err(err)?;
    let t = match task {
        "cancer" => Task::Cancer,
        "birads" => Task::Birads,
        _ => return Err(PyValueError::new_err(format!("unknown task {task:?}"))),
    };
    ModelConfig::new(v, t, channels).map_err(err)
}

/// Exams as nested lists: exam -> 4 views (L-CC, R-CC, L-MLO, R-MLO) ->
/// channel planes -> rows.
fn exams(raw: Vec<Vec<Vec<Vec<Vec<f32>>>>>) -> PyResult<Vec<ExamInput>> {
    raw.into_iter()
        .map(|views| {
            if views.len() != 4 {
                return Err(PyValueError::new_err("each exam needs four views"));
            }
            let mut out = Vec::with_capacity(4);
            for planes in views {
                out.push(ViewInput { planes: planes.into_iter().map(image).collect::<PyResult<_>>()? });
            }
            Ok(out.try_into().expect("four views"))
        })
        .collect()
}

#[pymethods]
impl PyBreastModel {
    #[new]
    #[pyo3(signature = (variant = "view_wise", task = "cancer", channels = 1, seed = 0))]
    fn new(variant: &str, task: &str, channels: usize, seed: u64) -> PyResult<Self> {
        mscope::breast::BreastModel::new(model_config(variant, task, channels)?, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, variant = "view_wise", task = "cancer", channels = 1))]
    fn load(path: PathBuf, variant: &str, task: &str, channels: usize) -> PyResult<Self> {
        mscope::breast::BreastModel::load(model_config(variant, task, channels)?, &path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// Per exam `[L-benign, L-malignant, R-benign, R-malignant]` for the
    /// cancer task, or three BI-RADS class probabilities.
    fn predict(&self, raw: Vec<Vec<Vec<Vec<Vec<f32>>>>>) -> PyResult<Vec<Vec<f32>>> {
        let xs = exams(raw)?;
        let refs: Vec<&ExamInput> = xs.iter().collect();
        self.0.predict(&refs).map_err(err)
    }

    /// Activations at `tap` (column_concat or fc1_concat), one row per exam.
    fn activations(&self, raw: Vec<Vec<Vec<Vec<Vec<f32>>>>>, tap: &str) -> PyResult<Vec<Vec<f32>>> {
        let xs = exams(raw)?;
        let refs: Vec<&ExamInput> = xs.iter().collect();
        self.0.activations(&refs, tap.parse().map_err(err)?).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (extent, patch_size, stride, seed = 0))]
fn stride_list(extent: usize, patch_size: usize, stride: usize, seed: u64) -> PyResult<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mscope::heatmap::stride_list(extent, patch_size, stride, &mut rng).map_err(err)
}

#[pyfunction]
fn class_weights(counts: [usize; 4]) -> PyResult<[f64; 4]> {
    mscope::patch::class_weights(counts).map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    mscope::eval::roc_auc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn pr_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    mscope::eval::pr_auc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn hybrid_scores(reader: Vec<f64>, model: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    mscope::eval::hybrid_scores(&reader, &model, lam).map_err(err)
}

/// Generate a phantom dataset from a run config; returns its hash.
#[pyfunction]
fn generate_dataset(config: &PyRunConfig, out: PathBuf) -> PyResult<String> {
    let cfg = config.0.phantom().map_err(err)?;
    let seed = config.0.seed().map_err(err)?;
    mscope::phantom::generate_dataset(&cfg, seed, &out).map(|g| g.hash).map_err(err)
}

/// Run the command-line interface with `args` (no program name) and
/// return its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mscope".to_string()).chain(args).collect();
    py.allow_threads(|| mscope::cli::run(argv))
}

#[pymodule]
#[pyo3(name = "mscope")]
fn mscope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPatchNet>()?;
    m.add_class::<PyBreastModel>()?;
    m.add_function(wrap_pyfunction!(stride_list, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(pr_auc, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_scores, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
