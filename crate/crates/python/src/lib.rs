//! Python bindings: configs, datasets, the prior and refinement operations,
//! training and inference.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use priorcascade::config::ExperimentConfig;
use priorcascade::episodes::io::{load_dataset, save_dataset};
use priorcascade::episodes::{generate_synthetic_dataset, make_splits};
use priorcascade::evaluation::evaluate_split;
use priorcascade::experiment::{eval_seed, load_backbone, load_variant, obtain_backbone, run_dir, variant_dir, BACKBONE_FILE};
use priorcascade::pipeline::Segmenter;
use priorcascade::prior::ProbKind;
use priorcascade::training::TrainData;
use priorcascade::{Backbone, Dataset, Episode, Error, FeatureMap, FusionNet, Level, Mask, ProbMap, SplitPlan, Tensor};

fn err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type Grid<T> = Vec<Vec<T>>;

fn tensor3(v: Vec<Grid<f64>>) -> PyResult<Tensor> {
    let c = v.len();
    let h = v.first().map_or(0, Vec::len);
    let w = v.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if v.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("ragged feature map"));
    }
    Tensor::new(&[c, h, w], v.into_iter().flatten().flatten().collect()).map_err(err)
}

fn prob_map(v: Grid<f64>, kind: ProbKind) -> PyResult<ProbMap> {
    if v.iter().flatten().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(PyValueError::new_err("probabilities must lie in [0, 1]"));
    }
    ProbMap::new(tensor3(vec![v])?, kind).map_err(err)
}

fn rows<T: Copy>(data: &[T], w: usize) -> Grid<T> {
    data.chunks(w.max(1)).map(<[T]>::to_vec).collect()
}

fn mask_rows(m: &Mask) -> Grid<u32> {
    m.data().chunks(m.w().max(1)).map(|r| r.iter().map(|&x| u32::from(x)).collect()).collect()
}

fn to_mask(v: Grid<u8>) -> PyResult<Mask> {
    let h = v.len();
    let w = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged mask"));
    }
    Mask::new(h, w, v.into_iter().flatten().map(|x| u8::from(x != 0)).collect()).map_err(err)
}

/// Experiment configuration, read from and written to TOML.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Settings sized for a single CPU core.
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: ExperimentConfig::desk(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.set_seed(seed);
    }

    #[getter]
    fn split(&self) -> usize {
        self.inner.split
    }

    #[getter]
    fn n_splits(&self) -> usize {
        self.inner.n_splits
    }

    /// Label of the configured cascade, e.g. `T=2 different augmented`.
    #[getter]
    fn cascade(&self) -> String {
        self.inner.train.cascade.label()
    }

    fn fingerprint(&self) -> String {
        self.inner.model_fingerprint()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, cascade='{}')", self.inner.seed, self.inner.train.cascade.label())
    }
}

/// Images, masks and class ids of a segmentation dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic dataset described by `config`.
    #[staticmethod]
    fn generate(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: generate_synthetic_dataset(&config.inner.dataset.synth).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<usize> {
        save_dataset(&self.inner, &path).map(|p| p.len()).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids()
    }

    fn indices_of(&self, class_id: u32) -> Vec<usize> {
        self.inner.indices_of(class_id).to_vec()
    }

    /// `(image, mask, class_id)` with the image as `[channel][row][col]` floats.
    fn sample(&self, index: usize) -> PyResult<(Vec<Grid<f64>>, Grid<u32>, u32)> {
        if index >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("sample {index} of {}", self.inner.len())));
        }
        let s = self.inner.sample(index);
        let (_, _, w) = s.image.chw().map_err(err)?;
        let image = (0..3).map(|c| rows(s.image.channel(c), w)).collect();
        Ok((image, mask_rows(&s.mask), s.class_id))
    }

    /// `(train_classes, test_classes)` of every split.
    fn splits(&self, n_splits: usize) -> PyResult<Vec<(Vec<u32>, Vec<u32>)>> {
        let plans = make_splits(&self.inner.class_ids(), n_splits).map_err(err)?;
        Ok(plans
            .into_iter()
            .map(|p| (p.train_classes.into_iter().collect(), p.test_classes.into_iter().collect()))
            .collect())
    }
}

fn split_of(config: &ExperimentConfig, dataset: &Dataset) -> PyResult<SplitPlan> {
    let plans = make_splits(&dataset.class_ids(), config.n_splits).map_err(err)?;
    plans
        .into_iter()
        .nth(config.split)
        .ok_or_else(|| PyValueError::new_err("split index out of range"))
}

/// Frozen backbone plus trained cascade networks.
#[pyclass(name = "Segmenter")]
struct PySegmenter {
    inner: Segmenter,
}

#[pymethods]
impl PySegmenter {
    /// Untrained weights for the configured cascade, for smoke tests.
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn untrained(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let cfg = &config.inner;
        let bb = Backbone::new(cfg.backbone.clone(), seed).map_err(err)?;
        let g = cfg.backbone.grid_sizes(cfg.dataset.synth.image_size).0;
        let nets = (0..cfg.train.cascade.n_networks())
            .map(|t| FusionNet::new(cfg.fusion.clone(), (g, g), seed + t as u64))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(Self {
            inner: Segmenter::new(bb, nets, cfg.train.cascade.clone()).map_err(err)?,
        })
    }

    /// Pretrain (unless `out` already holds a backbone) and train the
    /// configured cascade on the configured split.
    #[staticmethod]
    #[pyo3(signature = (config, dataset, out = None))]
    fn train(py: Python<'_>, config: &PyConfig, dataset: &PyDataset, out: Option<PathBuf>) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let ds = &dataset.inner;
        let split = split_of(&cfg, ds)?;
        py.detach(|| {
            let run = out.as_ref().map(|o| run_dir(o, cfg.seed, cfg.split));
            let bb = obtain_backbone(&cfg, ds, &split, run.as_deref())?;
            let data = TrainData {
                dataset: ds,
                split: &split,
                backbone: &bb,
                fusion: &cfg.fusion,
            };
            let vdir = run.as_ref().map(|r| variant_dir(r, &cfg.train.cascade));
            let (nets, _) = priorcascade::training::train(&cfg.train, data, vdir.as_deref())?;
            Segmenter::new(bb, nets, cfg.train.cascade.clone())
        })
        .map(|inner| Self { inner })
        .map_err(err)
    }

    /// Load what `train` wrote under `out` for this config.
    #[staticmethod]
    fn load(config: &PyConfig, dataset: &PyDataset, out: PathBuf) -> PyResult<Self> {
        let cfg = &config.inner;
        let split = split_of(cfg, &dataset.inner)?;
        let run = run_dir(&out, cfg.seed, cfg.split);
        let bb = load_backbone(&run.join(BACKBONE_FILE), &split).map_err(err)?;
        let vdir = variant_dir(&run, &cfg.train.cascade);
        let nets = load_variant(&vdir, &cfg.train)
            .map_err(err)?
            .ok_or_else(|| PyValueError::new_err(format!("no trained cascade at {}", vdir.display())))?;
        Ok(Self {
            inner: Segmenter::new(bb, nets, cfg.train.cascade.clone()).map_err(err)?,
        })
    }

    /// Query mask predicted from the given support samples.
    fn predict(&self, dataset: &PyDataset, support: Vec<usize>, query: usize) -> PyResult<Grid<u32>> {
        let ds = &dataset.inner;
        if support.is_empty() {
            return Err(PyValueError::new_err("at least one support sample is needed"));
        }
        if let Some(&bad) = support.iter().chain([&query]).find(|&&i| i >= ds.len()) {
            return Err(PyIndexError::new_err(format!("sample {bad} of {}", ds.len())));
        }
        let episode = Episode {
            class_id: ds.sample(query).class_id,
            support: support.iter().map(|&i| ds.sample(i).clone()).collect(),
            query: ds.sample(query).clone(),
            support_ids: support,
            query_id: query,
        };
        let trace = self.inner.run(&episode).map_err(err)?;
        Ok(mask_rows(&trace.mask_full))
    }

    /// `(mIoU, per-class IoU)` over test episodes of the configured split.
    #[pyo3(signature = (config, dataset, episodes = None, shots = None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        config: &PyConfig,
        dataset: &PyDataset,
        episodes: Option<usize>,
        shots: Option<usize>,
    ) -> PyResult<(f64, BTreeMap<u32, f64>)> {
        let cfg = &config.inner;
        let split = split_of(cfg, &dataset.inner)?;
        let n = episodes.unwrap_or(cfg.eval.episodes);
        let k = shots.unwrap_or(cfg.eval.shots);
        let report = py
            .detach(|| evaluate_split(&self.inner, &dataset.inner, &split, n, k, eval_seed(cfg)))
            .map_err(err)?;
        Ok((report.miou, report.per_class))
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Similarity prior of a query against a masked support, both `[channel][row][col]`.
#[pyfunction]
fn generate_prior(query: Vec<Grid<f64>>, support: Vec<Grid<f64>>) -> PyResult<Grid<f64>> {
    let q = FeatureMap::new(tensor3(query)?, Level::High, 1).map_err(err)?;
    let s = FeatureMap::new(tensor3(support)?, Level::High, 1).map_err(err)?;
    let p = priorcascade::generate_prior(&q, &s).map_err(err)?;
    Ok(rows(p.values(), p.hw().1))
}

/// Min-max normalised product of an estimate and the prior.
#[pyfunction]
fn augment_prior(estimate: Grid<f64>, prior: Grid<f64>) -> PyResult<Grid<f64>> {
    let p = prob_map(estimate, ProbKind::Estimate)?;
    let s = prob_map(prior, ProbKind::Prior)?;
    let a = priorcascade::refine::augment_prior(&p, &s).map_err(err)?;
    Ok(rows(a.values(), a.hw().1))
}

/// Cells strictly above `threshold`.
#[pyfunction]
#[pyo3(signature = (p, threshold = 0.5))]
fn binarize(p: Grid<f64>, threshold: f64) -> PyResult<Grid<u32>> {
    let m = priorcascade::refine::binarize(&prob_map(p, ProbKind::Estimate)?, threshold);
    Ok(mask_rows(&m))
}

#[pyfunction]
fn iou(pred: Grid<u8>, gt: Grid<u8>) -> PyResult<f64> {
    priorcascade::evaluation::iou(&to_mask(pred)?, &to_mask(gt)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, base_lr, power = 0.9))]
fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> f64 {
    priorcascade::optim::poly_lr(step, total_steps, base_lr, power)
}

#[pymodule(name = "priorcascade")]
fn priorcascade_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySegmenter>()?;
    m.add_function(wrap_pyfunction!(generate_prior, m)?)?;
    m.add_function(wrap_pyfunction!(augment_prior, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    Ok(())
}
