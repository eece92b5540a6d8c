//! Python bindings over the core engine.
//!
//! The surface mirrors the CLI verbs: build a configuration, generate or
//! load a dataset, train, then read the model back through prediction,
//! rule extraction, explanation, and intervention. Validation failures
//! raise `ValueError`; everything else raises `RuntimeError`.

use ndarray::Array3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use reason_core::checkpoint::{self, CheckpointMeta};
use reason_core::config::RunConfig;
use reason_core::error::Error;
use reason_core::synthetic::{self, FeatureBatch, World};
use reason_core::trainer::{self, TrainInputs};
use reason_core::{analysis, gradcheck, rules};
use std::collections::BTreeMap;
use std::path::Path;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Run configuration: world geometry, bank source, architecture, training
/// schedule. An empty JSON object is the full desk-scale default.
#[pyclass(module = "reason_py", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    /// Desk-scale defaults.
    #[staticmethod]
    fn desk() -> Config {
        Config { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Config> {
        let inner: RunConfig = serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("invalid configuration: {e}")))?;
        inner.validate().map_err(to_py)?;
        Ok(Config { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Content hash over everything except the seed.
    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Same recipe under a different seed.
    fn with_seed(&self, seed: u64) -> Config {
        let mut c = self.clone();
        c.inner.seed = seed;
        c
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, hash={})", self.inner.seed, &self.inner.hash()[..12])
    }
}

/// A generated world plus its sampled splits.
#[pyclass(module = "reason_py")]
struct Dataset {
    world: World,
    config_hash: String,
    splits: BTreeMap<String, FeatureBatch>,
}

impl Dataset {
    fn split(&self, name: &str) -> PyResult<&FeatureBatch> {
        self.splits.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.splits.keys().map(String::as_str).collect();
            PyValueError::new_err(format!(
                "unknown split '{name}'; available: {}",
                known.join(", ")
            ))
        })
    }

    fn sample(&self, split: &str, index: usize) -> PyResult<(&FeatureBatch, usize)> {
        let batch = self.split(split)?;
        if index >= batch.len() {
            return Err(PyValueError::new_err(format!(
                "sample {index} out of range; split '{split}' holds {}",
                batch.len()
            )));
        }
        Ok((batch, index))
    }
}

#[pymethods]
impl Dataset {
    /// Samples the configured train and eval splits.
    #[staticmethod]
    fn generate(config: &Config) -> PyResult<Dataset> {
        let cfg = &config.inner;
        let world =
            synthetic::generate_world(cfg.world_config().map_err(to_py)?, cfg.seed)
                .map_err(to_py)?;
        let mut splits = BTreeMap::new();
        splits.insert(
            "train".to_string(),
            synthetic::sample_batch(&world, cfg.data.train_samples, synthetic::split_seed(cfg.seed, 0)),
        );
        splits.insert(
            "eval".to_string(),
            synthetic::sample_batch(&world, cfg.data.eval_samples, synthetic::split_seed(cfg.seed, 1)),
        );
        Ok(Dataset { world, config_hash: cfg.hash(), splits })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Dataset> {
        let ds = synthetic::load_dataset(Path::new(dir)).map_err(to_py)?;
        Ok(Dataset { world: ds.world, config_hash: ds.config_hash, splits: ds.splits })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        let refs: Vec<(&str, &FeatureBatch)> =
            self.splits.iter().map(|(k, v)| (k.as_str(), v)).collect();
        synthetic::save_dataset(Path::new(dir), &self.world, &self.config_hash, &refs)
            .map_err(to_py)
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn splits(&self) -> Vec<String> {
        self.splits.keys().cloned().collect()
    }

    fn num_samples(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// One sample's features as nested lists, (frames, joints, channels).
    fn features(&self, split: &str, index: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let (batch, i) = self.sample(split, index)?;
        let f = batch.sample_features(i);
        let (t, v, d) = f.dim();
        Ok((0..t)
            .map(|ti| (0..v).map(|vi| (0..d).map(|di| f[[ti, vi, di]]).collect()).collect())
            .collect())
    }

    fn label(&self, split: &str, index: usize) -> PyResult<usize> {
        let (batch, i) = self.sample(split, index)?;
        Ok(batch.labels[i])
    }

    fn true_concepts(&self, split: &str, index: usize) -> PyResult<Vec<u8>> {
        let (batch, i) = self.sample(split, index)?;
        Ok(batch.true_concepts[i].clone())
    }

    fn actions(&self) -> Vec<String> {
        self.world.config.matrix.actions.clone()
    }

    fn concepts(&self) -> Vec<String> {
        self.world.config.vocabulary.names()
    }

    fn __repr__(&self) -> String {
        let sizes: Vec<String> =
            self.splits.iter().map(|(k, v)| format!("{k}={}", v.len())).collect();
        format!("Dataset({})", sizes.join(", "))
    }
}

fn features_to_array(features: Vec<Vec<Vec<f64>>>, channels: usize) -> PyResult<Array3<f64>> {
    let t = features.len();
    let v = features.first().map_or(0, Vec::len);
    if t == 0 || v == 0 {
        return Err(PyValueError::new_err("features must be a nonempty 3-d nested list"));
    }
    let mut out = Array3::zeros((t, v, channels));
    for (ti, frame) in features.iter().enumerate() {
        if frame.len() != v {
            return Err(PyValueError::new_err("ragged features: joint counts differ"));
        }
        for (vi, row) in frame.iter().enumerate() {
            if row.len() != channels {
                return Err(PyValueError::new_err(format!(
                    "feature rows must have {channels} channels, got {}",
                    row.len()
                )));
            }
            for (di, &x) in row.iter().enumerate() {
                out[[ti, vi, di]] = x;
            }
        }
    }
    Ok(out)
}

/// A trained model: decoder, switchboard, classifier, alignment head.
#[pyclass(module = "reason_py")]
struct Model {
    inner: reason_core::model::Model,
    meta: CheckpointMeta,
}

#[pymethods]
impl Model {
    /// Trains on data sampled from the configuration, mirroring the CLI's
    /// `train` without a dataset directory. Returns the model and the
    /// per-epoch metrics as NDJSON.
    #[staticmethod]
    fn train(config: &Config) -> PyResult<(Model, String)> {
        let cfg = &config.inner;
        cfg.validate().map_err(to_py)?;
        let world =
            synthetic::generate_world(cfg.world_config().map_err(to_py)?, cfg.seed)
                .map_err(to_py)?;
        let train_b =
            synthetic::sample_batch(&world, cfg.data.train_samples, synthetic::split_seed(cfg.seed, 0));
        let eval_b =
            synthetic::sample_batch(&world, cfg.data.eval_samples, synthetic::split_seed(cfg.seed, 1));
        let wc = &world.config;
        let mut inner = reason_core::model::Model::init(
            wc.vocabulary.clone(),
            &wc.matrix,
            cfg.decoder.clone(),
            cfg.logic.clone(),
            wc.channels,
            wc.text_dim,
            cfg.proj_dim,
            cfg.seed,
        )
        .map_err(to_py)?;
        let meta = CheckpointMeta {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            epoch: cfg.train.epochs,
            matrix_rows: wc.matrix.rows.clone(),
            channels: wc.channels,
            text_dim: wc.text_dim,
            proj_dim: cfg.proj_dim,
        };
        let inputs = TrainInputs {
            train: &train_b,
            eval: &eval_b,
            text_embeddings: &world.text_embeddings,
            part_map: &wc.part_map,
        };
        let report =
            trainer::train(&mut inner, &inputs, &cfg.train, cfg.seed, None, &meta)
                .map_err(to_py)?;
        let mut ndjson = String::new();
        for m in &report.metrics {
            ndjson.push_str(&serde_json::to_string(m).map_err(|e| {
                PyRuntimeError::new_err(format!("metrics serialization: {e}"))
            })?);
            ndjson.push('\n');
        }
        Ok((Model { inner, meta }, ndjson))
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Model> {
        let (inner, manifest) = checkpoint::load_model(Path::new(dir)).map_err(to_py)?;
        let meta = CheckpointMeta {
            config_hash: manifest.config_hash,
            seed: manifest.seed,
            epoch: manifest.epoch,
            matrix_rows: manifest.matrix_rows,
            channels: manifest.channels,
            text_dim: manifest.text_dim,
            proj_dim: manifest.proj_dim,
        };
        Ok(Model { inner, meta })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        checkpoint::save_model(Path::new(dir), &self.inner, &self.meta).map_err(to_py)
    }

    fn actions(&self) -> Vec<String> {
        self.inner.actions.clone()
    }

    fn concepts(&self) -> Vec<String> {
        self.inner.vocabulary.names()
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.meta.config_hash
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.meta.seed
    }

    /// Discrete inference on one sample's features.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        features: Vec<Vec<Vec<f64>>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let f = features_to_array(features, self.inner.decoder_config.dim)?;
        let inf = self.inner.forward_sample(&f);
        let out = PyDict::new(py);
        out.set_item("chat", inf.chat)?;
        out.set_item("cbar", inf.cbar)?;
        out.set_item("representation", inf.representation)?;
        out.set_item("scores", inf.scores)?;
        out.set_item("predicted", inf.predicted)?;
        out.set_item("action", &self.inner.actions[inf.predicted])?;
        Ok(out)
    }

    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        split: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let batch = dataset.split(split)?;
        let summary = trainer::evaluate(&self.inner, batch);
        let out = PyDict::new(py);
        out.set_item("samples", batch.len())?;
        out.set_item("accuracy", summary.accuracy)?;
        out.set_item("macro_f1", summary.macro_f1)?;
        out.set_item("concept_f1", summary.concept_f1)?;
        Ok(out)
    }

    /// Extracted rules for every action as a JSON document.
    fn rules_json(&self, top_k: usize) -> PyResult<String> {
        let file = rules::extract_rules(
            &self.inner.logic,
            &self.inner.classifier,
            &self.inner.vocabulary,
            &self.inner.actions,
            top_k,
            &self.meta.config_hash,
            self.meta.seed,
        )
        .map_err(to_py)?;
        serde_json::to_string_pretty(&file)
            .map_err(|e| PyRuntimeError::new_err(format!("rules serialization: {e}")))
    }

    /// The fired rules behind one sample's prediction, strongest first.
    fn explain<'py>(
        &self,
        py: Python<'py>,
        features: Vec<Vec<Vec<f64>>>,
        top_k: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let f = features_to_array(features, self.inner.decoder_config.dim)?;
        let inf = self.inner.forward_sample(&f);
        let terms = rules::explain_instance(
            &self.inner.logic,
            &self.inner.classifier,
            &self.inner.vocabulary,
            &inf.representation,
            inf.predicted,
            top_k,
        );
        let out = PyDict::new(py);
        out.set_item("predicted", inf.predicted)?;
        out.set_item("action", &self.inner.actions[inf.predicted])?;
        let list: Vec<Bound<'py, PyDict>> = terms
            .iter()
            .map(|t| {
                let d = PyDict::new(py);
                d.set_item("slot", t.slot)?;
                d.set_item("weight", t.weight)?;
                d.set_item("expr", &t.expr)?;
                Ok(d)
            })
            .collect::<PyResult<_>>()?;
        out.set_item("terms", list)?;
        Ok(out)
    }

    /// Accuracy at each correction budget, most uncertain concepts first.
    #[pyo3(signature = (dataset, split, budgets, misclassified_only = false))]
    fn intervention(
        &self,
        dataset: &Dataset,
        split: &str,
        budgets: Vec<usize>,
        misclassified_only: bool,
    ) -> PyResult<Vec<(usize, f64)>> {
        let batch = dataset.split(split)?;
        let curve = analysis::intervention_curve(
            &self.inner,
            batch,
            &budgets,
            misclassified_only,
            &self.meta.config_hash,
            self.meta.seed,
        )
        .map_err(to_py)?;
        Ok(curve.points.into_iter().map(|p| (p.budget, p.accuracy)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} actions, {} concepts, width {})",
            self.inner.actions.len(),
            self.inner.vocabulary.len(),
            self.inner.logic.representation_width()
        )
    }
}

/// Compares analytic gradients against central differences. Checks one
/// component when named, every registered component otherwise.
#[pyfunction]
#[pyo3(signature = (component = None, seed = 0))]
fn gradcheck_report<'py>(
    py: Python<'py>,
    component: Option<&str>,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = match component {
        Some(name) => vec![gradcheck::run_component(name, seed).map_err(to_py)?],
        None => gradcheck::run_all(seed).map_err(to_py)?,
    };
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("component", &r.component)?;
            d.set_item("max_rel_err", r.max_rel_err)?;
            d.set_item("probes", r.probes)?;
            d.set_item("pass", r.pass)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn reason_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gradcheck_report, m)?)?;
    Ok(())
}
