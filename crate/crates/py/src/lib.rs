//! Python bindings: configs, datasets, models, the distillation and NoNN
//! pipelines, and the deployment cost model. Structured results cross the
//! boundary as JSON strings.

use edgeai::config::RunConfig;
use edgeai::data::{gen_shapes, load_dataset, save_dataset, MotifSet, ShapesConfig};
use edgeai::deploy::{plan_layer_split, plan_nonn, plan_single, simulate as simulate_plan, Profile};
use edgeai::distill::{argmax_rows, evaluate, predict_logits, train_kd};
use edgeai::dream::DreamMetadata;
use edgeai::experiments as ex;
use edgeai::fan::Partition;
use edgeai::nonn::{build_nonn, evaluate_nonn, load_nonn, save_nonn, taint_check, train_nonn, NoNNModel};
use edgeai::zoo::{read_model, write_model};
use edgeai::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Json(_) | Error::InfeasibleBudget(_) | Error::BudgetViolation { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Config")]
struct PyConfig(RunConfig);

#[pymethods]
impl PyConfig {
    /// Defaults, or a JSON document overriding some of them.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let cfg = match json {
            Some(s) => RunConfig::from_json(s).map_err(err)?,
            None => RunConfig::default(),
        };
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset(edgeai::data::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(load_dataset(path).map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(&self.0, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes
    }

    /// `(N, C, H, W)`.
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.images.shape().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.0.labels.clone()
    }

    /// Flat row-major pixels in `[0, 1]`.
    fn pixels(&self) -> Vec<f32> {
        self.0.images.data().to_vec()
    }
}

#[pyclass(name = "Model")]
struct PyModel(edgeai::Model);

#[pymethods]
impl PyModel {
    /// Untrained network of the config's `role` ("teacher" or "student").
    #[staticmethod]
    #[pyo3(signature = (config, role, seed=0))]
    fn build(config: &PyConfig, role: &str, seed: u64) -> PyResult<Self> {
        let spec = match role {
            "teacher" => config.0.teacher_spec(),
            "student" => config.0.student_spec(),
            _ => return Err(PyValueError::new_err(format!("unknown role {role:?}"))),
        }
        .map_err(err)?;
        Ok(Self(edgeai::Model::build(&spec, seed).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(read_model(path).map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_model(&self.0, path).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn flops(&self) -> PyResult<u64> {
        self.0.spec().count_flops().map_err(err)
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    /// Predicted class per image of `(n, C, H, W)` pixels.
    fn predict(&self, pixels: Vec<f32>, n: usize) -> PyResult<Vec<usize>> {
        let i = self.0.input();
        let x = Tensor::new(&[n, i.channels, i.height, i.width], pixels).map_err(err)?;
        Ok(argmax_rows(&predict_logits(&self.0, &x, 256).map_err(err)?))
    }

    /// `(mean cross-entropy, accuracy)`.
    fn evaluate(&self, ds: &PyDataset) -> PyResult<(f64, f64)> {
        evaluate(&self.0, &ds.0, 256).map_err(err)
    }
}

#[pyclass(name = "NoNN")]
struct PyNoNN(NoNNModel);

#[pymethods]
impl PyNoNN {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self(load_nonn(dir).map_err(err)?.0))
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        save_nonn(&self.0, dir, &Default::default()).map_err(err)
    }

    fn widths(&self) -> Vec<usize> {
        self.0.widths()
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn device_params(&self) -> Vec<usize> {
        (0..self.0.k()).map(|s| self.0.device_params(s)).collect()
    }

    fn evaluate(&self, ds: &PyDataset) -> PyResult<(f64, f64)> {
        evaluate_nonn(&self.0, &ds.0, 256).map_err(err)
    }

    /// True when no trunk reads another trunk's values before the concat.
    fn isolated(&self) -> PyResult<bool> {
        Ok(taint_check(&self.0).map_err(err)?.isolated())
    }
}

/// `(train, test)` shape datasets described by the config.
#[pyfunction]
fn datasets(config: &PyConfig) -> PyResult<(PyDataset, PyDataset)> {
    let (a, b) = ex::desk_datasets(&config.0).map_err(err)?;
    Ok((PyDataset(a), PyDataset(b)))
}

/// A stand-alone shape dataset; `motifs` is "primary" or "alternate".
#[pyfunction]
#[pyo3(signature = (classes, per_class, seed, noise=0.1, size=32, motifs="primary"))]
fn shapes(classes: usize, per_class: usize, seed: u64, noise: f64, size: usize, motifs: &str) -> PyResult<PyDataset> {
    let set = match motifs {
        "primary" => MotifSet::Primary,
        "alternate" => MotifSet::Alternate,
        _ => return Err(PyValueError::new_err(format!("unknown motif set {motifs:?}"))),
    };
    let mut cfg = ShapesConfig::new(set, classes, per_class, noise, seed);
    cfg.size = size;
    Ok(PyDataset(gen_shapes(&cfg).map_err(err)?))
}

/// Supervised teacher training; returns the model and the history CSV.
#[pyfunction]
fn train_teacher(config: &PyConfig, train: &PyDataset, test: &PyDataset) -> PyResult<(PyModel, String)> {
    let (m, h) = ex::train_teacher(&config.0, &train.0, &test.0).map_err(err)?;
    Ok((PyModel(m), h.to_csv()))
}

/// Distils `teacher` into the config's student on labelled real images.
#[pyfunction]
fn distill(config: &PyConfig, teacher: &PyModel, train: &PyDataset) -> PyResult<PyModel> {
    let cfg = &config.0;
    let h = cfg.seeded(&cfg.student.train, 2);
    let mut s = edgeai::Model::build(&cfg.student_spec().map_err(err)?, h.seed).map_err(err)?;
    train_kd(&mut s, &teacher.0, &train.0.images, Some(&train.0.labels), &h, &cfg.kd, None).map_err(err)?;
    Ok(PyModel(s))
}

/// Cluster metadata of the teacher's pooled features, as JSON.
#[pyfunction]
fn extract_metadata(config: &PyConfig, teacher: &PyModel, train: &PyDataset) -> PyResult<String> {
    ex::dream_metadata(&config.0, &teacher.0, &train.0).and_then(|m| m.to_json()).map_err(err)
}

/// Synthetic images labelled by their target class.
#[pyfunction]
fn dream(config: &PyConfig, teacher: &PyModel, metadata: &str) -> PyResult<PyDataset> {
    let meta = DreamMetadata::from_json(metadata).map_err(err)?;
    Ok(PyDataset(ex::dream_images(&config.0, &teacher.0, &meta).map_err(err)?.data))
}

/// Filter graph, raw and balanced partitions, each as JSON.
#[pyfunction]
fn partition(config: &PyConfig, teacher: &PyModel, train: &PyDataset) -> PyResult<(String, String, String)> {
    let (g, raw, bal) = ex::partition_teacher(&config.0, &teacher.0, &train.0).map_err(err)?;
    Ok((g.to_json().map_err(err)?, raw.to_json().map_err(err)?, bal.to_json().map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (config, teacher, partition, train, test=None))]
fn nonn(config: &PyConfig, teacher: &PyModel, partition: &str, train: &PyDataset, test: Option<&PyDataset>) -> PyResult<PyNoNN> {
    let cfg = &config.0;
    let part = Partition::from_json(partition).map_err(err)?;
    let mut h = cfg.nonn.clone();
    h.train = cfg.seeded(&cfg.nonn.train, 3);
    let mut m = build_nonn(&teacher.0, &part, &h).map_err(err)?;
    train_nonn(&teacher.0, &mut m, &train.0.images, Some(&train.0.labels), &h, test.map(|t| &t.0)).map_err(err)?;
    Ok(PyNoNN(m))
}

/// Cost report JSON. `plan` is "single" or "split" for the config's `role`
/// network; pass `nonn` for a NoNN plan instead.
#[pyfunction]
#[pyo3(signature = (config, plan="single", role="student", devices=2, nonn=None, profile=None))]
fn simulate(
    config: &PyConfig,
    plan: &str,
    role: &str,
    devices: usize,
    nonn: Option<&PyNoNN>,
    profile: Option<&str>,
) -> PyResult<String> {
    let cfg = &config.0;
    let profile = match profile {
        Some(s) => Profile::from_json(s).map_err(err)?,
        None => cfg.devices.clone(),
    };
    let p = if let Some(n) = nonn {
        plan_nonn(&n.0, &profile, 0)
    } else {
        let spec = match role {
            "teacher" => cfg.teacher_spec(),
            "student" => cfg.student_spec(),
            _ => return Err(PyValueError::new_err(format!("unknown role {role:?}"))),
        }
        .map_err(err)?;
        match plan {
            "single" => plan_single(&spec),
            "split" => plan_layer_split(&spec, devices, &profile),
            _ => return Err(PyValueError::new_err(format!("unknown plan {plan:?}"))),
        }
    }
    .map_err(err)?;
    simulate_plan(&p, &profile).and_then(|r| r.to_json()).map_err(err)
}

/// Analytic parameter and FLOP checks as CSV.
#[pyfunction]
fn table1_counts() -> PyResult<String> {
    Ok(ex::counts_csv(&ex::reproduce_table1_counts().map_err(err)?))
}

#[pymodule]
fn edgeai_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyNoNN>()?;
    m.add_function(wrap_pyfunction!(datasets, m)?)?;
    m.add_function(wrap_pyfunction!(shapes, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(extract_metadata, m)?)?;
    m.add_function(wrap_pyfunction!(dream, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(nonn, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(table1_counts, m)?)?;
    Ok(())
}
