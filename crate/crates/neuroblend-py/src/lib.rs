//! Python bindings: build, compile, execute and inspect model graphs.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use neuroblend::builders::{build_neuroblend18, build_neuroblend20};
use neuroblend::costmodel::{count_ops, estimate_latency, HardwareProfile};
use neuroblend::init::{random_init, random_input};
use neuroblend::ir::validate;
use neuroblend::mixer::{build_blendmixer, FcPrecision, MixerSpec};
use neuroblend::modelio::{load_model, save_model};
use neuroblend::oracle::reference_forward;
use neuroblend::passes::{compile_model, CompileOptions, PassName};
use neuroblend::runtime::ExecutionPlan;
use neuroblend::{Error, Graph};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::ManifestMismatch { .. }
        | Error::Manifest(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A model graph, either freshly built or compiled.
#[pyclass(name = "Model")]
struct PyModel {
    graph: Graph,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn arch(&self) -> String {
        self.graph.arch.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.graph.seed
    }

    #[getter]
    fn compiled(&self) -> bool {
        self.graph.compiled
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.graph.value(self.graph.inputs()[0].1).shape.clone()
    }

    /// Invariant violations as strings; empty list means well-formed.
    fn validate(&self) -> Vec<String> {
        validate(&self.graph).iter().map(|v| v.to_string()).collect()
    }

    /// Run the pass pipeline and quantization; returns (model, report_json).
    #[pyo3(signature = (word_size=48, frac_bits=8, passes=None))]
    fn compile(
        &self,
        word_size: u8,
        frac_bits: u8,
        passes: Option<Vec<String>>,
    ) -> PyResult<(PyModel, String)> {
        let pass_list: Vec<PassName> = match passes {
            None => PassName::DEFAULT_PIPELINE.to_vec(),
            Some(names) => names
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(to_py_err)?,
        };
        let opts = CompileOptions {
            passes: pass_list,
            word_size,
            frac_bits,
        };
        let (compiled, report) = compile_model(self.graph.clone(), &opts).map_err(to_py_err)?;
        let report_json = serde_json::to_string(&report)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((PyModel { graph: compiled }, report_json))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.graph, path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyModel> {
        Ok(PyModel {
            graph: load_model(path).map_err(to_py_err)?,
        })
    }

    /// Execute the compiled model; returns dequantized output scores.
    #[pyo3(signature = (input, workers=1))]
    fn run(&self, input: Vec<f32>, workers: usize) -> PyResult<Vec<f32>> {
        let plan = ExecutionPlan::from_graph(&self.graph).map_err(to_py_err)?;
        let out = plan
            .execute_with_workers(&input, workers)
            .map_err(to_py_err)?;
        Ok(out.scores)
    }

    /// Evaluate the float64 reference interpreter on this graph.
    fn reference(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        let out = reference_forward(&self.graph, &input).map_err(to_py_err)?;
        Ok(out.output)
    }

    /// Operation/parameter/size accounting as a JSON string.
    fn count(&self) -> PyResult<String> {
        serde_json::to_string(&count_ops(&self.graph))
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// First-order latency estimate (compiled models) as a JSON string.
    fn latency(&self) -> PyResult<String> {
        let report =
            estimate_latency(&self.graph, &HardwareProfile::default()).map_err(to_py_err)?;
        serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(arch={:?}, seed={}, nodes={}, compiled={})",
            self.graph.arch,
            self.graph.seed,
            self.graph.node_count(),
            self.graph.compiled
        )
    }
}

/// Build a seeded model graph.
#[pyfunction]
#[pyo3(signature = (arch, seed=0, classes=10, fc_precision="BB/BB"))]
fn build_model(arch: &str, seed: u64, classes: usize, fc_precision: &str) -> PyResult<PyModel> {
    let graph = match arch {
        "neuroblend20" => build_neuroblend20(classes),
        "neuroblend18" => build_neuroblend18(classes),
        other => {
            if let Some(name) = other.strip_prefix("blendmixer-") {
                MixerSpec::preset(name)
                    .ok_or_else(|| Error::InvalidMixer(format!("unknown preset {name:?}")))
                    .and_then(|spec| {
                        build_blendmixer(&spec, FcPrecision::parse(fc_precision)?, classes)
                    })
            } else if let Some(name) = other.strip_prefix("mlpmixer-") {
                MixerSpec::preset(name)
                    .ok_or_else(|| Error::InvalidMixer(format!("unknown preset {name:?}")))
                    .and_then(|spec| build_blendmixer(&spec, FcPrecision::ALL_FIXED, classes))
            } else {
                Err(Error::InvalidBlock(format!("unknown architecture {other:?}")))
            }
        }
    }
    .map_err(to_py_err)?;
    let graph = random_init(graph, seed).map_err(to_py_err)?;
    Ok(PyModel { graph })
}

/// Deterministic input tensor on the fixed-point grid.
#[pyfunction]
#[pyo3(signature = (shape, seed=0, frac_bits=8))]
fn seeded_input(shape: Vec<usize>, seed: u64, frac_bits: u8) -> Vec<f32> {
    random_input(&shape, seed, frac_bits)
}

#[pymodule]
fn neuroblend_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_model, m)?)?;
    m.add_function(wrap_pyfunction!(seeded_input, m)?)?;
    Ok(())
}
