use std::path::PathBuf;

use idm_core::config::RunConfig;
use idm_core::data::{load_dataset, write_dataset, CsvSchema};
use idm_core::inference::{intensity_ratios, FittedModel};
use idm_core::optimizer::PenaltyConfig;
use idm_core::simulation::{read_truth, simulate_scenario, write_truth, Scenario, ScenarioConfig};
use idm_core::workflow::{fit_dataset, load_for_model, predict_dataset, refit_dataset};
use idm_core::IdmError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: IdmError) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn config(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        Some(t) => RunConfig::from_toml_str(t).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

fn model_from_json(text: &str) -> PyResult<FittedModel> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn model_to_json(model: &FittedModel) -> PyResult<String> {
    serde_json::to_string(model).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Simulate a preset scenario into `out_dir` (train/test data and truth CSVs).
#[pyfunction]
#[pyo3(signature = (scenario, seed, out_dir, n_train=None, n_test=None))]
fn simulate(scenario: &str, seed: u64, out_dir: PathBuf, n_train: Option<usize>, n_test: Option<usize>) -> PyResult<Vec<String>> {
    let sc = ScenarioConfig::preset(Scenario::parse(scenario).map_err(to_py)?);
    let sc = sc.clone().with_sizes(n_train.unwrap_or(sc.n_train), n_test.unwrap_or(sc.n_test));
    let sim = simulate_scenario(&sc, seed).map_err(to_py)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut written = Vec::new();
    for (name, sample) in [("train", &sim.train), ("test", &sim.test)] {
        let data = out_dir.join(format!("{name}.csv"));
        let truth = out_dir.join(format!("{name}_truth.csv"));
        write_dataset(&data, &sample.data).map_err(to_py)?;
        write_truth(&truth, &sample.truth).map_err(to_py)?;
        written.push(data.display().to_string());
        written.push(truth.display().to_string());
    }
    Ok(written)
}

/// Fit a penalized model and return it as JSON. Without `a` and `lambdas`
/// the penalty is chosen by BIC over the configured grid.
#[pyfunction]
#[pyo3(signature = (data, a=None, lambdas=None, standardize=true, config_toml=None, truth=None))]
fn fit(
    py: Python<'_>,
    data: PathBuf,
    a: Option<f64>,
    lambdas: Option<[f64; 3]>,
    standardize: bool,
    config_toml: Option<&str>,
    truth: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let penalty = match (a, lambdas) {
        (Some(a), Some(l)) => Some(PenaltyConfig::new(a, l).map_err(to_py)?),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("give both `a` and `lambdas`, or neither")),
    };
    let out = py.allow_threads(|| -> idm_core::Result<FittedModel> {
        let data = load_dataset(&data, &CsvSchema::default(), standardize)?;
        let truth = truth.as_deref().map(read_truth).transpose()?;
        Ok(fit_dataset(&data, &cfg, penalty, truth.as_deref())?.model)
    });
    model_to_json(&out.map_err(to_py)?)
}

/// Unpenalized refit on the support of `model_json`; returns the refit model
/// as JSON and `(transition, covariate, ratio, ci_low, ci_high)` rows.
#[pyfunction]
#[pyo3(signature = (data, model_json, config_toml=None))]
#[allow(clippy::type_complexity)]
fn refit(py: Python<'_>, data: PathBuf, model_json: &str, config_toml: Option<&str>) -> PyResult<(String, Vec<(String, String, f64, f64, f64)>)> {
    let cfg = config(config_toml)?;
    let model = model_from_json(model_json)?;
    let (out, fit) = py
        .allow_threads(|| {
            let data = load_for_model(&data, &model)?;
            refit_dataset(&data, &model, &cfg, None)
        })
        .map_err(to_py)?;
    let ratios = intensity_ratios(&fit, &model.column_names)
        .map_err(to_py)?
        .into_iter()
        .map(|r| (r.transition.label().to_string(), r.covariate, r.ratio, r.ci_low, r.ci_high))
        .collect();
    Ok((model_to_json(&out)?, ratios))
}

/// `(id, f01, f02, survival)` at `horizon` for every subject of `data`.
#[pyfunction]
#[pyo3(signature = (model_json, data, horizon, config_toml=None))]
fn predict(model_json: &str, data: PathBuf, horizon: f64, config_toml: Option<&str>) -> PyResult<Vec<(String, f64, f64, f64)>> {
    let cfg = config(config_toml)?;
    let model = model_from_json(model_json)?;
    let data = load_for_model(&data, &model).map_err(to_py)?;
    let probs = predict_dataset(&model, &data, horizon, &cfg).map_err(to_py)?;
    Ok(data
        .records
        .iter()
        .zip(probs)
        .map(|(rec, p)| (rec.id.clone(), p.f01, p.f02, p.survival))
        .collect())
}

#[pymodule]
fn idm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", idm_core::VERSION)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(refit, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
