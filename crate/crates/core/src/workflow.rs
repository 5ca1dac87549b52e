//! Dataset-level entry points shared by the command line and the bindings.

use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{load_dataset_scaled, CsvSchema, Dataset, ExactDataset, PhmDataset, Scaling};
use crate::error::{IdmError, Result};
use crate::inference::{refit_mle, state_probabilities, FittedModel, MLEFit, StateProbabilities};
use crate::likelihood::{LikelihoodProblem, Observations};
use crate::model::{CovariateMasks, LikelihoodMode, ModelSpec};
use crate::optimizer::{crude_start, fit_inner, fit_null, FitResult, PenaltyConfig};
use crate::selection::{bic, select_model, SelectionResult};
use crate::simulation::{prepare_exact_dataset, prepare_phm_dataset, SimulatedSample, TruthRecord};

/// Data behind the non-interval likelihoods.
pub enum Prepared {
    Interval,
    Exact(ExactDataset),
    Phm(PhmDataset),
}

impl Prepared {
    pub fn new(data: &Dataset, mode: LikelihoodMode, truth: Option<&[TruthRecord]>) -> Result<Self> {
        Ok(match mode {
            LikelihoodMode::Interval => Prepared::Interval,
            LikelihoodMode::Phm => Prepared::Phm(prepare_phm_dataset(data)),
            LikelihoodMode::Exact => {
                let truth = truth.ok_or_else(|| IdmError::InvalidInput("the exact-time likelihood needs the truth file".into()))?;
                let sample = SimulatedSample {
                    data: data.clone(),
                    truth: truth.to_vec(),
                };
                Prepared::Exact(prepare_exact_dataset(&sample)?)
            }
        })
    }

    pub fn observations<'a>(&'a self, data: &'a Dataset) -> Observations<'a> {
        match self {
            Prepared::Interval => Observations::Interval(data),
            Prepared::Exact(d) => Observations::Exact(d),
            Prepared::Phm(d) => Observations::Phm(d),
        }
    }
}

pub struct FitOutput {
    pub model: FittedModel,
    pub fit: FitResult,
    /// Present when the penalty was chosen by the grid search.
    pub selection: Option<SelectionResult>,
}

fn to_model(data: &Dataset, mode: LikelihoodMode, cfg: &RunConfig, fit: &FitResult, bic: f64) -> FittedModel {
    let (masks, params) = fit.active_params(data.n_covariates());
    FittedModel {
        spec: ModelSpec::new(cfg.baseline.clone(), masks, mode),
        params,
        column_names: data.covariates.column_names.clone(),
        standardization: data.standardization.clone(),
        n_subjects: data.len(),
        loglik: fit.unpenalized_ll,
        converged: fit.converged,
        penalty: Some(fit.penalty),
        bic: Some(bic),
        covariance: None,
        labels: None,
    }
}

/// Penalized fit at `penalty`, or BIC selection over `cfg.grid` when
/// `penalty` is `None`.
pub fn fit_dataset(
    data: &Dataset,
    cfg: &RunConfig,
    penalty: Option<PenaltyConfig>,
    truth: Option<&[TruthRecord]>,
) -> Result<FitOutput> {
    let mode = cfg.likelihood.mode;
    let prepared = Prepared::new(data, mode, truth)?;
    let quad = cfg.quadrature_rule()?;
    let prob = LikelihoodProblem::new(prepared.observations(data), &cfg.baseline, &quad)?;
    let conv = cfg.fit_convergence();
    match penalty {
        None => {
            let sel = select_model(&prob, &cfg.grid, &conv)?;
            let model = to_model(data, mode, cfg, &sel.best_fit, sel.best_bic);
            Ok(FitOutput {
                model,
                fit: sel.best_fit.clone(),
                selection: Some(sel),
            })
        }
        Some(penalty) => {
            penalty.validate()?;
            let masks = CovariateMasks::all(prob.p, prob.transitions());
            let mut init = crude_start(&prob, &masks);
            init.theta = fit_null(&prob, &conv)?.params.theta;
            let fit = fit_inner(&prob, &masks, &penalty, &conv, &init)?;
            let b = bic(&fit, data.len())?;
            Ok(FitOutput {
                model: to_model(data, mode, cfg, &fit, b),
                fit,
                selection: None,
            })
        }
    }
}

/// Unpenalized refit on the support of `model`, warm-started from it.
pub fn refit_dataset(data: &Dataset, model: &FittedModel, cfg: &RunConfig, truth: Option<&[TruthRecord]>) -> Result<(FittedModel, MLEFit)> {
    let prepared = Prepared::new(data, model.spec.mode, truth)?;
    let quad = cfg.quadrature_rule()?;
    let prob = LikelihoodProblem::new(prepared.observations(data), &model.spec.baseline, &quad)?;
    let fit = refit_mle(&prob, &model.spec.masks, &cfg.fit_convergence(), Some(&model.params), &model.column_names)?;
    let out = FittedModel::from_refit(fit.clone(), model.column_names.clone(), model.standardization.clone(), data.len());
    Ok((out, fit))
}

/// Load a CSV with the covariate scaling stored in `model`.
pub fn load_for_model(path: &Path, model: &FittedModel) -> Result<Dataset> {
    let scaling = match &model.standardization {
        Some(s) => Scaling::Apply(s.clone()),
        None => Scaling::Raw,
    };
    let data = load_dataset_scaled(path, &CsvSchema::default(), scaling)?;
    if data.covariates.column_names != model.column_names {
        return Err(IdmError::InvalidInput(format!(
            "covariate columns of {} do not match the model",
            path.display()
        )));
    }
    Ok(data)
}

/// State probabilities at `horizon` for every subject, in input order.
pub fn predict_dataset(model: &FittedModel, data: &Dataset, horizon: f64, cfg: &RunConfig) -> Result<Vec<StateProbabilities>> {
    let quad = cfg.quadrature_rule()?;
    (0..data.len())
        .into_par_iter()
        .map(|i| state_probabilities(&model.params, &model.spec, data.covariates.row(i), horizon, &quad))
        .collect()
}
