use std::path::Path;

use idm_core::config::RunConfig;
use idm_core::data::{load_dataset, CsvSchema};
use idm_core::evaluation::{bootstrap_stability, run_study, Method, SelectionTally, StudyConfig, StudyReport};
use idm_core::inference::{intensity_ratios, FittedModel};
use idm_core::optimizer::PenaltyConfig;
use idm_core::simulation::{read_truth, simulate_scenario, write_truth, Scenario, ScenarioConfig};
use idm_core::workflow::{fit_dataset, load_for_model, predict_dataset, refit_dataset};
use idm_core::{IdmError, LikelihoodMode, Result, Transition};
use serde::Serialize;

use crate::manifest::{Outcome, RunManifest};
use crate::{BootstrapArgs, Cli, Command, EvaluateArgs, FitArgs, PredictArgs, RefitArgs, SimulateArgs};

pub fn run(cli: &Cli, manifest: &mut RunManifest) -> Outcome {
    match dispatch(cli, manifest) {
        Ok(outcome) => outcome,
        Err(e) => Outcome::Failed(e),
    }
}

fn dispatch(cli: &Cli, manifest: &mut RunManifest) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads {
        cfg.threads = Some(n);
    }
    cfg.validate()?;
    let threads = cfg.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| IdmError::Internal(format!("thread pool: {e}")))?;
    manifest.set_threads(threads);
    std::fs::create_dir_all(cli.command.out()).map_err(|e| IdmError::io(cli.command.out(), e))?;
    match &cli.command {
        Command::Simulate(a) => simulate(a, &mut cfg, manifest),
        Command::Fit(a) => fit(a, &cfg, manifest),
        Command::Refit(a) => refit(a, &cfg, manifest),
        Command::Predict(a) => predict(a, &cfg, manifest),
        Command::Evaluate(a) => evaluate(a, &mut cfg, manifest),
        Command::Bootstrap(a) => bootstrap(a, &mut cfg, manifest),
    }
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T], manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| IdmError::io(&path, e))?;
    manifest.output(name);
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(&path, text + "\n").map_err(|e| IdmError::io(&path, e))?;
    manifest.output(name);
    Ok(())
}

fn simulate(a: &SimulateArgs, cfg: &mut RunConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    manifest.set_config(cfg, Some(cfg.seed));
    let mut sc = ScenarioConfig::preset(Scenario::parse(&a.scenario)?);
    sc = sc.clone().with_sizes(a.n_train.unwrap_or(sc.n_train), a.n_test.unwrap_or(sc.n_test));
    let sim = simulate_scenario(&sc, cfg.seed)?;
    for (name, sample) in [("train", &sim.train), ("test", &sim.test)] {
        idm_core::data::write_dataset(&a.out.join(format!("{name}.csv")), &sample.data)?;
        manifest.output(&format!("{name}.csv"));
        write_truth(&a.out.join(format!("{name}_truth.csv")), &sample.truth)?;
        manifest.output(&format!("{name}_truth.csv"));
    }
    #[derive(Serialize)]
    struct ScenarioEcho<'a> {
        seed: u64,
        config: &'a ScenarioConfig,
        true_support: [Vec<usize>; 3],
    }
    let echo = ScenarioEcho {
        seed: cfg.seed,
        config: &sc,
        true_support: sc.true_support(),
    };
    write_json(&a.out, "scenario.json", &echo, manifest)?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    n_candidates: usize,
    n_preselection_fits: usize,
    n_failed: usize,
    best_bic: f64,
    selected_penalty: PenaltyConfig,
    shortlists: &'a [idm_core::selection::Shortlist],
}

fn fit(a: &FitArgs, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    manifest.set_config(cfg, None);
    let data = load_dataset(&a.data, &CsvSchema::default(), a.standardize)?;
    let truth = a.truth.as_deref().map(read_truth).transpose()?;
    let penalty = match (a.select, a.a, a.lambda) {
        (true, _, _) => None,
        (false, Some(alpha), Some(l)) => Some(PenaltyConfig::new(alpha, l)?),
        _ => return Err(IdmError::InvalidInput("fit needs either --select or both --a and --lambda".into())),
    };
    let out = fit_dataset(&data, cfg, penalty, truth.as_deref())?;
    if let Some(sel) = &out.selection {
        write_csv(&a.out, "bic_table.csv", &sel.bic_table, manifest)?;
        let summary = SelectionSummary {
            n_candidates: sel.bic_table.len(),
            n_preselection_fits: sel.n_preselection_fits,
            n_failed: sel.n_failed,
            best_bic: sel.best_bic,
            selected_penalty: sel.selected_penalty,
            shortlists: &sel.shortlists,
        };
        write_json(&a.out, "selection.json", &summary, manifest)?;
    }
    out.model.save(&a.out.join("model.json"))?;
    manifest.output("model.json");
    Ok(if out.fit.converged {
        Outcome::Ok
    } else {
        Outcome::NotConverged("the penalized fit did not converge".into())
    })
}

#[derive(Serialize)]
struct RatioRow {
    transition: String,
    covariate: String,
    beta: f64,
    se: f64,
    ratio: f64,
    ci_low: f64,
    ci_high: f64,
}

fn refit(a: &RefitArgs, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    manifest.set_config(cfg, None);
    let model = FittedModel::load(&a.model)?;
    let data = load_for_model(&a.data, &model)?;
    let truth = a.truth.as_deref().map(read_truth).transpose()?;
    let (refit, fit) = refit_dataset(&data, &model, cfg, truth.as_deref())?;
    refit.save(&a.out.join("refit.json"))?;
    manifest.output("refit.json");
    let rows: Vec<RatioRow> = intensity_ratios(&fit, &model.column_names)?
        .into_iter()
        .map(|r| RatioRow {
            transition: r.transition.label().into(),
            covariate: r.covariate,
            beta: r.beta,
            se: r.se,
            ratio: r.ratio,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
        })
        .collect();
    write_csv(&a.out, "ratios.csv", &rows, manifest)?;
    Ok(if fit.converged {
        Outcome::Ok
    } else {
        Outcome::NotConverged("the refit did not converge".into())
    })
}

#[derive(Serialize)]
struct ProbabilityRow {
    id: String,
    horizon: f64,
    f01: f64,
    f02: f64,
    survival: f64,
}

fn predict(a: &PredictArgs, cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    manifest.set_config(cfg, None);
    let model = FittedModel::load(&a.model)?;
    let data = load_for_model(&a.input, &model)?;
    let probs = predict_dataset(&model, &data, a.horizon, cfg)?;
    let rows: Vec<ProbabilityRow> = probs
        .iter()
        .zip(&data.records)
        .map(|(pr, rec)| ProbabilityRow {
            id: rec.id.clone(),
            horizon: a.horizon,
            f01: pr.f01,
            f02: pr.f02,
            survival: pr.survival,
        })
        .collect();
    write_csv(&a.out, "probabilities.csv", &rows, manifest)?;
    Ok(Outcome::Ok)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join_names(idx: &[usize], names: &[String]) -> String {
    idx.iter().map(|&j| names[j].as_str()).collect::<Vec<_>>().join(";")
}

fn write_report(dir: &Path, report: &StudyReport, names: &[String], manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["replicate".to_string(), "seed".into(), "method".into(), "msep".into()];
    for tr in Transition::ALL {
        header.push(format!("tpr{}", tr.label()));
        header.push(format!("fpr{}", tr.label()));
        header.push(format!("active{}", tr.label()));
    }
    header.extend(["converged".to_string(), "monotone".into(), "error".into()]);
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![row.replicate.to_string(), row.seed.to_string(), row.method.label().into(), fmt_opt(row.msep)];
        for tr in Transition::ALL {
            let t = tr.index();
            rec.push(fmt_opt(row.rates[t].tpr));
            rec.push(fmt_opt(row.rates[t].fpr));
            rec.push(join_names(&row.active_set[t], names));
        }
        rec.push(row.converged.to_string());
        rec.push(row.objective_monotone.to_string());
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| IdmError::io(&path, e))?;
    manifest.output("report.csv");
    Ok(())
}

#[derive(Serialize)]
struct TallyLine {
    method: String,
    transition: String,
    covariate: String,
    count: usize,
    proportion: f64,
}

fn tally_lines(tally: &SelectionTally, names: &[String], denominators: &dyn Fn(&str) -> usize) -> Vec<TallyLine> {
    let mut out = Vec::new();
    for row in &tally.rows {
        let denom = denominators(&row.method).max(1) as f64;
        for (j, &count) in row.counts.iter().enumerate() {
            out.push(TallyLine {
                method: row.method.clone(),
                transition: row.transition.label().into(),
                covariate: names[j].clone(),
                count,
                proportion: count as f64 / denom,
            });
        }
    }
    out
}

fn evaluate(a: &EvaluateArgs, cfg: &mut RunConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    manifest.set_config(cfg, Some(cfg.seed));
    let methods = a.methods.iter().map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>>>()?;
    let scenario = ScenarioConfig::preset(Scenario::parse(&a.scenario)?).with_sizes(a.n_train, a.n_test);
    let study = StudyConfig {
        scenario,
        methods,
        n_replicates: a.replicates,
        seed: cfg.seed,
        baseline: cfg.baseline.clone(),
        quadrature_points: cfg.quadrature.points,
        grid: cfg.grid.clone(),
        conv: cfg.study_convergence(),
    };
    write_json(&a.out, "config_echo.json", &study, manifest)?;
    let report = run_study(&study)?;
    let names = idm_core::data::CovariateMatrix::default_names(study.scenario.p);
    write_report(&a.out, &report, &names, manifest)?;
    let ok = |m: &str| report.rows.iter().filter(|r| r.method.label() == m && r.error.is_none()).count();
    write_csv(&a.out, "tally.csv", &tally_lines(&report.tally, &names, &ok), manifest)?;
    Ok(if report.n_failed > 0 {
        Outcome::NotConverged(format!("{} replicate fits failed", report.n_failed))
    } else {
        Outcome::Ok
    })
}

fn bootstrap(a: &BootstrapArgs, cfg: &mut RunConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    manifest.set_config(cfg, Some(cfg.seed));
    let model = FittedModel::load(&a.model)?;
    if model.spec.mode != LikelihoodMode::Interval {
        return Err(IdmError::InvalidInput("bootstrap supports interval-censored models only".into()));
    }
    let penalty = model
        .penalty
        .ok_or_else(|| IdmError::InvalidInput("bootstrap needs a penalized model (fit output, not refit)".into()))?;
    let data = load_for_model(&a.data, &model)?;
    let quad = cfg.quadrature_rule()?;
    let res = bootstrap_stability(&data, &model.spec.baseline, &quad, &penalty, a.n_boot, cfg.seed, &cfg.fit_convergence())?;
    let n_ok = res.tally.n_replicates;
    write_csv(&a.out, "bootstrap_tally.csv", &tally_lines(&res.tally, &model.column_names, &|_| n_ok), manifest)?;
    Ok(if res.n_failed > 0 {
        Outcome::NotConverged(format!("{} of {} resample fits failed", res.n_failed, res.n_boot))
    } else {
        Outcome::Ok
    })
}
