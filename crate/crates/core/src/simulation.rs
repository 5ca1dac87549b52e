//! Synthetic illness-death cohorts with scheduled visits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    CovariateMatrix, Dataset, ExactDataset, ExactRecord, ObservationRecord, PhmCause, PhmDataset, PhmRecord,
};
use crate::error::{IdmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    A1,
    A2,
    B1,
    B2,
    C1,
    C2,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [Scenario::A1, Scenario::A2, Scenario::B1, Scenario::B2, Scenario::C1, Scenario::C2];

    pub fn parse(s: &str) -> Result<Scenario> {
        let norm = s.replace('.', "").to_ascii_uppercase();
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.label() == norm)
            .ok_or_else(|| IdmError::InvalidInput(format!("unknown scenario `{s}`")))
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::A1 => "A1",
            Scenario::A2 => "A2",
            Scenario::B1 => "B1",
            Scenario::B2 => "B2",
            Scenario::C1 => "C1",
            Scenario::C2 => "C2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Correlation {
    Independent,
    /// `corr(z_i, z_j) = rho^|i-j|` within consecutive blocks, zero across.
    GroupToeplitz { rho: f64, block: usize },
}

/// True regression coefficients (1-based covariate index, value).
const BETA_01: [(usize, f64); 7] = [(1, 0.8), (2, 0.8), (3, 0.8), (11, -0.8), (12, -0.5), (13, -0.5), (42, -0.5)];
const BETA_02: [(usize, f64); 9] = [
    (2, 0.8),
    (3, 0.8),
    (13, 0.5),
    (21, -0.8),
    (22, -0.5),
    (31, 0.8),
    (32, 0.8),
    (42, 0.5),
    (43, 0.5),
];
const BETA_12: [(usize, f64); 8] = [
    (2, 0.8),
    (12, -0.5),
    (22, -0.5),
    (23, -0.8),
    (32, 0.8),
    (33, 0.8),
    (41, -0.5),
    (42, -0.5),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_train: usize,
    pub n_test: usize,
    pub p: usize,
    pub visit_interval: f64,
    /// Follow-up visits are shifted by `U(0, jitter)`.
    pub jitter: f64,
    pub dropout_per_visit: f64,
    pub admin_end: f64,
    pub weibull_theta1: [f64; 3],
    pub weibull_theta2: [f64; 3],
    /// Dense coefficients of length `p` per transition.
    pub beta_true: [Vec<f64>; 3],
    pub correlation: Correlation,
}

impl ScenarioConfig {
    pub fn preset(scenario: Scenario) -> Self {
        use Scenario::*;
        let (theta1, theta2, interval) = match scenario {
            A1 | A2 => ([2.0, 2.5, 2.5], [0.015, 0.025, 0.04], 2.5),
            B1 | B2 => ([3.4; 3], [0.075, 0.085, 0.07], 2.5),
            C1 | C2 => ([3.4; 3], [0.08; 3], 4.5),
        };
        let correlation = match scenario {
            A1 | B1 | C1 => Correlation::Independent,
            A2 | B2 | C2 => Correlation::GroupToeplitz { rho: 0.5, block: 10 },
        };
        let p = 50;
        let dense = |pairs: &[(usize, f64)]| {
            let mut b = vec![0.0; p];
            for &(j, v) in pairs {
                b[j - 1] = v;
            }
            b
        };
        Self {
            scenario,
            n_train: 2000,
            n_test: 2000,
            p,
            visit_interval: interval,
            jitter: 0.5,
            dropout_per_visit: 0.05,
            admin_end: 18.0,
            weibull_theta1: theta1,
            weibull_theta2: theta2,
            beta_true: [dense(&BETA_01), dense(&BETA_02), dense(&BETA_12)],
            correlation,
        }
    }

    pub fn with_sizes(mut self, n_train: usize, n_test: usize) -> Self {
        self.n_train = n_train;
        self.n_test = n_test;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.beta_true.iter().any(|b| b.len() != self.p) {
            return Err(IdmError::InvalidInput("beta_true must have p entries per transition".into()));
        }
        if let Correlation::GroupToeplitz { rho, block } = self.correlation {
            if block == 0 || self.p % block != 0 {
                return Err(IdmError::InvalidInput(format!("p = {} is not a multiple of block {block}", self.p)));
            }
            if !(-1.0 < rho && rho < 1.0) {
                return Err(IdmError::InvalidInput(format!("correlation {rho} outside (-1, 1)")));
            }
        }
        let positive = self.weibull_theta1.iter().chain(&self.weibull_theta2).all(|v| *v > 0.0);
        if !positive || !(self.visit_interval > 0.0 && self.admin_end > 0.0) {
            return Err(IdmError::InvalidInput("scenario parameters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_per_visit) || self.jitter < 0.0 {
            return Err(IdmError::InvalidInput("invalid dropout or jitter".into()));
        }
        Ok(())
    }

    /// True support per transition as 0-based covariate indices.
    pub fn true_support(&self) -> [Vec<usize>; 3] {
        [0, 1, 2].map(|t| (0..self.p).filter(|&j| self.beta_true[t][j] != 0.0).collect())
    }
}

/// Latent event times. `t12` is infinite when illness does not precede death.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentTimes {
    pub t01: f64,
    pub t02: f64,
    pub t12: f64,
}

/// Generating-process facts kept out of the observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub t01: f64,
    pub t02: f64,
    pub t12: Option<f64>,
    /// Illness before death and before the end of the study.
    pub ill: bool,
    /// `min(t01, t02, admin_end)`: the prediction horizon.
    pub horizon: f64,
    /// Ill, but the first visit after onset came at or after death.
    pub undiagnosed_by_death: bool,
}

#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub data: Dataset,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone)]
pub struct SimulatedScenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub train: SimulatedSample,
    pub test: SimulatedSample,
}

/// Per-subject generator: stream `stream` of a ChaCha keyed by `seed`.
pub fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn covariate_row<R: Rng>(p: usize, correlation: Correlation, rng: &mut R, out: &mut Vec<f64>) {
    match correlation {
        Correlation::Independent => out.extend((0..p).map(|_| rng.sample::<f64, _>(StandardNormal))),
        Correlation::GroupToeplitz { rho, block } => {
            // AR(1) within a block has exactly the Toeplitz correlation.
            let s = (1.0 - rho * rho).sqrt();
            let mut prev = 0.0;
            for j in 0..p {
                let e: f64 = rng.sample(StandardNormal);
                prev = if j % block == 0 { e } else { rho * prev + s * e };
                out.push(prev);
            }
        }
    }
}

pub fn gen_covariates<R: Rng>(n: usize, p: usize, correlation: Correlation, rng: &mut R) -> Result<CovariateMatrix> {
    let mut values = Vec::with_capacity(n * p);
    for _ in 0..n {
        covariate_row(p, correlation, rng, &mut values);
    }
    CovariateMatrix::new(n, p, values, CovariateMatrix::default_names(p))
}

/// Weibull inversion `T = [(-log U) / exp(eta)]^(1/shape) / rate`.
pub fn weibull_inverse(u: f64, shape: f64, rate: f64, eta: f64) -> f64 {
    ((-u.ln()) / eta.exp()).powf(1.0 / shape) / rate
}

/// Uniform on (0, 1], so `ln` is finite.
fn open_uniform<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Latent times under proportional Weibull intensities. The 1->2 intensity
/// runs on the study time scale, so `t12` is drawn from the conditional law
/// given survival to `t01`.
pub fn sample_transition_times<R: Rng>(
    theta1: [f64; 3],
    theta2: [f64; 3],
    beta_true: &[Vec<f64>; 3],
    z: &[f64],
    rng: &mut R,
) -> LatentTimes {
    let eta: [f64; 3] = [0, 1, 2].map(|t| beta_true[t].iter().zip(z).map(|(b, x)| b * x).sum());
    let (u01, u02, u12) = (open_uniform(rng), open_uniform(rng), open_uniform(rng));
    let t01 = weibull_inverse(u01, theta1[0], theta2[0], eta[0]);
    let t02 = weibull_inverse(u02, theta1[1], theta2[1], eta[1]);
    let t12 = if t01 < t02 {
        let a_at_onset = (theta2[2] * t01).powf(theta1[2]);
        (a_at_onset + (-u12.ln()) / eta[2].exp()).powf(1.0 / theta1[2]) / theta2[2]
    } else {
        f64::INFINITY
    };
    LatentTimes { t01, t02, t12 }
}

/// Entry at 0, then jittered follow-ups `k * interval + U(0, jitter)`
/// capped at `admin_end`; each follow-up is preceded by a dropout draw.
pub fn build_visit_schedule<R: Rng>(interval: f64, jitter: f64, dropout: f64, admin_end: f64, rng: &mut R) -> Vec<f64> {
    let mut visits = vec![0.0];
    let mut k = 1;
    while k as f64 * interval <= admin_end + 1e-12 {
        let drop_draw: f64 = rng.gen();
        let jitter_draw: f64 = rng.gen();
        if drop_draw < dropout {
            break;
        }
        visits.push((k as f64 * interval + jitter * jitter_draw).min(admin_end));
        k += 1;
    }
    visits
}

/// Observed record and truth from latent times and a visit schedule.
pub fn derive_observed(id: &str, latent: LatentTimes, visits: &[f64], admin_end: f64) -> (ObservationRecord, TruthRecord) {
    let LatentTimes { t01, t02, t12 } = latent;
    let ti = t01.min(t02).min(admin_end);
    let ill = ti == t01 && t01 < admin_end;
    let l = if ill {
        visits.iter().copied().filter(|&v| v < ti).fold(0.0, f64::max)
    } else {
        visits.iter().copied().filter(|&v| v <= ti).fold(0.0, f64::max)
    };
    let r = visits.iter().copied().find(|&v| v >= ti);
    let diagnosed = ill && r.is_some_and(|r| r < t12.min(admin_end));
    let (td, died) = if ill {
        (t12.min(admin_end), t12 < admin_end)
    } else {
        (t02.min(admin_end), t02 < admin_end)
    };
    let rec = ObservationRecord {
        id: id.to_string(),
        v0: 0.0,
        l,
        r: if diagnosed { r } else { None },
        delta_i: diagnosed,
        t: td,
        delta_d: died,
    };
    let truth = TruthRecord {
        id: id.to_string(),
        t01,
        t02,
        t12: t12.is_finite().then_some(t12),
        ill,
        horizon: ti,
        undiagnosed_by_death: ill && !diagnosed && r.is_some_and(|r| r >= t12),
    };
    (rec, truth)
}

/// Competing-risks data with mid-point illness times and the 3-year death rule.
pub fn prepare_phm_dataset(data: &Dataset) -> PhmDataset {
    let records = data
        .records
        .iter()
        .map(|rec| {
            let (time, cause) = match (rec.delta_i, rec.delta_d) {
                (true, _) => (0.5 * (rec.l + rec.r.expect("diagnosed record has r")), PhmCause::Illness),
                (false, true) if rec.t - rec.l < 3.0 => (rec.t, PhmCause::Death),
                _ => (rec.l, PhmCause::None),
            };
            PhmRecord {
                id: rec.id.clone(),
                time,
                cause,
            }
        })
        .collect();
    PhmDataset {
        records,
        covariates: data.covariates.clone(),
    }
}

/// Exact-onset data built from the truth: every truly ill subject carries
/// the latent onset time.
pub fn prepare_exact_dataset(sample: &SimulatedSample) -> Result<ExactDataset> {
    let records = sample
        .data
        .records
        .iter()
        .zip(&sample.truth)
        .map(|(rec, tr)| ExactRecord {
            id: rec.id.clone(),
            v0: rec.v0,
            onset: tr.ill.then_some(tr.t01),
            t: rec.t,
            delta_d: rec.delta_d,
        })
        .collect();
    ExactDataset::new(records, sample.data.covariates.clone())
}

fn simulate_sample(cfg: &ScenarioConfig, seed: u64, n: usize, stream_base: u64, prefix: &str) -> Result<SimulatedSample> {
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * cfg.p);
    let mut row = Vec::with_capacity(cfg.p);
    for i in 0..n {
        let mut rng = subject_rng(seed, stream_base + i as u64);
        row.clear();
        covariate_row(cfg.p, cfg.correlation, &mut rng, &mut row);
        let latent = sample_transition_times(cfg.weibull_theta1, cfg.weibull_theta2, &cfg.beta_true, &row, &mut rng);
        let visits = build_visit_schedule(cfg.visit_interval, cfg.jitter, cfg.dropout_per_visit, cfg.admin_end, &mut rng);
        let (rec, tr) = derive_observed(&format!("{prefix}{}", i + 1), latent, &visits, cfg.admin_end);
        records.push(rec);
        truth.push(tr);
        values.extend_from_slice(&row);
    }
    let cov = CovariateMatrix::new(n, cfg.p, values, CovariateMatrix::default_names(cfg.p))?;
    Ok(SimulatedSample {
        data: Dataset::new(records, cov)?,
        truth,
    })
}

const TEST_STREAM_BASE: u64 = 1 << 40;

pub fn simulate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<SimulatedScenario> {
    cfg.validate()?;
    Ok(SimulatedScenario {
        config: cfg.clone(),
        seed,
        train: simulate_sample(cfg, seed, cfg.n_train, 0, "tr")?,
        test: simulate_sample(cfg, seed, cfg.n_test, TEST_STREAM_BASE, "te")?,
    })
}

/// Event counts used to compare against the scenario description table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub n: usize,
    pub true_ill: usize,
    pub true_healthy_death: usize,
    pub true_ill_death: usize,
    pub observed_ill: usize,
    pub observed_healthy_death: usize,
    pub observed_ill_death: usize,
    pub undiagnosed_by_death: usize,
}

impl EventSummary {
    pub fn of(sample: &SimulatedSample) -> Self {
        let mut s = EventSummary {
            n: sample.data.len(),
            ..Default::default()
        };
        for (rec, tr) in sample.data.records.iter().zip(&sample.truth) {
            s.true_ill += tr.ill as usize;
            s.true_healthy_death += (!tr.ill && rec.delta_d) as usize;
            s.true_ill_death += (tr.ill && rec.delta_d) as usize;
            s.observed_ill += rec.delta_i as usize;
            s.observed_healthy_death += (!rec.delta_i && rec.delta_d) as usize;
            s.observed_ill_death += (rec.delta_i && rec.delta_d) as usize;
            s.undiagnosed_by_death += tr.undiagnosed_by_death as usize;
        }
        s
    }

    pub fn fraction(&self, count: usize) -> f64 {
        count as f64 / self.n as f64
    }

    /// Undiagnosed-because-of-death share among the truly ill.
    pub fn undiagnosed_share(&self) -> f64 {
        self.undiagnosed_by_death as f64 / self.true_ill.max(1) as f64
    }
}

pub fn write_truth(path: &Path, truth: &[TruthRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| IdmError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["id", "t01", "t02", "t12", "ill", "horizon", "undiagnosed_by_death"])?;
    for t in truth {
        w.write_record([
            t.id.clone(),
            t.t01.to_string(),
            t.t02.to_string(),
            t.t12.map(|v| v.to_string()).unwrap_or_default(),
            (t.ill as u8).to_string(),
            t.horizon.to_string(),
            (t.undiagnosed_by_death as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| IdmError::io(path, e))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let file = std::fs::File::open(path).map_err(|e| IdmError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize, name: &str| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| IdmError::Parse {
                    row: (row + 1).to_string(),
                    field: name.into(),
                    value: rec.get(i).unwrap_or("").into(),
                })
        };
        out.push(TruthRecord {
            id: rec.get(0).unwrap_or("").to_string(),
            t01: field(1, "t01")?,
            t02: field(2, "t02")?,
            t12: if rec.get(3).unwrap_or("").is_empty() { None } else { Some(field(3, "t12")?) },
            ill: field(4, "ill")? != 0.0,
            horizon: field(5, "horizon")?,
            undiagnosed_by_death: field(6, "undiagnosed_by_death")? != 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(t01: f64, t02: f64, t12: f64) -> LatentTimes {
        LatentTimes { t01, t02, t12 }
    }

    #[test]
    fn diagnosed_walkthrough() {
        let visits: Vec<f64> = (0..8).map(|k| k as f64 * 2.5).collect();
        let (rec, _) = derive_observed("a", latent(3.0, 10.0, 20.0), &visits, 18.0);
        assert_eq!((rec.l, rec.r, rec.delta_i, rec.t, rec.delta_d), (2.5, Some(5.0), true, 18.0, false));
    }

    #[test]
    fn death_before_diagnosis_visit() {
        let visits = [0.0, 4.5, 9.0, 13.5, 18.0];
        let (rec, truth) = derive_observed("a", latent(3.0, 10.0, 4.0), &visits, 18.0);
        assert!(!rec.delta_i && rec.delta_d);
        assert_eq!(rec.t, 4.0);
        assert!(truth.ill && truth.undiagnosed_by_death);
        rec.validate().unwrap();
    }

    #[test]
    fn direct_death() {
        let visits = [0.0, 2.5, 5.0];
        let (rec, truth) = derive_observed("a", latent(5.0, 2.0, f64::INFINITY), &visits, 18.0);
        assert!(!rec.delta_i && rec.delta_d && !truth.ill);
        assert_eq!((rec.l, rec.t), (0.0, 2.0));
    }

    #[test]
    fn schedule_without_noise() {
        let mut rng = subject_rng(1, 0);
        let v = build_visit_schedule(2.5, 0.0, 0.0, 18.0, &mut rng);
        assert_eq!(v, vec![0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5]);
        let v = build_visit_schedule(4.5, 0.5, 0.0, 18.0, &mut rng);
        assert_eq!(v.len(), 5);
        assert_eq!(*v.last().unwrap(), 18.0);
        assert_eq!(build_visit_schedule(2.5, 0.5, 1.0, 18.0, &mut rng), vec![0.0]);
    }

    #[test]
    fn inversion_closed_form() {
        let t = weibull_inverse((-1.0f64).exp(), 2.0, 0.015, 0.0);
        assert!((t - 1.0 / 0.015).abs() < 1e-9);
        // Doubling exp(eta) scales every quantile by 2^(-1/shape).
        let u = 0.3;
        let ratio = weibull_inverse(u, 3.4, 0.08, 2f64.ln()) / weibull_inverse(u, 3.4, 0.08, 0.0);
        assert!((ratio - 2f64.powf(-1.0 / 3.4)).abs() < 1e-12);
    }

    #[test]
    fn phm_rules() {
        let cov = CovariateMatrix::new(3, 1, vec![0.0; 3], vec!["z1".into()]).unwrap();
        let mk = |l, r: Option<f64>, t, dd| ObservationRecord {
            id: "x".into(),
            v0: 0.0,
            l,
            r,
            delta_i: r.is_some(),
            t,
            delta_d: dd,
        };
        let data = Dataset::new(vec![mk(4.0, Some(6.0), 9.0, false), mk(7.0, None, 8.5, true), mk(7.0, None, 12.0, true)], cov).unwrap();
        let phm = prepare_phm_dataset(&data);
        let got: Vec<(f64, PhmCause)> = phm.records.iter().map(|r| (r.time, r.cause)).collect();
        assert_eq!(got, vec![(5.0, PhmCause::Illness), (8.5, PhmCause::Death), (7.0, PhmCause::None)]);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = ScenarioConfig::preset(Scenario::B2).with_sizes(50, 20);
        let a = simulate_scenario(&cfg, 3).unwrap();
        let b = simulate_scenario(&cfg, 3).unwrap();
        assert_eq!(a.train.data, b.train.data);
        assert_eq!(a.test.truth, b.test.truth);
        let c = simulate_scenario(&cfg, 4).unwrap();
        assert_ne!(a.train.data, c.train.data);
    }

    #[test]
    fn truth_consistency() {
        let cfg = ScenarioConfig::preset(Scenario::C1).with_sizes(500, 1);
        let sim = simulate_scenario(&cfg, 1).unwrap();
        for (rec, tr) in sim.train.data.records.iter().zip(&sim.train.truth) {
            assert!(!rec.delta_i || tr.ill);
            if rec.delta_i {
                assert!(rec.l < tr.t01 && tr.t01 <= rec.r.unwrap());
                assert!(tr.t01 < tr.t12.unwrap());
            }
        }
    }
}
