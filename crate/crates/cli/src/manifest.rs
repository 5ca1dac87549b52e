use std::path::Path;
use std::time::Instant;

use idm_core::config::RunConfig;
use idm_core::IdmError;
use serde::Serialize;

pub enum Outcome {
    Ok,
    /// Outputs were written but a fit did not converge.
    NotConverged(String),
    Failed(IdmError),
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::NotConverged(_) => 3,
            Outcome::Failed(e) if e.is_numerical() => 3,
            Outcome::Failed(_) => 2,
        }
    }

    fn status(&self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::NotConverged(_) => "not_converged",
            Outcome::Failed(e) if e.is_numerical() => "numerical_failure",
            Outcome::Failed(_) => "invalid_input",
        }
    }
}

#[derive(Serialize)]
struct Versions {
    idm: &'static str,
    idm_core: &'static str,
}

#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    versions: Versions,
    config: Option<RunConfig>,
    seed: Option<u64>,
    threads: usize,
    outputs: Vec<String>,
    status: String,
    exit_code: u8,
    message: Option<String>,
    /// Outputs present but produced by a fit that did not converge.
    partial: bool,
    wall_time_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            versions: Versions {
                idm: env!("CARGO_PKG_VERSION"),
                idm_core: idm_core::VERSION,
            },
            config: None,
            seed: None,
            threads: 0,
            outputs: Vec::new(),
            status: "started".into(),
            exit_code: 0,
            message: None,
            partial: false,
            wall_time_seconds: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn set_config(&mut self, cfg: &RunConfig, seed: Option<u64>) {
        self.config = Some(cfg.clone());
        self.seed = seed;
    }

    pub fn set_threads(&mut self, n: usize) {
        self.threads = n;
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn finish(&mut self, outcome: &Outcome) {
        self.status = outcome.status().into();
        self.exit_code = outcome.exit_code();
        self.partial = matches!(outcome, Outcome::NotConverged(_)) || (!self.outputs.is_empty() && !matches!(outcome, Outcome::Ok));
        self.message = match outcome {
            Outcome::Ok => None,
            Outcome::NotConverged(m) => Some(m.clone()),
            Outcome::Failed(e) => Some(e.to_string()),
        };
        self.wall_time_seconds = self.started.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0);
    }

    pub fn write(&self, dir: &Path) -> Result<(), String> {
        let text = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("run_manifest.json"), text + "\n").map_err(|e| e.to_string())
    }
}
