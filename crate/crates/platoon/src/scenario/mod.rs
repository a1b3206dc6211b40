//! Scenario configuration, end-to-end runs and trace export.

mod config;
mod export;
mod run;
pub mod svg;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    AttackConfig, ConfigError, ConfigIssue, DetectorConfig, InitialState, IntegrationConfig, LocalFeedbackConfig,
    ModelConfig, OutputConfig, PhaseConfig, ScenarioConfig, SCHEMA_VERSION,
};
pub use export::{
    export, num, trace_header, write_charts, PlotData, EVENTS_FILE, SUMMARY_FILE, SWITCHES_FILE, TRACE_FILE,
};
pub use run::{
    certify_attacked_nominal, run, CertificateSummary, DetectionRecord, ScenarioTrace, StepRecord, Summary,
    SwitchingAudit,
};

use crate::dynamics::DynamicsError;
use crate::resilience::ResilienceError;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}", timed(*t, source))]
    Dynamics { t: f64, source: DynamicsError },
    #[error("at t = {t}: {source}")]
    Resilience { t: f64, source: ResilienceError },
    #[error(transparent)]
    Setup(#[from] ResilienceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ScenarioError {
    fn at<E: Into<TimedSource>>(t: f64, e: E) -> Self {
        match e.into() {
            TimedSource::Dynamics(source) => ScenarioError::Dynamics { t, source },
            TimedSource::Resilience(source) => ScenarioError::Resilience { t, source },
        }
    }

    /// Whether the failure comes from the input rather than the run.
    pub fn is_validation(&self) -> bool {
        matches!(self, ScenarioError::Config(_))
    }
}

/// Divergence already names its time.
fn timed(t: f64, source: &DynamicsError) -> String {
    match source {
        DynamicsError::Divergence { .. } => source.to_string(),
        _ => format!("at t = {t}: {source}"),
    }
}

enum TimedSource {
    Dynamics(DynamicsError),
    Resilience(ResilienceError),
}

impl From<DynamicsError> for TimedSource {
    fn from(e: DynamicsError) -> Self {
        TimedSource::Dynamics(e)
    }
}

impl From<ResilienceError> for TimedSource {
    fn from(e: ResilienceError) -> Self {
        TimedSource::Resilience(e)
    }
}
