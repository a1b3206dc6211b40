//! JSON scenario configuration and its cross-validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{DelayProfile, DelayShape};
use crate::dynamics::{LocalFeedback, PlatoonModel, VehicleState};
use crate::resilience::{PhaseRoles, ResilienceConfig};
use crate::topology::{CommTopology, TopologyPhase};

pub const SCHEMA_VERSION: u32 = 1;

const DEMO: &str = include_str!("../../scenarios/demo.json");

/// One violated invariant, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{} invalid field(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFeedbackConfig {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    pub gamma: f64,
    #[serde(default)]
    pub local_feedback: Option<LocalFeedbackConfig>,
    /// Speed (m/s) of the reference slots the local feedback tracks.
    #[serde(default)]
    pub cruise_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub id: String,
    pub leader: usize,
    /// Row-major; `adjacency[i][j] > 0` means vehicle `i` receives from `j`.
    pub adjacency: Vec<Vec<f64>>,
    /// Desired offset of each vehicle from the phase leader (m).
    pub spacings: Vec<f64>,
}

fn enabled_by_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default = "enabled_by_default")]
    pub enabled: bool,
    #[serde(flatten)]
    pub shape: DelayShape,
    pub onset: f64,
    #[serde(default)]
    pub end: Option<f64>,
    #[serde(rename = "U")]
    pub bound: f64,
    #[serde(rename = "d")]
    pub derivative_bound: f64,
    pub victim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub epsilon: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub h: f64,
    pub t_end: f64,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Every `csv_stride`-th integration step is written to `trace.csv`.
    #[serde(default = "default_stride")]
    pub csv_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, csv_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub initial_state: InitialState,
    pub phases: Vec<PhaseConfig>,
    pub roles: PhaseRoles,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub resilience: ResilienceConfig,
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Seed for randomized studies built on this scenario. The simulation
    /// itself draws no random numbers.
    #[serde(default)]
    pub seed: u64,
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue { field: field.into(), message: message.into() });
    }

    fn require(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.push(field, message);
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ScenarioConfig {
    /// The shipped four-vehicle demonstration scenario.
    pub fn demo() -> Self {
        Self::from_json(DEMO).expect("shipped demo config is valid")
    }

    pub fn demo_json() -> &'static str {
        DEMO
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let issues = self.validate();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    /// Every violated invariant, in field order.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut is = Issues(Vec::new());
        let n = self.model.n;
        is.require(
            self.schema_version == SCHEMA_VERSION,
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
        );
        is.require(n >= 2, "model.n", "at least two vehicles required");
        is.require(positive(self.model.gamma), "model.gamma", "must be positive");
        is.require(
            self.model.cruise_speed.is_finite() && self.model.cruise_speed >= 0.0,
            "model.cruise_speed",
            "must be finite and non-negative",
        );
        if let Some(fb) = &self.model.local_feedback {
            if let Err(e) = local_feedback(fb) {
                is.push("model.local_feedback", e.to_string());
            }
        }
        for (name, v) in [("positions", &self.initial_state.positions), ("velocities", &self.initial_state.velocities)] {
            let field = format!("initial_state.{name}");
            is.require(v.len() == n, &field, format!("has {} entries, expected {n}", v.len()));
            is.require(v.iter().all(|x| x.is_finite()), &field, "entries must be finite");
        }

        is.require(!self.phases.is_empty(), "phases", "at least one phase required");
        let mut ids = BTreeSet::new();
        for (k, p) in self.phases.iter().enumerate() {
            let at = format!("phases[{k}]");
            is.require(ids.insert(p.id.as_str()), format!("{at}.id"), format!("duplicate id '{}'", p.id));
            if p.adjacency.len() != n || p.adjacency.iter().any(|r| r.len() != n) {
                is.push(format!("{at}.adjacency"), format!("must be {n}x{n}"));
                continue;
            }
            if p.spacings.len() != n {
                is.push(format!("{at}.spacings"), format!("has {} entries, expected {n}", p.spacings.len()));
                continue;
            }
            if let Err(e) = phase(p) {
                is.push(&at, e.to_string());
            }
        }

        let roles = [
            ("roles.nominal", &self.roles.nominal),
            ("roles.isolated", &self.roles.isolated),
            ("roles.retrieval", &self.roles.retrieval),
            ("roles.recovered", &self.roles.recovered),
        ];
        for (field, id) in roles {
            is.require(ids.contains(id.as_str()), field, format!("no phase with id '{id}'"));
        }
        let find = |id: &str| self.phases.iter().find(|p| p.id == id);
        let response: Vec<&PhaseConfig> = [&self.roles.isolated, &self.roles.retrieval, &self.roles.recovered]
            .into_iter()
            .filter_map(|id| find(id))
            .collect();
        if let Some(first) = response.first() {
            for p in &response {
                is.require(
                    p.leader == first.leader,
                    "roles",
                    format!("response phases disagree on the leader ('{}' vs '{}')", first.id, p.id),
                );
            }
        }

        let det = &self.detector;
        is.require(positive(det.epsilon), "detector.epsilon", "must be positive");

        let r = &self.resilience;
        is.require(positive(r.critical_delay), "resilience.critical_delay", "must be positive");
        is.require(positive(r.decel_rate), "resilience.decel_rate", "must be positive");
        is.require(positive(r.recover_tolerance), "resilience.recover_tolerance", "must be positive");
        is.require(positive(r.retrieval_dwell), "resilience.retrieval_dwell", "must be positive");
        let mut dwell_entries = vec![("resilience.dwell.default".to_string(), r.dwell.default)];
        dwell_entries.extend(r.dwell.per_mode.iter().map(|(k, v)| (format!("resilience.dwell.per_mode.{k}"), *v)));
        for (field, params) in dwell_entries {
            is.require(positive(params.tau_a), format!("{field}.tau_a"), "must be positive");
            is.require(params.n0 >= 1.0 && params.n0.is_finite(), format!("{field}.n0"), "must be at least 1");
        }
        for id in r.dwell.per_mode.keys() {
            is.require(ids.contains(id.as_str()), format!("resilience.dwell.per_mode.{id}"), "no such phase");
        }
        for id in [&self.roles.isolated, &self.roles.retrieval] {
            let tau_a = r.dwell.get(id).tau_a;
            is.require(
                r.retrieval_dwell >= tau_a,
                "resilience.retrieval_dwell",
                format!("{} is shorter than the dwell time {tau_a} of phase '{id}'", r.retrieval_dwell),
            );
        }

        let int = &self.integration;
        is.require(positive(int.h), "integration.h", "must be positive");
        is.require(positive(int.t_end), "integration.t_end", "must be positive");
        if positive(int.h) && positive(int.t_end) {
            is.require(int.h <= int.t_end, "integration.h", "larger than t_end");
            let steps = int.t_end / int.h;
            is.require(
                (steps - steps.round()).abs() < 1e-6,
                "integration.t_end",
                "must be a whole number of steps",
            );
        }
        is.require(self.output.csv_stride >= 1, "output.csv_stride", "must be at least 1");

        if let Some(a) = &self.attack {
            is.require(a.victim < n, "attack.victim", format!("index {} out of range", a.victim));
            is.require(positive(a.bound), "attack.U", "must be positive");
            is.require(
                a.derivative_bound > 0.0 && a.derivative_bound < 1.0,
                "attack.d",
                "must lie in (0, 1)",
            );
            is.require(a.onset.is_finite() && a.onset >= 0.0, "attack.onset", "must be non-negative");
            if let Some(end) = a.end {
                is.require(end > a.onset, "attack.end", "must follow the onset");
            }
            is.require(
                r.critical_delay < a.bound,
                "resilience.critical_delay",
                format!("critical delay {} must be below the delay bound U = {}", r.critical_delay, a.bound),
            );
            if a.enabled && a.victim < n && positive(int.h) && positive(int.t_end) {
                let report = self.delay_profile_unchecked(a).validate(int.t_end, int.h);
                for v in &report.violations {
                    is.push(
                        "attack",
                        format!("{:?} at t = {} (value {})", v.kind, v.t, v.value).to_lowercase(),
                    );
                }
                for p in &response {
                    if let Some(k) = p.adjacency.iter().position(|row| row.get(a.victim).is_some_and(|&w| w > 0.0)) {
                        is.push(
                            format!("phases.{}.adjacency", p.id),
                            format!("vehicle {} receives from the isolated vehicle {}", k + 1, a.victim + 1),
                        );
                    }
                }
            }
        }
        is.0
    }

    fn delay_profile_unchecked(&self, a: &AttackConfig) -> DelayProfile {
        DelayProfile {
            shape: a.shape.clone(),
            onset: a.onset,
            end: a.end,
            bound: a.bound,
            derivative_bound: a.derivative_bound,
            victim: a.victim,
        }
        .snapped(self.integration.h)
    }

    /// The configured attack with onset and end on the integration grid, if
    /// one is enabled.
    pub fn delay_profile(&self) -> Option<DelayProfile> {
        self.attack.as_ref().filter(|a| a.enabled).map(|a| self.delay_profile_unchecked(a))
    }

    /// Plant model. Panics on an unvalidated config.
    pub fn model(&self) -> PlatoonModel {
        let model = PlatoonModel::new(self.model.n, self.model.gamma).expect("validated model");
        match &self.model.local_feedback {
            Some(fb) => model.with_local_feedback(local_feedback(fb).expect("validated feedback")),
            None => model,
        }
    }

    pub fn phases(&self) -> Vec<TopologyPhase> {
        self.phases.iter().map(|p| phase(p).expect("validated phase")).collect()
    }

    pub fn phase(&self, id: &str) -> Option<TopologyPhase> {
        self.phases.iter().find(|p| p.id == id).map(|p| phase(p).expect("validated phase"))
    }

    pub fn initial_states(&self) -> Vec<VehicleState> {
        self.initial_state
            .positions
            .iter()
            .zip(&self.initial_state.velocities)
            .map(|(&s, &v)| VehicleState::new(s, v))
            .collect()
    }
}

fn local_feedback(fb: &LocalFeedbackConfig) -> Result<LocalFeedback, crate::dynamics::DynamicsError> {
    LocalFeedback::new(
        Matrix2::new(fb.a[0][0], fb.a[0][1], fb.a[1][0], fb.a[1][1]),
        Vector2::new(fb.b[0], fb.b[1]),
    )
}

fn phase(p: &PhaseConfig) -> Result<TopologyPhase, crate::topology::TopologyError> {
    let n = p.adjacency.len();
    let adjacency = DMatrix::from_fn(n, n, |i, j| p.adjacency[i][j]);
    let topology = CommTopology::new(adjacency, p.leader)?;
    TopologyPhase::new(p.id.clone(), topology, p.spacings.clone())
}
