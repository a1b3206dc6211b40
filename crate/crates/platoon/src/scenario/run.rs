//! End-to-end run: plant, detector, resilience engine and certificate.

use nalgebra::DVector;
use serde::Serialize;

use crate::attack::{delayed_control, DelayProfile, DelayedSource};
use crate::detection::{DetectionEvent, DetectorBank};
use crate::dynamics::{
    build_reduced, error_coordinates, rk4_step_delayed, DynamicsError, PastView, PlatoonModel, StateHistory,
    VehicleState,
};
use crate::resilience::{audit_schedule, ResilienceEngine, Stage, SwitchEvent, SwitchingSchedule};
use crate::stability::{search_certificate, LmiProblem, SearchBudget, SearchOutcome};
use crate::topology::{LaplacianFamily, TopologyPhase};

use super::config::ScenarioConfig;
use super::ScenarioError;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub states: Vec<VehicleState>,
    /// `(shat_i, zetahat_i)` relative to the active phase's leader.
    pub errors: Vec<VehicleState>,
    pub inputs: Vec<f64>,
    /// Index into [`ScenarioTrace::phase_ids`].
    pub phase: usize,
    pub tau_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub t: f64,
    pub vehicle: usize,
    pub event: DetectionEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateSummary {
    pub phase: String,
    pub certified: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingAudit {
    pub holds: bool,
    pub windows: usize,
}

/// Headline numbers of a run. Vehicle numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub vehicles: usize,
    pub h: f64,
    pub t_end: f64,
    pub steps: usize,
    pub victim_vehicle: Option<usize>,
    pub detection_time: Option<f64>,
    pub measurement_time: Option<f64>,
    pub tau_hat: Option<f64>,
    pub response: &'static str,
    pub recovery_time: Option<f64>,
    pub stop_time: Option<f64>,
    pub final_phase: String,
    pub final_leader_vehicle: usize,
    pub final_errors: Vec<[f64; 2]>,
    pub max_final_error: f64,
    pub switching_audit: SwitchingAudit,
    pub certificate: Option<CertificateSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTrace {
    pub phase_ids: Vec<String>,
    pub records: Vec<StepRecord>,
    pub detections: Vec<DetectionRecord>,
    pub switches: Vec<SwitchEvent>,
    pub schedule: SwitchingSchedule,
    pub summary: Summary,
}

impl ScenarioTrace {
    pub fn phase_of(&self, record: &StepRecord) -> &str {
        &self.phase_ids[record.phase]
    }
}

fn stack(states: &[VehicleState]) -> DVector<f64> {
    let n = states.len();
    DVector::from_fn(2 * n, |k, _| if k < n { states[k].position } else { states[k - n].velocity })
}

fn unstack(x: &DVector<f64>) -> Vec<VehicleState> {
    let n = x.len() / 2;
    (0..n).map(|i| VehicleState::new(x[i], x[n + i])).collect()
}

/// Everything the right-hand side needs besides the state.
struct Plant<'a> {
    model: &'a PlatoonModel,
    cruise_speed: f64,
    origin: f64,
    slots: &'a [f64],
    phase: &'a TopologyPhase,
    stopped: Option<usize>,
    decel: f64,
}

impl Plant<'_> {
    fn inputs(&self, now: &[VehicleState], delayed: Option<DelayedSource>) -> Vec<f64> {
        delayed_control(self.model.gamma, self.phase, now, delayed)
    }

    fn derivative(&self, t: f64, x: &DVector<f64>, delayed: Option<DelayedSource>) -> DVector<f64> {
        let now = unstack(x);
        let n = now.len();
        let u = self.inputs(&now, delayed);
        let mut dx = DVector::zeros(2 * n);
        for i in 0..n {
            dx[i] = now[i].velocity;
            dx[n + i] = if self.stopped == Some(i) {
                if now[i].velocity > 0.0 {
                    -self.decel
                } else {
                    0.0
                }
            } else {
                let local = match &self.model.local_feedback {
                    Some(fb) => {
                        let (kp, kv) = fb.gains();
                        let slot = self.origin + self.cruise_speed * t + self.slots[i];
                        kp * (now[i].position - slot) + kv * (now[i].velocity - self.cruise_speed)
                    }
                    None => 0.0,
                };
                local + u[i]
            };
        }
        dx
    }
}

/// The victim's delayed state as seen inside a step, if its data is in use.
fn delayed_source(
    profile: Option<&DelayProfile>,
    phase: &TopologyPhase,
    step_start: f64,
    t: f64,
    past: &PastView<'_>,
) -> Result<Option<DelayedSource>, DynamicsError> {
    let Some(p) = profile else { return Ok(None) };
    if !p.is_active(step_start) || !phase.topology.transmits(p.victim) {
        return Ok(None);
    }
    let tau = p.delay_in_step(step_start, t);
    let x = past.state_at(t - tau)?;
    let n = x.len() / 2;
    Ok(Some(DelayedSource { vehicle: p.victim, state: VehicleState::new(x[p.victim], x[n + p.victim]) }))
}

/// Certificate search for the nominal topology with the configured victim's
/// links delayed, in reduced error coordinates.
pub fn certify_attacked_nominal(config: &ScenarioConfig) -> Option<(LmiProblem, SearchOutcome)> {
    let attack = config.attack.as_ref()?;
    let model = config.model();
    let nominal = config.phase(&config.roles.nominal)?;
    let family = LaplacianFamily::attacked(&nominal.topology, attack.victim);
    let (mut psi, psi1) = build_reduced(&model, &family.q_red, &family.w_red);
    psi += model.local_block(model.n - 1);
    let problem = LmiProblem::new(psi, psi1, attack.bound, attack.derivative_bound).ok()?;
    let outcome = search_certificate(&problem, &SearchBudget { seed: config.seed, ..SearchBudget::default() });
    Some((problem, outcome))
}

/// Runs the full pipeline on a validated config.
pub fn run(config: &ScenarioConfig) -> Result<ScenarioTrace, ScenarioError> {
    config.check()?;
    let model = config.model();
    let n = model.n;
    let h = config.integration.h;
    let t_end = config.integration.t_end;
    let steps = (t_end / h).round() as usize;
    let profile = config.delay_profile();
    let phases = config.phases();
    let phase_ids: Vec<String> = phases.iter().map(|p| p.id.clone()).collect();
    let phase_index = |id: &str| phase_ids.iter().position(|p| p == id).expect("known phase");

    let mut engine = ResilienceEngine::new(config.resilience.clone(), config.roles.clone(), &phases, 0.0)?;
    let mut detectors = DetectorBank::new(n, config.detector.epsilon, h);

    let mut states = config.initial_states();
    let mut replica = states.clone();
    let nominal = engine.current_phase().clone();
    let origin = states[nominal.leader()].position;
    let mut slots = nominal.spacings.clone();
    let span = 2.0 * profile.as_ref().map_or(0.0, |p| p.bound);
    let mut history = StateHistory::new(stack(&states), 0.0, h, span.max(h));

    let mut records = Vec::with_capacity(steps + 1);
    let mut detections = Vec::new();

    for k in 0..=steps {
        let t = k as f64 * h;

        let mut observed = states.clone();
        if let Some(p) = profile.as_ref().filter(|p| p.is_active(t)) {
            let past = history.state_at(t - p.sample(t)).map_err(|e| ScenarioError::at(t, e))?;
            observed[p.victim] = VehicleState::new(past[p.victim], past[n + p.victim]);
        }
        let events = detectors.step(&observed, &replica);
        detections.extend(events.iter().map(|&(vehicle, event)| DetectionRecord { t, vehicle, event }));

        let switched = engine.on_step(t, &events, &states).map_err(|e| ScenarioError::at(t, e))?;
        if !switched.is_empty() {
            // The reference model restarts from the plant at every switch.
            replica = states.clone();
            let phase = engine.current_phase();
            let base = slots[phase.leader()];
            slots = phase.spacings.iter().map(|d| base + d).collect();
        }

        let phase = engine.current_phase();
        let plant = Plant {
            model: &model,
            cruise_speed: config.model.cruise_speed,
            origin,
            slots: &slots,
            phase,
            stopped: engine.stopped_vehicle(),
            decel: config.resilience.decel_rate,
        };

        let x = stack(&states);
        let view_inputs = {
            let delayed = match profile.as_ref() {
                Some(p) if p.is_active(t) && phase.topology.transmits(p.victim) => Some(DelayedSource {
                    vehicle: p.victim,
                    state: observed[p.victim],
                }),
                _ => None,
            };
            plant.inputs(&states, delayed)
        };
        let errors = error_coordinates(&states, phase.leader(), &phase.spacings);
        records.push(StepRecord {
            t,
            states: states.clone(),
            errors: unstack(&errors),
            inputs: view_inputs,
            phase: phase_index(&phase.id),
            tau_hat: engine.tau_hat().unwrap_or(0.0),
        });
        if k == steps {
            break;
        }

        let mut next = rk4_step_delayed(&history, t, &x, h, |ts, xs, past| {
            let delayed = delayed_source(profile.as_ref(), phase, t, ts, past)?;
            Ok(plant.derivative(ts, xs, delayed))
        })
        .map_err(|e| ScenarioError::at(t, e))?;
        let xr = stack(&replica);
        let mut next_replica =
            rk4_step_delayed(&history, t, &xr, h, |ts, xs, _| Ok(plant.derivative(ts, xs, None)))
                .map_err(|e| ScenarioError::at(t, e))?;
        if let Some(v) = plant.stopped {
            next[n + v] = next[n + v].max(0.0);
            next_replica[n + v] = next_replica[n + v].max(0.0);
        }
        let t_next = (k + 1) as f64 * h;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ScenarioError::at(t_next, DynamicsError::Divergence { t: t_next }));
        }
        states = unstack(&next);
        replica = unstack(&next_replica);
        history.push(next);
    }

    let schedule = engine.schedule().clone();
    let audit = match audit_schedule(&schedule, &config.resilience.dwell, t_end) {
        Ok(windows) => SwitchingAudit { holds: true, windows },
        Err(_) => SwitchingAudit { holds: false, windows: 0 },
    };
    let certificate = certify_attacked_nominal(config).map(|(_, outcome)| CertificateSummary {
        phase: config.roles.nominal.clone(),
        certified: matches!(outcome, SearchOutcome::Certified(_)),
        margin: match &outcome {
            SearchOutcome::Certified(c) => c.margin,
            SearchOutcome::Inconclusive(r) => r.best_margin,
        },
    });

    let last = records.last().expect("at least one record");
    let final_errors: Vec<[f64; 2]> = last.errors.iter().map(|e| [e.position, e.velocity]).collect();
    let max_final_error = final_errors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let first = |name: &str| detections.iter().find(|d| d.event.name() == name);
    let victim = engine.victim();
    let first_measured = detections
        .iter()
        .find(|d| Some(d.vehicle) == victim && matches!(d.event, DetectionEvent::Measured { .. }));
    let switch_time = |reason: &str| engine.switches().iter().find(|s| s.reason.name() == reason).map(|s| s.t);
    let response = match engine.stage() {
        Stage::Nominal => "none",
        Stage::AwaitingMeasurement => "isolated",
        Stage::Retrieving => "retrieving",
        Stage::Recovered => "recovered",
        Stage::Stopped => "stopped",
    };
    let summary = Summary {
        vehicles: n,
        h,
        t_end,
        steps,
        victim_vehicle: victim.map(|v| v + 1),
        detection_time: first("detected").map(|d| d.t),
        measurement_time: first_measured.map(|d| d.t),
        tau_hat: first_measured.map(|d| d.event.tau_hat()),
        response,
        recovery_time: switch_time("recovered"),
        stop_time: switch_time("stopped"),
        final_phase: engine.current_phase().id.clone(),
        final_leader_vehicle: engine.current_phase().leader() + 1,
        final_errors,
        max_final_error,
        switching_audit: audit,
        certificate,
    };

    Ok(ScenarioTrace {
        phase_ids,
        records,
        detections,
        switches: engine.switches().to_vec(),
        schedule,
        summary,
    })
}
