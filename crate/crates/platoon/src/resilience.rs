//! Response to a detected delay: leader re-election, victim isolation,
//! retrieval switching under a mode-dependent dwell-time law, and the stop
//! branch for delays beyond the critical bound.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::DetectionEvent;
use crate::dynamics::{PlatoonModel, SystemMatrices, VehicleState};
use crate::topology::{reachable_from, CommTopology, LaplacianFamily, TopologyPhase};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResilienceError {
    #[error("no vehicle can lead once vehicle {} is isolated", victim + 1)]
    ElectionFailed { victim: usize },
    #[error("phase '{phase}' is inconsistent with the response: {reason}")]
    PhaseMismatch { phase: String, reason: String },
    #[error("unknown phase '{0}'")]
    UnknownPhase(String),
    #[error("switch at t = {t} does not follow the previous event at t = {previous}")]
    NonIncreasingSwitch { t: f64, previous: f64 },
}

/// Dwell-time parameters of one mode: average dwell `tau_a` and chatter
/// bound `n0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellParams {
    pub tau_a: f64,
    pub n0: f64,
}

impl Default for DwellParams {
    fn default() -> Self {
        Self { tau_a: 2.0, n0: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DwellTable {
    #[serde(default)]
    pub default: DwellParams,
    #[serde(default)]
    pub per_mode: BTreeMap<String, DwellParams>,
}

impl DwellTable {
    pub fn uniform(tau_a: f64, n0: f64) -> Self {
        Self { default: DwellParams { tau_a, n0 }, per_mode: BTreeMap::new() }
    }

    pub fn get(&self, mode: &str) -> DwellParams {
        self.per_mode.get(mode).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceConfig {
    /// Delays at or above this bound (s) stop the victim instead of
    /// retrieving it.
    pub critical_delay: f64,
    /// Deceleration commanded in the stop branch (m/s^2).
    pub decel_rate: f64,
    #[serde(default)]
    pub dwell: DwellTable,
    /// Minimum time (s) spent in each retrieval subsystem before toggling.
    pub retrieval_dwell: f64,
    /// Victim error to the new leader (m, m/s combined) that ends retrieval.
    pub recover_tolerance: f64,
}

impl Default for ResilienceConfig {
    fn default() -> Self {
        Self {
            critical_delay: 15.0,
            decel_rate: 1.0,
            dwell: DwellTable::default(),
            retrieval_dwell: 2.0,
            recover_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchReason {
    Detected,
    RetrievalToggle,
    Recovered,
    Stopped,
}

impl SwitchReason {
    pub fn name(&self) -> &'static str {
        match self {
            SwitchReason::Detected => "detected",
            SwitchReason::RetrievalToggle => "retrieval_toggle",
            SwitchReason::Recovered => "recovered",
            SwitchReason::Stopped => "stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub from: String,
    pub to: String,
    pub reason: SwitchReason,
}

/// Times at which the active phase changed. The first event records the
/// initial mode and is not itself a switch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SwitchingSchedule {
    pub events: Vec<(f64, String)>,
}

impl SwitchingSchedule {
    pub fn starting(t: f64, mode: impl Into<String>) -> Self {
        Self { events: vec![(t, mode.into())] }
    }

    pub fn push(&mut self, t: f64, mode: impl Into<String>) -> Result<(), ResilienceError> {
        if let Some((previous, _)) = self.events.last() {
            if !(t > *previous) {
                return Err(ResilienceError::NonIncreasingSwitch { t, previous: *previous });
            }
        }
        self.events.push((t, mode.into()));
        Ok(())
    }

    pub fn modes(&self) -> Vec<String> {
        let mut modes: Vec<String> = self.events.iter().map(|(_, m)| m.clone()).collect();
        modes.sort();
        modes.dedup();
        modes
    }

    /// Mode active at `t`, if the schedule has started.
    pub fn mode_at(&self, t: f64) -> Option<&str> {
        self.events.iter().take_while(|(te, _)| *te <= t).last().map(|(_, m)| m.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCount {
    pub mode: String,
    pub switches: usize,
    pub residence: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawReport {
    pub t0: f64,
    pub t1: f64,
    pub holds: bool,
    pub modes: Vec<ModeCount>,
}

/// Checks `N_i(t0, t1) <= N0_i + T_i(t0, t1) / tau_a_i` for every mode, where
/// `N_i` counts switches into mode `i` inside `[t0, t1)` and `T_i` is the time
/// mode `i` is active inside the window.
pub fn switching_law_check(schedule: &SwitchingSchedule, table: &DwellTable, t0: f64, t1: f64) -> LawReport {
    let mut modes = Vec::new();
    for mode in schedule.modes() {
        let switches = schedule
            .events
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, (t, m))| *m == mode && *t >= t0 && *t < t1)
            .count();
        let mut residence = 0.0;
        for (k, (start, m)) in schedule.events.iter().enumerate() {
            if *m != mode {
                continue;
            }
            let end = schedule.events.get(k + 1).map_or(f64::INFINITY, |(t, _)| *t);
            let overlap = end.min(t1) - start.max(t0);
            if overlap > 0.0 {
                residence += overlap;
            }
        }
        let params = table.get(&mode);
        let bound = params.n0 + residence / params.tau_a;
        modes.push(ModeCount {
            holds: switches as f64 <= bound + 1e-9,
            mode,
            switches,
            residence,
            bound,
        });
    }
    LawReport { t0, t1, holds: modes.iter().all(|m| m.holds), modes }
}

/// Runs [`switching_law_check`] on every window bounded by two schedule
/// events or an event and `t_end`. Returns the first failing window.
pub fn audit_schedule(schedule: &SwitchingSchedule, table: &DwellTable, t_end: f64) -> Result<usize, LawReport> {
    let mut bounds: Vec<f64> = schedule.events.iter().map(|(t, _)| *t).collect();
    if bounds.last().map_or(true, |&t| t_end > t) {
        bounds.push(t_end);
    }
    let mut windows = 0;
    for a in 0..bounds.len() {
        for b in a + 1..bounds.len() {
            let report = switching_law_check(schedule, table, bounds[a], bounds[b]);
            if !report.holds {
                return Err(report);
            }
            windows += 1;
        }
    }
    Ok(windows)
}

/// The non-victim vehicle closest to the victim, ties to the lower index,
/// that can root the platoon once the victim stops transmitting.
pub fn elect_leader(topology: &CommTopology, positions: &[f64], victim: usize) -> Result<usize, ResilienceError> {
    let mut candidates: Vec<usize> = (0..topology.n()).filter(|&i| i != victim).collect();
    candidates.sort_by(|&a, &b| {
        let da = (positions[a] - positions[victim]).abs();
        let db = (positions[b] - positions[victim]).abs();
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    candidates
        .into_iter()
        .find(|&c| roots_without(topology, victim, c))
        .ok_or(ResilienceError::ElectionFailed { victim })
}

/// Whether `candidate` reaches every vehicle except `victim` once the victim
/// stops transmitting. The victim itself is readmitted later as a receiver.
fn roots_without(topology: &CommTopology, victim: usize, candidate: usize) -> bool {
    let mut adjacency = topology.adjacency().clone();
    adjacency.column_mut(victim).fill(0.0);
    reachable_from(&adjacency, candidate)
        .iter()
        .enumerate()
        .all(|(i, &r)| r || i == victim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResilienceAction {
    None,
    EnableSwitching,
    Stop,
}

/// Per-vehicle decision on the measured delays: below the critical bound
/// the switching signal is enabled, at or above it the vehicle stops.
pub fn resilient_step(critical_delay: f64, tau_hat: &[Option<f64>]) -> Vec<ResilienceAction> {
    tau_hat
        .iter()
        .map(|tau| match tau {
            None => ResilienceAction::None,
            Some(t) if *t < critical_delay => ResilienceAction::EnableSwitching,
            Some(_) => ResilienceAction::Stop,
        })
        .collect()
}

/// State matrices of a phase. With a victim the delayed coupling carries the
/// victim's outgoing links; a victim that no longer transmits leaves it zero.
pub fn apply_phase(model: &PlatoonModel, phase: &TopologyPhase, victim: Option<usize>) -> SystemMatrices {
    let family = match victim {
        Some(v) => LaplacianFamily::attacked(&phase.topology, v),
        None => LaplacianFamily::nominal(&phase.topology),
    };
    SystemMatrices::assemble(model, &family).with_local_feedback(model)
}

/// Phase ids playing each part of the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRoles {
    pub nominal: String,
    pub isolated: String,
    pub retrieval: String,
    pub recovered: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Nominal,
    AwaitingMeasurement,
    Retrieving,
    Recovered,
    Stopped,
}

/// Deterministic state machine driving the active phase.
#[derive(Debug, Clone)]
pub struct ResilienceEngine {
    config: ResilienceConfig,
    roles: PhaseRoles,
    phases: BTreeMap<String, TopologyPhase>,
    stage: Stage,
    current: String,
    entered_at: f64,
    victim: Option<usize>,
    tau_hat: Option<f64>,
    schedule: SwitchingSchedule,
    switches: Vec<SwitchEvent>,
}

impl ResilienceEngine {
    pub fn new(
        config: ResilienceConfig,
        roles: PhaseRoles,
        phases: &[TopologyPhase],
        t0: f64,
    ) -> Result<Self, ResilienceError> {
        let phases: BTreeMap<String, TopologyPhase> = phases.iter().map(|p| (p.id.clone(), p.clone())).collect();
        for id in [&roles.nominal, &roles.isolated, &roles.retrieval, &roles.recovered] {
            if !phases.contains_key(id) {
                return Err(ResilienceError::UnknownPhase(id.clone()));
            }
        }
        let current = roles.nominal.clone();
        Ok(Self {
            config,
            schedule: SwitchingSchedule::starting(t0, current.clone()),
            roles,
            phases,
            stage: Stage::Nominal,
            current,
            entered_at: t0,
            victim: None,
            tau_hat: None,
            switches: Vec::new(),
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn victim(&self) -> Option<usize> {
        self.victim
    }

    pub fn tau_hat(&self) -> Option<f64> {
        self.tau_hat
    }

    pub fn current_phase(&self) -> &TopologyPhase {
        &self.phases[&self.current]
    }

    pub fn phase(&self, id: &str) -> Option<&TopologyPhase> {
        self.phases.get(id)
    }

    pub fn stopped_vehicle(&self) -> Option<usize> {
        match self.stage {
            Stage::Stopped => self.victim,
            _ => None,
        }
    }

    pub fn schedule(&self) -> &SwitchingSchedule {
        &self.schedule
    }

    pub fn switches(&self) -> &[SwitchEvent] {
        &self.switches
    }

    pub fn config(&self) -> &ResilienceConfig {
        &self.config
    }

    fn switch_to(&mut self, t: f64, to: String, reason: SwitchReason) -> Result<SwitchEvent, ResilienceError> {
        let event = SwitchEvent { t, from: self.current.clone(), to: to.clone(), reason };
        if to != self.current {
            self.schedule.push(t, to.clone())?;
            self.current = to;
            self.entered_at = t;
        }
        self.switches.push(event.clone());
        Ok(event)
    }

    /// Checks that the response phases are rooted at `leader` and never let
    /// the victim transmit.
    fn check_response_phases(&self, leader: usize, victim: usize) -> Result<(), ResilienceError> {
        for id in [&self.roles.isolated, &self.roles.retrieval, &self.roles.recovered] {
            let phase = &self.phases[id];
            if phase.leader() != leader {
                return Err(ResilienceError::PhaseMismatch {
                    phase: id.clone(),
                    reason: format!("led by vehicle {}, elected leader is vehicle {}", phase.leader() + 1, leader + 1),
                });
            }
            if phase.topology.transmits(victim) {
                return Err(ResilienceError::PhaseMismatch {
                    phase: id.clone(),
                    reason: format!("isolated vehicle {} still transmits", victim + 1),
                });
            }
        }
        Ok(())
    }

    fn victim_error(&self, states: &[VehicleState]) -> f64 {
        let victim = self.victim.expect("retrieval has a victim");
        let phase = &self.phases[&self.roles.recovered];
        let lead = states[phase.leader()];
        let v = states[victim];
        (v.position - lead.position - phase.spacings[victim]).hypot(v.velocity - lead.velocity)
    }

    /// Consumes the detector events of one step taken at time `t` and the
    /// absolute vehicle states at that time. Returns the switches it made.
    pub fn on_step(
        &mut self,
        t: f64,
        events: &[(usize, DetectionEvent)],
        states: &[VehicleState],
    ) -> Result<Vec<SwitchEvent>, ResilienceError> {
        let mut out = Vec::new();
        for &(vehicle, event) in events {
            match event {
                DetectionEvent::Detected if self.stage == Stage::Nominal => {
                    let nominal = &self.phases[&self.roles.nominal];
                    let leader = if vehicle == nominal.leader() {
                        let positions: Vec<f64> = states.iter().map(|s| s.position).collect();
                        elect_leader(&nominal.topology, &positions, vehicle)?
                    } else {
                        nominal.leader()
                    };
                    self.check_response_phases(leader, vehicle)?;
                    self.victim = Some(vehicle);
                    self.stage = Stage::AwaitingMeasurement;
                    let to = self.roles.isolated.clone();
                    out.push(self.switch_to(t, to, SwitchReason::Detected)?);
                }
                DetectionEvent::Measured { tau_hat } if Some(vehicle) == self.victim => {
                    self.tau_hat = Some(tau_hat);
                    let mut taus = vec![None; states.len()];
                    taus[vehicle] = Some(tau_hat);
                    match resilient_step(self.config.critical_delay, &taus)[vehicle] {
                        ResilienceAction::Stop if self.stage != Stage::Stopped => {
                            self.stage = Stage::Stopped;
                            let to = self.roles.isolated.clone();
                            out.push(self.switch_to(t, to, SwitchReason::Stopped)?);
                        }
                        ResilienceAction::EnableSwitching if self.stage == Stage::AwaitingMeasurement => {
                            self.stage = Stage::Retrieving;
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        if self.stage == Stage::Retrieving {
            let dwell = t - self.entered_at;
            let own = self.config.dwell.get(&self.current).tau_a;
            if dwell >= own && self.victim_error(states) < self.config.recover_tolerance {
                self.stage = Stage::Recovered;
                let to = self.roles.recovered.clone();
                out.push(self.switch_to(t, to, SwitchReason::Recovered)?);
            } else if dwell >= own.max(self.config.retrieval_dwell) {
                let to = if self.current == self.roles.isolated {
                    self.roles.retrieval.clone()
                } else {
                    self.roles.isolated.clone()
                };
                out.push(self.switch_to(t, to, SwitchReason::RetrievalToggle)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_choice_with_two_vehicles() {
        let t = CommTopology::from_edges(2, &[(1, 0)], 1).unwrap();
        assert_eq!(elect_leader(&t, &[0.0, 5.0], 1).unwrap(), 0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let t = CommTopology::from_edges(3, &[(1, 0), (1, 2), (0, 2), (2, 0)], 1).unwrap();
        assert_eq!(elect_leader(&t, &[-3.0, 0.0, 3.0], 1).unwrap(), 0);
        assert_eq!(elect_leader(&t, &[3.0, 0.0, -3.0], 1).unwrap(), 0);
    }

    #[test]
    fn closest_is_skipped_if_it_cannot_root() {
        // 0 is closest but only 2 reaches the remaining vehicles.
        let t = CommTopology::from_edges(3, &[(2, 0), (1, 2)], 1).unwrap();
        assert_eq!(elect_leader(&t, &[1.0, 0.0, 5.0], 1).unwrap(), 2);
    }

    #[test]
    fn election_fails_on_split_platoon() {
        let t = CommTopology::from_edges(3, &[(1, 0), (1, 2)], 1).unwrap();
        assert!(matches!(
            elect_leader(&t, &[1.0, 0.0, 5.0], 1),
            Err(ResilienceError::ElectionFailed { victim: 1 })
        ));
    }

    #[test]
    fn decisions_respect_strict_bound() {
        let actions = resilient_step(15.0, &[None, Some(5.0), Some(15.0), Some(20.0)]);
        assert_eq!(
            actions,
            vec![
                ResilienceAction::None,
                ResilienceAction::EnableSwitching,
                ResilienceAction::Stop,
                ResilienceAction::Stop
            ]
        );
    }

    #[test]
    fn single_switch_always_passes() {
        let mut s = SwitchingSchedule::starting(0.0, "a");
        s.push(0.5, "b").unwrap();
        let table = DwellTable::uniform(1e6, 1.0);
        assert!(switching_law_check(&s, &table, 0.0, 1.0).holds);
    }

    #[test]
    fn chattering_schedule_fails() {
        // Five switches into `a` within 10 s with N0 = 1 and tau_a = 3 s.
        let mut s = SwitchingSchedule::starting(0.0, "b");
        for k in 0..5 {
            s.push(2.0 * k as f64 + 0.5, "a").unwrap();
            s.push(2.0 * k as f64 + 1.5, "b").unwrap();
        }
        let report = switching_law_check(&s, &DwellTable::uniform(3.0, 1.0), 0.0, 10.0);
        assert!(!report.holds);
        let a = report.modes.iter().find(|m| m.mode == "a").unwrap();
        assert_eq!(a.switches, 5);
        assert!((a.residence - 5.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_must_increase() {
        let mut s = SwitchingSchedule::starting(1.0, "a");
        assert!(s.push(1.0, "b").is_err());
        assert_eq!(s.mode_at(0.5), None);
        assert_eq!(s.mode_at(3.0), Some("a"));
    }

    #[test]
    fn reapplying_a_phase_is_idempotent() {
        let t = CommTopology::from_edges(3, &[(2, 1), (1, 0)], 2).unwrap();
        let phase = TopologyPhase::new("a", t, vec![-2.0, -1.0, 0.0]).unwrap();
        let model = PlatoonModel::new(3, 1.0).unwrap();
        assert_eq!(apply_phase(&model, &phase, None), apply_phase(&model, &phase, None));
    }

    fn engine() -> ResilienceEngine {
        // Leader 2 (index 1) broadcasts to both others in every phase; the
        // victim is index 0, a follower.
        let mk = |id: &str, edges: &[(usize, usize)], leader| {
            TopologyPhase::new(id, CommTopology::from_edges(3, edges, leader).unwrap(), vec![5.0, 0.0, -5.0]).unwrap()
        };
        let phases = vec![
            mk("a", &[(1, 0), (1, 2), (0, 2)], 1),
            mk("b", &[(1, 0), (1, 2)], 1),
            mk("c", &[(2, 0), (1, 2)], 1),
            mk("d", &[(1, 0), (2, 0), (1, 2)], 1),
        ];
        let roles = PhaseRoles {
            nominal: "a".into(),
            isolated: "c".into(),
            retrieval: "b".into(),
            recovered: "d".into(),
        };
        ResilienceEngine::new(ResilienceConfig::default(), roles, &phases, 0.0).unwrap()
    }

    fn at_rest(offset: f64) -> Vec<VehicleState> {
        vec![VehicleState::new(5.0 + offset, 0.0), VehicleState::new(0.0, 0.0), VehicleState::new(-5.0, 0.0)]
    }

    #[test]
    fn retrieval_toggles_then_recovers() {
        let mut e = engine();
        let away = at_rest(3.0);
        let sw = e.on_step(1.0, &[(0, DetectionEvent::Detected)], &away).unwrap();
        assert_eq!(sw[0].to, "c");
        assert_eq!(e.stage(), Stage::AwaitingMeasurement);
        assert!(e.on_step(2.0, &[(0, DetectionEvent::Measured { tau_hat: 1.0 })], &away).unwrap().is_empty());
        assert_eq!(e.stage(), Stage::Retrieving);
        let sw = e.on_step(3.0, &[], &away).unwrap();
        assert_eq!((sw[0].to.as_str(), sw[0].reason), ("b", SwitchReason::RetrievalToggle));
        assert!(e.on_step(4.0, &[], &at_rest(0.0)).unwrap().is_empty());
        let sw = e.on_step(5.0, &[], &at_rest(0.0)).unwrap();
        assert_eq!((sw[0].to.as_str(), sw[0].reason), ("d", SwitchReason::Recovered));
        assert!(audit_schedule(e.schedule(), &e.config().dwell, 10.0).is_ok());
    }

    #[test]
    fn large_delay_stops_victim() {
        let mut e = engine();
        let s = at_rest(3.0);
        e.on_step(1.0, &[(0, DetectionEvent::Detected)], &s).unwrap();
        let sw = e.on_step(2.0, &[(0, DetectionEvent::Measured { tau_hat: 15.0 })], &s).unwrap();
        assert_eq!(sw[0].reason, SwitchReason::Stopped);
        assert_eq!(sw[0].from, sw[0].to);
        assert_eq!(e.stopped_vehicle(), Some(0));
        assert_eq!(e.schedule().events.len(), 2);
        assert!(e.on_step(30.0, &[], &s).unwrap().is_empty());
    }

    #[test]
    fn measurement_of_another_vehicle_is_ignored() {
        let mut e = engine();
        let s = at_rest(3.0);
        e.on_step(1.0, &[(2, DetectionEvent::Measured { tau_hat: 30.0 })], &s).unwrap();
        assert_eq!(e.stage(), Stage::Nominal);
    }

    #[test]
    fn phases_must_follow_the_election() {
        let mut e = engine();
        // Vehicle 2 leads the nominal phase; losing it elects the closest
        // follower, which the configured response phases do not use.
        let err = e.on_step(1.0, &[(1, DetectionEvent::Detected)], &at_rest(0.0)).unwrap_err();
        assert!(matches!(err, ResilienceError::PhaseMismatch { .. } | ResilienceError::ElectionFailed { .. }));
    }
}
