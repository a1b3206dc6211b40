//! DoS attacks modelled as a time-varying delay on everything one vehicle
//! transmits.

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsError, StateHistory, VehicleState};
use crate::topology::TopologyPhase;

/// Shape of `tau(t)` while the attack is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DelayShape {
    Constant { tau0: f64 },
    /// `tau0 + slope * (t - onset)`.
    Ramp { tau0: f64, slope: f64 },
    /// `mean + amplitude * sin(omega * t)`, with absolute `t`.
    Sinusoidal { mean: f64, amplitude: f64, omega: f64 },
    /// Linear interpolation through `(t - onset, tau)` breakpoints, held
    /// constant past the last one.
    Piecewise { points: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayProfile {
    pub shape: DelayShape,
    pub onset: f64,
    pub end: Option<f64>,
    /// Upper bound `U` on the delay (s).
    pub bound: f64,
    /// Upper bound `d < 1` on the delay derivative.
    pub derivative_bound: f64,
    pub victim: usize,
}

impl DelayProfile {
    pub fn constant(tau0: f64, onset: f64, bound: f64, derivative_bound: f64, victim: usize) -> Self {
        Self {
            shape: DelayShape::Constant { tau0 },
            onset,
            end: None,
            bound,
            derivative_bound,
            victim,
        }
    }

    /// Onset and end moved to the nearest multiple of `h`.
    pub fn snapped(mut self, h: f64) -> Self {
        self.onset = (self.onset / h).round() * h;
        self.end = self.end.map(|e| (e / h).round() * h);
        self
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.onset && self.end.map_or(true, |e| t < e)
    }

    /// `tau(t)`, or 0 outside the attack window.
    pub fn sample(&self, t: f64) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        self.shape_value(t)
    }

    /// Delay applied inside an integration step that starts at `step_start`.
    ///
    /// Activation is decided once per step so the attack starts exactly on a
    /// grid point; the value is still sampled at the stage time.
    pub fn delay_in_step(&self, step_start: f64, t: f64) -> f64 {
        if self.is_active(step_start) {
            self.shape_value(t)
        } else {
            0.0
        }
    }

    fn shape_value(&self, t: f64) -> f64 {
        match &self.shape {
            DelayShape::Constant { tau0 } => *tau0,
            DelayShape::Ramp { tau0, slope } => tau0 + slope * (t - self.onset),
            DelayShape::Sinusoidal { mean, amplitude, omega } => mean + amplitude * (omega * t).sin(),
            DelayShape::Piecewise { points } => piecewise_value(points, t - self.onset),
        }
    }

    /// Analytic `d tau / dt` for the closed-form shapes.
    pub fn derivative(&self, t: f64) -> Option<f64> {
        match &self.shape {
            DelayShape::Constant { .. } => Some(0.0),
            DelayShape::Ramp { slope, .. } => Some(*slope),
            DelayShape::Sinusoidal { amplitude, omega, .. } => Some(amplitude * omega * (omega * t).cos()),
            DelayShape::Piecewise { .. } => None,
        }
    }

    /// Largest delay reachable over `[onset, horizon]`, sampled at `step`.
    pub fn max_delay(&self, horizon: f64, step: f64) -> f64 {
        active_grid(self, horizon, step).map(|t| self.sample(t)).fold(0.0, f64::max)
    }

    /// Checks `0 < tau < U`, `U + tau < 2U` and `tau' < d < 1` on the active window.
    ///
    /// Violations are collected (first occurrence per kind), never raised.
    pub fn validate(&self, horizon: f64, step: f64) -> ValidationReport {
        let mut report = ValidationReport::default();
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            report.push(ViolationKind::BoundNotPositive, self.onset, self.bound);
        }
        if !(self.derivative_bound < 1.0) || !self.derivative_bound.is_finite() {
            report.push(ViolationKind::DerivativeBoundNotBelowOne, self.onset, self.derivative_bound);
        }
        if let DelayShape::Piecewise { points } = &self.shape {
            if points.is_empty() || points.windows(2).any(|w| w[1].0 <= w[0].0) {
                report.push(ViolationKind::MalformedBreakpoints, self.onset, f64::NAN);
                return report;
            }
        }
        if !(step > 0.0) {
            return report;
        }
        let mut previous: Option<(f64, f64)> = None;
        for t in active_grid(self, horizon, step) {
            let tau = self.sample(t);
            if !(tau > 0.0) {
                report.push(ViolationKind::NotPositive, t, tau);
            }
            if !(tau < self.bound) {
                report.push(ViolationKind::ExceedsBound, t, tau);
            }
            if !(self.bound + tau < 2.0 * self.bound) {
                report.push(ViolationKind::ExceedsDoubleBound, t, tau);
            }
            let rate = match self.derivative(t) {
                Some(r) => Some(r),
                None => previous.map(|(tp, taup)| (tau - taup) / (t - tp)),
            };
            if let Some(rate) = rate {
                if !(rate < self.derivative_bound) {
                    report.push(ViolationKind::DerivativeTooLarge, t, rate);
                }
            }
            previous = Some((t, tau));
        }
        report
    }
}

fn piecewise_value(points: &[(f64, f64)], local: f64) -> f64 {
    match points {
        [] => 0.0,
        [(_, tau)] => *tau,
        _ => {
            if local <= points[0].0 {
                return points[0].1;
            }
            for w in points.windows(2) {
                let ((t0, v0), (t1, v1)) = (w[0], w[1]);
                if local <= t1 {
                    return v0 + (v1 - v0) * (local - t0) / (t1 - t0);
                }
            }
            points[points.len() - 1].1
        }
    }
}

fn active_grid(profile: &DelayProfile, horizon: f64, step: f64) -> impl Iterator<Item = f64> + '_ {
    let stop = profile.end.map_or(horizon, |e| e.min(horizon));
    let count = if stop > profile.onset && step > 0.0 {
        ((stop - profile.onset) / step).floor() as usize + 1
    } else {
        0
    };
    (0..count)
        .map(move |k| profile.onset + k as f64 * step)
        .filter(move |&t| profile.is_active(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    BoundNotPositive,
    DerivativeBoundNotBelowOne,
    MalformedBreakpoints,
    NotPositive,
    ExceedsBound,
    ExceedsDoubleBound,
    DerivativeTooLarge,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn push(&mut self, kind: ViolationKind, t: f64, value: f64) {
        if !self.violations.iter().any(|v| v.kind == kind) {
            self.violations.push(Violation { kind, t, value });
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<&Violation> {
        self.violations
            .iter()
            .min_by(|a, b| a.t.partial_cmp(&b.t).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// A transmitter whose state reaches its neighbours late.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayedSource {
    pub vehicle: usize,
    pub state: VehicleState,
}

/// Consensus input of every vehicle with one transmitter possibly delayed.
///
/// States are compared in the formation frame `s_i - d_i`, so the input is
/// `u_i = -sum_j a_ij ((s_i - d_i) - (s_j - d_j) + gamma (zeta_i - zeta_j))`
/// where the victim's `(s_j, zeta_j)` is the delayed copy when one is given.
/// With `delayed = None`, or a delayed copy equal to the current state, this is
/// the undelayed distributed controller.
pub fn delayed_control(
    gamma: f64,
    phase: &TopologyPhase,
    now: &[VehicleState],
    delayed: Option<DelayedSource>,
) -> Vec<f64> {
    let n = now.len();
    let a = phase.topology.adjacency();
    let d = &phase.spacings;
    (0..n)
        .map(|i| {
            let yi = now[i].position - d[i];
            let mut u = 0.0;
            for j in 0..n {
                let w = a[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let sj = match delayed {
                    Some(src) if src.vehicle == j => src.state,
                    _ => now[j],
                };
                u -= w * ((yi - (sj.position - d[j])) + gamma * (now[i].velocity - sj.velocity));
            }
            u
        })
        .collect()
}

/// [`delayed_control`] with the victim's past state read from `history`,
/// which stores stacked `[s; zeta]` vectors.
pub fn delayed_control_from_history(
    gamma: f64,
    phase: &TopologyPhase,
    now: &[VehicleState],
    history: &StateHistory,
    profile: &DelayProfile,
    step_start: f64,
    t: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let tau = profile.delay_in_step(step_start, t);
    let victim = profile.victim;
    let delayed = if tau > 0.0 && phase.topology.transmits(victim) {
        let past = history.state_at(t - tau)?;
        let n = now.len();
        Some(DelayedSource {
            vehicle: victim,
            state: VehicleState::new(past[victim], past[n + victim]),
        })
    } else {
        None
    };
    Ok(delayed_control(gamma, phase, now, delayed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::CommTopology;
    use nalgebra::DVector;

    fn profile(shape: DelayShape) -> DelayProfile {
        DelayProfile {
            shape,
            onset: 10.0,
            end: None,
            bound: 8.0,
            derivative_bound: 0.5,
            victim: 0,
        }
    }

    #[test]
    fn zero_before_onset() {
        let p = profile(DelayShape::Constant { tau0: 5.0 });
        assert_eq!(p.sample(9.999), 0.0);
        assert_eq!(p.sample(10.0), 5.0);
        assert_eq!(p.sample(1e4), 5.0);
    }

    #[test]
    fn window_end_is_exclusive() {
        let mut p = profile(DelayShape::Constant { tau0: 5.0 });
        p.end = Some(20.0);
        assert_eq!(p.sample(19.999), 5.0);
        assert_eq!(p.sample(20.0), 0.0);
    }

    #[test]
    fn snapping_onto_grid() {
        let p = DelayProfile::constant(1.0, 30.0004, 5.0, 0.1, 0).snapped(1e-3);
        assert_eq!(p.onset, 30.0);
    }

    #[test]
    fn sinusoid_is_slow_varying() {
        let p = profile(DelayShape::Sinusoidal { mean: 5.0, amplitude: 2.0, omega: 0.05 });
        let max_rate = (0..10_000)
            .map(|k| p.derivative(k as f64 * 0.1).unwrap().abs())
            .fold(0.0, f64::max);
        assert!((max_rate - 0.1).abs() < 1e-6);
        assert!(p.validate(200.0, 1e-2).passed());
    }

    #[test]
    fn touching_the_bound_fails() {
        let p = profile(DelayShape::Constant { tau0: 8.0 });
        let report = p.validate(20.0, 1e-3);
        assert!(!report.passed());
        assert_eq!(report.violations[0].kind, ViolationKind::ExceedsBound);
        assert_eq!(report.first_violation().unwrap().t, 10.0);
    }

    #[test]
    fn constant_below_bound_passes() {
        let p = profile(DelayShape::Constant { tau0: 0.9 * 8.0 });
        assert!(p.validate(100.0, 1e-3).passed());
    }

    #[test]
    fn steep_ramp_fails_derivative_bound() {
        let p = profile(DelayShape::Ramp { tau0: 1.0, slope: 1.5 });
        let report = p.validate(11.0, 1e-3);
        assert!(report.violations.iter().any(|v| v.kind == ViolationKind::DerivativeTooLarge));
    }

    #[test]
    fn piecewise_uses_finite_differences() {
        let slow = profile(DelayShape::Piecewise { points: vec![(0.0, 1.0), (10.0, 2.0)] });
        assert!(slow.validate(40.0, 1e-2).passed());
        assert!((slow.sample(15.0) - 1.5).abs() < 1e-12);
        let fast = profile(DelayShape::Piecewise { points: vec![(0.0, 1.0), (1.0, 3.0)] });
        let report = fast.validate(40.0, 1e-2);
        let v = report.first_violation().unwrap();
        assert_eq!(v.kind, ViolationKind::DerivativeTooLarge);
        assert!((v.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn parameter_bounds_checked() {
        let mut p = profile(DelayShape::Constant { tau0: 1.0 });
        p.derivative_bound = 1.0;
        assert!(!p.validate(20.0, 1e-2).passed());
    }

    fn pair() -> TopologyPhase {
        // Vehicle 2 (index 1) leads, vehicle 1 listens to it.
        let t = CommTopology::from_edges(2, &[(1, 0)], 1).unwrap();
        TopologyPhase::new("pair", t, vec![-5.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_delay_matches_undelayed_controller() {
        let phase = pair();
        let now = [VehicleState::new(1.0, 2.0), VehicleState::new(3.0, 4.0)];
        let plain = delayed_control(0.7, &phase, &now, None);
        let same = delayed_control(
            0.7,
            &phase,
            &now,
            Some(DelayedSource { vehicle: 1, state: now[1] }),
        );
        assert_eq!(plain, same);
    }

    #[test]
    fn unobserved_victim_has_no_effect() {
        let phase = pair();
        let now = [VehicleState::new(1.0, 2.0), VehicleState::new(3.0, 4.0)];
        let plain = delayed_control(0.7, &phase, &now, None);
        let hit = delayed_control(
            0.7,
            &phase,
            &now,
            Some(DelayedSource { vehicle: 0, state: VehicleState::new(-50.0, 9.0) }),
        );
        assert_eq!(plain, hit);
    }

    #[test]
    fn two_vehicle_chain_by_hand() {
        // u_1 = -a ((s1 - d1) - (s2(t-tau) - d2) + gamma (z1 - z2(t-tau)))
        //     = -(1 - (-5) - (0.5 - 0) ... ) evaluated below.
        let phase = pair();
        let now = [VehicleState::new(1.0, 2.0), VehicleState::new(3.0, 4.0)];
        let past = VehicleState::new(0.5, 3.5);
        let u = delayed_control(0.7, &phase, &now, Some(DelayedSource { vehicle: 1, state: past }));
        let expected = -((1.0 + 5.0 - 0.5) + 0.7 * (2.0 - 3.5));
        assert!((u[0] - expected).abs() < 1e-12);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn history_lookup_uses_step_activation() {
        let phase = pair();
        let mut history = StateHistory::new(DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]), 0.0, 0.1, 2.0);
        for k in 1..=30 {
            let t = k as f64 * 0.1;
            history.push(DVector::from_vec(vec![t, t, 1.0, 1.0]));
        }
        let p = DelayProfile::constant(1.0, 3.0, 2.0, 0.5, 1);
        let now = [VehicleState::new(3.0, 1.0), VehicleState::new(3.0, 1.0)];
        // Step starting before onset: undelayed even though the stage time is past it.
        let u = delayed_control_from_history(1.0, &phase, &now, &history, &p, 2.9, 3.0).unwrap();
        assert_eq!(u[0], -5.0);
        let u = delayed_control_from_history(1.0, &phase, &now, &history, &p, 3.0, 3.0).unwrap();
        // Delayed position of vehicle 2 is 2.0.
        assert!((u[0] - -(3.0 + 5.0 - 2.0)).abs() < 1e-12);
    }
}
