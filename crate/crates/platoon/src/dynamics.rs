//! Closed-loop state matrices and fixed-step integration of the nominal ODE
//! and the delayed system.
//!
//! Stacked vectors follow the `[P; V]` layout: the first `n` entries are
//! positions (or spacing errors), the next `n` are velocities.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use thiserror::Error;

use crate::attack::DelayProfile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("state diverged (non-finite) at t = {t}")]
    Divergence { t: f64 },
    #[error("history underrun: state at t = {requested} requested, oldest retained sample is t = {oldest}")]
    HistoryUnderrun { requested: f64, oldest: f64 },
    #[error("state at t = {requested} requested beyond the newest sample t = {newest}")]
    HistoryOverrun { requested: f64, newest: f64 },
    #[error("invalid integration setup: {0}")]
    InvalidSetup(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub position: f64,
    pub velocity: f64,
}

impl VehicleState {
    pub fn new(position: f64, velocity: f64) -> Self {
        Self { position, velocity }
    }

    pub fn distance(&self, other: &VehicleState) -> f64 {
        (self.position - other.position).hypot(self.velocity - other.velocity)
    }
}

/// Per-vehicle stabiliser `x' = A x + B u` wrapped around the double integrator.
///
/// The kinematic row of `A` must be `[0, 1]` and `B` must be `[0, 1]`, so the
/// feedback only shapes the acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFeedback {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
}

impl LocalFeedback {
    pub fn new(a: Matrix2<f64>, b: Vector2<f64>) -> Result<Self, DynamicsError> {
        if a[(0, 0)] != 0.0 || a[(0, 1)] != 1.0 {
            return Err(DynamicsError::InvalidSetup(
                "local feedback must keep the kinematic row [0, 1]".into(),
            ));
        }
        if b != Vector2::new(0.0, 1.0) {
            return Err(DynamicsError::InvalidSetup("local input matrix must be [0, 1]".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidSetup("non-finite local feedback".into()));
        }
        Ok(Self { a, b })
    }

    /// Position and velocity gains of the acceleration row.
    pub fn gains(&self) -> (f64, f64) {
        (self.a[(1, 0)], self.a[(1, 1)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonModel {
    pub n: usize,
    pub gamma: f64,
    pub local_feedback: Option<LocalFeedback>,
}

impl PlatoonModel {
    pub fn new(n: usize, gamma: f64) -> Result<Self, DynamicsError> {
        if n < 2 {
            return Err(DynamicsError::InvalidSetup("at least two vehicles required".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(DynamicsError::InvalidSetup(format!("gamma = {gamma} must be positive")));
        }
        Ok(Self { n, gamma, local_feedback: None })
    }

    pub fn with_local_feedback(mut self, feedback: LocalFeedback) -> Self {
        self.local_feedback = Some(feedback);
        self
    }

    /// `[[0, 0], [k_p I, k_v I]]` of size `2m`, or zero without local feedback.
    pub fn local_block(&self, m: usize) -> DMatrix<f64> {
        let mut block = DMatrix::zeros(2 * m, 2 * m);
        if let Some(fb) = &self.local_feedback {
            let (kp, kv) = fb.gains();
            for i in 0..m {
                block[(m + i, i)] = kp;
                block[(m + i, m + i)] = kv;
            }
        }
        block
    }
}

/// Spacing and velocity errors relative to `leader`, stacked as `[P; V]`.
///
/// `shat_i = s_i - s_leader - d_i`, `zetahat_i = zeta_i - zeta_leader`.
pub fn error_coordinates(states: &[VehicleState], leader: usize, spacings: &[f64]) -> DVector<f64> {
    let n = states.len();
    let lead = states[leader];
    DVector::from_fn(2 * n, |k, _| {
        if k < n {
            states[k].position - lead.position - spacings[k]
        } else {
            states[k - n].velocity - lead.velocity
        }
    })
}

fn consensus_block(gamma: f64, m: &DMatrix<f64>, identity_top: bool) -> DMatrix<f64> {
    let n = m.nrows();
    let mut psi = DMatrix::zeros(2 * n, 2 * n);
    if identity_top {
        psi.view_mut((0, n), (n, n)).fill_with_identity();
    }
    psi.view_mut((n, 0), (n, n)).copy_from(&(-m));
    psi.view_mut((n, n), (n, n)).copy_from(&(-gamma * m));
    psi
}

/// `[[0, I], [-L, -gamma L]]`.
pub fn build_nominal(model: &PlatoonModel, l: &DMatrix<f64>) -> DMatrix<f64> {
    consensus_block(model.gamma, l, true)
}

/// `([[0, I], [-L_hat, -gamma L_hat]], [[0, 0], [-G, -gamma G]])`.
pub fn build_attacked(model: &PlatoonModel, l_hat: &DMatrix<f64>, g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (consensus_block(model.gamma, l_hat, true), consensus_block(model.gamma, g, false))
}

/// Reduced pair on follower errors. The delayed matrix keeps a zero
/// top-right block, inherited from the full delayed matrix it is reduced from.
pub fn build_reduced(model: &PlatoonModel, q: &DMatrix<f64>, w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (consensus_block(model.gamma, q, true), consensus_block(model.gamma, w, false))
}

/// State and delayed matrices for one operating mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub psi: DMatrix<f64>,
    pub psi_hat: DMatrix<f64>,
    pub psi_hat1: DMatrix<f64>,
    pub psi_tilde: DMatrix<f64>,
    pub psi_tilde1: DMatrix<f64>,
}

impl SystemMatrices {
    pub fn assemble(model: &PlatoonModel, family: &crate::topology::LaplacianFamily) -> Self {
        let psi = build_nominal(model, &family.l);
        let (psi_hat, psi_hat1) = build_attacked(model, &family.l_hat, &family.g);
        let (psi_tilde, psi_tilde1) = build_reduced(model, &family.q_red, &family.w_red);
        Self { psi, psi_hat, psi_hat1, psi_tilde, psi_tilde1 }
    }

    /// Adds the per-vehicle stabiliser to every state (non-delayed) matrix.
    pub fn with_local_feedback(mut self, model: &PlatoonModel) -> Self {
        let n = self.psi.nrows() / 2;
        let full = model.local_block(n);
        self.psi += &full;
        self.psi_hat += &full;
        self.psi_tilde += model.local_block(n - 1);
        self
    }
}

/// Grid-aligned buffer of past stacked states.
///
/// Samples sit at `start + k h`. Times before the first retained sample and
/// within `prehistory` of `start` return the initial state, which models a
/// system resting in its initial state before integration begins.
#[derive(Debug, Clone)]
pub struct StateHistory {
    h: f64,
    start: f64,
    prehistory: f64,
    initial: DVector<f64>,
    first_index: u64,
    samples: VecDeque<DVector<f64>>,
}

impl StateHistory {
    /// A buffer holding `x0` at `start`, keeping at least `span` seconds of
    /// samples and answering for a constant prehistory of the same length.
    pub fn new(x0: DVector<f64>, start: f64, h: f64, span: f64) -> Self {
        let mut samples = VecDeque::new();
        samples.push_back(x0.clone());
        Self {
            h,
            start,
            prehistory: span,
            initial: x0,
            first_index: 0,
            samples,
        }
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    fn time_of(&self, index: u64) -> f64 {
        self.start + index as f64 * self.h
    }

    pub fn newest_time(&self) -> f64 {
        self.time_of(self.first_index + self.samples.len() as u64 - 1)
    }

    pub fn oldest_time(&self) -> f64 {
        self.time_of(self.first_index)
    }

    pub fn newest(&self) -> &DVector<f64> {
        self.samples.back().expect("history is never empty")
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends the state one step after the newest sample and drops samples
    /// older than the retention span.
    pub fn push(&mut self, x: DVector<f64>) {
        self.samples.push_back(x);
        let keep = (self.prehistory / self.h).ceil() as usize + 2;
        while self.samples.len() > keep {
            self.samples.pop_front();
            self.first_index += 1;
        }
    }

    /// Linear interpolation between neighbouring samples.
    pub fn state_at(&self, t: f64) -> Result<DVector<f64>, DynamicsError> {
        let tol = 1e-9 * self.h;
        let newest = self.newest_time();
        if t > newest + tol {
            return Err(DynamicsError::HistoryOverrun { requested: t, newest });
        }
        let oldest = self.oldest_time();
        if t < oldest - tol {
            if self.first_index == 0 && t >= self.start - self.prehistory - tol {
                return Ok(self.initial.clone());
            }
            return Err(DynamicsError::HistoryUnderrun { requested: t, oldest });
        }
        let pos = ((t - oldest) / self.h).max(0.0);
        let k = pos.floor();
        let frac = pos - k;
        let k = k as usize;
        if k + 1 >= self.samples.len() || frac <= 1e-9 {
            return Ok(self.samples[k.min(self.samples.len() - 1)].clone());
        }
        if frac >= 1.0 - 1e-9 {
            return Ok(self.samples[k + 1].clone());
        }
        Ok(&self.samples[k] * (1.0 - frac) + &self.samples[k + 1] * frac)
    }
}

/// Past states seen from inside one RK4 stage.
///
/// Requests at or after the step start that fall inside the current step are
/// interpolated between the step-start state and the stage state; a zero
/// delay therefore returns the stage state itself.
pub struct PastView<'a> {
    history: &'a StateHistory,
    t_start: f64,
    x_start: &'a DVector<f64>,
    t_stage: f64,
    x_stage: &'a DVector<f64>,
}

impl PastView<'_> {
    pub fn state_at(&self, t: f64) -> Result<DVector<f64>, DynamicsError> {
        let tol = 1e-12 * self.history.step();
        if t >= self.t_stage - tol {
            return Ok(self.x_stage.clone());
        }
        if t > self.t_start + tol {
            let frac = (t - self.t_start) / (self.t_stage - self.t_start);
            return Ok(self.x_start * (1.0 - frac) + self.x_stage * frac);
        }
        self.history.state_at(t)
    }
}

/// One classical RK4 step of `x' = f(t, x, past)`.
///
/// `history` must end with the sample `(t, x)`.
pub fn rk4_step_delayed<F>(
    history: &StateHistory,
    t: f64,
    x: &DVector<f64>,
    h: f64,
    mut rhs: F,
) -> Result<DVector<f64>, DynamicsError>
where
    F: FnMut(f64, &DVector<f64>, &PastView<'_>) -> Result<DVector<f64>, DynamicsError>,
{
    let view = |t_stage: f64, x_stage| PastView {
        history,
        t_start: t,
        x_start: x,
        t_stage,
        x_stage,
    };
    let k1 = rhs(t, x, &view(t, x))?;
    let x2 = x + &k1 * (h / 2.0);
    let k2 = rhs(t + h / 2.0, &x2, &view(t + h / 2.0, &x2))?;
    let x3 = x + &k2 * (h / 2.0);
    let k3 = rhs(t + h / 2.0, &x3, &view(t + h / 2.0, &x3))?;
    let x4 = x + &k3 * h;
    let k4 = rhs(t + h, &x4, &view(t + h, &x4))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// One classical RK4 step of `x' = A x`.
pub fn rk4_step_linear(a: &DMatrix<f64>, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = a * x;
    let k2 = a * (x + &k1 * (h / 2.0));
    let k3 = a * (x + &k2 * (h / 2.0));
    let k4 = a * (x + &k3 * h);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Samples `(t_k, x_k)` with `t_k = k h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds the initial state")
    }
}

fn step_count(t_end: f64, h: f64) -> Result<usize, DynamicsError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(DynamicsError::InvalidSetup(format!("step h = {h} must be positive")));
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(DynamicsError::InvalidSetup(format!("t_end = {t_end} must be positive")));
    }
    Ok((t_end / h).round() as usize)
}

fn check_finite(x: &DVector<f64>, t: f64) -> Result<(), DynamicsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::Divergence { t })
    }
}

/// Fixed-step RK4 solution of `X' = Psi X`.
pub fn integrate_nominal(psi: &DMatrix<f64>, x0: &DVector<f64>, t_end: f64, h: f64) -> Result<Trajectory, DynamicsError> {
    let steps = step_count(t_end, h)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    times.push(0.0);
    states.push(x.clone());
    for k in 1..=steps {
        x = rk4_step_linear(psi, &x, h);
        let t = k as f64 * h;
        check_finite(&x, t)?;
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Fixed-step RK4 solution of `X' = Psi_a X(t) + Psi_a1 X(t - tau(t))`.
///
/// The history before `t = 0` is the constant `x0` over `[-2U, 0]`; delayed
/// states are linearly interpolated from the buffer.
pub fn integrate_delayed(
    psi_a: &DMatrix<f64>,
    psi_a1: &DMatrix<f64>,
    x0: &DVector<f64>,
    delay: &DelayProfile,
    t_end: f64,
    h: f64,
) -> Result<Trajectory, DynamicsError> {
    let steps = step_count(t_end, h)?;
    let span = 2.0 * delay.bound.max(0.0);
    let mut history = StateHistory::new(x0.clone(), 0.0, h, span);
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        x = rk4_step_delayed(&history, t, &x, h, |ts, xs, past| {
            let tau = delay.delay_in_step(t, ts);
            let mut dx = psi_a * xs;
            if tau > 0.0 {
                dx += psi_a1 * past.state_at(ts - tau)?;
            } else {
                dx += psi_a1 * xs;
            }
            Ok(dx)
        })?;
        let t_next = (k + 1) as f64 * h;
        check_finite(&x, t_next)?;
        history.push(x.clone());
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}
