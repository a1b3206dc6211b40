//! Twin-counter delay detection.
//!
//! Each vehicle keeps two tick counters. While its transmitted state agrees
//! with the reference model both counters advance together. When the two
//! disagree by more than `epsilon`, the first counter freezes and the
//! reference state is latched; the second keeps ticking until the transmitted
//! state catches up with the latch. The gap between the counters is the delay.

use serde::Serialize;

use crate::dynamics::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Nominal,
    Counting,
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DetectionEvent {
    Detected,
    Measured { tau_hat: f64 },
    Reset,
}

impl DetectionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            DetectionEvent::Detected => "detected",
            DetectionEvent::Measured { .. } => "measured",
            DetectionEvent::Reset => "reset",
        }
    }

    pub fn tau_hat(&self) -> f64 {
        match self {
            DetectionEvent::Measured { tau_hat } => *tau_hat,
            _ => 0.0,
        }
    }
}

/// Counter pair of one vehicle. Counters hold whole integration steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleDetector {
    t1: u64,
    t2: u64,
    mode: DetectorMode,
    latch: Option<VehicleState>,
    tau_hat: f64,
    epsilon: f64,
    h: f64,
}

impl VehicleDetector {
    pub fn new(epsilon: f64, h: f64) -> Self {
        Self {
            t1: 0,
            t2: 0,
            mode: DetectorMode::Nominal,
            latch: None,
            tau_hat: 0.0,
            epsilon,
            h,
        }
    }

    pub fn mode(&self) -> DetectorMode {
        self.mode
    }

    /// First counter in seconds.
    pub fn t1(&self) -> f64 {
        self.t1 as f64 * self.h
    }

    /// Second counter in seconds.
    pub fn t2(&self) -> f64 {
        self.t2 as f64 * self.h
    }

    pub fn latch(&self) -> Option<VehicleState> {
        self.latch
    }

    /// Most recent measurement, 0 until one completes.
    pub fn tau_hat(&self) -> f64 {
        self.tau_hat
    }

    /// Advances one integration step.
    ///
    /// `observed` is the state the vehicle is currently transmitting and
    /// `reference` is the reference model's state for the same vehicle.
    /// After a measurement the counters restart on the next step, so a
    /// persisting delay is detected and measured again.
    pub fn step(&mut self, observed: VehicleState, reference: VehicleState) -> Option<DetectionEvent> {
        if self.mode == DetectorMode::Measured {
            self.t1 = 0;
            self.t2 = 0;
            self.latch = None;
            self.mode = DetectorMode::Nominal;
        }
        match self.mode {
            DetectorMode::Nominal | DetectorMode::Measured => {
                if observed.distance(&reference) <= self.epsilon {
                    self.t1 += 1;
                    self.t2 += 1;
                    None
                } else {
                    self.latch = Some(reference);
                    self.mode = DetectorMode::Counting;
                    Some(DetectionEvent::Detected)
                }
            }
            DetectorMode::Counting => {
                self.t2 += 1;
                let latch = self.latch.expect("counting always has a latch");
                if observed.distance(&latch) <= self.epsilon {
                    self.tau_hat = (self.t2 - self.t1) as f64 * self.h;
                    self.mode = DetectorMode::Measured;
                    Some(DetectionEvent::Measured { tau_hat: self.tau_hat })
                } else {
                    None
                }
            }
        }
    }

    /// Zeroes both counters and clears the latch. A measurement in progress
    /// is abandoned; the last completed `tau_hat` is kept.
    pub fn reset(&mut self) -> DetectionEvent {
        self.t1 = 0;
        self.t2 = 0;
        self.latch = None;
        self.mode = DetectorMode::Nominal;
        DetectionEvent::Reset
    }
}

/// One detector per vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBank {
    vehicles: Vec<VehicleDetector>,
}

impl DetectorBank {
    pub fn new(n: usize, epsilon: f64, h: f64) -> Self {
        Self { vehicles: vec![VehicleDetector::new(epsilon, h); n] }
    }

    pub fn vehicle(&self, i: usize) -> &VehicleDetector {
        &self.vehicles[i]
    }

    pub fn step(&mut self, observed: &[VehicleState], reference: &[VehicleState]) -> Vec<(usize, DetectionEvent)> {
        self.vehicles
            .iter_mut()
            .enumerate()
            .filter_map(|(i, det)| det.step(observed[i], reference[i]).map(|e| (i, e)))
            .collect()
    }

    pub fn reset(&mut self, i: usize) -> DetectionEvent {
        self.vehicles[i].reset()
    }
}
