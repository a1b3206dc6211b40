use platoon::attack::DelayShape;
use platoon::detection::DetectionEvent;
use platoon::resilience::SwitchReason;
use platoon::scenario::{self, PlotData, ScenarioConfig, ScenarioError, ScenarioTrace};

fn demo_trace() -> (ScenarioConfig, ScenarioTrace) {
    let config = ScenarioConfig::demo();
    let trace = scenario::run(&config).expect("demo runs");
    (config, trace)
}

#[test]
fn one_record_per_step_in_time_order() {
    let (config, trace) = demo_trace();
    let steps = (config.integration.t_end / config.integration.h).round() as usize;
    assert_eq!(trace.records.len(), steps + 1);
    assert!(trace.records.windows(2).all(|w| w[1].t > w[0].t));
}

#[test]
fn detection_fires_at_onset() {
    let (config, trace) = demo_trace();
    let onset = config.delay_profile().unwrap().onset;
    let detected = trace.summary.detection_time.expect("attack is detected");
    assert!((detected - onset).abs() <= 2.0 * config.integration.h, "{detected} vs {onset}");
}

#[test]
fn responses_follow_their_triggers() {
    let (_, trace) = demo_trace();
    let first = |pred: &dyn Fn(&DetectionEvent) -> bool| trace.detections.iter().find(|d| pred(&d.event)).map(|d| d.t);
    let detected = first(&|e| matches!(e, DetectionEvent::Detected)).unwrap();
    let measured = first(&|e| matches!(e, DetectionEvent::Measured { .. })).unwrap();
    for s in &trace.switches {
        match s.reason {
            SwitchReason::Detected => assert!(s.t >= detected),
            _ => assert!(s.t >= measured, "{:?} at {} precedes the measurement at {measured}", s.reason, s.t),
        }
    }
}

#[test]
fn states_are_continuous_across_switches() {
    let (config, trace) = demo_trace();
    let h = config.integration.h;
    for s in &trace.switches {
        let k = trace.records.iter().position(|r| (r.t - s.t).abs() < 0.5 * h).unwrap();
        for w in trace.records[k.saturating_sub(1)..(k + 2).min(trace.records.len())].windows(2) {
            for (a, b) in w[0].states.iter().zip(&w[1].states) {
                let speed = a.velocity.abs().max(b.velocity.abs());
                assert!((b.position - a.position).abs() <= h * speed + 1e-6);
                assert!((b.velocity - a.velocity).abs() <= 1.0);
            }
        }
    }
}

#[test]
fn victim_never_transmits_after_isolation() {
    let (config, trace) = demo_trace();
    let victim = config.attack.as_ref().unwrap().victim;
    let mut seen = std::collections::BTreeSet::new();
    for r in trace.records.iter().filter(|r| r.t >= trace.summary.detection_time.unwrap()) {
        seen.insert(trace.phase_of(r).to_string());
    }
    assert!(seen.len() >= 2);
    for id in seen {
        assert!(!config.phase(&id).unwrap().topology.transmits(victim), "victim transmits in {id}");
    }
}

#[test]
fn stopped_victim_stays_stopped() {
    let mut config = ScenarioConfig::demo();
    config.attack.as_mut().unwrap().shape = DelayShape::Constant { tau0: 20.0 };
    let trace = scenario::run(&config).unwrap();
    assert_eq!(trace.summary.response, "stopped");
    let victim = config.attack.as_ref().unwrap().victim;
    let stop = trace.summary.stop_time.unwrap();
    let halted = trace.records.iter().position(|r| r.t >= stop && r.states[victim].velocity <= 1e-9).unwrap();
    assert!(trace.records[halted..].iter().all(|r| r.states[victim].velocity.abs() <= 1e-9));
}

/// Off-grid delays never land exactly on a stored sample, so the match ball
/// has to cover the distance the victim travels in one step.
#[test]
fn varying_delay_is_remeasured() {
    let mut config = ScenarioConfig::demo();
    config.detector.epsilon = 0.05;
    let attack = config.attack.as_mut().unwrap();
    attack.shape = DelayShape::Ramp { tau0: 3.0, slope: 0.05 };
    config.integration.t_end = 60.0;
    let profile = config.delay_profile().unwrap();
    let trace = scenario::run(&config).unwrap();
    let measured: Vec<(f64, f64)> = trace
        .detections
        .iter()
        .filter_map(|d| match d.event {
            DetectionEvent::Measured { tau_hat } => Some((d.t, tau_hat)),
            _ => None,
        })
        .collect();
    assert!(measured.len() >= 2, "{measured:?}");
    let (lo, hi) = (profile.sample(profile.onset), profile.sample(config.integration.t_end));
    for (t, tau_hat) in &measured {
        assert!(*tau_hat >= lo - 0.1 && *tau_hat <= hi + 0.1, "tau_hat {tau_hat} at {t} outside [{lo}, {hi}]");
    }
}

#[test]
fn invalid_config_is_a_validation_error() {
    let mut config = ScenarioConfig::demo();
    config.resilience.critical_delay = 30.0;
    let err = scenario::run(&config).unwrap_err();
    assert!(matches!(err, ScenarioError::Config(_)));
    assert!(err.is_validation());
}

#[test]
fn exported_trace_reads_back_exactly() {
    let (config, trace) = demo_trace();
    let dir = tempfile::tempdir().unwrap();
    let stride = 250;
    let files = scenario::export(&trace, dir.path(), stride).unwrap();
    for name in ["trace.csv", "events.csv", "switches.csv", "summary.json", "positions.svg", "velocities.svg", "switching.svg"] {
        assert!(files.iter().any(|f| f.ends_with(name)), "{name} missing");
    }
    let back = PlotData::read_csv(&dir.path().join(scenario::TRACE_FILE)).unwrap();
    let full = PlotData::from_trace(&trace);
    let last = full.times.len() - 1;
    let keep: Vec<usize> = (0..full.times.len()).filter(|k| k % stride == 0 || *k == last).collect();
    assert_eq!(back.times, keep.iter().map(|&k| full.times[k]).collect::<Vec<_>>());
    for i in 0..config.model.n {
        assert_eq!(back.positions[i], keep.iter().map(|&k| full.positions[i][k]).collect::<Vec<_>>());
        assert_eq!(back.velocities[i], keep.iter().map(|&k| full.velocities[i][k]).collect::<Vec<_>>());
    }
    assert_eq!(back, full.strided(stride));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(scenario::SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["final_leader_vehicle"], 2);
    assert_eq!(summary["switching_audit"]["holds"], true);
}

#[test]
fn demo_nominal_phase_is_certified() {
    let (_, trace) = demo_trace();
    let cert = trace.summary.certificate.expect("demo has an attack");
    assert!(cert.certified, "margin {}", cert.margin);
}
