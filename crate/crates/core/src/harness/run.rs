use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ConfigError, FleetSource, ScenarioConfig};
use super::metrics::MetricsReport;
use crate::depsafety::{self, DependencyEdge, Detector, Violation};
use crate::fleet::{generate_fleet, Fleet, Pool, ServiceId};
use crate::orchestrator::{DrillKind, DrillSpec, OrchestratorError, Phase, RunRecord, Simulation, Trigger, TriggerAction};
use crate::simkernel::{SeededRng, SimTime};
use crate::traffic::Mode;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("fleet: {0}")]
    Fleet(#[from] crate::fleet::FleetError),
    #[error("orchestrator: {0}")]
    Orchestrator(#[from] OrchestratorError),
    #[error("dependency analysis: {0}")]
    DepSafety(#[from] crate::depsafety::DepSafetyError),
    #[error("baseline window [{0}, {1}) overlaps drill window [{2}, {3})")]
    OverlappingWindows(SimTime, SimTime, SimTime, SimTime),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Orchestrator(OrchestratorError::Config(_)))
    }
}

/// Dependency analysis performed before the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub trace_records: usize,
    pub classified_edges: usize,
    pub violations: Vec<Violation>,
    pub offboarded: BTreeSet<ServiceId>,
}

pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub report: MetricsReport,
    pub record: RunRecord,
    pub analysis: AnalysisSummary,
    /// Fleet as built before the run.
    pub initial_fleet: Fleet,
    pub final_fleet: Fleet,
    pub event_log: Vec<u8>,
}

pub fn build_fleet(cfg: &ScenarioConfig) -> Result<Fleet, HarnessError> {
    let mut fleet = match &cfg.fleet {
        FleetSource::Generated(g) => generate_fleet(g)?,
        FleetSource::Pinned { path } => {
            let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
            Fleet::from_json(&text)?
        }
    };
    cfg.validate_against(&fleet)?;
    for c in &cfg.city_traffic {
        let t = &mut fleet.cities[c.city as usize].traffic;
        t.base_rps = c.base_rps;
        t.diurnal_amplitude = c.diurnal_amplitude;
        t.peak_at = c.peak_at;
    }
    if cfg.empty_overcommit {
        strip_overcommit(&mut fleet);
    }
    Ok(fleet)
}

/// Removes every overcommit-pool replica and its host allocation.
pub fn strip_overcommit(fleet: &mut Fleet) {
    for h in fleet.hosts.values_mut() {
        h.allocations.retain(|a| a.pool != Pool::Overcommit);
    }
    for e in &mut fleet.environments {
        e.placement.retain(|p| p.pool != Pool::Overcommit);
        e.starting.retain(|p| p.pool != Pool::Overcommit);
    }
}

fn inject(fleet: &mut Fleet, cfg: &ScenarioConfig, after_analysis: bool) {
    for e in cfg.inject_edges.iter().filter(|e| e.after_analysis == after_analysis) {
        let edge = DependencyEdge::between(e.caller, e.callee, e.semantics);
        match fleet.dependencies.iter_mut().find(|d| d.key() == edge.key()) {
            Some(d) => d.ground_truth = e.semantics,
            None => fleet.dependencies.push(edge),
        }
    }
}

/// Probes every edge, classifies from the trace and off-boards the callees
/// of fail-close tier inversions to a fixpoint.
pub fn analyze(fleet: &mut Fleet, cfg: &ScenarioConfig) -> Result<AnalysisSummary, HarnessError> {
    if !cfg.depsafety.enabled {
        return Ok(AnalysisSummary::default());
    }
    let mut rng = SeededRng::new(cfg.seed).stream("probe");
    let trace = depsafety::generate_probe_trace(&fleet.dependencies, &cfg.depsafety.probe, &mut rng);
    let classified = depsafety::analyze_trace(&trace, &cfg.depsafety.classifier);
    let semantics = depsafety::semantics_of(&classified);
    for e in &mut fleet.dependencies {
        if let Some(s) = semantics.get(&e.key()) {
            e.semantics = *s;
        }
    }
    let (mut violations, offboarded) = depsafety::harden(fleet, &semantics, Detector::Runtime);
    depsafety::attach_evidence(&mut violations, &classified);
    Ok(AnalysisSummary { trace_records: trace.len(), classified_edges: classified.len(), violations, offboarded })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, HarnessError> {
    cfg.validate()?;
    let mut fleet = build_fleet(cfg)?;
    inject(&mut fleet, cfg, false);
    let analysis = analyze(&mut fleet, cfg)?;
    inject(&mut fleet, cfg, true);
    let initial_fleet = fleet.clone();
    let sim = Simulation::new(fleet, cfg.orchestrator.clone(), cfg.seed, cfg.horizon, &cfg.triggers, analysis.offboarded.clone())?;
    let out = sim.run();
    let report = MetricsReport::build(&cfg.name, cfg.seed, &out.fleet, &out.record, analysis.offboarded.iter().copied().collect());
    Ok(ScenarioOutcome {
        config: cfg.clone(),
        report,
        record: out.record,
        analysis,
        initial_fleet,
        final_fleet: out.fleet,
        event_log: out.event_log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDelta {
    pub service: ServiceId,
    pub baseline_error_rate: f64,
    pub drill_error_rate: f64,
    pub baseline_throughput_per_core: f64,
    pub drill_throughput_per_core: f64,
    pub regressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub baseline: (SimTime, SimTime),
    pub drill: (SimTime, SimTime),
    pub deltas: Vec<ServiceDelta>,
    pub regressions: usize,
}

/// Per-service error rate and throughput per provisioned core in a drill
/// window against a non-overlapping baseline window.
pub fn compare_baseline(
    record: &RunRecord,
    fleet: &Fleet,
    baseline: (SimTime, SimTime),
    drill: (SimTime, SimTime),
    relative: f64,
    absolute: f64,
) -> Result<BaselineComparison, HarnessError> {
    if baseline.0 < drill.1 && drill.0 < baseline.1 {
        return Err(HarnessError::OverlappingWindows(baseline.0, baseline.1, drill.0, drill.1));
    }
    let mut deltas = Vec::new();
    for s in &fleet.services {
        let i = s.id.index();
        let b = record.window(baseline.0, baseline.1, |k| k.by_service[i]);
        let d = record.window(drill.0, drill.1, |k| k.by_service[i]);
        if b.requests == 0 && d.requests == 0 {
            continue;
        }
        let rate = |c: crate::orchestrator::Counts| if c.requests == 0 { 0.0 } else { c.failures as f64 / c.requests as f64 };
        let cores = s.cores().max(1) as f64;
        let per_core = |c: crate::orchestrator::Counts, w: (SimTime, SimTime)| {
            c.requests as f64 / (w.1.saturating_sub(w.0).as_secs_f64().max(1e-9) * cores)
        };
        let (be, de) = (rate(b), rate(d));
        deltas.push(ServiceDelta {
            service: s.id,
            baseline_error_rate: be,
            drill_error_rate: de,
            baseline_throughput_per_core: per_core(b, baseline),
            drill_throughput_per_core: per_core(d, drill),
            regressed: depsafety::is_regression(be, de, relative, absolute),
        });
    }
    let regressions = deltas.iter().filter(|d| d.regressed).count();
    Ok(BaselineComparison { baseline, drill, deltas, regressions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub peak_condition_met: bool,
    pub certified: bool,
    pub always_on_min: Option<f64>,
    pub floor: f64,
    pub rto_violated: usize,
    pub invariant_violations: usize,
    pub final_phase: Phase,
    pub errors: Vec<String>,
}

/// Runs a failover drill and certifies it against the configured floor. Without
/// explicit triggers it fails over at one hour and back an hour before the
/// horizon.
pub fn run_failover_certification(cfg: &ScenarioConfig, spec: &DrillSpec) -> Result<(CertificationReport, ScenarioOutcome), HarnessError> {
    spec.validate()?;
    if spec.kind != DrillKind::FailoverCertification {
        return Err(OrchestratorError::Config("not a failover certification drill".into()).into());
    }
    let mut cfg = cfg.clone();
    if cfg.triggers.is_empty() {
        let from = spec.region.unwrap_or(crate::fleet::RegionId(0));
        let to = crate::fleet::RegionId(1 - from.0);
        let back = cfg.horizon.saturating_sub(SimTime::from_hours(1)).max(SimTime::from_hours(2));
        cfg.horizon = cfg.horizon.max(back + SimTime::from_hours(1));
        cfg.triggers = vec![
            Trigger { at: SimTime::from_hours(1), action: TriggerAction::Failover { from, to } },
            Trigger { at: back, action: TriggerAction::Failback },
        ];
    }
    let outcome = run_scenario(&cfg)?;
    let r = &outcome.record;
    let peak_condition_met = r.modes.iter().any(|(_, m)| *m == Mode::Peak);
    let mut errors: Vec<String> = r.errors.iter().map(|e| format!("{}: {}", e.t, e.error)).collect();
    if spec.peak_condition && !peak_condition_met {
        errors.push("PeakConditionUnmet: the failover did not happen under peak load".into());
    }
    let always_on_min = outcome.report.always_on_min;
    let certified = errors.is_empty()
        && always_on_min.is_none_or(|a| a >= spec.floor)
        && outcome.report.rto_violated == 0
        && r.violations.is_empty()
        && r.final_phase() == Phase::Steady;
    Ok((
        CertificationReport {
            peak_condition_met,
            certified,
            always_on_min,
            floor: spec.floor,
            rto_violated: outcome.report.rto_violated,
            invariant_violations: r.violations.len(),
            final_phase: r.final_phase(),
            errors,
        },
        outcome,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub path: PathBuf,
    pub scenario: String,
    pub ok: bool,
    pub always_on_min: Option<f64>,
    pub critical_availability: Option<f64>,
    pub error: Option<String>,
}

/// Runs every `*.json` scenario in `dir` in parallel; entries come back in
/// file-name order.
pub fn sweep(dir: &Path) -> Result<Vec<SweepEntry>, HarnessError> {
    let io = |source| HarnessError::Io { path: dir.to_path_buf(), source };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths
        .par_iter()
        .map(|p| {
            let res = ScenarioConfig::load(p).map_err(HarnessError::from).and_then(|c| run_scenario(&c));
            match res {
                Ok(o) => SweepEntry {
                    path: p.clone(),
                    scenario: o.config.name.clone(),
                    ok: o.record.errors.is_empty() && o.record.violations.is_empty(),
                    always_on_min: o.report.always_on_min,
                    critical_availability: Some(o.report.critical_availability.value),
                    error: None,
                },
                Err(e) => SweepEntry {
                    path: p.clone(),
                    scenario: String::new(),
                    ok: false,
                    always_on_min: None,
                    critical_availability: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{production_profile, FailCloseFractions, FleetGenConfig, RegionId, TopologyConfig};

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            name: "small".into(),
            horizon: SimTime::from_mins(40),
            fleet: FleetSource::Generated(Box::new(FleetGenConfig {
                profile: production_profile(40),
                scale: 0.002,
                fail_close: FailCloseFractions::none(),
                topology: TopologyConfig { cities: 6, total_rps: 4.0, ..TopologyConfig::default() },
                ..FleetGenConfig::default()
            })),
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn steady_scenario_runs_and_is_deterministic() {
        let a = run_scenario(&small()).unwrap();
        let b = run_scenario(&small()).unwrap();
        assert_eq!(a.event_log, b.event_log);
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert!(a.report.always_on_min.unwrap() >= 0.999);
        assert!(a.record.errors.is_empty());
    }

    #[test]
    fn empty_overcommit_strips_pool() {
        let cfg = ScenarioConfig { empty_overcommit: true, ..small() };
        let f = build_fleet(&cfg).unwrap();
        assert!(f.hosts.values().flat_map(|h| &h.allocations).all(|a| a.pool == Pool::Stateless));
        assert!(f.environments.iter().flat_map(|e| &e.placement).all(|p| p.pool == Pool::Stateless));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let o = run_scenario(&small()).unwrap();
        let err = compare_baseline(&o.record, &o.initial_fleet, (SimTime::ZERO, SimTime::from_mins(20)), (SimTime::from_mins(10), SimTime::from_mins(30)), 0.5, 0.001);
        assert!(matches!(err, Err(HarnessError::OverlappingWindows(..))));
        let ok = compare_baseline(&o.record, &o.initial_fleet, (SimTime::ZERO, SimTime::from_mins(20)), (SimTime::from_mins(20), SimTime::from_mins(40)), 0.5, 0.05).unwrap();
        assert_eq!(ok.regressions, 0);
        assert!(!ok.deltas.is_empty());
    }

    #[test]
    fn nonpeak_certification_reports_unmet_peak() {
        let mut cfg = small();
        cfg.horizon = SimTime::from_hours(3);
        cfg.orchestrator.peak_rps = Some(100.0);
        let spec = DrillSpec {
            kind: DrillKind::FailoverCertification,
            targets: vec![],
            region: Some(RegionId(0)),
            ramp: vec![0.0, 1.0],
            peak_condition: true,
            floor: 0.999,
        };
        let (rep, _) = run_failover_certification(&cfg, &spec).unwrap();
        assert!(!rep.peak_condition_met);
        assert!(!rep.certified);
        assert!(rep.errors.iter().any(|e| e.contains("PeakConditionUnmet")));
    }
}
