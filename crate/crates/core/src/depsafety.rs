//! Dependency safety: trace-driven fail-open/fail-close classification,
//! tier-inversion discovery, off-boarding, and the canary regression gate.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fleet::{FailureClass, Fleet, ServiceId};
use crate::simkernel::{SeededRng, SimTime};
use crate::traffic::{Adjacency, Evaluator, GraphState, IsolationPolicy, ServiceHealth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub service: ServiceId,
    pub endpoint: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Semantics {
    FailOpen,
    FailClose,
    Indeterminate,
}

impl Semantics {
    /// Whether a callee failure is assumed to fail the caller. Unknown
    /// edges are treated as fail-close.
    pub fn propagates(self) -> bool {
        !matches!(self, Semantics::FailOpen)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub caller: Endpoint,
    pub callee: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub caller: Endpoint,
    pub callee: Endpoint,
    /// Semantics as currently known (classified or configured).
    #[serde(default = "indeterminate")]
    pub semantics: Semantics,
    /// What the caller really does when the callee fails.
    pub ground_truth: Semantics,
    /// Relative call volume.
    #[serde(default = "unit")]
    pub weight: f64,
}

fn indeterminate() -> Semantics {
    Semantics::Indeterminate
}

fn unit() -> f64 {
    1.0
}

impl DependencyEdge {
    pub fn key(&self) -> EdgeKey {
        EdgeKey { caller: self.caller, callee: self.callee }
    }

    pub fn between(caller: ServiceId, callee: ServiceId, truth: Semantics) -> Self {
        DependencyEdge {
            caller: Endpoint { service: caller, endpoint: 0 },
            callee: Endpoint { service: callee, endpoint: 0 },
            semantics: Semantics::Indeterminate,
            ground_truth: truth,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp: SimTime,
    pub caller: Endpoint,
    pub callee: Endpoint,
    pub callee_failed: bool,
    pub caller_failed: bool,
}

impl TraceRecord {
    pub fn key(&self) -> EdgeKey {
        EdgeKey { caller: self.caller, callee: self.callee }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub min_samples: u64,
    pub fail_close_threshold: f64,
    pub fail_open_threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { min_samples: 20, fail_close_threshold: 0.9, fail_open_threshold: 0.1 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_samples < 1 {
            return Err("min_samples must be at least 1".into());
        }
        if !(0.0 <= self.fail_open_threshold
            && self.fail_open_threshold < self.fail_close_threshold
            && self.fail_close_threshold <= 1.0)
        {
            return Err("thresholds must satisfy 0 <= fail_open < fail_close <= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DepSafetyError {
    #[error("trace records span more than one edge ({0:?} and {1:?})")]
    MixedEdge(EdgeKey, EdgeKey),
    #[error("no baseline metrics supplied to the canary gate")]
    NoBaseline,
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
    #[error(transparent)]
    Traffic(#[from] crate::traffic::TrafficError),
}

/// Classification with its evidence: `n` callee failures, `k` of which
/// coincided with a caller failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub semantics: Semantics,
    pub n: u64,
    pub k: u64,
}

pub fn classify_counts(n: u64, k: u64, cfg: &ClassifierConfig) -> Semantics {
    if n < cfg.min_samples || n == 0 {
        return Semantics::Indeterminate;
    }
    let ratio = k as f64 / n as f64;
    if ratio >= cfg.fail_close_threshold {
        Semantics::FailClose
    } else if ratio <= cfg.fail_open_threshold {
        Semantics::FailOpen
    } else {
        Semantics::Indeterminate
    }
}

fn count(records: &[TraceRecord]) -> (u64, u64) {
    let mut n = 0;
    let mut k = 0;
    for r in records.iter().filter(|r| r.callee_failed) {
        n += 1;
        k += u64::from(r.caller_failed);
    }
    (n, k)
}

/// Classifies one edge's records.
pub fn classify_dependency(
    records: &[TraceRecord],
    cfg: &ClassifierConfig,
) -> Result<Classification, DepSafetyError> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.key() != first.key()) {
            return Err(DepSafetyError::MixedEdge(first.key(), other.key()));
        }
    }
    let (n, k) = count(records);
    Ok(Classification { semantics: classify_counts(n, k, cfg), n, k })
}

/// Groups records by edge and classifies every edge present in the trace.
pub fn analyze_trace(trace: &[TraceRecord], cfg: &ClassifierConfig) -> BTreeMap<EdgeKey, Classification> {
    let mut groups: BTreeMap<EdgeKey, (u64, u64)> = BTreeMap::new();
    for r in trace {
        let e = groups.entry(r.key()).or_insert((0, 0));
        if r.callee_failed {
            e.0 += 1;
            e.1 += u64::from(r.caller_failed);
        }
    }
    let pairs: Vec<(EdgeKey, (u64, u64))> = groups.into_iter().collect();
    pairs
        .into_par_iter()
        .map(|(key, (n, k))| (key, Classification { semantics: classify_counts(n, k, cfg), n, k }))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, DepSafetyError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DepSafetyError::TraceFormat { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| DepSafetyError::TraceFormat { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Fault-injection probing: every edge is exercised the same number of
/// times with independent callee faults; `label_noise` flips the observed
/// caller outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub records_per_edge: u32,
    pub fault_rate: f64,
    pub label_noise: f64,
    pub spacing: SimTime,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { records_per_edge: 150, fault_rate: 0.3, label_noise: 0.0, spacing: SimTime::from_secs(1) }
    }
}

pub fn generate_probe_trace(edges: &[DependencyEdge], cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Vec<TraceRecord> {
    let mut out = Vec::with_capacity(edges.len() * cfg.records_per_edge as usize);
    for i in 0..cfg.records_per_edge {
        let t = SimTime(cfg.spacing.0 * u64::from(i));
        for e in edges {
            let callee_failed = rng.gen_bool(cfg.fault_rate.clamp(0.0, 1.0));
            let mut caller_failed = callee_failed && e.ground_truth == Semantics::FailClose;
            if cfg.label_noise > 0.0 && rng.gen_bool(cfg.label_noise.clamp(0.0, 1.0)) {
                caller_failed = !caller_failed;
            }
            out.push(TraceRecord { timestamp: t, caller: e.caller, callee: e.callee, callee_failed, caller_failed });
        }
    }
    out
}

/// Precision and recall of fail-close detection over edges with at least
/// `min_samples` callee failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub scored_edges: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
}

pub fn score(
    edges: &[DependencyEdge],
    classified: &BTreeMap<EdgeKey, Classification>,
    cfg: &ClassifierConfig,
) -> Score {
    let (mut tp, mut fp, mut fneg, mut scored) = (0, 0, 0, 0);
    for e in edges {
        let Some(c) = classified.get(&e.key()) else { continue };
        if c.n < cfg.min_samples {
            continue;
        }
        scored += 1;
        let truth = e.ground_truth == Semantics::FailClose;
        let said = c.semantics == Semantics::FailClose;
        match (truth, said) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    Score {
        scored_edges: scored,
        true_positive: tp,
        false_positive: fp,
        false_negative: fneg,
        precision: ratio(tp, fp),
        recall: ratio(tp, fneg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InversionCategory {
    #[serde(rename = "AO->RL")]
    AlwaysOnToRestoreLater,
    #[serde(rename = "AM->RL")]
    ActiveMigrateToRestoreLater,
    #[serde(rename = "*->T")]
    AnyToTerminate,
}

impl InversionCategory {
    pub fn of(caller: FailureClass, callee: FailureClass) -> Option<Self> {
        use FailureClass::*;
        match (caller, callee) {
            (AlwaysOn | ActiveMigrate, Terminate) => Some(InversionCategory::AnyToTerminate),
            (AlwaysOn, RestoreLater) => Some(InversionCategory::AlwaysOnToRestoreLater),
            (ActiveMigrate, RestoreLater) => Some(InversionCategory::ActiveMigrateToRestoreLater),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            InversionCategory::AlwaysOnToRestoreLater => "AO->RL",
            InversionCategory::ActiveMigrateToRestoreLater => "AM->RL",
            InversionCategory::AnyToTerminate => "*->T",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Runtime,
    Canary,
    Drill,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub edge: DependencyEdge,
    pub category: InversionCategory,
    pub detected_by: Detector,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
}

/// Fail-close edges from an always-on or active-migrate caller into a
/// restore-later or terminate callee. Edges missing from `semantics` are
/// skipped.
pub fn find_tier_inversions(
    fleet: &Fleet,
    semantics: &BTreeMap<EdgeKey, Semantics>,
    detected_by: Detector,
) -> Vec<Violation> {
    let classes: Vec<FailureClass> = fleet.services.iter().map(|s| s.failure_class).collect();
    inversions_with_classes(fleet, semantics, &classes, detected_by)
}

fn inversions_with_classes(
    fleet: &Fleet,
    semantics: &BTreeMap<EdgeKey, Semantics>,
    classes: &[FailureClass],
    detected_by: Detector,
) -> Vec<Violation> {
    fleet
        .dependencies
        .iter()
        .filter(|e| semantics.get(&e.key()) == Some(&Semantics::FailClose))
        .filter_map(|e| {
            let cat = InversionCategory::of(classes[e.caller.service.index()], classes[e.callee.service.index()])?;
            Some(Violation { edge: e.clone(), category: cat, detected_by, n: None, k: None })
        })
        .collect()
}

pub fn semantics_of(classified: &BTreeMap<EdgeKey, Classification>) -> BTreeMap<EdgeKey, Semantics> {
    classified.iter().map(|(k, c)| (*k, c.semantics)).collect()
}

/// Fills `n`/`k` evidence on violations from a classification map.
pub fn attach_evidence(violations: &mut [Violation], classified: &BTreeMap<EdgeKey, Classification>) {
    for v in violations {
        if let Some(c) = classified.get(&v.edge.key()) {
            v.n = Some(c.n);
            v.k = Some(c.k);
        }
    }
}

/// Callee services of the violations; these stay out of termination.
pub fn offboard_violations(violations: &[Violation]) -> BTreeSet<ServiceId> {
    violations.iter().map(|v| v.edge.callee.service).collect()
}

/// Off-boards to a fixpoint: an off-boarded service keeps running like an
/// active-migrate service, so its own fail-close edges into preemptible
/// services become violations too. Returns every violation found along
/// the way and the final off-board set.
pub fn harden(
    fleet: &Fleet,
    semantics: &BTreeMap<EdgeKey, Semantics>,
    detected_by: Detector,
) -> (Vec<Violation>, BTreeSet<ServiceId>) {
    let mut classes: Vec<FailureClass> = fleet.services.iter().map(|s| s.failure_class).collect();
    let mut off = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut all = Vec::new();
    loop {
        let found = inversions_with_classes(fleet, semantics, &classes, detected_by);
        let mut grew = false;
        for v in found {
            if seen.insert(v.edge.key()) {
                let callee = v.edge.callee.service;
                if off.insert(callee) {
                    classes[callee.index()] = FailureClass::ActiveMigrate;
                    grew = true;
                }
                all.push(v);
            }
        }
        if !grew {
            return (all, off);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanaryConfig {
    pub window: SimTime,
    pub tick: SimTime,
    /// Probe requests per always-on/active-migrate service per tick.
    pub probes_per_tick: u32,
    pub convergence: SimTime,
    pub relative_increase: f64,
    /// Absolute error-rate increase that must also be exceeded (0.001 = 0.1 pp).
    pub absolute_floor: f64,
    pub seed: u64,
}

impl Default for CanaryConfig {
    fn default() -> Self {
        CanaryConfig {
            window: SimTime::from_mins(5),
            tick: SimTime::from_secs(10),
            probes_per_tick: 5,
            convergence: SimTime::from_secs(30),
            relative_increase: 0.5,
            absolute_floor: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCount {
    pub requests: u64,
    pub errors: u64,
}

impl ErrorCount {
    pub fn rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.errors as f64 / self.requests as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub per_service: BTreeMap<ServiceId, ErrorCount>,
}

/// True when `observed` regresses from `baseline` by more than both the
/// relative and absolute thresholds.
pub fn is_regression(baseline: f64, observed: f64, relative: f64, absolute: f64) -> bool {
    observed > baseline * (1.0 + relative) && observed - baseline > absolute
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Rollback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub service: ServiceId,
    pub baseline: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryReport {
    pub verdict: Verdict,
    pub regressions: Vec<Regression>,
    pub observed: BaselineMetrics,
}

/// Error rates of always-on and active-migrate services while restore-later
/// and terminate services are isolated in the canary zone for one window.
pub fn canary_window(
    fleet: &Fleet,
    edges: &[DependencyEdge],
    exemptions: &BTreeSet<ServiceId>,
    cfg: &CanaryConfig,
) -> Result<BaselineMetrics, DepSafetyError> {
    let adjacency = Adjacency::from_edges(fleet.services.len(), edges, |e| e.ground_truth);
    let policy = IsolationPolicy::failover(SimTime::ZERO, cfg.convergence, exemptions.clone());
    let probed: Vec<ServiceId> = fleet
        .services
        .iter()
        .filter(|s| matches!(s.failure_class, FailureClass::AlwaysOn | FailureClass::ActiveMigrate))
        .map(|s| s.id)
        .collect();
    let mut rng = SeededRng::new(cfg.seed).stream("canary");
    let mut evaluator = Evaluator::new(fleet.services.len());
    let mut out = BaselineMetrics::default();
    let mut health = vec![ServiceHealth::healthy(); fleet.services.len()];
    let mut t = SimTime::ZERO;
    while t < cfg.window {
        for s in &fleet.services {
            health[s.id.index()].blocked_fraction = policy.blocked_fraction(s.id, s.failure_class, t);
        }
        let state = GraphState { adjacency: &adjacency, health: &health, base_error: 0.0, prune: None };
        for &svc in &probed {
            let entry = out.per_service.entry(svc).or_default();
            for _ in 0..cfg.probes_per_tick {
                let o = evaluator.evaluate(svc, &state, &mut rng)?;
                entry.requests += 1;
                entry.errors += u64::from(!o.success);
            }
        }
        t += cfg.tick;
    }
    Ok(out)
}

/// Runs the canary window with `deployment` edges added (or replacing
/// existing edges with the same key) and compares against `baseline`.
pub fn canary_gate(
    fleet: &Fleet,
    deployment: &[DependencyEdge],
    exemptions: &BTreeSet<ServiceId>,
    baseline: Option<&BaselineMetrics>,
    cfg: &CanaryConfig,
) -> Result<CanaryReport, DepSafetyError> {
    let baseline = baseline.ok_or(DepSafetyError::NoBaseline)?;
    let mut edges: BTreeMap<EdgeKey, DependencyEdge> =
        fleet.dependencies.iter().map(|e| (e.key(), e.clone())).collect();
    for e in deployment {
        edges.insert(e.key(), e.clone());
    }
    let edges: Vec<DependencyEdge> = edges.into_values().collect();
    let observed = canary_window(fleet, &edges, exemptions, cfg)?;
    let mut regressions = Vec::new();
    for (svc, obs) in &observed.per_service {
        let base = baseline.per_service.get(svc).map_or(0.0, ErrorCount::rate);
        if is_regression(base, obs.rate(), cfg.relative_increase, cfg.absolute_floor) {
            regressions.push(Regression { service: *svc, baseline: base, observed: obs.rate() });
        }
    }
    let verdict = if regressions.is_empty() { Verdict::Pass } else { Verdict::Rollback };
    Ok(CanaryReport { verdict, regressions, observed })
}
