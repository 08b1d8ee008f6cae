use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::depsafety::{DependencyEdge, Semantics};
use crate::fleet::{FailureClass, Fleet, RegionId, ServiceId, Tier};
use crate::traffic::Adjacency;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrillKind {
    Blackhole,
    FailoverCertification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrillSpec {
    pub kind: DrillKind,
    /// Services to blackhole; empty means every restore-later and
    /// terminate service.
    #[serde(default)]
    pub targets: Vec<ServiceId>,
    #[serde(default)]
    pub region: Option<RegionId>,
    #[serde(default = "default_ramp")]
    pub ramp: Vec<f64>,
    #[serde(default)]
    pub peak_condition: bool,
    /// Minimum always-on plus active-migrate availability at every step.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_ramp() -> Vec<f64> {
    vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0]
}

fn default_floor() -> f64 {
    0.999
}

impl DrillSpec {
    pub fn blackhole(targets: Vec<ServiceId>, ramp: Vec<f64>, floor: f64) -> Self {
        DrillSpec { kind: DrillKind::Blackhole, targets, region: None, ramp, peak_condition: false, floor }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(format!("drill spec: {m}")));
        if !(0.0..=1.0).contains(&self.floor) {
            return bad("floor must be in [0, 1]");
        }
        if self.kind == DrillKind::Blackhole {
            if self.ramp.first() != Some(&0.0) || self.ramp.last() != Some(&1.0) {
                return bad("blackhole ramp must start at 0 and end at 1");
            }
            if self.ramp.windows(2).any(|w| w[1] < w[0]) {
                return bad("blackhole ramp must be non-decreasing");
            }
        }
        Ok(())
    }

    pub fn target_set(&self, fleet: &Fleet) -> BTreeSet<ServiceId> {
        if self.targets.is_empty() {
            fleet.services.iter().filter(|s| s.failure_class.is_preemptible()).map(|s| s.id).collect()
        } else {
            self.targets.iter().copied().collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrillStep {
    pub fraction: f64,
    pub availability: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackholeReport {
    pub steps: Vec<DrillStep>,
    pub certified: bool,
    pub first_failing_step: Option<usize>,
    /// Fail-close edges from critical call paths into blocked services.
    pub implicated: Vec<DependencyEdge>,
}

/// Always-on and active-migrate root services with their request weights.
fn critical_roots(fleet: &Fleet) -> Vec<(ServiceId, f64)> {
    fleet
        .services
        .iter()
        .filter(|s| s.tier != Tier::NP && matches!(s.failure_class, FailureClass::AlwaysOn | FailureClass::ActiveMigrate))
        .map(|s| (s.id, s.cores().max(1) as f64))
        .collect()
}

/// Services reachable from `root` over failure-propagating arcs, root
/// included.
fn reach(adj: &Adjacency, root: ServiceId) -> BTreeSet<ServiceId> {
    let mut seen = BTreeSet::from([root]);
    let mut stack = vec![root];
    while let Some(s) = stack.pop() {
        for a in adj.arcs(s).iter().filter(|a| a.semantics.propagates()) {
            if seen.insert(a.callee) {
                stack.push(a.callee);
            }
        }
    }
    seen
}

/// Expected critical availability when each target independently drops a
/// request with probability `fraction`: `Σ share · (1 − fraction)^k`, with
/// `k` the targets reachable from the root over fail-close arcs.
pub fn blackhole_availability(fleet: &Fleet, targets: &BTreeSet<ServiceId>, fraction: f64) -> f64 {
    let adj = Adjacency::new(fleet, |e| e.ground_truth);
    availability_with(&adj, &critical_roots(fleet), targets, fraction)
}

fn availability_with(adj: &Adjacency, roots: &[(ServiceId, f64)], targets: &BTreeSet<ServiceId>, fraction: f64) -> f64 {
    let total: f64 = roots.iter().map(|r| r.1).sum();
    if total <= 0.0 {
        return 1.0;
    }
    roots
        .iter()
        .map(|(root, w)| {
            let k = reach(adj, *root).intersection(targets).count() as i32;
            w / total * (1.0 - fraction).powi(k)
        })
        .sum()
}

/// Graduated blackholing of the targets with certification against the
/// configured floor.
pub fn run_blackhole_drill(fleet: &Fleet, spec: &DrillSpec) -> Result<BlackholeReport, OrchestratorError> {
    spec.validate()?;
    if spec.kind != DrillKind::Blackhole {
        return Err(OrchestratorError::Config("not a blackhole drill".into()));
    }
    let targets = spec.target_set(fleet);
    let adj = Adjacency::new(fleet, |e| e.ground_truth);
    let roots = critical_roots(fleet);
    let steps: Vec<DrillStep> = spec
        .ramp
        .iter()
        .map(|&f| {
            let availability = availability_with(&adj, &roots, &targets, f);
            DrillStep { fraction: f, availability, passed: availability >= spec.floor - 1e-12 }
        })
        .collect();
    let first_failing_step = steps.iter().position(|s| !s.passed);
    let mut implicated = Vec::new();
    if first_failing_step.is_some() {
        let mut on_path = BTreeSet::new();
        for (root, _) in &roots {
            on_path.extend(reach(&adj, *root));
        }
        for e in &fleet.dependencies {
            let (a, b) = (e.caller.service, e.callee.service);
            if e.ground_truth == Semantics::FailClose && on_path.contains(&a) && !targets.contains(&a) && targets.contains(&b) {
                implicated.push(e.clone());
            }
        }
    }
    Ok(BlackholeReport { certified: first_failing_step.is_none(), steps, first_failing_step, implicated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{generate_fleet, production_profile, FailCloseFractions, FleetGenConfig, TopologyConfig};
    use crate::simkernel::SeededRng;
    use crate::traffic::{Evaluator, GraphState, ServiceHealth};
    use rand::distributions::{Distribution, WeightedIndex};

    fn fleet(fc: FailCloseFractions) -> Fleet {
        generate_fleet(&FleetGenConfig {
            profile: production_profile(40),
            scale: 0.001,
            fail_close: fc,
            topology: TopologyConfig { cities: 4, ..TopologyConfig::default() },
            ..FleetGenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn ramp_validation() {
        assert!(DrillSpec::blackhole(vec![], vec![0.0, 0.5, 1.0], 0.99).validate().is_ok());
        assert!(DrillSpec::blackhole(vec![], vec![0.1, 1.0], 0.99).validate().is_err());
        assert!(DrillSpec::blackhole(vec![], vec![0.0, 0.6, 0.5, 1.0], 0.99).validate().is_err());
        assert!(DrillSpec::blackhole(vec![], vec![0.0, 0.5], 0.99).validate().is_err());
    }

    #[test]
    fn fail_open_fleet_certifies() {
        let f = fleet(FailCloseFractions::none());
        let r = run_blackhole_drill(&f, &DrillSpec::blackhole(vec![], vec![0.0, 0.5, 1.0], 0.999)).unwrap();
        assert!(r.certified);
        assert!(r.steps.iter().all(|s| (s.availability - 1.0).abs() < 1e-12));
    }

    #[test]
    fn one_fail_close_edge_fails_first_nonzero_step() {
        let mut f = fleet(FailCloseFractions::none());
        let ao = f.services.iter().filter(|s| s.failure_class == FailureClass::AlwaysOn).max_by_key(|s| s.cores()).unwrap().id;
        let rl = f.services.iter().find(|s| s.failure_class == FailureClass::RestoreLater).unwrap().id;
        f.dependencies.push(DependencyEdge::between(ao, rl, Semantics::FailClose));
        let r = run_blackhole_drill(&f, &DrillSpec::blackhole(vec![], vec![0.0, 0.25, 1.0], 0.999)).unwrap();
        assert_eq!(r.first_failing_step, Some(1));
        assert!(r.implicated.iter().any(|e| e.caller.service == ao && e.callee.service == rl));
    }

    #[test]
    fn small_exposure_fails_only_at_full_blockage() {
        let mut f = fleet(FailCloseFractions::none());
        let roots = critical_roots(&f);
        let total: f64 = roots.iter().map(|r| r.1).sum();
        // A critical root carrying between 1% and 2% of critical requests.
        let (caller, w) = roots.iter().copied().find(|(_, w)| (0.01..0.02).contains(&(w / total))).expect("a mid-sized root");
        let rl = f.services.iter().find(|s| s.failure_class == FailureClass::RestoreLater).unwrap().id;
        f.dependencies.push(DependencyEdge::between(caller, rl, Semantics::FailClose));
        let r = run_blackhole_drill(&f, &DrillSpec::blackhole(vec![rl], vec![0.0, 0.5, 1.0], 0.99)).unwrap();
        assert_eq!(r.first_failing_step, Some(2), "share {}", w / total);
    }

    /// Monte Carlo through the request evaluator agrees with the closed form.
    #[test]
    fn closed_form_matches_monte_carlo() {
        let f = fleet(FailCloseFractions { always_on_to_restore_later: 0.3, any_to_terminate: 0.3, ..FailCloseFractions::default() });
        let targets = DrillSpec::blackhole(vec![], vec![0.0, 1.0], 0.9).target_set(&f);
        let adj = Adjacency::new(&f, |e| e.ground_truth);
        let roots = critical_roots(&f);
        let pick = WeightedIndex::new(roots.iter().map(|r| r.1)).unwrap();
        let mut rng = SeededRng::new(11).stream("mc");
        for fraction in [0.3, 0.7] {
            let health: Vec<ServiceHealth> = f
                .services
                .iter()
                .map(|s| ServiceHealth { blocked_fraction: if targets.contains(&s.id) { fraction } else { 0.0 }, ..ServiceHealth::healthy() })
                .collect();
            let g = GraphState { adjacency: &adj, health: &health, base_error: 0.0, prune: None };
            let mut ev = Evaluator::new(f.services.len());
            let n = 40_000;
            let ok = (0..n).filter(|_| ev.evaluate(roots[pick.sample(&mut rng)].0, &g, &mut rng).unwrap().success).count();
            let mc = ok as f64 / n as f64;
            let exact = blackhole_availability(&f, &targets, fraction);
            assert!((mc - exact).abs() < 0.01, "f={fraction}: mc {mc} vs closed form {exact}");
        }
    }
}
