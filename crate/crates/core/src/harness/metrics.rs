use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fleet::{capacity_ratio, CapacityPolicy, FailureClass, Fleet, RegionId, ServiceId};
use crate::orchestrator::{ClassPoint, Counts, Phase, RunRecord};
use crate::simkernel::SimTime;
use crate::traffic::RequestOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub value: f64,
    pub requests: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl Availability {
    pub fn from_counts(c: &Counts, exclude_tagged: bool) -> Self {
        let requests = if exclude_tagged { c.requests - c.tagged } else { c.requests };
        match c.availability(exclude_tagged) {
            Some(value) => Availability { value, requests, warning: None },
            None => Availability { value: 1.0, requests: 0, warning: Some("empty window; availability defined as 1.0".into()) },
        }
    }
}

/// Success fraction of root outcomes timestamped in `[from, to)`. The
/// caller passes always-on and active-migrate roots only.
pub fn compute_availability(outcomes: &[(SimTime, RequestOutcome)], from: SimTime, to: SimTime, exclude_tagged: bool) -> Availability {
    let mut c = Counts::default();
    for (t, o) in outcomes {
        if *t >= from && *t < to {
            c.add(o);
        }
    }
    Availability::from_counts(&c, exclude_tagged)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub mean: f64,
    pub p99: f64,
    pub samples: usize,
}

/// Mean and nearest-rank P99 of one region's utilization over `[from, to)`.
pub fn compute_utilization(record: &RunRecord, region: RegionId, from: SimTime, to: SimTime) -> UtilizationStats {
    let mut v: Vec<f64> = record
        .utilization
        .iter()
        .filter(|s| s.t >= from && s.t < to)
        .filter_map(|s| s.regions.get(region.index()).copied())
        .collect();
    if v.is_empty() {
        return UtilizationStats::default();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let rank = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    UtilizationStats { mean, p99: v[rank - 1], samples: v.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: SimTime,
    /// `None` for buckets without requests.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitySeries {
    pub city: u32,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionUtilization {
    pub region: RegionId,
    pub steady: UtilizationStats,
    /// While failed over, if the run failed over.
    pub failed_over: Option<UtilizationStats>,
    pub overall: UtilizationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRatios {
    pub legacy: f64,
    pub phase1: f64,
    pub phase2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyEvictions {
    pub hour: u64,
    pub jobs: u64,
    pub cores: u64,
    pub restart_cost: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCheck {
    pub passed: bool,
    pub details: Vec<String>,
}

impl ShapeCheck {
    fn new(details: Vec<String>) -> Self {
        ShapeCheck { passed: details.is_empty(), details }
    }
}

/// Conservation and shape checks over the cores-by-class series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShapeCheck {
    pub restore_spike_and_decay: ShapeCheck,
    pub active_migrate_complementarity: ShapeCheck,
    pub terminate_zero_while_failed_over: ShapeCheck,
}

impl ClassShapeCheck {
    pub fn passed(&self) -> bool {
        self.restore_spike_and_decay.passed && self.active_migrate_complementarity.passed && self.terminate_zero_while_failed_over.passed
    }
}

pub fn check_class_shape(record: &RunRecord) -> ClassShapeCheck {
    let series = &record.class_series;
    let failover_start = record.entered(Phase::Evicting);
    let rto = FailureClass::RestoreLater.rto().expect("rto");

    let mut rl = Vec::new();
    if let Some(t0) = failover_start {
        let window: Vec<&ClassPoint> = series.iter().filter(|p| p.t >= t0 && p.rl_terminated_total > 0).collect();
        match window.first() {
            Some(first) if first.rl_not_bursted != first.rl_terminated_total => {
                rl.push(format!("at {} only {} of {} restore-later envs pending", first.t, first.rl_not_bursted, first.rl_terminated_total));
            }
            Some(_) => {}
            None => rl.push("no restore-later environment was terminated".into()),
        }
        for p in &window {
            if p.rl_not_bursted + p.rl_bursted != p.rl_terminated_total {
                rl.push(format!("at {}: {} + {} != {}", p.t, p.rl_not_bursted, p.rl_bursted, p.rl_terminated_total));
            }
        }
        let deadline = t0 + rto;
        let last_at_deadline = series.iter().rev().find(|p| p.t <= deadline);
        if let Some(p) = last_at_deadline {
            if p.rl_not_bursted != 0 {
                rl.push(format!("{} restore-later envs still down at the RTO deadline {deadline}", p.rl_not_bursted));
            }
        }
    }

    let mut am = Vec::new();
    let transitions = transition_windows(record);
    for p in series {
        if p.am_steady + p.am_bursted < p.am_total {
            am.push(format!("at {}: {} + {} < {}", p.t, p.am_steady, p.am_bursted, p.am_total));
        }
        let at_rest = !transitions.iter().any(|(a, b)| p.t >= *a && p.t <= *b);
        if at_rest && p.am_steady + p.am_bursted != p.am_total {
            am.push(format!("at rest {}: {} + {} != {}", p.t, p.am_steady, p.am_bursted, p.am_total));
        }
    }

    let mut term = Vec::new();
    if let Some((a, b)) = record.failed_over_interval() {
        for p in series.iter().filter(|p| p.t >= a && p.t < b) {
            if p.t_serving != 0 {
                term.push(format!("at {}: {} terminate envs serving", p.t, p.t_serving));
            }
        }
    }
    ClassShapeCheck {
        restore_spike_and_decay: ShapeCheck::new(rl),
        active_migrate_complementarity: ShapeCheck::new(am),
        terminate_zero_while_failed_over: ShapeCheck::new(term),
    }
}

/// Intervals during which migrations may be in flight: from failover start
/// to FailedOver, and from failback start to Steady.
fn transition_windows(record: &RunRecord) -> Vec<(SimTime, SimTime)> {
    let mut out = Vec::new();
    let mut open: Option<SimTime> = None;
    for (t, p) in &record.phases {
        match p {
            Phase::Locked | Phase::Migrating | Phase::FailingBack if open.is_none() => open = Some(*t),
            Phase::FailedOver | Phase::Steady => {
                if let Some(a) = open.take() {
                    out.push((a, *t));
                }
            }
            _ => {}
        }
    }
    if let Some(a) = open {
        out.push((a, record.horizon));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub horizon: SimTime,
    pub bucket: SimTime,
    pub availability_note: String,
    /// Always-on plus active-migrate roots, tagged outcomes excluded.
    pub critical_availability: Availability,
    pub critical_series: Vec<SeriesPoint>,
    pub always_on_series: Vec<SeriesPoint>,
    pub always_on_min: Option<f64>,
    pub city_series: Vec<CitySeries>,
    pub utilization: Vec<RegionUtilization>,
    pub rto: Vec<crate::orchestrator::RtoVerdict>,
    pub rto_violated: usize,
    pub evictions_per_hour: Vec<HourlyEvictions>,
    pub capacity_ratio: CapacityRatios,
    pub class_series: Vec<ClassPoint>,
    pub burst_series: Vec<crate::orchestrator::BurstSample>,
    pub class_shape: ClassShapeCheck,
    pub phases: Vec<(SimTime, Phase)>,
    pub errors: Vec<crate::orchestrator::TimedError>,
    pub violations: Vec<crate::orchestrator::InvariantViolation>,
    pub qos: crate::orchestrator::QosStats,
    pub offboarded: Vec<ServiceId>,
    pub stopped_services: Vec<ServiceId>,
    pub final_state: crate::orchestrator::FinalState,
    pub requests: u64,
    pub warnings: Vec<String>,
}

fn series(record: &RunRecord, pick: impl Fn(&crate::orchestrator::Bucket) -> Counts) -> Vec<SeriesPoint> {
    record.buckets.iter().map(|b| SeriesPoint { t: b.start, value: pick(b).availability(true) }).collect()
}

impl MetricsReport {
    pub fn build(name: &str, seed: u64, fleet: &Fleet, record: &RunRecord, offboarded: Vec<ServiceId>) -> Self {
        let mut warnings = Vec::new();
        let total = record.window(SimTime::ZERO, SimTime::MAX, |b| b.critical);
        let critical_availability = Availability::from_counts(&total, true);
        if let Some(w) = &critical_availability.warning {
            warnings.push(format!("critical availability: {w}"));
        }
        let critical_series = series(record, |b| b.critical);
        let always_on_series = series(record, |b| b.by_class[FailureClass::AlwaysOn as usize]);
        let always_on_min = always_on_series.iter().filter_map(|p| p.value).reduce(f64::min);
        let empty = always_on_series.iter().filter(|p| p.value.is_none()).count();
        if empty > 0 {
            warnings.push(format!("{empty} buckets without always-on requests"));
        }
        let city_series = (0..fleet.cities.len())
            .map(|c| CitySeries { city: c as u32, points: series(record, |b| b.by_city[c]) })
            .collect();

        let first_failover = record.entered(Phase::Locked).or(record.entered(Phase::Migrating));
        let steady_end = record.phases.iter().find(|(_, p)| *p != Phase::Steady).map_or(record.horizon, |(t, _)| *t);
        let utilization = [RegionId(0), RegionId(1)]
            .into_iter()
            .map(|r| RegionUtilization {
                region: r,
                steady: compute_utilization(record, r, SimTime::ZERO, steady_end),
                failed_over: record.failed_over_interval().map(|(a, b)| compute_utilization(record, r, a, b)),
                overall: compute_utilization(record, r, SimTime::ZERO, SimTime::MAX),
            })
            .collect();
        let _ = first_failover;

        let mut hourly: BTreeMap<u64, HourlyEvictions> = BTreeMap::new();
        for e in &record.evictions {
            let hour = e.t.0 / 3_600_000;
            let h = hourly.entry(hour).or_insert(HourlyEvictions { hour, jobs: 0, cores: 0, restart_cost: SimTime::ZERO });
            h.jobs += u64::from(e.jobs);
            h.cores += e.cores;
            h.restart_cost += e.restart_cost;
        }

        MetricsReport {
            schema_version: super::REPORT_SCHEMA_VERSION,
            scenario: name.to_string(),
            seed,
            horizon: record.horizon,
            bucket: record.bucket,
            availability_note: "approximation: success rate of always-on and active-migrate root requests, failover-tagged outcomes excluded"
                .into(),
            critical_availability,
            critical_series,
            always_on_series,
            always_on_min,
            city_series,
            utilization,
            rto_violated: record.rto.iter().filter(|v| v.violated).count(),
            rto: record.rto.clone(),
            evictions_per_hour: hourly.into_values().collect(),
            capacity_ratio: CapacityRatios {
                legacy: capacity_ratio(fleet, &CapacityPolicy::legacy()),
                phase1: capacity_ratio(fleet, &CapacityPolicy::phase1()),
                phase2: capacity_ratio(fleet, &CapacityPolicy::phase2()),
            },
            class_series: record.class_series.clone(),
            burst_series: record.burst_series.clone(),
            class_shape: check_class_shape(record),
            phases: record.phases.clone(),
            errors: record.errors.clone(),
            violations: record.violations.clone(),
            qos: record.qos.clone(),
            offboarded,
            stopped_services: record.stopped_services.clone(),
            final_state: record.final_state.clone(),
            requests: record.requests,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::UtilSample;
    use crate::traffic::FailureCause;

    fn o(success: bool, tagged: bool) -> RequestOutcome {
        RequestOutcome {
            root: ServiceId(0),
            success,
            cause: if success { FailureCause::None } else { FailureCause::IsolationBlocked },
            failover_tagged: tagged,
            culprit: None,
        }
    }

    #[test]
    fn availability_examples() {
        let outcomes: Vec<(SimTime, RequestOutcome)> = (0..10_000).map(|i| (SimTime(i), o(i >= 3, false))).collect();
        let a = compute_availability(&outcomes, SimTime::ZERO, SimTime(10_000), false);
        assert!((a.value - 0.9997).abs() < 1e-12);

        let tagged: Vec<(SimTime, RequestOutcome)> = (0..10).map(|i| (SimTime(i), o(false, true))).collect();
        let a = compute_availability(&tagged, SimTime::ZERO, SimTime(10), true);
        assert_eq!(a.value, 1.0);
        assert!(a.warning.is_some());

        let mixed = vec![(SimTime(0), o(false, true)), (SimTime(1), o(true, false)), (SimTime(2), o(false, false))];
        assert_eq!(compute_availability(&mixed, SimTime::ZERO, SimTime(3), true).value, 0.5);
        assert!((compute_availability(&mixed, SimTime::ZERO, SimTime(3), false).value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn utilization_stats() {
        let mut r = RunRecord::default();
        for i in 0..100 {
            r.utilization.push(UtilSample { t: SimTime(i), regions: vec![0.0, f64::from(i as u32) / 100.0] });
        }
        let idle = compute_utilization(&r, RegionId(0), SimTime::ZERO, SimTime(100));
        assert_eq!((idle.mean, idle.p99), (0.0, 0.0));
        let s = compute_utilization(&r, RegionId(1), SimTime::ZERO, SimTime(100));
        assert!((s.mean - 0.495).abs() < 1e-12);
        assert_eq!(s.p99, 0.98);
    }
}
