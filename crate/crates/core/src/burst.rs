//! Burst capacity: batch-cluster conversion with preemptible eviction and
//! image prefetch, and cloud bursting under quotas.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fleet::{Cluster, ClusterId, ClusterKind};
use crate::simkernel::SimTime;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BurstError {
    #[error("cluster {0} is not a batch cluster")]
    NotBatch(ClusterId),
    #[error("{0} replicas still serve on cloud hosts")]
    DrainBlocked(u32),
    #[error("invalid spawner config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpawnerConfig {
    /// Cores per minute brought online once eviction completes.
    pub conversion_rate: f64,
    pub eviction_delay: SimTime,
    pub prefetch_time: SimTime,
    /// Startup-time multiplier once images are prefetched.
    pub prefetch_speedup: f64,
}

impl Default for SpawnerConfig {
    fn default() -> Self {
        SpawnerConfig {
            conversion_rate: 12_000.0,
            eviction_delay: SimTime::from_mins(1),
            prefetch_time: SimTime::from_mins(2),
            prefetch_speedup: 0.7,
        }
    }
}

impl SpawnerConfig {
    pub fn validate(&self) -> Result<(), BurstError> {
        if self.conversion_rate <= 0.0 {
            return Err(BurstError::InvalidConfig("conversion_rate must be positive".into()));
        }
        if !(self.prefetch_speedup > 0.0 && self.prefetch_speedup <= 1.0) {
            return Err(BurstError::InvalidConfig("prefetch_speedup must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Image prefetch into burst zones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prefetch {
    pub ready_at: Option<SimTime>,
}

impl Prefetch {
    /// Starts prefetching; returns the readiness time the first time only.
    pub fn preheat(&mut self, now: SimTime, cfg: &SpawnerConfig) -> Option<SimTime> {
        if self.ready_at.is_some() {
            return None;
        }
        let at = now + cfg.prefetch_time;
        self.ready_at = Some(at);
        Some(at)
    }

    pub fn is_ready(&self, now: SimTime) -> bool {
        self.ready_at.is_some_and(|r| now >= r)
    }

    pub fn startup(&self, base: SimTime, now: SimTime, cfg: &SpawnerConfig) -> SimTime {
        if self.is_ready(now) {
            base.mul_f64(cfg.prefetch_speedup)
        } else {
            base
        }
    }
}

/// Conversion of one batch cluster into burst capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversion {
    pub cluster: ClusterId,
    pub start: SimTime,
    pub needed: u64,
    pub preemptible: u64,
    pub rate_per_min: f64,
    pub eviction_delay: SimTime,
}

impl Conversion {
    pub fn target(&self) -> u64 {
        self.needed.min(self.preemptible)
    }

    pub fn shortfall(&self) -> u64 {
        self.needed.saturating_sub(self.preemptible)
    }

    /// `min(needed, preemptible, floor(max(0, t − start − delay) × rate))`.
    pub fn cores_online_at(&self, t: SimTime) -> u64 {
        let since = t.saturating_sub(self.start + self.eviction_delay);
        let grown = (since.0 as f64 / 60_000.0 * self.rate_per_min + 1e-9).floor() as u64;
        grown.min(self.target())
    }

    /// First instant at which the target is online.
    pub fn full_at(&self) -> SimTime {
        self.start + time_to_full(self.target(), self.rate_per_min, self.eviction_delay)
    }

    /// Capacity announcements every `step` until full.
    pub fn series(&self, step: SimTime) -> Vec<(SimTime, u64)> {
        let mut out = Vec::new();
        let end = self.full_at();
        let mut t = self.start;
        loop {
            out.push((t.min(end), self.cores_online_at(t.min(end))));
            if t >= end || step.0 == 0 {
                break;
            }
            t += step;
        }
        out
    }
}

/// `delay + ceil(needed / rate)` with the rate in cores per minute.
pub fn time_to_full(needed: u64, rate_per_min: f64, delay: SimTime) -> SimTime {
    if needed == 0 {
        return SimTime::ZERO;
    }
    delay + SimTime((needed as f64 * 60_000.0 / rate_per_min - 1e-6).ceil().max(0.0) as u64)
}

pub fn convert_batch(cluster: &Cluster, needed: u64, start: SimTime, cfg: &SpawnerConfig) -> Result<Conversion, BurstError> {
    if cluster.kind != ClusterKind::Batch {
        return Err(BurstError::NotBatch(cluster.id));
    }
    Ok(Conversion {
        cluster: cluster.id,
        start,
        needed,
        preemptible: cluster.preemptible_cores(),
        rate_per_min: cfg.conversion_rate,
        eviction_delay: cfg.eviction_delay,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sufficiency {
    Sufficient,
    Insufficient(u64),
}

/// Compares `demand × margin` (rounded up) to preemptible batch cores.
pub fn estimate_burst_sufficiency(demand: u64, preemptible: u64, margin: f64) -> Sufficiency {
    let need = (demand as f64 * margin - 1e-9).ceil().max(0.0) as u64;
    if need <= preemptible {
        Sufficiency::Sufficient
    } else {
        Sufficiency::Insufficient(need - preemptible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latency {
    Fixed { latency: SimTime },
    Uniform { min: SimTime, max: SimTime },
}

impl Latency {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        match *self {
            Latency::Fixed { latency } => latency,
            Latency::Uniform { min, max } if max > min => SimTime(rng.gen_range(min.0..=max.0)),
            Latency::Uniform { min, .. } => min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudZone {
    pub name: String,
    pub quota: u64,
    #[serde(default)]
    pub provisioned: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudProvider {
    pub zones: Vec<CloudZone>,
    pub latency: Latency,
}

impl Default for CloudProvider {
    fn default() -> Self {
        CloudProvider { zones: Vec::new(), latency: Latency::Fixed { latency: SimTime::from_mins(10) } }
    }
}

impl CloudProvider {
    pub fn total_quota(&self) -> u64 {
        self.zones.iter().map(|z| z.quota).sum()
    }

    pub fn provisioned(&self) -> u64 {
        self.zones.iter().map(|z| z.provisioned).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tranche {
    pub zone: usize,
    pub cores: u64,
    pub ready_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudPlan {
    pub tranches: Vec<Tranche>,
    /// Cores that no zone had quota for.
    pub quota_exhausted: u64,
}

impl CloudPlan {
    pub fn cores(&self) -> u64 {
        self.tranches.iter().map(|t| t.cores).sum()
    }
}

/// Fills zones with the most remaining quota first (ties by zone order).
pub fn cloud_provision<R: Rng + ?Sized>(provider: &mut CloudProvider, shortfall: u64, now: SimTime, rng: &mut R) -> CloudPlan {
    let mut order: Vec<usize> = (0..provider.zones.len()).collect();
    order.sort_by_key(|i| (std::cmp::Reverse(provider.zones[*i].quota - provider.zones[*i].provisioned), *i));
    let mut left = shortfall;
    let mut tranches = Vec::new();
    for i in order {
        if left == 0 {
            break;
        }
        let z = &mut provider.zones[i];
        let take = left.min(z.quota.saturating_sub(z.provisioned));
        if take == 0 {
            continue;
        }
        z.provisioned += take;
        left -= take;
        tranches.push(Tranche { zone: i, cores: take, ready_at: now + provider.latency.sample(rng) });
    }
    CloudPlan { tranches, quota_exhausted: left }
}

/// Releases all provisioned cloud cores once nothing serves on them.
pub fn release_cloud(provider: &mut CloudProvider, serving_replicas: u32) -> Result<u64, BurstError> {
    if serving_replicas > 0 {
        return Err(BurstError::DrainBlocked(serving_replicas));
    }
    let released = provider.provisioned();
    for z in &mut provider.zones {
        z.provisioned = 0;
    }
    Ok(released)
}

/// Batch work may resume once at least 40% of the cluster's cores are free.
pub fn batch_accepting(freed_cores: u64, total_cores: u64) -> bool {
    freed_cores * 5 >= total_cores * 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{BatchJob, RegionId, ZoneId};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(preemptible: u64) -> Cluster {
        Cluster {
            id: ClusterId(7),
            kind: ClusterKind::Batch,
            region: RegionId(1),
            zone: ZoneId(0),
            hosts: Vec::new(),
            jobs: vec![
                BatchJob { id: 0, cores: preemptible as u32, preemptible: true, restart_cost: SimTime::from_mins(5) },
                BatchJob { id: 1, cores: 100, preemptible: false, restart_cost: SimTime::from_mins(5) },
            ],
        }
    }

    fn cfg(rate: f64, delay: SimTime) -> SpawnerConfig {
        SpawnerConfig { conversion_rate: rate, eviction_delay: delay, ..Default::default() }
    }

    #[test]
    fn prefetch_examples() {
        let c = SpawnerConfig::default();
        let mut p = Prefetch::default();
        assert_eq!(p.preheat(SimTime::ZERO, &c), Some(SimTime::from_mins(2)));
        assert_eq!(p.preheat(SimTime::from_secs(5), &c), None);
        let t = SimTime::from_mins(3);
        assert_eq!(p.startup(SimTime::from_secs(100), t, &c), SimTime::from_secs(70));
        assert_eq!(p.startup(SimTime::from_secs(100), SimTime::from_mins(1), &c), SimTime::from_secs(100));
        let same = SpawnerConfig { prefetch_speedup: 1.0, ..c };
        assert_eq!(p.startup(SimTime::from_secs(100), t, &same), SimTime::from_secs(100));
    }

    #[test]
    fn conversion_examples() {
        let c = convert_batch(&batch(300_000), 240_000, SimTime::ZERO, &cfg(12_000.0, SimTime::ZERO)).unwrap();
        assert_eq!(c.full_at(), SimTime::from_mins(20));
        assert_eq!(c.cores_online_at(SimTime::from_mins(10)), 120_000);
        let c = convert_batch(&batch(30_000), 24_000, SimTime::ZERO, &cfg(12_000.0, SimTime::from_mins(2))).unwrap();
        assert_eq!(c.full_at(), SimTime::from_mins(4));
        assert_eq!(c.cores_online_at(SimTime::from_mins(2)), 0);
        let c = convert_batch(&batch(30_000), 0, SimTime::from_secs(9), &cfg(12_000.0, SimTime::from_mins(2))).unwrap();
        assert_eq!(c.full_at(), SimTime::from_secs(9));
        let short = convert_batch(&batch(100), 150, SimTime::ZERO, &cfg(60.0, SimTime::ZERO)).unwrap();
        assert_eq!((short.target(), short.shortfall()), (100, 50));
        let mut steady = batch(1);
        steady.kind = ClusterKind::SteadyState;
        assert_eq!(convert_batch(&steady, 1, SimTime::ZERO, &SpawnerConfig::default()), Err(BurstError::NotBatch(ClusterId(7))));
    }

    proptest! {
        #[test]
        fn online_cores_closed_form(needed in 0u64..100_000, pre in 0u64..100_000, rate in 1u32..20_000, delay in 0u64..600, t in 0u64..7_200) {
            let c = Conversion {
                cluster: ClusterId(0), start: SimTime::ZERO, needed, preemptible: pre,
                rate_per_min: f64::from(rate), eviction_delay: SimTime::from_secs(delay),
            };
            let t = SimTime::from_secs(t);
            // Integer oracle: cores = floor(elapsed_ms × rate / 60000).
            let elapsed = t.0.saturating_sub(delay * 1000);
            let expect = (elapsed * u64::from(rate) / 60_000).min(needed).min(pre);
            prop_assert_eq!(c.cores_online_at(t), expect);
            prop_assert_eq!(c.cores_online_at(c.full_at()), c.target());
            if c.full_at().0 > 0 && c.target() > 0 {
                prop_assert!(c.cores_online_at(SimTime(c.full_at().0 - 1)) < c.target());
            }
        }
    }

    #[test]
    fn sufficiency_examples() {
        assert_eq!(estimate_burst_sufficiency(100, 200, 1.1), Sufficiency::Sufficient);
        assert_eq!(estimate_burst_sufficiency(200, 200, 1.1), Sufficiency::Insufficient(20));
        assert_eq!(estimate_burst_sufficiency(0, 0, 1.1), Sufficiency::Sufficient);
    }

    fn provider(quotas: &[u64]) -> CloudProvider {
        CloudProvider {
            zones: quotas.iter().enumerate().map(|(i, q)| CloudZone { name: format!("z{i}"), quota: *q, provisioned: 0 }).collect(),
            latency: Latency::Fixed { latency: SimTime::from_mins(10) },
        }
    }

    #[test]
    fn cloud_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = provider(&[20_000, 20_000]);
        let plan = cloud_provision(&mut p, 30_000, SimTime::ZERO, &mut rng);
        let split: Vec<u64> = plan.tranches.iter().map(|t| t.cores).collect();
        assert_eq!(split, vec![20_000, 10_000]);
        assert!(plan.tranches.iter().all(|t| t.ready_at == SimTime::from_mins(10)));

        let mut p = provider(&[25_000, 15_000]);
        let plan = cloud_provision(&mut p, 50_000, SimTime::ZERO, &mut rng);
        assert_eq!((plan.cores(), plan.quota_exhausted), (40_000, 10_000));
        assert_eq!(release_cloud(&mut p, 3), Err(BurstError::DrainBlocked(3)));
        assert_eq!(release_cloud(&mut p, 0), Ok(40_000));
        assert_eq!(p.provisioned(), 0);
        assert_eq!(release_cloud(&mut provider(&[]), 0), Ok(0));
    }

    proptest! {
        #[test]
        fn quotas_never_exceeded(quotas in proptest::collection::vec(0u64..10_000, 0..5), asks in proptest::collection::vec(0u64..20_000, 1..4)) {
            let mut p = provider(&quotas);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for a in asks {
                let plan = cloud_provision(&mut p, a, SimTime::ZERO, &mut rng);
                prop_assert_eq!(plan.cores() + plan.quota_exhausted, a);
            }
            for z in &p.zones {
                prop_assert!(z.provisioned <= z.quota);
            }
        }
    }

    #[test]
    fn resume_gate() {
        assert!(!batch_accepting(39, 100));
        assert!(batch_accepting(40, 100));
        assert!(batch_accepting(0, 0));
    }
}
