use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Fleet, FailureClass};

/// How a failure class is provisioned in steady state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provisioning {
    /// Full copy in both regions.
    Dedicated2x,
    /// One copy; failover headroom comes from burst capacity.
    Dedicated1xPlusBurst,
    /// Runs in the oversubscribed pool on top of the 2× buffer.
    OvercommitPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityPolicy {
    pub classes: BTreeMap<FailureClass, Provisioning>,
}

impl CapacityPolicy {
    pub fn uniform(p: Provisioning) -> Self {
        CapacityPolicy { classes: FailureClass::ALL.iter().map(|c| (*c, p)).collect() }
    }

    /// Everything doubled, the pre-oversubscription layout.
    pub fn legacy() -> Self {
        Self::uniform(Provisioning::Dedicated2x)
    }

    /// Critical classes doubled, restore-later and terminate oversubscribed.
    pub fn phase1() -> Self {
        let mut p = Self::legacy();
        p.classes.insert(FailureClass::RestoreLater, Provisioning::OvercommitPool);
        p.classes.insert(FailureClass::Terminate, Provisioning::OvercommitPool);
        p
    }

    /// As `phase1`, with active-migrate kept at 1× and bursted on failover.
    pub fn phase2() -> Self {
        let mut p = Self::phase1();
        p.classes.insert(FailureClass::ActiveMigrate, Provisioning::Dedicated1xPlusBurst);
        p
    }

    pub fn get(&self, c: FailureClass) -> Provisioning {
        self.classes.get(&c).copied().unwrap_or(Provisioning::Dedicated2x)
    }

    /// Provisioned cores over 1× demand for `(class, cores)` rows.
    ///
    /// Doubled classes contribute twice their cores, bursted classes once.
    /// Oversubscribed cores are hosted inside the doubled classes' failover
    /// buffer; only the part that does not fit there needs its own cores.
    pub fn ratio<I>(&self, rows: I) -> f64
    where
        I: IntoIterator<Item = (FailureClass, u64)>,
    {
        let (mut two_x, mut one_x, mut pooled, mut demand) = (0u64, 0u64, 0u64, 0u64);
        for (class, cores) in rows {
            demand += cores;
            match self.get(class) {
                Provisioning::Dedicated2x => two_x += cores,
                Provisioning::Dedicated1xPlusBurst => one_x += cores,
                Provisioning::OvercommitPool => pooled += cores,
            }
        }
        if demand == 0 {
            return 0.0;
        }
        let provisioned = 2 * two_x + one_x + pooled.saturating_sub(two_x);
        provisioned as f64 / demand as f64
    }
}

pub fn capacity_ratio(fleet: &Fleet, policy: &CapacityPolicy) -> f64 {
    policy.ratio(fleet.services.iter().map(|s| (s.failure_class, s.cores())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use FailureClass::*;

    #[test]
    fn uniform_extremes() {
        let rows = [(AlwaysOn, 100), (AlwaysOn, 50)];
        assert_eq!(CapacityPolicy::legacy().ratio(rows), 2.0);
        let rows = [(Terminate, 70), (Terminate, 30)];
        assert_eq!(CapacityPolicy::phase1().ratio(rows), 1.0);
    }

    #[test]
    fn bursted_classes_count_once() {
        let rows = [(ActiveMigrate, 100)];
        assert_eq!(CapacityPolicy::phase2().ratio(rows), 1.0);
    }

    #[test]
    fn pooled_work_beyond_buffer_is_provisioned() {
        // 10 doubled cores give a 10-core buffer; 30 pooled cores need 20 more.
        let rows = [(AlwaysOn, 10), (RestoreLater, 30)];
        assert_eq!(CapacityPolicy::phase1().ratio(rows), 40.0 / 40.0);
        let rows = [(AlwaysOn, 30), (RestoreLater, 10)];
        assert_eq!(CapacityPolicy::phase1().ratio(rows), 60.0 / 40.0);
    }
}
