use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depsafety::{CanaryConfig, ClassifierConfig, ProbeConfig, Semantics};
use crate::fleet::{Fleet, FleetGenConfig, ServiceId};
use crate::orchestrator::{OrchestratorConfig, Trigger, TriggerAction};
use crate::placement::OvercommitParams;
use crate::simkernel::SimTime;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FleetSource {
    Generated(Box<FleetGenConfig>),
    Pinned { path: PathBuf },
}

impl Default for FleetSource {
    fn default() -> Self {
        FleetSource::Generated(Box::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityTraffic {
    pub city: u32,
    pub base_rps: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    #[serde(default)]
    pub peak_at: SimTime,
}

/// A dependency added to the fleet. Edges injected after analysis are
/// invisible to the dependency classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEdge {
    pub caller: ServiceId,
    pub callee: ServiceId,
    pub semantics: Semantics,
    #[serde(default)]
    pub after_analysis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepSafetySetup {
    /// Probe, classify and off-board before the run.
    pub enabled: bool,
    pub probe: ProbeConfig,
    pub classifier: ClassifierConfig,
    pub canary: CanaryConfig,
}

impl Default for DepSafetySetup {
    fn default() -> Self {
        DepSafetySetup {
            enabled: true,
            probe: ProbeConfig::default(),
            classifier: ClassifierConfig::default(),
            canary: CanaryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub horizon: SimTime,
    pub fleet: FleetSource,
    pub city_traffic: Vec<CityTraffic>,
    pub triggers: Vec<Trigger>,
    pub inject_edges: Vec<InjectedEdge>,
    pub depsafety: DepSafetySetup,
    pub overcommit: OvercommitParams,
    pub orchestrator: OrchestratorConfig,
    /// Always-on availability every bucket must reach.
    pub availability_floor: f64,
    /// Treat every overcommit-pool environment as hosted elsewhere: its
    /// replicas are removed and it neither consumes nor fails.
    pub empty_overcommit: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            seed: 1,
            horizon: SimTime::from_hours(1),
            fleet: FleetSource::default(),
            city_traffic: Vec::new(),
            triggers: Vec::new(),
            inject_edges: Vec::new(),
            depsafety: DepSafetySetup::default(),
            overcommit: OvercommitParams::default(),
            orchestrator: OrchestratorConfig::default(),
            availability_floor: 0.999,
            empty_overcommit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigError {
    pub issues: Vec<FieldIssue>,
}

impl ConfigError {
    pub fn single(field: &str, message: impl Into<String>) -> Self {
        ConfigError { issues: vec![FieldIssue { field: field.into(), message: message.into() }] }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", issue.field, issue.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::single(&format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::single("path", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let FleetSource::Pinned { path: p } = &mut cfg.fleet {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `UFA_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self, ConfigError> {
        if let Ok(v) = std::env::var("UFA_SEED") {
            self.seed = v.trim().parse().map_err(|_| ConfigError::single("UFA_SEED", format!("not an integer: {v:?}")))?;
        }
        Ok(self)
    }

    /// Checks everything that does not need the fleet.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |field: &str, message: String| issues.push(FieldIssue { field: field.into(), message });
        if self.horizon == SimTime::ZERO {
            bad("horizon", "must be positive".into());
        }
        for (i, t) in self.triggers.iter().enumerate() {
            if t.at > self.horizon {
                bad(&format!("triggers[{i}].at"), format!("{} is after the horizon {}", t.at, self.horizon));
            }
            if let TriggerAction::Failover { from, to } = t.action {
                if from == to || from.0 > 1 || to.0 > 1 {
                    bad(&format!("triggers[{i}]"), format!("failover must go between regions 0 and 1, got {from} -> {to}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.availability_floor) {
            bad("availability_floor", "must be in [0, 1]".into());
        }
        if let Err(e) = self.orchestrator.validate() {
            bad("orchestrator", e.to_string());
        }
        if let Err(e) = self.overcommit.validate() {
            bad("overcommit", e.to_string());
        }
        if let Err(e) = self.depsafety.classifier.validate() {
            bad("depsafety.classifier", e);
        }
        if let FleetSource::Generated(g) = &self.fleet {
            if !(g.scale > 0.0 && g.scale <= 1.0) {
                bad("fleet.scale", format!("{} is not in (0, 1]", g.scale));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }

    /// Checks references into the built fleet.
    pub fn validate_against(&self, fleet: &Fleet) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let n = fleet.services.len() as u32;
        for (i, e) in self.inject_edges.iter().enumerate() {
            for (side, s) in [("caller", e.caller), ("callee", e.callee)] {
                if s.0 >= n {
                    issues.push(FieldIssue { field: format!("inject_edges[{i}].{side}"), message: format!("unknown service {s}") });
                }
            }
        }
        for (i, c) in self.city_traffic.iter().enumerate() {
            if c.city as usize >= fleet.cities.len() {
                issues.push(FieldIssue { field: format!("city_traffic[{i}].city"), message: format!("unknown city {}", c.city) });
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::RegionId;

    #[test]
    fn defaults_round_trip() {
        let cfg = ScenarioConfig::default();
        let back = ScenarioConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn field_level_diagnostics() {
        let cfg = ScenarioConfig {
            horizon: SimTime::from_hours(1),
            triggers: vec![
                Trigger { at: SimTime::from_hours(2), action: TriggerAction::Failback },
                Trigger { at: SimTime::ZERO, action: TriggerAction::Failover { from: RegionId(1), to: RegionId(1) } },
            ],
            availability_floor: 2.0,
            ..ScenarioConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        let fields: Vec<&str> = err.issues.iter().map(|i| i.field.as_str()).collect();
        assert_eq!(fields, ["triggers[0].at", "triggers[1]", "availability_floor"]);
    }

    #[test]
    fn trigger_json_shape() {
        let cfg = ScenarioConfig::from_json(
            r#"{"horizon": "2h", "triggers": [{"at": "1h", "action": "failover", "from": 0, "to": 1}, {"at": "90m", "action": "failback"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.triggers[0].action, TriggerAction::Failover { from: RegionId(0), to: RegionId(1) });
        assert_eq!(cfg.triggers[1].at, SimTime::from_mins(90));
        let err = ScenarioConfig::from_json(r#"{"seed": "x"}"#).unwrap_err();
        assert!(err.issues[0].field.starts_with("line 1"));
    }
}
