//! Shared domain types and their validation rules.
//!
//! Every constraint is an upper limit. Units travel with each constraint as
//! annotations only: a plan value and its limit are assumed to share the
//! constraint's unit and nothing is ever converted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric values keyed by metric id. Ordered, so iteration is canonical.
pub type MetricMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    MaxDose,
    MeanDose,
    DoseAtVolumePct,
    DoseAtVolumeCc,
    VolumeAtDosePct,
    VolumeAtDoseGy,
}

impl MetricKind {
    pub fn allowed_units(self) -> &'static [&'static str] {
        match self {
            MetricKind::MaxDose
            | MetricKind::MeanDose
            | MetricKind::DoseAtVolumePct
            | MetricKind::DoseAtVolumeCc => &["Gy"],
            MetricKind::VolumeAtDosePct | MetricKind::VolumeAtDoseGy => &["%", "cc"],
        }
    }

    pub fn is_dose(self) -> bool {
        self.allowed_units() == ["Gy"]
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub metric_id: String,
    pub structure: String,
    pub metric_kind: MetricKind,
    pub limit: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub constraints: Vec<ConstraintSpec>,
}

impl ProtocolSpec {
    /// Checks the protocol invariants and returns the canonical form
    /// (constraints sorted by metric id).
    pub fn validate(mut self) -> Result<Self> {
        if self.constraints.is_empty() {
            return Err(Error::EmptyProtocol(self.name));
        }
        let mut seen = BTreeSet::new();
        for c in &self.constraints {
            if !seen.insert(c.metric_id.as_str()) {
                return Err(Error::DuplicateMetricId(c.metric_id.clone()));
            }
            if !(c.limit > 0.0) || !c.limit.is_finite() {
                return Err(Error::NonPositiveLimit {
                    metric_id: c.metric_id.clone(),
                    limit: c.limit,
                });
            }
            if !c.metric_kind.allowed_units().contains(&c.unit.as_str()) {
                return Err(Error::UnitMismatch {
                    metric_id: c.metric_id.clone(),
                    unit: c.unit.clone(),
                    kind: c.metric_kind.to_string(),
                });
            }
        }
        self.constraints
            .sort_by(|a, b| a.metric_id.cmp(&b.metric_id));
        Ok(self)
    }

    pub fn metric_ids(&self) -> impl Iterator<Item = &str> {
        self.constraints.iter().map(|c| c.metric_id.as_str())
    }

    pub fn constraint(&self, metric_id: &str) -> Option<&ConstraintSpec> {
        self.constraints.iter().find(|c| c.metric_id == metric_id)
    }
}

pub fn validate_protocol(spec: ProtocolSpec) -> Result<ProtocolSpec> {
    spec.validate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan_id: String,
    pub protocol_name: String,
    pub metrics: MetricMap,
}

impl PlanRecord {
    /// Accepts the plan iff its metric set equals the protocol's and every
    /// value is finite and non-negative. `spec` must be canonical.
    pub fn validate(self, spec: &ProtocolSpec) -> Result<Self> {
        if self.plan_id.is_empty() {
            return Err(Error::EmptyPlanId);
        }
        if self.protocol_name != spec.name {
            return Err(Error::ProtocolMismatch {
                plan_id: self.plan_id,
                found: self.protocol_name,
                expected: spec.name.clone(),
            });
        }
        for id in spec.metric_ids() {
            if !self.metrics.contains_key(id) {
                return Err(Error::MissingMetric {
                    plan_id: self.plan_id,
                    metric_id: id.to_string(),
                });
            }
        }
        for (id, &value) in &self.metrics {
            if spec.constraint(id).is_none() {
                return Err(Error::ExtraMetric {
                    plan_id: self.plan_id.clone(),
                    metric_id: id.clone(),
                });
            }
            if !value.is_finite() {
                return Err(Error::NonFiniteValue {
                    plan_id: self.plan_id.clone(),
                    metric_id: id.clone(),
                });
            }
            if value < 0.0 {
                return Err(Error::NegativeValue {
                    plan_id: self.plan_id.clone(),
                    metric_id: id.clone(),
                    value,
                });
            }
        }
        Ok(self)
    }
}

pub fn validate_plan(plan: PlanRecord, spec: &ProtocolSpec) -> Result<PlanRecord> {
    plan.validate(spec)
}

/// A scored plan as stored in the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBEntry {
    pub plan_id: String,
    pub protocol_name: String,
    pub raw_metrics: MetricMap,
    pub normalized_metrics: MetricMap,
    pub gm_score: f64,
    pub percentile: f64,
}

impl KBEntry {
    pub fn to_plan(&self) -> PlanRecord {
        PlanRecord {
            plan_id: self.plan_id.clone(),
            protocol_name: self.protocol_name.clone(),
            metrics: self.raw_metrics.clone(),
        }
    }
}

pub const K_MIN: usize = 3;
pub const K_MAX: usize = 10;

/// Similarity weights on the simplex plus retrieval depth.
///
/// Construct through [`RetrievalConfig::new`] or [`RetrievalConfig::validated`];
/// both normalize the weights to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub alpha: f64,
    pub beta_norm: f64,
    pub beta_raw: f64,
    pub k: usize,
}

impl RetrievalConfig {
    pub fn new(alpha: f64, beta_norm: f64, beta_raw: f64, k: usize) -> Result<Self> {
        Self {
            alpha,
            beta_norm,
            beta_raw,
            k,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let w = [self.alpha, self.beta_norm, self.beta_raw];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weights must be finite and non-negative, got {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidConfig("weights sum to zero".into()));
        }
        if !(K_MIN..=K_MAX).contains(&self.k) {
            return Err(Error::InvalidConfig(format!(
                "k = {} outside [{K_MIN}, {K_MAX}]",
                self.k
            )));
        }
        Ok(Self {
            alpha: self.alpha / sum,
            beta_norm: self.beta_norm / sum,
            beta_raw: self.beta_raw / sum,
            k: self.k,
        })
    }
}

impl Default for RetrievalConfig {
    /// Tuned configuration for the MiniLM text backbone.
    fn default() -> Self {
        Self::new(0.004313, 0.983081, 0.012606, 4).expect("default config is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNeighbor {
    pub plan_id: String,
    pub s_text: f64,
    pub s_norm: f64,
    pub s_raw: f64,
    pub combined: f64,
    pub percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub plan_id: String,
    pub protocol_name: String,
    pub query_gm: f64,
    pub nn_percentile: f64,
    pub weighted_avg_percentile: f64,
    pub weighted_median_percentile: f64,
    /// Ranked by combined score, best first.
    pub neighbors: Vec<ScoredNeighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub metric_id: String,
    pub raw: f64,
    pub limit: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub plan_id: String,
    pub protocol_name: String,
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn metric_ids(&self) -> BTreeSet<String> {
        self.violations.iter().map(|v| v.metric_id.clone()).collect()
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn protocol_is_sorted_by_metric_id() {
        let spec = ProtocolSpec {
            name: "P".into(),
            constraints: vec![constraint("B", 25.0), constraint("A", 50.0)],
        }
        .validate()
        .unwrap();
        let ids: Vec<_> = spec.metric_ids().collect();
        assert_eq!(ids, ["A", "B"]);
        assert_eq!(spec.constraints[0].limit, 50.0);
    }

    #[test]
    fn protocol_rejects_duplicates_and_bad_limits() {
        let dup = ProtocolSpec {
            name: "P".into(),
            constraints: vec![constraint("Heart_mean", 25.0), constraint("Heart_mean", 20.0)],
        };
        assert!(matches!(dup.validate(), Err(Error::DuplicateMetricId(id)) if id == "Heart_mean"));

        let zero = ProtocolSpec {
            name: "P".into(),
            constraints: vec![constraint("A", 0.0)],
        };
        assert!(matches!(zero.validate(), Err(Error::NonPositiveLimit { .. })));

        let empty = ProtocolSpec {
            name: "P".into(),
            constraints: vec![],
        };
        assert!(matches!(empty.validate(), Err(Error::EmptyProtocol(_))));
    }

    #[test]
    fn protocol_rejects_unit_kind_mismatch() {
        let mut c = constraint("Lung_V20Gy", 30.0);
        c.metric_kind = MetricKind::VolumeAtDoseGy;
        let ok = ProtocolSpec {
            name: "P".into(),
            constraints: vec![ConstraintSpec {
                unit: "%".into(),
                ..c.clone()
            }],
        };
        assert!(ok.validate().is_ok());
        let bad = ProtocolSpec {
            name: "P".into(),
            constraints: vec![c],
        };
        assert!(matches!(bad.validate(), Err(Error::UnitMismatch { .. })));
    }

    #[test]
    fn plan_validation() {
        let spec = protocol("P", &[("Cord_max_Gy", 45.0), ("Heart_mean_Gy", 25.0)]);
        let missing = plan("p1", "P", &[("Heart_mean_Gy", 10.0)]);
        assert!(matches!(
            missing.validate(&spec),
            Err(Error::MissingMetric { metric_id, .. }) if metric_id == "Cord_max_Gy"
        ));

        let exact = plan("p1", "P", &[("Heart_mean_Gy", 10.0), ("Cord_max_Gy", 0.0)]);
        assert_eq!(exact.clone().validate(&spec).unwrap(), exact);

        let extra = plan(
            "p1",
            "P",
            &[("Heart_mean_Gy", 10.0), ("Cord_max_Gy", 1.0), ("Lips_mean_Gy", 1.0)],
        );
        assert!(matches!(extra.validate(&spec), Err(Error::ExtraMetric { .. })));

        let nan = plan("p1", "P", &[("Heart_mean_Gy", f64::NAN), ("Cord_max_Gy", 1.0)]);
        assert!(matches!(nan.validate(&spec), Err(Error::NonFiniteValue { .. })));

        let neg = plan("p1", "P", &[("Heart_mean_Gy", -1.0), ("Cord_max_Gy", 1.0)]);
        assert!(matches!(neg.validate(&spec), Err(Error::NegativeValue { .. })));

        let other = plan("p1", "Q", &[("Heart_mean_Gy", 1.0), ("Cord_max_Gy", 1.0)]);
        assert!(matches!(other.validate(&spec), Err(Error::ProtocolMismatch { .. })));
    }

    #[test]
    fn plan_validation_is_idempotent() {
        let spec = protocol("P", &[("A", 1.0)]);
        let p = plan("x", "P", &[("A", 3.0)]);
        let once = p.validate(&spec).unwrap();
        let twice = once.clone().validate(&spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn retrieval_config_normalizes_and_bounds_k() {
        let c = RetrievalConfig::new(1.0, 2.0, 1.0, 5).unwrap();
        assert_eq!((c.alpha, c.beta_norm, c.beta_raw), (0.25, 0.5, 0.25));
        assert!(RetrievalConfig::new(1.0, 0.0, 0.0, 2).is_err());
        assert!(RetrievalConfig::new(1.0, 0.0, 0.0, 11).is_err());
        assert!(RetrievalConfig::new(0.0, 0.0, 0.0, 4).is_err());
        assert!(RetrievalConfig::new(-1.0, 2.0, 0.0, 4).is_err());
        let d = RetrievalConfig::default();
        assert!((d.alpha + d.beta_norm + d.beta_raw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip() {
        let spec = protocol("P", &[("A", 1.5), ("B", 2.25)]);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ProtocolSpec>(&json).unwrap(), spec);

        let p = plan("x", "P", &[("A", 0.1), ("B", 1.0 / 3.0)]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PlanRecord>(&json).unwrap(), p);
    }
}
