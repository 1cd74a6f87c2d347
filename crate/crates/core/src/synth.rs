//! Seeded synthetic protocols and plan cohorts.
//!
//! Metric names come from a fixed lexicon of common organ-at-risk
//! endpoints. Each plan value is `limit × exp(N(μ, σ))` with μ calibrated
//! so that a single draw exceeds its limit with probability
//! `violation_rate`.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::model::{ConstraintSpec, MetricKind, MetricMap, PlanRecord, ProtocolSpec, K_MAX};
use crate::seeding::substream;

/// `(metric_id, structure, kind, unit)`.
pub const LEXICON: &[(&str, &str, MetricKind, &str)] = &[
    ("Cord_Max", "Spinal Cord", MetricKind::MaxDose, "Gy"),
    ("Cord_PRV_Max", "Spinal Cord PRV", MetricKind::MaxDose, "Gy"),
    ("Brainstem_Max", "Brainstem", MetricKind::MaxDose, "Gy"),
    ("Heart_Mean", "Heart", MetricKind::MeanDose, "Gy"),
    ("Heart_V30Gy", "Heart", MetricKind::VolumeAtDoseGy, "%"),
    ("Heart_D33%", "Heart", MetricKind::DoseAtVolumePct, "Gy"),
    ("Parotid_L_Mean", "Left Parotid", MetricKind::MeanDose, "Gy"),
    ("Parotid_R_Mean", "Right Parotid", MetricKind::MeanDose, "Gy"),
    ("Larynx_Mean", "Larynx", MetricKind::MeanDose, "Gy"),
    ("OralCavity_Mean", "Oral Cavity", MetricKind::MeanDose, "Gy"),
    ("Mandible_Max", "Mandible", MetricKind::MaxDose, "Gy"),
    ("Esophagus_Mean", "Esophagus", MetricKind::MeanDose, "Gy"),
    ("Esophagus_Max", "Esophagus", MetricKind::MaxDose, "Gy"),
    ("Lung_Total_V20Gy", "Total Lung", MetricKind::VolumeAtDoseGy, "%"),
    ("Lung_Total_V5Gy", "Total Lung", MetricKind::VolumeAtDoseGy, "%"),
    ("Lung_Total_Mean", "Total Lung", MetricKind::MeanDose, "Gy"),
    ("BrachialPlexus_Max", "Brachial Plexus", MetricKind::MaxDose, "Gy"),
    ("Rectum_V65%", "Rectum", MetricKind::VolumeAtDosePct, "%"),
    ("Rectum_V50Gy", "Rectum", MetricKind::VolumeAtDoseGy, "%"),
    ("Rectum_D1cc", "Rectum", MetricKind::DoseAtVolumeCc, "Gy"),
    ("Bladder_V65%", "Bladder", MetricKind::VolumeAtDosePct, "%"),
    ("Bladder_V40Gy", "Bladder", MetricKind::VolumeAtDoseGy, "%"),
    ("FemoralHead_L_Max", "Left Femoral Head", MetricKind::MaxDose, "Gy"),
    ("FemoralHead_R_Max", "Right Femoral Head", MetricKind::MaxDose, "Gy"),
    ("PenileBulb_Mean", "Penile Bulb", MetricKind::MeanDose, "Gy"),
    ("SmallBowel_V45Gy", "Small Bowel", MetricKind::VolumeAtDoseGy, "cc"),
    ("SmallBowel_D2cc", "Small Bowel", MetricKind::DoseAtVolumeCc, "Gy"),
    ("Chestwall_V30Gy", "Chest Wall", MetricKind::VolumeAtDoseGy, "cc"),
    ("Lung_Ipsi_V20Gy", "Ipsilateral Lung", MetricKind::VolumeAtDoseGy, "%"),
    ("Lung_Contra_V5Gy", "Contralateral Lung", MetricKind::VolumeAtDoseGy, "%"),
    ("Breast_Contra_Max", "Contralateral Breast", MetricKind::MaxDose, "Gy"),
    ("Thyroid_Mean", "Thyroid", MetricKind::MeanDose, "Gy"),
];

pub const DOSE_LIMIT_RANGE: (f64, f64) = (5.0, 80.0);
pub const VOLUME_LIMIT_RANGE: (f64, f64) = (10.0, 100.0);
/// Floor applied to `violation_rate` before the quantile lookup.
pub const MIN_RATE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricSource {
    Count(usize),
    Explicit(Vec<ConstraintSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTemplate {
    pub name: String,
    pub metrics: MetricSource,
    /// Overrides `plans_per_protocol` for this protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plans: Option<usize>,
}

impl ProtocolTemplate {
    pub fn count(name: impl Into<String>, metrics: usize) -> Self {
        Self {
            name: name.into(),
            metrics: MetricSource::Count(metrics),
            plans: None,
        }
    }

    pub fn with_plans(mut self, plans: usize) -> Self {
        self.plans = Some(plans);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub protocols: Vec<ProtocolTemplate>,
    pub plans_per_protocol: usize,
    pub violation_rate: f64,
    pub spread: f64,
}

impl SynthConfig {
    /// `n` protocols named `Protocol 1..n` with 4 to 7 metrics each.
    pub fn uniform(seed: u64, n: usize, plans_per_protocol: usize, violation_rate: f64) -> Self {
        Self {
            seed,
            protocols: (0..n)
                .map(|i| ProtocolTemplate::count(format!("Protocol {}", i + 1), 4 + i % 4))
                .collect(),
            plans_per_protocol,
            violation_rate,
            spread: 0.25,
        }
    }

    /// Nine protocols over four disease sites, 607 plans in total; a 10%
    /// per-protocol hold-out leaves 62 test plans.
    pub fn study_like(seed: u64) -> Self {
        let protocols = [
            ("Lung", 6, 48),
            ("Head and Neck A", 7, 58),
            ("Head and Neck B", 6, 58),
            ("Head and Neck C", 5, 59),
            ("Prostate A", 5, 88),
            ("Prostate B", 6, 88),
            ("Prostate C", 4, 88),
            ("Breast A", 4, 60),
            ("Breast B", 5, 60),
        ]
        .into_iter()
        .map(|(name, m, p)| ProtocolTemplate::count(name, m).with_plans(p))
        .collect();
        Self {
            seed,
            protocols,
            plans_per_protocol: 68,
            violation_rate: 0.1,
            spread: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthConfig(m));
        if self.protocols.is_empty() {
            return bad("no protocols".into());
        }
        if !(0.0..1.0).contains(&self.violation_rate) {
            return bad(format!("violation_rate {} not in [0, 1)", self.violation_rate));
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return bad(format!("spread {} must be positive", self.spread));
        }
        let mut names = BTreeSet::new();
        for t in &self.protocols {
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate protocol name `{}`", t.name));
            }
            let plans = t.plans.unwrap_or(self.plans_per_protocol);
            if plans < K_MAX + 1 {
                return bad(format!(
                    "protocol `{}` has {plans} plans, at least {} required",
                    t.name,
                    K_MAX + 1
                ));
            }
            match &t.metrics {
                MetricSource::Count(0) => {
                    return bad(format!("protocol `{}` has no metrics", t.name))
                }
                MetricSource::Count(n) if *n > LEXICON.len() => {
                    return Err(Error::LexiconExhausted {
                        requested: *n,
                        available: LEXICON.len(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Log-space location giving `P(value > limit) = violation_rate`.
    pub fn mu(&self) -> f64 {
        let z = StdNormal::standard().inverse_cdf(self.violation_rate.max(MIN_RATE));
        self.spread * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub protocols: Vec<ProtocolSpec>,
    pub plans: Vec<PlanRecord>,
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let v = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    // One decimal, like protocol tables; stays inside the range.
    ((v * 10.0).round() / 10.0).clamp(lo, hi)
}

fn sample_constraints(rng: &mut impl Rng, n: usize) -> Vec<ConstraintSpec> {
    sample(rng, LEXICON.len(), n)
        .into_iter()
        .map(|i| {
            let (id, structure, kind, unit) = LEXICON[i];
            let range = if kind.is_dose() {
                DOSE_LIMIT_RANGE
            } else {
                VOLUME_LIMIT_RANGE
            };
            ConstraintSpec {
                metric_id: id.into(),
                structure: structure.into(),
                metric_kind: kind,
                limit: log_uniform(rng, range),
                unit: unit.into(),
            }
        })
        .collect()
}

/// Generates protocols and plans; deterministic per config.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let noise = Normal::new(config.mu(), config.spread)
        .map_err(|e| Error::InvalidSynthConfig(e.to_string()))?;
    let mut protocols = Vec::with_capacity(config.protocols.len());
    let mut plans = Vec::new();
    for (pi, template) in config.protocols.iter().enumerate() {
        let mut rng = substream(config.seed, &format!("synth/{}", template.name));
        let constraints = match &template.metrics {
            MetricSource::Count(n) => sample_constraints(&mut rng, *n),
            MetricSource::Explicit(list) => list.clone(),
        };
        let spec = ProtocolSpec {
            name: template.name.clone(),
            constraints,
        }
        .validate()?;
        for j in 0..template.plans.unwrap_or(config.plans_per_protocol) {
            let metrics: MetricMap = spec
                .constraints
                .iter()
                .map(|c| (c.metric_id.clone(), c.limit * noise.sample(&mut rng).exp()))
                .collect();
            plans.push(PlanRecord {
                plan_id: format!("P{:02}-{:04}", pi + 1, j + 1),
                protocol_name: spec.name.clone(),
                metrics,
            });
        }
        protocols.push(spec);
    }
    Ok(SynthOutput { protocols, plans })
}

/// Cohorts in which only the normalized-metric channel is informative.
///
/// Each protocol has one high-limit volume metric and one dose metric that
/// carry gm-neutral multiplicative noise (`e^a` and `e^-a`), plus eight
/// dose metrics sharing a common level `t` that sets the gm score. Raw
/// distances are dominated by the high-limit noise, text renderings are
/// hashed number tokens, while normalized distances track `t` and so the
/// gm ordering.
pub fn norm_dominant(seed: u64, n_protocols: usize, plans_per_protocol: usize) -> Result<SynthOutput> {
    if n_protocols == 0 || plans_per_protocol < K_MAX + 1 {
        return Err(Error::InvalidSynthConfig(format!(
            "need at least one protocol and {} plans per protocol",
            K_MAX + 1
        )));
    }
    let volumes: Vec<_> = LEXICON.iter().filter(|e| e.3 == "cc").collect();
    let doses: Vec<_> = LEXICON.iter().filter(|e| e.2.is_dose()).collect();
    let mut protocols = Vec::with_capacity(n_protocols);
    let mut plans = Vec::new();
    for pi in 0..n_protocols {
        let name = format!("Rig {}", pi + 1);
        let mut rng = substream(seed, &format!("synth/rig/{name}"));
        let heavy = volumes[pi % volumes.len()];
        let picks = sample(&mut rng, doses.len(), 9);
        let mut constraints = vec![ConstraintSpec {
            metric_id: heavy.0.into(),
            structure: heavy.1.into(),
            metric_kind: heavy.2,
            limit: 1000.0,
            unit: heavy.3.into(),
        }];
        constraints.extend(picks.into_iter().map(|i| {
            let (id, structure, kind, unit) = *doses[i];
            ConstraintSpec {
                metric_id: id.into(),
                structure: structure.into(),
                metric_kind: kind,
                limit: 10.0,
                unit: unit.into(),
            }
        }));
        let balance = constraints[1].metric_id.clone();
        let spec = ProtocolSpec { name, constraints }.validate()?;
        let n = plans_per_protocol as f64;
        for j in 0..plans_per_protocol {
            let t = 40.0 + 60.0 * (j as f64 + 0.5 * rng.random::<f64>()) / n;
            let a = (rng.random::<f64>() - 0.5) * 0.01;
            let metrics = spec
                .constraints
                .iter()
                .map(|c| {
                    let normalized = if c.metric_id == heavy.0 {
                        50.0 * a.exp()
                    } else if c.metric_id == balance {
                        50.0 * (-a).exp()
                    } else {
                        t
                    };
                    (c.metric_id.clone(), normalized * c.limit / 100.0)
                })
                .collect();
            plans.push(PlanRecord {
                plan_id: format!("R{:02}-{:04}", pi + 1, j + 1),
                protocol_name: spec.name.clone(),
                metrics,
            });
        }
        protocols.push(spec);
    }
    Ok(SynthOutput { protocols, plans })
}
