//! Constraint normalization, geometric-mean aggregation, and percentile
//! ranking within a protocol cohort.
//!
//! Percentile direction: a lower gm score (less dose burden relative to the
//! limits) maps to a higher percentile. The direction lives entirely in
//! [`percentile_rank`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KBEntry, MetricMap, PlanRecord, ProtocolSpec};

/// Added after the ×100 scaling so zero-valued metrics stay positive.
pub const EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPlan {
    pub plan_id: String,
    pub normalized: MetricMap,
    pub gm_score: f64,
}

pub fn normalize_value(raw: f64, limit: f64) -> f64 {
    raw / limit * 100.0 + EPSILON
}

/// Normalizes every protocol metric of `plan`. The plan must already be
/// validated against `spec`.
pub fn normalize_metrics(plan: &PlanRecord, spec: &ProtocolSpec) -> MetricMap {
    spec.constraints
        .iter()
        .map(|c| {
            let raw = plan.metrics[&c.metric_id];
            (c.metric_id.clone(), normalize_value(raw, c.limit))
        })
        .collect()
}

/// `exp(mean(ln v))`, i.e. the geometric mean computed in log space.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut log_sum = 0.0;
    for &v in values {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NonPositiveValue(v));
        }
        log_sum += v.ln();
    }
    Ok((log_sum / values.len() as f64).exp())
}

pub fn normalize_plan(plan: &PlanRecord, spec: &ProtocolSpec) -> Result<NormalizedPlan> {
    let normalized = normalize_metrics(plan, spec);
    let values: Vec<f64> = normalized.values().copied().collect();
    let gm_score = geometric_mean(&values)?;
    Ok(NormalizedPlan {
        plan_id: plan.plan_id.clone(),
        normalized,
        gm_score,
    })
}

/// Midrank counts behind a percentile: the percentile is
/// `50 · numerator / denominator`, where `numerator = 2G + E + 1` and
/// `denominator = N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MidRank {
    pub numerator: u64,
    pub denominator: u64,
}

impl MidRank {
    pub fn percentile(self) -> f64 {
        50.0 * self.numerator as f64 / self.denominator as f64
    }
}

/// Counts for [`percentile_rank`]; exposed so callers can check rank
/// identities in integer arithmetic.
pub fn midrank(gm: f64, cohort_gms: &[f64], member: bool) -> Result<MidRank> {
    if cohort_gms.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let greater = cohort_gms.iter().filter(|&&g| g > gm).count() as u64;
    let mut equal = cohort_gms.iter().filter(|&&g| g == gm).count() as u64;
    let n = if member {
        if equal == 0 {
            return Err(Error::MemberNotFound(gm));
        }
        equal -= 1;
        cohort_gms.len() as u64
    } else {
        cohort_gms.len() as u64 + 1
    };
    Ok(MidRank {
        numerator: 2 * greater + equal + 1,
        denominator: n,
    })
}

/// Percentile of `gm` within `cohort_gms`: `100/N · (G + E/2 + 1/2)` with
/// `G` the number of strictly worse (greater) cohort scores and `E` the ties.
///
/// With `member = true` the score is one of the cohort's own and is not
/// counted as its own tie. With `member = false` the score is virtually
/// inserted, so `N = |cohort| + 1`.
pub fn percentile_rank(gm: f64, cohort_gms: &[f64], member: bool) -> Result<f64> {
    midrank(gm, cohort_gms, member).map(MidRank::percentile)
}

/// Scores every plan against the full cohort. Output order follows input.
pub fn score_cohort(plans: &[PlanRecord], spec: &ProtocolSpec) -> Result<Vec<KBEntry>> {
    let normalized = plans
        .iter()
        .map(|p| {
            let p = p.clone().validate(spec)?;
            let n = normalize_plan(&p, spec)?;
            Ok((p, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let gms: Vec<f64> = normalized.iter().map(|(_, n)| n.gm_score).collect();
    normalized
        .into_iter()
        .map(|(plan, n)| {
            let percentile = percentile_rank(n.gm_score, &gms, true)?;
            Ok(KBEntry {
                plan_id: plan.plan_id,
                protocol_name: plan.protocol_name,
                raw_metrics: plan.metrics,
                normalized_metrics: n.normalized,
                gm_score: n.gm_score,
                percentile,
            })
        })
        .collect()
}
