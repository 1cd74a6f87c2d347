//! Protocol constraint checking. Limits are hard ceilings: a value equal to
//! its limit passes.

use crate::error::Result;
use crate::model::{PlanRecord, ProtocolSpec, Violation, ViolationReport};
use crate::scoring::normalize_value;

/// Lists exactly the metrics with `raw > limit`, in canonical metric order.
pub fn check_constraints(plan: &PlanRecord, spec: &ProtocolSpec) -> Result<ViolationReport> {
    let plan = plan.clone().validate(spec)?;
    let violations = spec
        .constraints
        .iter()
        .filter_map(|c| {
            let raw = plan.metrics[&c.metric_id];
            (raw > c.limit).then(|| Violation {
                metric_id: c.metric_id.clone(),
                raw,
                limit: c.limit,
                normalized: normalize_value(raw, c.limit),
            })
        })
        .collect();
    Ok(ViolationReport {
        plan_id: plan.plan_id,
        protocol_name: plan.protocol_name,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{plan, protocol};

    #[test]
    fn single_violation() {
        let spec = protocol("P", &[("Heart_mean", 25.0), ("Cord_max", 45.0)]);
        let p = plan("x", "P", &[("Heart_mean", 26.0), ("Cord_max", 30.0)]);
        let r = check_constraints(&p, &spec).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].metric_id, "Heart_mean");
        assert_eq!(r.violations[0].normalized, 104.000001);
    }

    #[test]
    fn equality_passes() {
        let spec = protocol("P", &[("A", 25.0), ("B", 0.3)]);
        let p = plan("x", "P", &[("A", 25.0), ("B", 0.3)]);
        assert!(check_constraints(&p, &spec).unwrap().is_empty());
    }

    #[test]
    fn canonical_order() {
        let spec = protocol("P", &[("E", 1.0), ("D", 1.0), ("C", 1.0), ("B", 1.0), ("A", 1.0)]);
        let p = plan(
            "x",
            "P",
            &[("E", 2.0), ("D", 0.5), ("C", 0.5), ("B", 3.0), ("A", 1.0)],
        );
        let ids: Vec<_> = check_constraints(&p, &spec)
            .unwrap()
            .violations
            .into_iter()
            .map(|v| v.metric_id)
            .collect();
        assert_eq!(ids, ["B", "E"]);
    }

    #[test]
    fn invalid_plan_is_rejected() {
        let spec = protocol("P", &[("A", 1.0)]);
        assert!(check_constraints(&plan("x", "P", &[]), &spec).is_err());
    }
}
