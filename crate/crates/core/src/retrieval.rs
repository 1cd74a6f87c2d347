//! Geometric-mean proximity candidate selection, three-view weighted
//! re-ranking, and the nearest-neighbor / weighted-average / weighted-median
//! percentile estimates.
//!
//! The candidate pool is exactly `k` plans. Re-ranking changes order and
//! weights, never membership. Every tie is broken by ascending plan id.

use std::cmp::Ordering;

use crate::embedding::{cosine_similarity, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::kb::{canonical_values, render_plan_text, IndexedKb, ProtocolIndex};
use crate::model::{PlanRecord, PredictionResult, ProtocolSpec, RetrievalConfig, ScoredNeighbor};
use crate::scoring::normalize_plan;

/// The three query views plus the query's gm score.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVectors {
    pub gm: f64,
    pub text: EmbeddingVector,
    pub norm: Vec<f64>,
    pub raw: Vec<f64>,
}

/// Builds the query views for a plan already validated against `spec`.
pub fn query_vectors(
    plan: &PlanRecord,
    spec: &ProtocolSpec,
    embedder: &dyn Embedder,
) -> Result<QueryVectors> {
    let normalized = normalize_plan(plan, spec)?;
    let text = embedder.embed(&render_plan_text(&plan.metrics, spec))?;
    Ok(QueryVectors {
        gm: normalized.gm_score,
        text,
        norm: canonical_values(&normalized.normalized, spec),
        raw: canonical_values(&plan.metrics, spec),
    })
}

/// Positions of the `k` index entries whose gm score is closest to
/// `query_gm`.
pub fn candidate_select(query_gm: f64, index: &ProtocolIndex, k: usize) -> Result<Vec<usize>> {
    if index.len() < k {
        return Err(Error::InsufficientCohort {
            k,
            available: index.len(),
        });
    }
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (index.gm_scores[a] - query_gm).abs();
        let db = (index.gm_scores[b] - query_gm).abs();
        da.total_cmp(&db)
            .then_with(|| index.plan_ids[a].cmp(&index.plan_ids[b]))
    });
    order.truncate(k);
    Ok(order)
}

/// `1 / (1 + d/√n)` for Euclidean distance `d` over `n` coordinates.
/// Lies in (0, 1] and equals 1 only when `a == b`.
pub fn metric_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(1.0 / (1.0 + d / (a.len() as f64).sqrt()))
}

fn by_combined_desc(a: &ScoredNeighbor, b: &ScoredNeighbor) -> Ordering {
    b.combined
        .total_cmp(&a.combined)
        .then_with(|| a.plan_id.cmp(&b.plan_id))
}

pub fn rerank(
    candidates: &[usize],
    index: &ProtocolIndex,
    query: &QueryVectors,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredNeighbor>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scored = candidates
        .iter()
        .map(|&i| {
            let s_text = cosine_similarity(query.text.as_slice(), index.text_vectors[i].as_slice())?
                .clamp(0.0, 1.0);
            let s_norm = metric_similarity(&query.norm, &index.norm_vectors[i])?;
            let s_raw = metric_similarity(&query.raw, &index.raw_vectors[i])?;
            let combined =
                config.alpha * s_text + config.beta_norm * s_norm + config.beta_raw * s_raw;
            Ok(ScoredNeighbor {
                plan_id: index.plan_ids[i].clone(),
                s_text,
                s_norm,
                s_raw,
                combined,
                percentile: index.percentiles[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(by_combined_desc);
    Ok(scored)
}

fn check_weighted(values: &[f64], weights: &[f64]) -> Result<bool> {
    if values.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: weights.len(),
        });
    }
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig(format!("negative or non-finite weight in {weights:?}")));
    }
    Ok(weights.iter().sum::<f64>() > 0.0)
}

/// `Σ wᵢvᵢ / Σ wᵢ`; uniform weights when they sum to zero.
pub fn weighted_average(values: &[f64], weights: &[f64]) -> Result<f64> {
    if !check_weighted(values, weights)? {
        return Ok(values.iter().sum::<f64>() / values.len() as f64);
    }
    let total: f64 = weights.iter().sum();
    let acc: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    Ok(acc / total)
}

/// Lower weighted median: the smallest value whose cumulative weight (values
/// ascending) reaches half the total. Uniform weights when they sum to zero.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    let uniform;
    let weights = if check_weighted(values, weights)? {
        weights
    } else {
        uniform = vec![1.0; values.len()];
        &uniform
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let half = weights.iter().sum::<f64>() / 2.0;
    let mut cumulative = 0.0;
    for &i in &order {
        cumulative += weights[i];
        if cumulative >= half {
            return Ok(values[i]);
        }
    }
    // Only reachable through rounding in the running sum.
    Ok(values[order[order.len() - 1]])
}

/// Aggregates ranked neighbors into the three percentile estimates.
pub fn aggregate(neighbors: &[ScoredNeighbor]) -> Result<(f64, f64, f64)> {
    let first = neighbors.first().ok_or(Error::EmptyInput)?;
    let pct: Vec<f64> = neighbors.iter().map(|n| n.percentile).collect();
    let w: Vec<f64> = neighbors.iter().map(|n| n.combined).collect();
    Ok((
        first.percentile,
        weighted_average(&pct, &w)?,
        weighted_median(&pct, &w)?,
    ))
}

/// Predicts a plan's percentile from its protocol's knowledge-base cohort.
pub fn predict(
    plan: &PlanRecord,
    ikb: &IndexedKb,
    config: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<PredictionResult> {
    let spec = ikb
        .kb
        .protocol(&plan.protocol_name)
        .ok_or_else(|| Error::UnknownProtocol {
            plan_id: plan.plan_id.clone(),
            protocol: plan.protocol_name.clone(),
        })?;
    let plan = plan.clone().validate(spec)?;
    let index = ikb
        .indexes
        .get(&plan.protocol_name)
        .ok_or(Error::InsufficientCohort {
            k: config.k,
            available: 0,
        })?;
    let query = query_vectors(&plan, spec, embedder)?;
    let candidates = candidate_select(query.gm, index, config.k)?;
    let neighbors = rerank(&candidates, index, &query, config)?;
    let (nn, avg, median) = aggregate(&neighbors)?;
    Ok(PredictionResult {
        plan_id: plan.plan_id,
        protocol_name: plan.protocol_name,
        query_gm: query.gm,
        nn_percentile: nn,
        weighted_avg_percentile: avg,
        weighted_median_percentile: median,
        neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::kb::build_kb;
    use crate::model::fixtures::{plan, protocol};

    fn index_from_gms(gms: &[f64]) -> ProtocolIndex {
        ProtocolIndex {
            plan_ids: (0..gms.len()).map(|i| format!("p{i}")).collect(),
            gm_scores: gms.to_vec(),
            percentiles: vec![50.0; gms.len()],
            text_vectors: vec![EmbeddingVector::zeros(4); gms.len()],
            norm_vectors: gms.iter().map(|g| vec![*g]).collect(),
            raw_vectors: gms.iter().map(|g| vec![*g]).collect(),
        }
    }

    #[test]
    fn candidate_select_examples() {
        let idx = index_from_gms(&[1.0, 5.0, 9.0, 13.0]);
        assert_eq!(candidate_select(5.2, &idx, 2).unwrap(), vec![1, 2]);

        let idx3 = index_from_gms(&[1.0, 2.0, 3.0]);
        let mut all = candidate_select(2.0, &idx3, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);

        // 4 and 6 are equidistant from 5; the second slot goes to plan "a".
        let tie = ProtocolIndex {
            plan_ids: vec!["b".into(), "a".into(), "c".into()],
            ..index_from_gms(&[6.0, 4.0, 5.0])
        };
        assert_eq!(candidate_select(5.0, &tie, 2).unwrap(), vec![2, 1]);

        assert!(matches!(
            candidate_select(1.0, &idx3, 4),
            Err(Error::InsufficientCohort { k: 4, available: 3 })
        ));
    }

    #[test]
    fn metric_similarity_examples() {
        assert_eq!(metric_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(metric_similarity(&[0.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(
            metric_similarity(&[0.0; 4], &[1.0, 1.0, 1.0, 1.0]).unwrap(),
            0.5
        );
        assert!(metric_similarity(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn weighted_examples() {
        let avg = weighted_average(&[80.0, 60.0, 40.0, 20.0], &[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert!((avg - 60.0).abs() < 1e-12);
        assert_eq!(weighted_median(&[10.0, 20.0, 30.0], &[1.0, 1.0, 2.0]).unwrap(), 20.0);
        assert_eq!(weighted_median(&[30.0, 10.0, 20.0], &[1.0, 1.0, 1.0]).unwrap(), 20.0);
        assert_eq!(weighted_median(&[1.0, 2.0, 3.0], &[0.1, 5.0, 0.1]).unwrap(), 2.0);
        assert_eq!(weighted_median(&[1.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(weighted_median(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(weighted_average(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            weighted_median(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(weighted_average(&[], &[]), Err(Error::EmptyInput)));
    }

    fn small_kb() -> (IndexedKb, Vec<PlanRecord>) {
        let spec = protocol("P", &[("A", 50.0), ("B", 20.0), ("C", 70.0)]);
        let plans: Vec<_> = (0..12)
            .map(|i| {
                let x = i as f64;
                plan(
                    &format!("p{i:02}"),
                    "P",
                    &[("A", 10.0 + 2.0 * x), ("B", 15.0 - x), ("C", 30.0 + (x * 1.7) % 9.0)],
                )
            })
            .collect();
        let (kb, _) = build_kb(&plans, &[spec], 0.0, 1).unwrap();
        (IndexedKb::build(kb, &HashEmbedder::default()).unwrap(), plans)
    }

    #[test]
    fn norm_only_orders_by_norm_distance() {
        let (ikb, plans) = small_kb();
        let cfg = RetrievalConfig::new(0.0, 1.0, 0.0, 6).unwrap();
        let mut q = plans[4].clone();
        q.plan_id = "query".into();
        *q.metrics.get_mut("A").unwrap() += 0.3;
        let r = predict(&q, &ikb, &cfg, &HashEmbedder::default()).unwrap();
        let s: Vec<f64> = r.neighbors.iter().map(|n| n.s_norm).collect();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        for n in &r.neighbors {
            assert_eq!(n.combined, n.s_norm);
        }
    }

    #[test]
    fn identical_query_ranks_first() {
        let (ikb, plans) = small_kb();
        let cfg = RetrievalConfig::new(1.0, 1.0, 1.0, 5).unwrap();
        let r = predict(&plans[7], &ikb, &cfg, &HashEmbedder::default()).unwrap();
        assert_eq!(r.neighbors[0].plan_id, "p07");
        assert!((r.neighbors[0].combined - 1.0).abs() < 1e-12);
        assert_eq!(r.nn_percentile, ikb.kb.entry("P", "p07").unwrap().percentile);
        assert_eq!(r.neighbors.len(), 5);
    }

    #[test]
    fn equal_components_give_common_score() {
        let idx = ProtocolIndex {
            text_vectors: vec![EmbeddingVector(vec![1.0, 0.0]); 3],
            ..index_from_gms(&[1.0, 2.0, 3.0])
        };
        // With a text cosine of 1 and vectors built to match, each component is equal.
        let q = QueryVectors {
            gm: 2.0,
            text: EmbeddingVector(vec![1.0, 0.0]),
            norm: vec![2.0],
            raw: vec![2.0],
        };
        let third = 1.0 / 3.0;
        let cfg = RetrievalConfig::new(third, third, third, 3).unwrap();
        let ranked = rerank(&[0, 1, 2], &idx, &q, &cfg).unwrap();
        assert_eq!(ranked[0].plan_id, "p1");
        assert!((ranked[0].combined - 1.0).abs() < 1e-12);
        for n in &ranked[1..] {
            assert_eq!(n.s_norm, n.s_raw);
            let expected = (n.s_text + n.s_norm + n.s_raw) / 3.0;
            assert!((n.combined - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_errors() {
        let (ikb, plans) = small_kb();
        let cfg = RetrievalConfig::new(0.0, 1.0, 0.0, 3).unwrap();
        let mut stray = plans[0].clone();
        stray.protocol_name = "Nope".into();
        assert!(matches!(
            predict(&stray, &ikb, &cfg, &HashEmbedder::default()),
            Err(Error::UnknownProtocol { .. })
        ));

        let spec = protocol("P", &[("A", 50.0)]);
        let (kb, _) = build_kb(
            &[plan("a", "P", &[("A", 1.0)]), plan("b", "P", &[("A", 2.0)])],
            &[spec],
            0.0,
            0,
        )
        .unwrap();
        let tiny = IndexedKb::build(kb, &HashEmbedder::default()).unwrap();
        assert!(matches!(
            predict(&plan("q", "P", &[("A", 1.5)]), &tiny, &cfg, &HashEmbedder::default()),
            Err(Error::InsufficientCohort { k: 3, available: 2 })
        ));
    }
}
