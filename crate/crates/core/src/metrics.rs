//! Prediction-quality metrics, the scalarized tuning loss, and per-method
//! evaluation reports.
//!
//! Correlations and R² are `None` when either input has zero variance (or
//! fewer than two points). They are never reported as 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::kb::{HeldOutPlan, IndexedKb};
use crate::model::RetrievalConfig;
use crate::retrieval::predict;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn pearson_r(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    if pred.len() < 2 {
        return Ok(None);
    }
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Regression R², `1 − SS_res / SS_tot`. Can be negative.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    if pred.len() < 2 {
        return Ok(None);
    }
    let mt = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - mt) * (t - mt)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    pearson_r(&average_ranks(pred), &average_ranks(truth))
}

/// Percentage of points with `|pred − truth| ≤ threshold` (inclusive).
pub fn pct_within(pred: &[f64], truth: &[f64], threshold: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (*p - *t).abs() <= threshold)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// `RMSE_avg + MAE_nn + (100 − %≤5_nn)/100 + (100 − %≤10_avg)/100`.
pub fn scalarized_loss(rmse_avg: f64, mae_nn: f64, pct5_nn: f64, pct10_avg: f64) -> f64 {
    rmse_avg + mae_nn + (100.0 - pct5_nn) / 100.0 + (100.0 - pct10_avg) / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub pct_within_5: f64,
    pub pct_within_10: f64,
}

impl MethodMetrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            pearson_r: pearson_r(pred, truth)?,
            spearman_rho: spearman_rho(pred, truth)?,
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            r2: r2(pred, truth)?,
            pct_within_5: pct_within(pred, truth, 5.0)?,
            pct_within_10: pct_within(pred, truth, 10.0)?,
        })
    }
}

/// The four loss inputs and the resulting loss, as tabulated per tuned
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rmse_avg: f64,
    pub mae_nn: f64,
    pub pct5_nn: f64,
    pub pct10_avg: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPrediction {
    pub plan_id: String,
    pub protocol_name: String,
    pub true_percentile: f64,
    pub nn: f64,
    pub weighted_avg: f64,
    pub weighted_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: RetrievalConfig,
    pub n_plans: usize,
    pub nearest_neighbor: MethodMetrics,
    pub weighted_average: MethodMetrics,
    pub weighted_median: MethodMetrics,
    pub loss: LossBreakdown,
    pub predictions: Vec<PlanPrediction>,
}

/// Runs `predict` for every test plan and scores each aggregation method.
/// Predictions fan out across threads; results keep test-set order.
pub fn evaluate_system(
    ikb: &IndexedKb,
    test_set: &[HeldOutPlan],
    config: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<EvaluationReport> {
    if test_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let predictions = test_set
        .par_iter()
        .map(|h| {
            let r = predict(&h.plan, ikb, config, embedder)?;
            Ok(PlanPrediction {
                plan_id: r.plan_id,
                protocol_name: r.protocol_name,
                true_percentile: h.true_percentile,
                nn: r.nn_percentile,
                weighted_avg: r.weighted_avg_percentile,
                weighted_median: r.weighted_median_percentile,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let truth: Vec<f64> = predictions.iter().map(|p| p.true_percentile).collect();
    let column = |f: fn(&PlanPrediction) -> f64| predictions.iter().map(f).collect::<Vec<f64>>();
    let nearest_neighbor = MethodMetrics::compute(&column(|p| p.nn), &truth)?;
    let weighted_average = MethodMetrics::compute(&column(|p| p.weighted_avg), &truth)?;
    let weighted_median = MethodMetrics::compute(&column(|p| p.weighted_median), &truth)?;
    let loss = LossBreakdown {
        rmse_avg: weighted_average.rmse,
        mae_nn: nearest_neighbor.mae,
        pct5_nn: nearest_neighbor.pct_within_5,
        pct10_avg: weighted_average.pct_within_10,
        loss: scalarized_loss(
            weighted_average.rmse,
            nearest_neighbor.mae,
            nearest_neighbor.pct_within_5,
            weighted_average.pct_within_10,
        ),
    };
    Ok(EvaluationReport {
        config: *config,
        n_plans: predictions.len(),
        nearest_neighbor,
        weighted_average,
        weighted_median,
        loss,
        predictions,
    })
}
