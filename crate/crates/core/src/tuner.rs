//! Retrieval hyperparameter tuning: GP minimization of the scalarized loss
//! over `(α, β_norm, β_raw, k)`.
//!
//! Search space is the unit cube `[0,1]⁴`. The first three coordinates are
//! normalized onto the weight simplex at decode time; the fourth maps
//! affinely onto `k ∈ [3, 10]` and is rounded.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::gp::{gp_minimize, Aborted, MinimizeOptions};
use crate::kb::{HeldOutPlan, IndexedKb};
use crate::metrics::{evaluate_system, LossBreakdown};
use crate::model::{RetrievalConfig, K_MAX, K_MIN};

pub const DIMENSIONS: usize = 4;

pub fn decode(point: &[f64]) -> Result<RetrievalConfig> {
    if point.len() != DIMENSIONS {
        return Err(Error::DimensionMismatch {
            left: point.len(),
            right: DIMENSIONS,
        });
    }
    if let Some((index, &value)) = point
        .iter()
        .enumerate()
        .find(|(_, x)| !(0.0..=1.0).contains(*x))
    {
        return Err(Error::OutOfBounds { index, value });
    }
    let sum = point[0] + point[1] + point[2];
    let (alpha, beta_norm, beta_raw) = if sum < 1e-12 {
        (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    } else {
        (point[0] / sum, point[1] / sum, point[2] / sum)
    };
    let span = (K_MAX - K_MIN) as f64;
    let k = (K_MIN as f64 + span * point[3])
        .round()
        .clamp(K_MIN as f64, K_MAX as f64) as usize;
    Ok(RetrievalConfig {
        alpha,
        beta_norm,
        beta_raw,
        k,
    })
}

pub fn encode(config: &RetrievalConfig) -> Vec<f64> {
    let span = (K_MAX - K_MIN) as f64;
    vec![
        config.alpha,
        config.beta_norm,
        config.beta_raw,
        (config.k - K_MIN) as f64 / span,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub point: Vec<f64>,
    pub config: RetrievalConfig,
    pub breakdown: LossBreakdown,
    /// The decoded config was seen earlier; its loss came from the cache.
    pub cached: bool,
}

impl TraceEntry {
    pub fn loss(&self) -> f64 {
        self.breakdown.loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerTrace {
    pub entries: Vec<TraceEntry>,
    pub best_index: usize,
    pub best_config: RetrievalConfig,
    pub best_loss: f64,
    pub seed: u64,
    pub n_calls: usize,
}

impl TunerTrace {
    pub fn best(&self) -> &TraceEntry {
        &self.entries[self.best_index]
    }
}

type ConfigKey = (u64, u64, u64, usize);

fn key(c: &RetrievalConfig) -> ConfigKey {
    (
        c.alpha.to_bits(),
        c.beta_norm.to_bits(),
        c.beta_raw.to_bits(),
        c.k,
    )
}

/// Tunes the retrieval config against `test_set`, minimizing the
/// scalarized loss of [`evaluate_system`].
pub fn tune_retrieval(
    ikb: &IndexedKb,
    test_set: &[HeldOutPlan],
    embedder: &dyn Embedder,
    opts: &MinimizeOptions,
) -> std::result::Result<TunerTrace, Aborted<Vec<TraceEntry>>> {
    let mut cache: HashMap<ConfigKey, LossBreakdown> = HashMap::new();
    let mut entries: Vec<TraceEntry> = Vec::with_capacity(opts.n_calls);

    let outcome = gp_minimize(
        DIMENSIONS,
        |point| {
            let config = decode(point)?;
            let (breakdown, cached) = match cache.get(&key(&config)) {
                Some(b) => (*b, true),
                None => {
                    let b = evaluate_system(ikb, test_set, &config, embedder)?.loss;
                    cache.insert(key(&config), b);
                    (b, false)
                }
            };
            entries.push(TraceEntry {
                point: point.to_vec(),
                config,
                breakdown,
                cached,
            });
            Ok(breakdown.loss)
        },
        opts,
    );

    match outcome {
        Ok(trace) => {
            let best = &entries[trace.best_index];
            Ok(TunerTrace {
                best_index: trace.best_index,
                best_config: best.config,
                best_loss: best.loss(),
                seed: opts.seed,
                n_calls: entries.len(),
                entries,
            })
        }
        Err(aborted) => Err(Aborted {
            error: aborted.error,
            completed: entries.len(),
            partial: entries,
        }),
    }
}
