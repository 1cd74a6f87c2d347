//! Plain-text tables for terminal output.

use std::fmt::Write;

use planeval::metrics::MethodMetrics;
use planeval::orchestrator::SessionStatus;
use planeval::tuner::{TraceEntry, TunerTrace};
use planeval::{EvaluationReport, PredictionResult, ViolationReport};

use crate::service::{ExplainResult, ScoreResult};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

pub fn score(r: &ScoreResult) -> String {
    let mut out = format!("plan {} ({})\n", r.plan_id, r.protocol_name);
    let width = r.normalized_metrics.keys().map(String::len).max().unwrap_or(0);
    for (id, v) in &r.normalized_metrics {
        let _ = writeln!(out, "  {id:<width$}  {v:>12.6}");
    }
    let _ = writeln!(out, "gm_score    {:.6}", r.gm_score);
    if let (Some(p), Some(n)) = (r.percentile, r.cohort_size) {
        let _ = writeln!(out, "percentile  {p:.4}  (against {n} knowledge-base plans)");
    }
    out
}

pub fn prediction(r: &PredictionResult) -> String {
    let mut out = format!(
        "plan {} ({}), gm_score {:.6}\n",
        r.plan_id, r.protocol_name, r.query_gm
    );
    let _ = writeln!(
        out,
        "{:>4}  {:<16} {:>9} {:>9} {:>9} {:>9} {:>10}",
        "rank", "plan_id", "s_text", "s_norm", "s_raw", "combined", "percentile"
    );
    for (i, n) in r.neighbors.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {:<16} {:>9.6} {:>9.6} {:>9.6} {:>9.6} {:>10.4}",
            i + 1,
            n.plan_id,
            n.s_text,
            n.s_norm,
            n.s_raw,
            n.combined,
            n.percentile
        );
    }
    let _ = writeln!(out, "nearest neighbor   {:.4}", r.nn_percentile);
    let _ = writeln!(out, "weighted average   {:.4}", r.weighted_avg_percentile);
    let _ = writeln!(out, "weighted median    {:.4}", r.weighted_median_percentile);
    out
}

pub fn violations(r: &ViolationReport) -> String {
    if r.is_empty() {
        return format!("plan {} ({}): no violations\n", r.plan_id, r.protocol_name);
    }
    let mut out = format!(
        "plan {} ({}): {} violation(s)\n",
        r.plan_id,
        r.protocol_name,
        r.violations.len()
    );
    for v in &r.violations {
        let _ = writeln!(
            out,
            "  {}  {} > {} (normalized {:.4})",
            v.metric_id, v.raw, v.limit, v.normalized
        );
    }
    out
}

fn tune_header() -> String {
    format!(
        "{:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10} {:>11} {:>10}\n",
        "k", "alpha", "beta_norm", "beta_raw", "RMSE_AVG", "MAE_NN", "%<=5pt_NN", "%<=10pt_AVG",
        "Loss"
    )
}

fn tune_row(e: &TraceEntry) -> String {
    let b = &e.breakdown;
    format!(
        "{:>3} {:>9.6} {:>9.6} {:>9.6} {:>9.4} {:>9.4} {:>10.2} {:>11.2} {:>10.6}\n",
        e.config.k,
        e.config.alpha,
        e.config.beta_norm,
        e.config.beta_raw,
        b.rmse_avg,
        b.mae_nn,
        b.pct5_nn,
        b.pct10_avg,
        b.loss
    )
}

/// The best configuration followed by the `top` lowest-loss evaluations.
pub fn tune(trace: &TunerTrace, top: usize) -> String {
    let mut out = format!(
        "{} evaluations (seed {}), best at call {}\n\nbest\n",
        trace.n_calls,
        trace.seed,
        trace.best_index + 1
    );
    out += &tune_header();
    out += &tune_row(trace.best());
    let mut order: Vec<usize> = (0..trace.entries.len()).collect();
    order.sort_by(|&a, &b| {
        trace.entries[a]
            .loss()
            .total_cmp(&trace.entries[b].loss())
            .then(a.cmp(&b))
    });
    let _ = write!(out, "\ntop {}\n", top.min(order.len()));
    out += &tune_header();
    for &i in order.iter().take(top) {
        out += &tune_row(&trace.entries[i]);
    }
    out
}

fn method_row(name: &str, m: &MethodMetrics) -> String {
    format!(
        "{:<18} {:>10} {:>10} {:>8.4} {:>8.4} {:>10} {:>7.2} {:>8.2}\n",
        name,
        opt(m.pearson_r),
        opt(m.spearman_rho),
        m.mae,
        m.rmse,
        opt(m.r2),
        m.pct_within_5,
        m.pct_within_10
    )
}

pub fn evaluation(r: &EvaluationReport) -> String {
    let c = &r.config;
    let mut out = format!(
        "{} held-out plans; k = {}, alpha = {:.6}, beta_norm = {:.6}, beta_raw = {:.6}\n",
        r.n_plans, c.k, c.alpha, c.beta_norm, c.beta_raw
    );
    let _ = writeln!(
        out,
        "{:<18} {:>10} {:>10} {:>8} {:>8} {:>10} {:>7} {:>8}",
        "method", "pearson_r", "spearman", "MAE", "RMSE", "R2", "%<=5pt", "%<=10pt"
    );
    out += &method_row("Nearest Neighbor", &r.nearest_neighbor);
    out += &method_row("Weighted Average", &r.weighted_average);
    out += &method_row("Weighted Median", &r.weighted_median);
    let _ = writeln!(out, "loss {:.6}", r.loss.loss);
    out
}

pub fn explanation(r: &ExplainResult) -> String {
    let o = &r.outcome;
    let mut out = format!("plan {} via {}\n", o.plan_id, o.backend);
    match &o.summary_text {
        Some(text) => {
            let _ = writeln!(out, "summary: {text}");
        }
        None => out.push_str("summary: (none)\n"),
    }
    let names: Vec<&str> = o.tool_trace.iter().map(|t| t.name.as_str()).collect();
    let _ = writeln!(out, "tool trace: {}", names.join(" -> "));
    for v in &o.sequence_violations {
        let _ = writeln!(out, "sequence violation: {v}");
    }
    let status = match &o.status {
        SessionStatus::Completed => "completed".to_string(),
        SessionStatus::Malformed(why) => format!("malformed ({why})"),
        SessionStatus::TurnLimitExceeded => "turn limit exceeded".to_string(),
    };
    let a = &r.agreement;
    let _ = writeln!(out, "status: {status}");
    let _ = writeln!(
        out,
        "agreement: nn={} weighted_avg={} weighted_median={} constraints={} overall={}",
        a.nn, a.weighted_avg, a.weighted_median, a.constraints, a.overall
    );
    out
}
