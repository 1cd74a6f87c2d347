//! Operations shared by the CLI subcommands and the HTTP service.

use std::collections::BTreeMap;

use planeval::kb::EmbeddingMeta;
use planeval::orchestrator::{run_session, verify_consistency, Agreement, ChatBackend, SessionOutcome};
use planeval::scoring::{normalize_plan, percentile_rank};
use planeval::{
    check_constraints, predict, Embedder, Error, IndexedKb, KnowledgeBase, MetricMap, PlanRecord,
    PredictionResult, ProtocolSpec, Result, RetrievalConfig, ViolationReport,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub plan_id: String,
    pub protocol_name: String,
    pub normalized_metrics: MetricMap,
    pub gm_score: f64,
    /// Virtual-insertion percentile against the knowledge-base cohort.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort_size: Option<usize>,
}

/// The protocol named by `plan`, looked up in `kb`.
pub fn kb_protocol<'a>(kb: &'a KnowledgeBase, plan: &PlanRecord) -> Result<&'a ProtocolSpec> {
    kb.protocol(&plan.protocol_name)
        .ok_or_else(|| Error::UnknownProtocol {
            plan_id: plan.plan_id.clone(),
            protocol: plan.protocol_name.clone(),
        })
}

pub fn score(plan: &PlanRecord, spec: &ProtocolSpec, kb: Option<&KnowledgeBase>) -> Result<ScoreResult> {
    let spec = spec.clone().validate()?;
    let plan = plan.clone().validate(&spec)?;
    let n = normalize_plan(&plan, &spec)?;
    let (percentile, cohort_size) = match kb {
        Some(kb) => {
            let gms: Vec<f64> = kb
                .entries_for(&plan.protocol_name)
                .iter()
                .map(|e| e.gm_score)
                .collect();
            (Some(percentile_rank(n.gm_score, &gms, false)?), Some(gms.len()))
        }
        None => (None, None),
    };
    Ok(ScoreResult {
        plan_id: plan.plan_id,
        protocol_name: plan.protocol_name,
        normalized_metrics: n.normalized,
        gm_score: n.gm_score,
        percentile,
        cohort_size,
    })
}

pub fn check(plan: &PlanRecord, spec: &ProtocolSpec) -> Result<ViolationReport> {
    let spec = spec.clone().validate()?;
    check_constraints(plan, &spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResult {
    pub outcome: SessionOutcome,
    pub reference: PredictionResult,
    pub report: ViolationReport,
    pub agreement: Agreement,
}

/// Runs a session and verifies its summary against direct module calls.
pub fn explain(
    plan: &PlanRecord,
    ikb: &IndexedKb,
    config: &RetrievalConfig,
    embedder: &dyn Embedder,
    backend: &dyn ChatBackend,
) -> Result<ExplainResult> {
    let spec = kb_protocol(&ikb.kb, plan)?;
    let plan = plan.clone().validate(spec)?;
    let reference = predict(&plan, ikb, config, embedder)?;
    let report = check_constraints(&plan, spec)?;
    let outcome = run_session(&plan, ikb, config, embedder, backend)?;
    let agreement = verify_consistency(&outcome, &reference, &report);
    Ok(ExplainResult {
        outcome,
        reference,
        report,
        agreement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStats {
    pub entries: usize,
    pub metrics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbStats {
    pub version: String,
    pub total_entries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingMeta>,
    pub protocols: BTreeMap<String, ProtocolStats>,
}

pub fn kb_stats(kb: &KnowledgeBase) -> KbStats {
    KbStats {
        version: kb.version.clone(),
        total_entries: kb.len(),
        embedding: kb.embedding.clone(),
        protocols: kb
            .protocols
            .iter()
            .map(|(name, spec)| {
                (
                    name.clone(),
                    ProtocolStats {
                        entries: kb.entries_for(name).len(),
                        metrics: spec.metric_ids().map(str::to_string).collect(),
                    },
                )
            })
            .collect(),
    }
}
