//! Tool-augmented evaluation sessions.
//!
//! A chat backend is driven through a short loop: it receives the system
//! prompt and the plan payload, requests tool executions (retrieval, then
//! constraint checking), and finally emits a prose summary. Tools run
//! against the real modules and their results are passed back as
//! structured values, untouched. The summary is then parsed and compared
//! with direct module outputs.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::constraints::check_constraints;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::kb::IndexedKb;
use crate::model::{PlanRecord, PredictionResult, RetrievalConfig, ViolationReport};
use crate::retrieval::predict;

pub const TOOL_RETRIEVE: &str = "retrieve_and_predict";
pub const TOOL_CHECK: &str = "check_constraints";
pub const EXPECTED_SEQUENCE: [&str; 2] = [TOOL_RETRIEVE, TOOL_CHECK];
pub const MAX_TURNS: usize = 8;
/// Percentiles are rendered with 4 decimals, so parsed values can be off by
/// at most 5e-5.
pub const AGREEMENT_TOLERANCE: f64 = 0.005;

pub const SYSTEM_PROMPT: &str = "\
You evaluate radiotherapy treatment plans against their clinical protocol.
You have two tools. Call them in this order and call each exactly once:
1. retrieve_and_predict: retrieves similar historical plans from the same protocol and returns \
nearest-neighbor, weighted-average and weighted-median percentile estimates.
2. check_constraints: returns the protocol constraints the plan violates.
Do not compute any value yourself. Then reply with one summary in exactly this form, \
numbers with 4 decimals:
Plan <plan_id> (<protocol>): nearest-neighbor percentile <nn>; weighted average <avg>; \
weighted median <med>. Violated constraints: <comma-separated metric ids, or none>.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
    pub result: Value,
}

pub fn tool_schemas() -> Vec<ToolSchema> {
    let plan_arg = json!({
        "type": "object",
        "properties": { "plan_id": { "type": "string" } },
        "required": ["plan_id"]
    });
    vec![
        ToolSchema {
            name: TOOL_RETRIEVE.into(),
            description: "Retrieve similar plans from the protocol-matched knowledge base and \
                          predict the plan's percentile."
                .into(),
            parameters: plan_arg.clone(),
            result: json!({
                "type": "object",
                "required": ["nn_percentile", "weighted_avg_percentile",
                             "weighted_median_percentile", "neighbors"]
            }),
        },
        ToolSchema {
            name: TOOL_CHECK.into(),
            description: "List the protocol constraints whose limits the plan exceeds.".into(),
            parameters: plan_arg,
            result: json!({ "type": "object", "required": ["violations"] }),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Message {
    System { content: String },
    User { content: String },
    Assistant { content: String },
    ToolCall { name: String, arguments: Value },
    ToolResult { name: String, result: Value },
}

/// What a backend returns for one turn.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendReply {
    ToolCall { name: String, arguments: Value },
    Final(String),
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn respond(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<BackendReply>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolExchange {
    pub name: String,
    pub arguments: Value,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum SessionStatus {
    Completed,
    Malformed(String),
    TurnLimitExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedSummary {
    pub nn: f64,
    pub weighted_avg: f64,
    pub weighted_median: f64,
    /// `None` when the summary has no violated-constraints clause.
    pub violated: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("malformed summary: missing {}", missing.join(", "))]
pub struct MalformedSummary {
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub plan_id: String,
    pub backend: String,
    pub status: SessionStatus,
    pub summary_text: Option<String>,
    pub tool_trace: Vec<ToolExchange>,
    pub sequence_violations: Vec<String>,
    pub parsed: Option<ParsedSummary>,
    pub turns: usize,
    pub conversation: Vec<Message>,
}

fn plan_payload(plan: &PlanRecord) -> String {
    serde_json::to_string(&json!({ "plan": plan })).expect("plan serializes")
}

fn tool_error(e: &Error) -> Value {
    json!({ "error": { "category": e.category(), "message": e.to_string() } })
}

/// Runs one tool-augmented session for `plan`.
pub fn run_session(
    plan: &PlanRecord,
    ikb: &IndexedKb,
    config: &RetrievalConfig,
    embedder: &dyn Embedder,
    backend: &dyn ChatBackend,
) -> Result<SessionOutcome> {
    let tools = tool_schemas();
    let mut messages = vec![
        Message::System {
            content: SYSTEM_PROMPT.to_string(),
        },
        Message::User {
            content: plan_payload(plan),
        },
    ];
    let mut trace: Vec<ToolExchange> = Vec::new();
    let mut violations = Vec::new();
    let mut summary = None;
    let mut turns = 0;

    while turns < MAX_TURNS {
        turns += 1;
        match backend.respond(&messages, &tools)? {
            BackendReply::Final(text) => {
                messages.push(Message::Assistant {
                    content: text.clone(),
                });
                summary = Some(text);
                break;
            }
            BackendReply::ToolCall { name, arguments } => {
                let position = trace.len();
                match EXPECTED_SEQUENCE.iter().position(|t| *t == name) {
                    None => violations.push(format!("unknown tool `{name}`")),
                    Some(p) if p != position => violations.push(format!(
                        "`{name}` called at step {} (expected {})",
                        position + 1,
                        EXPECTED_SEQUENCE
                            .get(position)
                            .map_or("no further calls".to_string(), |t| format!("`{t}`"))
                    )),
                    Some(_) => {}
                }
                if let Some(id) = arguments.get("plan_id").and_then(Value::as_str) {
                    if id != plan.plan_id {
                        violations.push(format!(
                            "`{name}` called for plan `{id}`, session plan is `{}`",
                            plan.plan_id
                        ));
                    }
                }
                let result = match name.as_str() {
                    TOOL_RETRIEVE => match predict(plan, ikb, config, embedder) {
                        Ok(r) => serde_json::to_value(r).expect("prediction serializes"),
                        Err(e) => tool_error(&e),
                    },
                    TOOL_CHECK => match ikb.kb.protocol(&plan.protocol_name).map_or_else(
                        || {
                            Err(Error::UnknownProtocol {
                                plan_id: plan.plan_id.clone(),
                                protocol: plan.protocol_name.clone(),
                            })
                        },
                        |spec| check_constraints(plan, spec),
                    ) {
                        Ok(r) => serde_json::to_value(r).expect("report serializes"),
                        Err(e) => tool_error(&e),
                    },
                    other => json!({ "error": { "category": "tool", "message": format!("unknown tool `{other}`") } }),
                };
                messages.push(Message::ToolCall {
                    name: name.clone(),
                    arguments: arguments.clone(),
                });
                messages.push(Message::ToolResult {
                    name: name.clone(),
                    result: result.clone(),
                });
                trace.push(ToolExchange {
                    name,
                    arguments,
                    result,
                });
            }
        }
    }

    let parsed = summary.as_deref().map(parse_summary);
    let names: Vec<&str> = trace.iter().map(|t| t.name.as_str()).collect();
    let status = match (&summary, &parsed) {
        (None, _) => SessionStatus::TurnLimitExceeded,
        _ if trace.is_empty() => SessionStatus::Malformed("no tool calls before the summary".into()),
        _ if names != EXPECTED_SEQUENCE => SessionStatus::Malformed(format!(
            "tool sequence {names:?} differs from {EXPECTED_SEQUENCE:?}"
        )),
        (_, Some(Err(m))) => SessionStatus::Malformed(m.to_string()),
        _ => SessionStatus::Completed,
    };

    Ok(SessionOutcome {
        plan_id: plan.plan_id.clone(),
        backend: backend.id(),
        status,
        summary_text: summary,
        tool_trace: trace,
        sequence_violations: violations,
        parsed: parsed.and_then(|p| p.ok()),
        turns,
        conversation: messages,
    })
}

/// The canonical summary sentence.
pub fn render_summary(
    plan_id: &str,
    protocol: &str,
    nn: f64,
    avg: f64,
    median: f64,
    violated: &[String],
) -> String {
    let list = if violated.is_empty() {
        "none".to_string()
    } else {
        violated.join(", ")
    };
    format!(
        "Plan {plan_id} ({protocol}): nearest-neighbor percentile {nn:.4}; \
         weighted average {avg:.4}; weighted median {median:.4}. \
         Violated constraints: {list}."
    )
}

struct SummaryPatterns {
    nn: Regex,
    avg: Regex,
    median: Regex,
    violated: Regex,
}

fn patterns() -> &'static SummaryPatterns {
    static PATTERNS: OnceLock<SummaryPatterns> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let number = r"\D*?(\d+(?:\.\d+)?)";
        SummaryPatterns {
            nn: Regex::new(&format!(r"(?i)nearest[\s-]?neighbou?r(?:\s+percentile)?{number}"))
                .unwrap(),
            avg: Regex::new(&format!(r"(?i)weighted[\s-]+average{number}")).unwrap(),
            median: Regex::new(&format!(r"(?i)weighted[\s-]+median{number}")).unwrap(),
            violated: Regex::new(r"(?i)violated\s+constraints?\s*:\s*([^\n]*)").unwrap(),
        }
    })
}

/// Extracts the three labeled percentiles and the violated-constraint list
/// from free text.
pub fn parse_summary(text: &str) -> std::result::Result<ParsedSummary, MalformedSummary> {
    let p = patterns();
    let grab = |re: &Regex| {
        re.captures(text)
            .and_then(|c| c[1].parse::<f64>().ok())
    };
    let (nn, avg, median) = (grab(&p.nn), grab(&p.avg), grab(&p.median));
    let mut missing = Vec::new();
    if nn.is_none() {
        missing.push("nearest-neighbor percentile".to_string());
    }
    if avg.is_none() {
        missing.push("weighted average".to_string());
    }
    if median.is_none() {
        missing.push("weighted median".to_string());
    }
    if !missing.is_empty() {
        return Err(MalformedSummary { missing });
    }
    let violated = p.violated.captures(text).map(|c| {
        let list = c[1].trim().trim_end_matches('.').trim();
        if list.eq_ignore_ascii_case("none") {
            BTreeSet::new()
        } else {
            list.split(',')
                .map(|s| s.trim().trim_end_matches('.').to_string())
                .filter(|s| !s.is_empty())
                .collect()
        }
    });
    Ok(ParsedSummary {
        nn: nn.unwrap(),
        weighted_avg: avg.unwrap(),
        weighted_median: median.unwrap(),
        violated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    pub nn: bool,
    pub weighted_avg: bool,
    pub weighted_median: bool,
    pub constraints: bool,
    pub overall: bool,
}

/// Compares a session's parsed summary against direct module outputs.
pub fn verify_consistency(
    outcome: &SessionOutcome,
    prediction: &PredictionResult,
    report: &ViolationReport,
) -> Agreement {
    let close = |a: f64, b: f64| (a - b).abs() <= AGREEMENT_TOLERANCE;
    let Some(parsed) = &outcome.parsed else {
        return Agreement {
            nn: false,
            weighted_avg: false,
            weighted_median: false,
            constraints: false,
            overall: false,
        };
    };
    let nn = close(parsed.nn, prediction.nn_percentile);
    let weighted_avg = close(parsed.weighted_avg, prediction.weighted_avg_percentile);
    let weighted_median = close(parsed.weighted_median, prediction.weighted_median_percentile);
    let constraints = parsed
        .violated
        .as_ref()
        .is_some_and(|v| *v == report.metric_ids());
    Agreement {
        nn,
        weighted_avg,
        weighted_median,
        constraints,
        overall: nn && weighted_avg && weighted_median && constraints,
    }
}

/// Deterministic stand-in for a tool-calling LLM: calls retrieval, then the
/// constraint check, then writes the canonical summary from the tool
/// results verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedMockBackend;

pub fn scripted_mock_backend() -> ScriptedMockBackend {
    ScriptedMockBackend
}

impl ScriptedMockBackend {
    fn session_plan_id(messages: &[Message]) -> Option<String> {
        messages.iter().find_map(|m| match m {
            Message::User { content } => serde_json::from_str::<Value>(content)
                .ok()?
                .pointer("/plan/plan_id")?
                .as_str()
                .map(str::to_string),
            _ => None,
        })
    }

    fn result_of<'a>(messages: &'a [Message], tool: &str) -> Option<&'a Value> {
        messages.iter().rev().find_map(|m| match m {
            Message::ToolResult { name, result } if name == tool => Some(result),
            _ => None,
        })
    }
}

impl ChatBackend for ScriptedMockBackend {
    fn id(&self) -> String {
        "scripted-mock".into()
    }

    fn respond(&self, messages: &[Message], _tools: &[ToolSchema]) -> Result<BackendReply> {
        let plan_id = Self::session_plan_id(messages)
            .ok_or_else(|| Error::Backend("no plan payload in conversation".into()))?;
        let call = |name: &str| BackendReply::ToolCall {
            name: name.to_string(),
            arguments: json!({ "plan_id": plan_id }),
        };
        let Some(retrieved) = Self::result_of(messages, TOOL_RETRIEVE) else {
            return Ok(call(TOOL_RETRIEVE));
        };
        let Some(checked) = Self::result_of(messages, TOOL_CHECK) else {
            return Ok(call(TOOL_CHECK));
        };
        let prediction: PredictionResult = match serde_json::from_value(retrieved.clone()) {
            Ok(p) => p,
            Err(_) => return Ok(BackendReply::Final(format!("Retrieval failed: {retrieved}"))),
        };
        let report: ViolationReport = match serde_json::from_value(checked.clone()) {
            Ok(r) => r,
            Err(_) => return Ok(BackendReply::Final(format!("Constraint check failed: {checked}"))),
        };
        let violated: Vec<String> = report.violations.iter().map(|v| v.metric_id.clone()).collect();
        Ok(BackendReply::Final(render_summary(
            &prediction.plan_id,
            &prediction.protocol_name,
            prediction.nn_percentile,
            prediction.weighted_avg_percentile,
            prediction.weighted_median_percentile,
            &violated,
        )))
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    tools: &'a [ToolSchema],
}

#[derive(Debug, Deserialize)]
struct WireToolCall {
    name: String,
    #[serde(default)]
    arguments: Value,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    tool_call: Option<WireToolCall>,
    content: Option<String>,
}

/// HTTP client for a generic tool-calling chat service.
///
/// Request: `{"model", "messages", "tools"}`. Response: either
/// `{"tool_call": {"name", "arguments"}}` or `{"content": "..."}`.
#[derive(Debug)]
pub struct RemoteChatBackend {
    url: String,
    model: String,
    agent: ureq::Agent,
}

impl RemoteChatBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            agent,
        }
    }
}

impl ChatBackend for RemoteChatBackend {
    fn id(&self) -> String {
        format!("remote:{}:{}", self.url, self.model)
    }

    fn respond(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<BackendReply> {
        let resp: ChatResponse = self
            .agent
            .post(&self.url)
            .send_json(ChatRequest {
                model: &self.model,
                messages,
                tools,
            })
            .map_err(|e| Error::Backend(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(format!("malformed response: {e}")))?;
        match (resp.tool_call, resp.content) {
            (Some(call), _) => Ok(BackendReply::ToolCall {
                name: call.name,
                arguments: call.arguments,
            }),
            (None, Some(text)) => Ok(BackendReply::Final(text)),
            (None, None) => Err(Error::Backend(
                "response carries neither tool_call nor content".into(),
            )),
        }
    }
}
