//! Building, splitting, persisting, and indexing the scored-plan knowledge
//! base.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::model::{KBEntry, MetricMap, PlanRecord, ProtocolSpec};
use crate::scoring::score_cohort;
use crate::seeding::substream;

pub const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub provider: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub version: String,
    pub protocols: BTreeMap<String, ProtocolSpec>,
    pub entries: BTreeMap<String, Vec<KBEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingMeta>,
}

/// A held-out plan together with the percentile it earned in the full
/// (pre-split) cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutPlan {
    pub plan: PlanRecord,
    pub true_percentile: f64,
}

impl KnowledgeBase {
    pub fn empty() -> Self {
        Self {
            version: FORMAT_VERSION.to_string(),
            protocols: BTreeMap::new(),
            entries: BTreeMap::new(),
            embedding: None,
        }
    }

    pub fn protocol(&self, name: &str) -> Option<&ProtocolSpec> {
        self.protocols.get(name)
    }

    pub fn entries_for(&self, protocol: &str) -> &[KBEntry] {
        self.entries.get(protocol).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, protocol: &str, plan_id: &str) -> Option<&KBEntry> {
        self.entries_for(protocol).iter().find(|e| e.plan_id == plan_id)
    }

    /// Checks structural invariants: canonical protocols, entry metrics
    /// matching their protocol, distinct plan ids, and score ranges.
    pub fn check(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::FormatVersionMismatch {
                found: self.version.clone(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        for (name, spec) in &self.protocols {
            if &spec.name != name {
                return Err(Error::CorruptFile(format!(
                    "protocol keyed `{name}` is named `{}`",
                    spec.name
                )));
            }
            if spec.clone().validate()? != *spec {
                return Err(Error::CorruptFile(format!("protocol `{name}` is not canonical")));
            }
        }
        for (name, entries) in &self.entries {
            let spec = self.protocols.get(name).ok_or_else(|| {
                Error::CorruptFile(format!("entries for unknown protocol `{name}`"))
            })?;
            let mut ids = BTreeSet::new();
            for e in entries {
                if !ids.insert(e.plan_id.as_str()) {
                    return Err(Error::DuplicatePlanId {
                        plan_id: e.plan_id.clone(),
                        protocol: name.clone(),
                    });
                }
                e.to_plan().validate(spec)?;
                let same_keys = e.normalized_metrics.keys().eq(e.raw_metrics.keys());
                if !same_keys
                    || !(e.gm_score > 0.0)
                    || !(e.percentile > 0.0 && e.percentile < 100.0)
                {
                    return Err(Error::CorruptFile(format!(
                        "entry `{}` violates score invariants",
                        e.plan_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scores each protocol cohort in full, then holds out `ceil(f·N)` plans per
/// protocol through a seeded shuffle. Held-out plans keep the percentile
/// they earned before the split; KB entries keep theirs too.
pub fn build_kb(
    plans: &[PlanRecord],
    protocols: &[ProtocolSpec],
    split_fraction: f64,
    seed: u64,
) -> Result<(KnowledgeBase, Vec<HeldOutPlan>)> {
    if !(0.0..1.0).contains(&split_fraction) {
        return Err(Error::InvalidSplit(split_fraction));
    }
    let mut specs = BTreeMap::new();
    for p in protocols {
        let spec = p.clone().validate()?;
        specs.insert(spec.name.clone(), spec);
    }

    let mut cohorts: BTreeMap<&str, Vec<PlanRecord>> = BTreeMap::new();
    for plan in plans {
        if !specs.contains_key(&plan.protocol_name) {
            return Err(Error::UnknownProtocol {
                plan_id: plan.plan_id.clone(),
                protocol: plan.protocol_name.clone(),
            });
        }
        cohorts
            .entry(plan.protocol_name.as_str())
            .or_default()
            .push(plan.clone());
    }

    let mut kb = KnowledgeBase::empty();
    let mut held_out = Vec::new();
    for (name, cohort) in cohorts {
        let mut ids = BTreeSet::new();
        for p in &cohort {
            if !ids.insert(p.plan_id.as_str()) {
                return Err(Error::DuplicatePlanId {
                    plan_id: p.plan_id.clone(),
                    protocol: name.to_string(),
                });
            }
        }
        let spec = &specs[name];
        let scored = score_cohort(&cohort, spec)?;

        let n_held = held_out_count(split_fraction, scored.len());
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.shuffle(&mut substream(seed, &format!("split/{name}")));
        let held: BTreeSet<usize> = order[..n_held].iter().copied().collect();

        let mut keep = Vec::with_capacity(scored.len() - n_held);
        for (i, entry) in scored.into_iter().enumerate() {
            if held.contains(&i) {
                held_out.push(HeldOutPlan {
                    true_percentile: entry.percentile,
                    plan: entry.to_plan(),
                });
            } else {
                keep.push(entry);
            }
        }
        kb.entries.insert(name.to_string(), keep);
    }
    kb.protocols = specs;
    Ok((kb, held_out))
}

/// `ceil(f·N)`, with a small guard so that products like `0.1 × 30`
/// (3.0000000000000004 in binary) do not round up an extra plan.
pub fn held_out_count(split_fraction: f64, n: usize) -> usize {
    let raw = split_fraction * n as f64;
    let count = (raw - 1e-9).ceil().max(0.0) as usize;
    count.min(n)
}

/// Six significant digits, keeping trailing zeros (`%#.6g` without the
/// exponent form for ordinary magnitudes).
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .unwrap_or(0);
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

/// Canonical text rendering of a plan's metrics, one clause per metric in
/// protocol order:
/// `Protocol {name}. {metric_id} = {value} {unit} (limit {limit} {unit}).`
pub fn render_plan_text(metrics: &MetricMap, spec: &ProtocolSpec) -> String {
    let mut out = format!("Protocol {}.", spec.name);
    for c in &spec.constraints {
        let value = metrics.get(&c.metric_id).copied().unwrap_or(f64::NAN);
        let _ = write!(
            out,
            " {} = {} {} (limit {} {}).",
            c.metric_id,
            format_sig6(value),
            c.unit,
            format_sig6(c.limit),
            c.unit
        );
    }
    out
}

/// Per-protocol parallel arrays; position `i` of every array describes the
/// same plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolIndex {
    pub plan_ids: Vec<String>,
    pub gm_scores: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub text_vectors: Vec<EmbeddingVector>,
    pub norm_vectors: Vec<Vec<f64>>,
    pub raw_vectors: Vec<Vec<f64>>,
}

impl ProtocolIndex {
    pub fn len(&self) -> usize {
        self.plan_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan_ids.is_empty()
    }
}

pub fn canonical_values(metrics: &MetricMap, spec: &ProtocolSpec) -> Vec<f64> {
    spec.metric_ids().map(|id| metrics[id]).collect()
}

pub fn build_indexes(
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
) -> Result<BTreeMap<String, ProtocolIndex>> {
    let mut out = BTreeMap::new();
    for (name, entries) in &kb.entries {
        let spec = kb.protocols.get(name).ok_or_else(|| Error::UnknownProtocol {
            plan_id: entries.first().map(|e| e.plan_id.clone()).unwrap_or_default(),
            protocol: name.clone(),
        })?;
        let texts: Vec<String> = entries
            .iter()
            .map(|e| render_plan_text(&e.raw_metrics, spec))
            .collect();
        let text_vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embedder.embed_batch(&texts)?
        };
        if text_vectors.len() != entries.len() {
            return Err(Error::EmbeddingProvider(format!(
                "expected {} vectors, got {}",
                entries.len(),
                text_vectors.len()
            )));
        }
        out.insert(
            name.clone(),
            ProtocolIndex {
                plan_ids: entries.iter().map(|e| e.plan_id.clone()).collect(),
                gm_scores: entries.iter().map(|e| e.gm_score).collect(),
                percentiles: entries.iter().map(|e| e.percentile).collect(),
                text_vectors,
                norm_vectors: entries
                    .iter()
                    .map(|e| canonical_values(&e.normalized_metrics, spec))
                    .collect(),
                raw_vectors: entries
                    .iter()
                    .map(|e| canonical_values(&e.raw_metrics, spec))
                    .collect(),
            },
        );
    }
    Ok(out)
}

/// A knowledge base with its similarity indexes, ready for queries.
#[derive(Debug, Clone)]
pub struct IndexedKb {
    pub kb: KnowledgeBase,
    pub indexes: BTreeMap<String, ProtocolIndex>,
}

impl IndexedKb {
    pub fn build(kb: KnowledgeBase, embedder: &dyn Embedder) -> Result<Self> {
        let indexes = build_indexes(&kb, embedder)?;
        Ok(Self { kb, indexes })
    }
}

pub fn save_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(kb)
        .map_err(|e| Error::CorruptFile(format!("serialize: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kb(&text)
}

pub fn parse_kb(text: &str) -> Result<KnowledgeBase> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptFile(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::FormatVersionMismatch {
                found: other.to_string(),
                expected: FORMAT_VERSION.to_string(),
            })
        }
        None => return Err(Error::CorruptFile("missing version tag".into())),
    }
    let kb: KnowledgeBase =
        serde_json::from_value(value).map_err(|e| Error::CorruptFile(e.to_string()))?;
    kb.check()?;
    Ok(kb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::model::fixtures::{plan, protocol};

    fn cohort(name: &str, n: usize) -> (ProtocolSpec, Vec<PlanRecord>) {
        let spec = protocol(name, &[("A", 50.0), ("B", 25.0)]);
        let plans = (0..n)
            .map(|i| {
                plan(
                    &format!("{name}-{i:03}"),
                    name,
                    &[("A", 10.0 + i as f64), ("B", 3.0 + 0.5 * i as f64)],
                )
            })
            .collect();
        (spec, plans)
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (spec, plans) = cohort("P", 10);
        let (kb, held) = build_kb(&plans, std::slice::from_ref(&spec), 0.1, 7).unwrap();
        assert_eq!(kb.entries_for("P").len(), 9);
        assert_eq!(held.len(), 1);

        let (kb0, held0) = build_kb(&plans, std::slice::from_ref(&spec), 0.0, 7).unwrap();
        assert_eq!(kb0.len(), 10);
        assert!(held0.is_empty());

        let again = build_kb(&plans, std::slice::from_ref(&spec), 0.1, 7).unwrap();
        assert_eq!(again, (kb.clone(), held.clone()));
    }

    #[test]
    fn held_out_keep_full_cohort_percentiles() {
        let (spec, plans) = cohort("P", 20);
        let full = score_cohort(&plans, &spec).unwrap();
        let (kb, held) = build_kb(&plans, &[spec], 0.25, 3).unwrap();
        assert_eq!(held.len(), 5);
        for h in &held {
            let f = full.iter().find(|e| e.plan_id == h.plan.plan_id).unwrap();
            assert_eq!(f.percentile, h.true_percentile);
            assert!(kb.entry("P", &h.plan.plan_id).is_none());
        }
        for e in kb.entries_for("P") {
            let f = full.iter().find(|x| x.plan_id == e.plan_id).unwrap();
            assert_eq!(f, e);
        }
    }

    #[test]
    fn held_out_count_rounding() {
        assert_eq!(held_out_count(0.1, 10), 1);
        assert_eq!(held_out_count(0.1, 30), 3);
        assert_eq!(held_out_count(0.1, 68), 7);
        assert_eq!(held_out_count(0.1, 1), 1);
        assert_eq!(held_out_count(0.0, 50), 0);
    }

    #[test]
    fn build_rejects_unknown_protocol_and_bad_split() {
        let (spec, mut plans) = cohort("P", 3);
        plans.push(plan("stray", "Q", &[("A", 1.0), ("B", 1.0)]));
        assert!(matches!(
            build_kb(&plans, std::slice::from_ref(&spec), 0.1, 1),
            Err(Error::UnknownProtocol { .. })
        ));
        assert!(matches!(
            build_kb(&plans[..3], &[spec], 1.0, 1),
            Err(Error::InvalidSplit(_))
        ));
    }

    #[test]
    fn render_examples() {
        let spec = protocol("P", &[("Heart_mean_Gy", 25.0)]);
        let metrics: MetricMap = [("Heart_mean_Gy".to_string(), 20.0)].into();
        assert_eq!(
            render_plan_text(&metrics, &spec),
            "Protocol P. Heart_mean_Gy = 20.0000 Gy (limit 25.0000 Gy)."
        );

        let spec = protocol("P", &[("B", 25.0), ("A", 50.0)]);
        let m1: MetricMap = [("A".to_string(), 1.0), ("B".to_string(), 2.0)].into();
        let m2: MetricMap = [("B".to_string(), 2.0), ("A".to_string(), 1.0)].into();
        assert_eq!(render_plan_text(&m1, &spec), render_plan_text(&m2, &spec));
        assert!(render_plan_text(&m1, &spec).starts_with("Protocol P. A = 1.00000 Gy"));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(20.0), "20.0000");
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(9.999996), "10.0000");
        assert_eq!(format_sig6(0.00123456), "0.00123456");
        assert_eq!(format_sig6(1.5e7), "1.50000e7");
    }

    #[test]
    fn indexes_align_with_entries() {
        let (spec, plans) = cohort("P", 10);
        let (kb, _) = build_kb(&plans, std::slice::from_ref(&spec), 0.1, 1).unwrap();
        let idx = build_indexes(&kb, &HashEmbedder::default()).unwrap();
        let p = &idx["P"];
        assert_eq!(p.len(), 9);
        for (i, e) in kb.entries_for("P").iter().enumerate() {
            assert_eq!(p.plan_ids[i], e.plan_id);
            assert_eq!(p.gm_scores[i], e.gm_score);
            assert_eq!(p.raw_vectors[i], canonical_values(&e.raw_metrics, &spec));
            assert_eq!(p.text_vectors[i].dimension(), 256);
        }
        assert!(build_indexes(&KnowledgeBase::empty(), &HashEmbedder::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn identical_entries_share_text_vectors() {
        let spec = protocol("P", &[("A", 50.0)]);
        let plans = vec![
            plan("x", "P", &[("A", 5.0)]),
            plan("y", "P", &[("A", 5.0)]),
            plan("z", "P", &[("A", 6.0)]),
        ];
        let (kb, _) = build_kb(&plans, &[spec], 0.0, 1).unwrap();
        let idx = build_indexes(&kb, &HashEmbedder::default()).unwrap();
        assert_eq!(idx["P"].text_vectors[0], idx["P"].text_vectors[1]);
    }

    #[test]
    fn save_load_round_trip_and_failures() {
        let (spec, plans) = cohort("P", 12);
        let (kb, _) = build_kb(&plans, &[spec], 0.1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.json");
        save_kb(&kb, &path).unwrap();
        assert_eq!(load_kb(&path).unwrap(), kb);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_kb(&path), Err(Error::CorruptFile(_))));

        fs::write(&path, text.replacen("\"v1\"", "\"v99\"", 1)).unwrap();
        assert!(matches!(
            load_kb(&path),
            Err(Error::FormatVersionMismatch { found, .. }) if found == "v99"
        ));

        assert!(matches!(
            load_kb(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }
}
