//! On-disk formats: one protocol or plan per JSON file, directories read in
//! filename order, and the held-out manifest written by `kb build`.

use std::fs;
use std::path::{Path, PathBuf};

use planeval::{Error, HeldOutPlan, PlanRecord, ProtocolSpec, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const PLANS_DIR: &str = "plans";
pub const PROTOCOLS_DIR: &str = "protocols";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `*.json` files directly inside `dir`, sorted by filename.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn read_protocols(dir: &Path) -> Result<Vec<ProtocolSpec>> {
    json_files(dir)?.iter().map(|p| read_json(p)).collect()
}

/// Plans from `dir`. A held-out directory (one with a manifest) yields the
/// manifest's plans in manifest order; otherwise every JSON file is a plan.
pub fn read_plans(dir: &Path) -> Result<Vec<PlanRecord>> {
    if dir.join(MANIFEST).is_file() {
        return Ok(read_held_out(dir)?.into_iter().map(|h| h.plan).collect());
    }
    json_files(dir)?.iter().map(|p| read_json(p)).collect()
}

/// Lowercase alphanumerics joined by single dashes.
pub fn slug(name: &str) -> String {
    name.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_ascii_lowercase)
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub plan_id: String,
    pub protocol_name: String,
    pub file: String,
    pub true_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split_fraction: f64,
    pub seed: u64,
    pub plans: Vec<ManifestEntry>,
}

pub fn write_held_out(dir: &Path, held_out: &[HeldOutPlan], split: f64, seed: u64) -> Result<()> {
    let mut entries = Vec::with_capacity(held_out.len());
    for h in held_out {
        let file = format!("{PLANS_DIR}/{}.json", slug(&h.plan.plan_id));
        write_json(&dir.join(&file), &h.plan)?;
        entries.push(ManifestEntry {
            plan_id: h.plan.plan_id.clone(),
            protocol_name: h.plan.protocol_name.clone(),
            file,
            true_percentile: h.true_percentile,
        });
    }
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            split_fraction: split,
            seed,
            plans: entries,
        },
    )
}

pub fn read_held_out(dir: &Path) -> Result<Vec<HeldOutPlan>> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    manifest
        .plans
        .into_iter()
        .map(|e| {
            let plan: PlanRecord = read_json(&dir.join(&e.file))?;
            if plan.plan_id != e.plan_id {
                return Err(Error::CorruptFile(format!(
                    "{}: holds plan `{}`, manifest says `{}`",
                    e.file, plan.plan_id, e.plan_id
                )));
            }
            Ok(HeldOutPlan {
                plan,
                true_percentile: e.true_percentile,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Head and Neck A"), "head-and-neck-a");
        assert_eq!(slug("P01-0003"), "p01-0003");
        assert_eq!(slug("  Lung / RTOG 0617 "), "lung-rtog-0617");
    }

    #[test]
    fn held_out_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let held = vec![HeldOutPlan {
            plan: PlanRecord {
                plan_id: "a-1".into(),
                protocol_name: "P".into(),
                metrics: [("m".to_string(), 1.0 / 3.0)].into(),
            },
            true_percentile: 100.0 / 7.0,
        }];
        write_held_out(dir.path(), &held, 0.1, 3).unwrap();
        assert_eq!(read_held_out(dir.path()).unwrap(), held);
        assert_eq!(read_plans(dir.path()).unwrap(), vec![held[0].plan.clone()]);
    }

    #[test]
    fn bad_json_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, "{").unwrap();
        assert!(matches!(read_json::<PlanRecord>(&p), Err(Error::CorruptFile(_))));
    }
}
