use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::StoreError;

/// Which partition a sample landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    High,
    Low,
    None,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::High => "high",
            Subset::Low => "low",
            Subset::None => "none",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high" => Ok(Subset::High),
            "low" => Ok(Subset::Low),
            "none" => Ok(Subset::None),
            other => Err(format!("unknown subset '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dataset: String,
    pub subset: Subset,
    pub metric: String,
    pub loss: f64,
}

/// Sample id to per-sample metadata, serialized as one JSON object.
pub type Manifest = BTreeMap<String, ManifestEntry>;

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), StoreError> {
    if let Some((id, _)) = manifest.iter().find(|(_, e)| !e.loss.is_finite()) {
        return Err(StoreError::Manifest(format!(
            "sample {id}: loss is not finite"
        )));
    }
    let mut text =
        serde_json::to_string_pretty(manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, StoreError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))
}

/// Ids present on one side only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrossCheck {
    /// In the manifest but not among the gradient records.
    pub missing_from_grds: Vec<String>,
    /// Among the gradient records but not in the manifest.
    pub missing_from_manifest: Vec<String>,
    /// Ids appearing more than once among the gradient records.
    pub duplicated_in_grds: Vec<String>,
}

impl CrossCheck {
    pub fn is_consistent(&self) -> bool {
        self.missing_from_grds.is_empty()
            && self.missing_from_manifest.is_empty()
            && self.duplicated_in_grds.is_empty()
    }
}

pub fn cross_check<'a>(
    manifest: &Manifest,
    grds_ids: impl IntoIterator<Item = &'a str>,
) -> CrossCheck {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for id in grds_ids {
        if !seen.insert(id) {
            dup.insert(id.to_string());
        }
    }
    CrossCheck {
        missing_from_grds: manifest
            .keys()
            .filter(|k| !seen.contains(k.as_str()))
            .cloned()
            .collect(),
        missing_from_manifest: seen
            .iter()
            .filter(|id| !manifest.contains_key(**id))
            .map(|s| s.to_string())
            .collect(),
        duplicated_in_grds: dup.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(loss: f64) -> ManifestEntry {
        ManifestEntry {
            dataset: "toy".into(),
            subset: Subset::None,
            metric: "ifd".into(),
            loss,
        }
    }

    #[test]
    fn empty_manifest_is_empty_object() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_manifest(&Manifest::new(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().trim_end(), "{}");
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn cross_check_reports_both_sides() {
        let mut m = Manifest::new();
        m.insert("a".into(), entry(1.0));
        m.insert("ghost".into(), entry(1.0));
        let r = cross_check(&m, ["a", "b", "b"]);
        assert_eq!(r.missing_from_grds, vec!["ghost"]);
        assert_eq!(r.missing_from_manifest, vec!["b"]);
        assert_eq!(r.duplicated_in_grds, vec!["b"]);
        assert!(!r.is_consistent());
        m.remove("ghost");
        assert!(cross_check(&m, ["a"]).is_consistent());
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"a": {"dataset": "x", "subset": "middle", "metric": "m", "loss": 1}}"#,
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(StoreError::Manifest(_))));
    }
}
