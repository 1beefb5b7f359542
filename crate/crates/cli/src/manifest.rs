//! Dataset manifests and small JSON file helpers.
//!
//! A manifest records what a directory of samples contains: the input kind,
//! either one `path` or a list of per-sample entries, and the preprocessing
//! chain that produced the files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use topoflow::data::load_point_cloud;
use topoflow::{Error, PointCloud, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Input kind: "point-cloud", "connectivity", "time-series", or
    /// "spike-counts".
    pub kind: String,
    /// Single-input manifests point at one file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Dataset manifests list one entry per sample, paths relative to the
    /// manifest's directory.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleEntry>,
    /// Human-readable processing steps applied so far, in order.
    #[serde(default)]
    pub preprocessing: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(self, &dir.join(MANIFEST_FILE))
    }

    /// Loads every listed sample as a labeled point cloud.
    pub fn load_clouds(&self, dir: &Path) -> Result<Vec<PointCloud>> {
        if self.kind != "point-cloud" {
            return Err(Error::invalid(format!(
                "expected a point-cloud dataset, manifest says '{}'",
                self.kind
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::invalid("manifest lists no samples"));
        }
        let mut clouds = Vec::with_capacity(self.samples.len());
        for entry in &self.samples {
            let mut cloud = load_point_cloud(dir.join(&entry.path))?;
            if let Some(label) = &entry.label {
                cloud = cloud.with_label(label.clone());
            }
            clouds.push(cloud);
        }
        Ok(clouds)
    }
}

/// Pretty-printed JSON with a trailing newline; stable field order makes
/// re-runs byte-identical.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
