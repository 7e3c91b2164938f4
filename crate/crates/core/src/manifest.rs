//! Per-image record stream threading the pipeline: path, dimensions,
//! illumination statistics, cluster membership, and stage provenance.
//!
//! On disk a manifest is JSON Lines: a header line carrying the schema
//! version, luminance mode, and the clustering threshold (once known),
//! followed by one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::DimsTable;
use crate::geometry::ImageDims;

pub const MANIFEST_VERSION: u32 = 1;

/// How per-image luminance is derived from the channel means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LumaMode {
    /// Unweighted mean of the three channel means.
    #[default]
    Mean,
    /// BT.601 luma weighting (0.299, 0.587, 0.114).
    Bt601,
}

/// Channel means and the luminance value used for clustering,
/// all in `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminationStats {
    pub mean_r: f64,
    pub mean_g: f64,
    pub mean_b: f64,
    pub luminance: f64,
}

/// Time-of-day label carried through from the dataset, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Morning,
    Afternoon,
    Evening,
    Night,
}

impl Scenario {
    /// Best-effort label from a filename token (FishEye8K-style names).
    pub fn infer_from_name(name: &str) -> Option<Scenario> {
        let lower = name.to_ascii_lowercase();
        for (token, scenario) in [
            ("morning", Scenario::Morning),
            ("afternoon", Scenario::Afternoon),
            ("evening", Scenario::Evening),
            ("night", Scenario::Night),
        ] {
            if lower.contains(token) {
                return Some(scenario);
            }
        }
        None
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Morning => "Morning",
            Scenario::Afternoon => "Afternoon",
            Scenario::Evening => "Evening",
            Scenario::Night => "Night",
        })
    }
}

/// Illumination cluster assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cluster {
    Night,
    Other,
}

impl std::fmt::Display for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Cluster::Night => "Night",
            Cluster::Other => "Other",
        })
    }
}

/// One image's manifest entry. `image_id` is the original file stem and
/// stays fixed while `path` moves from stage to stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub dims: ImageDims,
    pub stats: Option<IlluminationStats>,
    pub cluster: Option<Cluster>,
    pub scenario: Option<Scenario>,
    pub provenance: Vec<String>,
}

/// Manifest header: schema version plus the clustering parameters the
/// records were produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub manifest_version: u32,
    pub luma: LumaMode,
    pub t_night: Option<f64>,
}

impl Default for ManifestHeader {
    fn default() -> Self {
        ManifestHeader {
            manifest_version: MANIFEST_VERSION,
            luma: LumaMode::Mean,
            t_night: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Manifest {
            header: ManifestHeader::default(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Image id → dims lookup for detection parsing.
    pub fn dims_table(&self) -> DimsTable {
        self.records
            .iter()
            .map(|r| (r.image_id.clone(), r.dims))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.header)
            .map_err(|e| Error::parse(path, "header", e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for record in &self.records {
            serde_json::to_writer(&mut w, record)
                .map_err(|e| Error::parse(path, "record", e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let header_line = match lines.next() {
            Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, "line 1", "empty manifest")),
        };
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::parse(path, "line 1", e.to_string()))?;
        if header.manifest_version != MANIFEST_VERSION {
            return Err(Error::parse(
                path,
                "line 1",
                format!(
                    "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                    header.manifest_version
                ),
            ));
        }

        let mut records = Vec::new();
        for (index, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ImageRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}", index + 1), e.to_string()))?;
            records.push(record);
        }
        Ok(Manifest { header, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, luminance: f64) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            path: PathBuf::from(format!("{id}.png")),
            dims: ImageDims::new(64, 48).unwrap(),
            stats: Some(IlluminationStats {
                mean_r: luminance,
                mean_g: luminance,
                mean_b: luminance,
                luminance,
            }),
            cluster: None,
            scenario: Scenario::infer_from_name(id),
            provenance: vec![],
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut manifest = Manifest::new(vec![record("cam1_morning_001", 120.0), record("x", 3.5)]);
        manifest.header.t_night = Some(50.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        manifest.write_jsonl(&path).unwrap();
        let back = Manifest::read_jsonl(&path).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.records[0].scenario, Some(Scenario::Morning));
    }

    #[test]
    fn missing_header_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        std::fs::write(&path, "{\"image_id\": \"x\"}\n").unwrap();
        assert!(matches!(
            Manifest::read_jsonl(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn scenario_inference() {
        assert_eq!(Scenario::infer_from_name("cam3_Night_0042"), Some(Scenario::Night));
        assert_eq!(Scenario::infer_from_name("AFTERNOON_7"), Some(Scenario::Afternoon));
        assert_eq!(Scenario::infer_from_name("cam3_0042"), None);
    }
}
