//! Declarative pipeline configuration, loaded from a TOML file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{ClassSchema, DetectionFormat};
use crate::fusion::FusionConfig;
use crate::manifest::LumaMode;

fn default_sr_factor() -> f64 {
    4.0
}

fn default_timeout_secs() -> u64 {
    3600
}

fn default_parallelism() -> usize {
    1
}

fn default_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// One external image-to-image stage: enhance, night-to-day, or
/// super-resolve. A stage is either given a command or explicitly skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub skip: bool,
    pub command: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl StageConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.skip {
            return Ok(());
        }
        let command = self.command.as_deref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "stage '{name}' must either give a command or set skip = true"
            ))
        })?;
        validate_template(name, command)?;
        if self.timeout_secs == 0 {
            return Err(Error::InvalidArgument(format!(
                "stage '{name}': timeout_secs must be positive"
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidArgument(format!(
                "stage '{name}': parallelism must be positive"
            )));
        }
        Ok(())
    }
}

fn validate_template(name: &str, command: &str) -> Result<()> {
    for placeholder in ["{input_dir}", "{output_dir}"] {
        if !command.contains(placeholder) {
            return Err(Error::InvalidArgument(format!(
                "stage '{name}': command template must contain {placeholder}"
            )));
        }
    }
    Ok(())
}

/// The three image stages, in pipeline order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTable {
    pub enhance: StageConfig,
    pub night_to_day: StageConfig,
    pub super_resolve: StageConfig,
}

/// One detector adapter feeding the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub tag: String,
    pub command: String,
    pub format: DetectionFormat,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Run this detector on the super-resolved set (when the SR stage is
    /// enabled) rather than on the final set directly.
    #[serde(default = "default_true")]
    pub use_sr: bool,
}

impl DetectorSpec {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Source directory of raw images.
    pub images: Option<PathBuf>,
    /// Work directory holding every intermediate.
    pub work_dir: Option<PathBuf>,
    #[serde(default = "default_sr_factor")]
    pub sr_factor: f64,
    /// Explicit night threshold; mutually exclusive with `auto_threshold`.
    pub t_night: Option<f64>,
    #[serde(default)]
    pub auto_threshold: bool,
    #[serde(default)]
    pub luma: LumaMode,
    /// Optional class schema file (JSON array of `{id, name}`); the
    /// five-class traffic schema when absent.
    pub classes: Option<PathBuf>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub stages: StageTable,
    pub detectors: Vec<DetectorSpec>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::parse(path, "toml", e.message().to_string()))?;
        Ok(config)
    }

    /// Validate every field that does not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        if !(self.sr_factor > 0.0 && self.sr_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sr_factor must be positive, got {}",
                self.sr_factor
            )));
        }
        match (self.t_night, self.auto_threshold) {
            (Some(_), true) => {
                return Err(Error::InvalidArgument(
                    "give either t_night or auto_threshold, not both".into(),
                ))
            }
            (None, false) => {
                return Err(Error::InvalidArgument(
                    "a night threshold is required: set t_night or auto_threshold = true".into(),
                ))
            }
            (Some(t), false) => {
                crate::illumination::NightThreshold::new(t)?;
            }
            (None, true) => {}
        }
        self.stages.enhance.validate("enhance")?;
        self.stages.night_to_day.validate("night_to_day")?;
        self.stages.super_resolve.validate("super_resolve")?;
        if self.detectors.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one detector is required".into(),
            ));
        }
        let mut tags = std::collections::BTreeSet::new();
        for det in &self.detectors {
            if det.tag.is_empty() || det.tag.contains(['/', '\\']) || det.tag == ".." {
                return Err(Error::InvalidArgument(format!(
                    "detector tag '{}' cannot name a directory",
                    det.tag
                )));
            }
            if !tags.insert(det.tag.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate detector tag '{}'",
                    det.tag
                )));
            }
            validate_template(&det.tag, &det.command)?;
            if det.timeout_secs == 0 {
                return Err(Error::InvalidArgument(format!(
                    "detector '{}': timeout_secs must be positive",
                    det.tag
                )));
            }
            if !(det.weight > 0.0 && det.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "detector '{}': weight must be positive",
                    det.tag
                )));
            }
        }
        // fusion ranges, independent of model count
        self.fusion.resolve_weights(self.fusion.model_weights.as_ref().map_or(0, |w| w.len()))?;
        Ok(())
    }

    /// Stable digest of the resolved configuration; resuming is allowed
    /// only when this matches the work directory's run record.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Load the class schema file, or the default five classes.
    pub fn load_schema(&self) -> Result<ClassSchema> {
        match &self.classes {
            None => Ok(ClassSchema::default()),
            Some(path) => load_schema_file(path),
        }
    }
}

#[derive(Deserialize)]
struct SchemaEntry {
    id: u32,
    name: String,
}

/// Read a schema file: a JSON array of `{id, name}` objects.
pub fn load_schema_file(path: &Path) -> Result<ClassSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<SchemaEntry> = serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            path,
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    ClassSchema::new(entries.into_iter().map(|e| (e.id, e.name)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
images = "images"
work_dir = "work"
t_night = 80.0

[stages.enhance]
skip = true
[stages.night_to_day]
skip = true
[stages.super_resolve]
skip = true

[[detectors]]
tag = "stub"
command = "detect {input_dir} {output_dir}"
format = "coco-results"
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let config: PipelineConfig = toml::from_str(&minimal_toml()).unwrap();
        config.validate().unwrap();
        assert_eq!(config.sr_factor, 4.0);
        assert_eq!(config.detectors[0].weight, 1.0);
        assert!(config.detectors[0].use_sr);
        assert_eq!(config.fusion.iou_threshold, 0.55);
    }

    #[test]
    fn stage_requires_command_or_skip() {
        let toml_text = minimal_toml().replace("[stages.enhance]\nskip = true", "[stages.enhance]\ntimeout_secs = 5");
        let config: PipelineConfig = toml::from_str(&toml_text).unwrap();
        assert!(matches!(config.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn template_placeholders_enforced() {
        let toml_text = minimal_toml().replace("detect {input_dir} {output_dir}", "detect nothing");
        let config: PipelineConfig = toml::from_str(&toml_text).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn threshold_exclusivity() {
        let both = minimal_toml().replace("t_night = 80.0", "t_night = 80.0\nauto_threshold = true");
        let config: PipelineConfig = toml::from_str(&both).unwrap();
        assert!(config.validate().is_err());
        let neither = minimal_toml().replace("t_night = 80.0", "");
        let config: PipelineConfig = toml::from_str(&neither).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a: PipelineConfig = toml::from_str(&minimal_toml()).unwrap();
        let b: PipelineConfig = toml::from_str(&minimal_toml()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c: PipelineConfig =
            toml::from_str(&minimal_toml().replace("t_night = 80.0", "t_night = 90.0")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = minimal_toml() + "\nsurprise = 1\n";
        assert!(toml::from_str::<PipelineConfig>(&text).is_err());
    }
}
