//! End-to-end pipeline orchestration: stage sequencing, adapter
//! execution, night/other preparation, super-resolution coordinate
//! remapping, and per-model detection fusion.
//!
//! The run is seven stages, executed in a fixed order; every stage
//! persists its outputs under the work directory and the run record is
//! rewritten (atomically) after each stage, so an interrupted run resumes
//! without redoing completed work as long as the configuration hash is
//! unchanged.

mod adapter;
mod config;

pub use adapter::{
    materialize_input_dir, run_detect_adapter, run_image_adapter, AdapterSpec, OutputKind,
};
pub use config::{load_schema_file, DetectorSpec, PipelineConfig, StageConfig, StageTable};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{
    parse_results, parse_yolo_dir, write_fused_results, write_results, ClassSchema, Detection,
    DetectionFormat, DimsTable,
};
use crate::fusion::weighted_box_fusion_batch;
use crate::geometry::{clip_box, scale_box};
use crate::illumination::{apply_clustering, auto_threshold, NightThreshold};
use crate::manifest::{Cluster, ImageRecord, Manifest};

/// Stage names in Algorithm order; the run record always lists them in
/// exactly this order.
pub const STAGE_ORDER: [&str; 7] = [
    "enhance",
    "cluster",
    "convert_night_to_day",
    "prepare_final",
    "super_resolve",
    "detect",
    "fuse",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    /// Ran and produced a verified non-empty output.
    Complete,
    /// Ran over an empty input set; vacuously complete.
    CompleteEmpty,
    /// Disabled in the configuration; inputs passed through untouched.
    Skipped,
    /// Output reused intact from a previous run with the same config hash.
    Resumed,
    Failed,
}

impl StageStatus {
    pub fn is_done(self) -> bool {
        !matches!(self, StageStatus::Failed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub duration_ms: u64,
    pub exit_code: Option<i32>,
    /// Stage output manifest or data file, relative to the work directory.
    pub output: Option<PathBuf>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub completed: bool,
}

impl RunRecord {
    pub fn path_in(work_dir: &Path) -> PathBuf {
        work_dir.join("run_record.json")
    }

    pub fn read(work_dir: &Path) -> Result<Self> {
        let path = Self::path_in(work_dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, "json", e.to_string()))
    }

    /// Write-temp-then-rename so a crash never leaves a torn record.
    pub fn write_atomic(&self, work_dir: &Path) -> Result<()> {
        let path = Self::path_in(work_dir);
        let tmp = work_dir.join("run_record.json.tmp");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(&tmp, "json", e.to_string()))?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Union of the other-times and day-like record sets; the branches must
/// come from disjoint original images.
pub fn prepare_final_dataset(
    other: &[ImageRecord],
    daylike: &[ImageRecord],
) -> Result<Vec<ImageRecord>> {
    let mut seen = std::collections::BTreeSet::new();
    for record in other.iter().chain(daylike) {
        if !seen.insert(record.image_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "image '{}' appears in both branches of the final dataset",
                record.image_id
            )));
        }
    }
    let mut merged = Vec::with_capacity(other.len() + daylike.len());
    merged.extend_from_slice(other);
    merged.extend_from_slice(daylike);
    Ok(merged)
}

/// Map detections from super-resolved coordinates back to the original
/// frame: scale every box by `1/sr_factor`, then clip to the original
/// dimensions. Scores are untouched.
pub fn remap_sr_detections(
    dets: &[Detection],
    sr_factor: f64,
    original_dims: &DimsTable,
) -> Result<Vec<Detection>> {
    if !(sr_factor > 0.0 && sr_factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sr_factor must be positive, got {sr_factor}"
        )));
    }
    dets.iter()
        .map(|det| {
            let dims = original_dims.get(&det.image_id).ok_or_else(|| {
                Error::Referential(format!(
                    "detection references image '{}' with unknown original dimensions",
                    det.image_id
                ))
            })?;
            let scaled = scale_box(&det.bbox, 1.0 / sr_factor)?;
            Ok(Detection {
                bbox: clip_box(&scaled, *dims),
                ..det.clone()
            })
        })
        .collect()
}

/// Listing of the detect stage's per-model outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectListing {
    models: Vec<DetectEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectEntry {
    tag: String,
    file: PathBuf,
    count: usize,
}

/// Run the whole pipeline over a raw-image manifest.
///
/// The run record is persisted after every stage; on failure the error is
/// returned after the record (with the failed stage) has been written, so
/// the run is resumable.
pub fn orchestrate(config: &PipelineConfig, raw: &Manifest) -> Result<RunRecord> {
    config.validate()?;
    if raw.is_empty() {
        return Err(Error::InvalidArgument(
            "raw manifest is empty; nothing to process".into(),
        ));
    }
    let mut ids = std::collections::BTreeSet::new();
    for record in &raw.records {
        if !ids.insert(record.image_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate image id '{}' in raw manifest",
                record.image_id
            )));
        }
    }
    let work_dir = config
        .work_dir
        .clone()
        .ok_or_else(|| Error::InvalidArgument("pipeline config gives no work_dir".into()))?;
    fs::create_dir_all(&work_dir).map_err(|e| Error::io(&work_dir, e))?;
    for sub in ["raw", "enhanced", "night", "daylike", "final", "sr", "dets", "fused", "reports", "logs"] {
        let dir = work_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let hash = config.hash();
    let previous = RunRecord::read(&work_dir)
        .ok()
        .filter(|r| r.config_hash == hash);
    if previous.is_none() && RunRecord::path_in(&work_dir).exists() {
        log::info!("config changed; previous run record ignored, all stages re-run");
    }

    let mut orchestrator = Orchestrator {
        config,
        schema: config.load_schema()?,
        work_dir,
        previous,
        record: RunRecord {
            config_hash: hash,
            stages: Vec::new(),
            completed: false,
        },
    };
    orchestrator.run(raw)
}

struct Orchestrator<'a> {
    config: &'a PipelineConfig,
    schema: ClassSchema,
    work_dir: PathBuf,
    previous: Option<RunRecord>,
    record: RunRecord,
}

impl Orchestrator<'_> {
    fn run(&mut self, raw: &Manifest) -> Result<RunRecord> {
        let enhanced = self.stage_enhance(raw)?;
        let (clustered, night) = self.stage_cluster(&enhanced)?;
        let daylike = self.stage_convert(&night)?;
        let final_manifest = self.stage_prepare_final(&clustered, &daylike)?;
        let (inference, sr_applied) = self.stage_super_resolve(&final_manifest)?;
        let raw_dims = Manifest::read_jsonl(&self.work_dir.join("raw/manifest.jsonl"))?.dims_table();
        let per_model = self.stage_detect(&inference, &final_manifest, &raw_dims, sr_applied)?;
        self.stage_fuse(&per_model)?;

        self.record.completed = true;
        self.record.write_atomic(&self.work_dir)?;
        Ok(self.record.clone())
    }

    /// Previous-run record for `name`, if its status allows reuse.
    fn resumable(&self, name: &str) -> Option<&StageRecord> {
        let record = self.previous.as_ref()?.stage(name)?;
        matches!(
            record.status,
            StageStatus::Complete
                | StageStatus::CompleteEmpty
                | StageStatus::Skipped
                | StageStatus::Resumed
        )
        .then_some(record)
    }

    fn push(&mut self, record: StageRecord) -> Result<()> {
        self.record.stages.push(record);
        self.record.write_atomic(&self.work_dir)
    }

    fn fail(&mut self, name: &str, started: Instant, error: Error) -> Error {
        let record = StageRecord {
            name: name.to_string(),
            status: StageStatus::Failed,
            duration_ms: started.elapsed().as_millis() as u64,
            exit_code: None,
            output: None,
            detail: Some(error.to_string()),
        };
        // best effort: the original error outranks a record-write failure
        let _ = self.push(record);
        error
    }

    /// A manifest written by a previous run, with every referenced file
    /// still present.
    fn intact_manifest(&self, relative: &str) -> Option<Manifest> {
        let manifest = Manifest::read_jsonl(&self.work_dir.join(relative)).ok()?;
        manifest
            .records
            .iter()
            .all(|r| r.path.is_file())
            .then_some(manifest)
    }

    fn resume_record(&self, name: &str, output: Option<&str>, detail: Option<String>) -> StageRecord {
        StageRecord {
            name: name.to_string(),
            status: StageStatus::Resumed,
            duration_ms: 0,
            exit_code: None,
            output: output.map(PathBuf::from),
            detail,
        }
    }

    fn stage_spec(&self, name: &str, stage: &StageConfig) -> Result<AdapterSpec> {
        AdapterSpec::new(
            name,
            stage.command.clone().unwrap_or_default(),
            OutputKind::Images,
            Duration::from_secs(stage.timeout_secs),
            stage.parallelism,
        )
    }

    fn stage_enhance(&mut self, raw_src: &Manifest) -> Result<Manifest> {
        const NAME: &str = "enhance";
        let started = Instant::now();

        if self.resumable(NAME).is_some() {
            if let (Some(_), Some(enhanced)) = (
                self.intact_manifest("raw/manifest.jsonl"),
                self.intact_manifest("enhanced/manifest.jsonl"),
            ) {
                let record = self.resume_record(NAME, Some("enhanced/manifest.jsonl"), None);
                self.push(record)?;
                return Ok(enhanced);
            }
        }

        let result = (|| {
            let raw_dir = self.work_dir.join("raw");
            let raw = materialize_input_dir(raw_src, &raw_dir)?;
            raw.write_jsonl(&raw_dir.join("manifest.jsonl"))?;

            let stage = &self.config.stages.enhance;
            let (manifest, status) = if stage.skip {
                (raw.clone(), StageStatus::Skipped)
            } else {
                let spec = self.stage_spec(NAME, stage)?;
                let out = run_image_adapter(
                    &spec,
                    &raw,
                    &raw_dir,
                    &self.work_dir.join("enhanced"),
                    self.config.luma,
                    &self.work_dir.join("logs"),
                )?;
                (out, StageStatus::Complete)
            };
            manifest.write_jsonl(&self.work_dir.join("enhanced/manifest.jsonl"))?;
            Ok((manifest, status))
        })();

        match result {
            Ok((manifest, status)) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: (status == StageStatus::Complete).then_some(0),
                    output: Some("enhanced/manifest.jsonl".into()),
                    detail: Some(format!("{} images", manifest.len())),
                };
                self.push(record)?;
                Ok(manifest)
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }

    fn stage_cluster(&mut self, enhanced: &Manifest) -> Result<(Manifest, Manifest)> {
        const NAME: &str = "cluster";
        let started = Instant::now();

        if self.resumable(NAME).is_some() {
            if let (Some(clustered), Some(night)) = (
                self.intact_manifest("cluster.manifest.jsonl"),
                self.intact_manifest("night/manifest.jsonl"),
            ) {
                let record = self.resume_record(NAME, Some("cluster.manifest.jsonl"), None);
                self.push(record)?;
                return Ok((clustered, night));
            }
        }

        let result = (|| {
            let threshold = match self.config.t_night {
                Some(t) => NightThreshold::new(t)?,
                None => auto_threshold(&enhanced.records)?,
            };
            let clustered = apply_clustering(enhanced, threshold)?;
            clustered
                .full
                .write_jsonl(&self.work_dir.join("cluster.manifest.jsonl"))?;

            let night_manifest = Manifest {
                header: clustered.full.header.clone(),
                records: clustered.night,
            };
            // night/ holds links to the night images so the conversion
            // adapter sees only them
            let night_dir = self.work_dir.join("night");
            let night_manifest = if night_manifest.is_empty() {
                night_manifest
            } else {
                materialize_input_dir(&night_manifest, &night_dir)?
            };
            night_manifest.write_jsonl(&night_dir.join("manifest.jsonl"))?;

            let detail = format!(
                "t_night={} night={} other={}",
                threshold.value(),
                night_manifest.len(),
                clustered.other.len()
            );
            Ok((clustered.full, night_manifest, detail))
        })();

        match result {
            Ok((clustered, night, detail)) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status: StageStatus::Complete,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: None,
                    output: Some("cluster.manifest.jsonl".into()),
                    detail: Some(detail),
                };
                self.push(record)?;
                Ok((clustered, night))
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }

    fn stage_convert(&mut self, night: &Manifest) -> Result<Manifest> {
        const NAME: &str = "convert_night_to_day";
        let started = Instant::now();

        if self.resumable(NAME).is_some() {
            if let Some(daylike) = self.intact_manifest("daylike/manifest.jsonl") {
                let record = self.resume_record(NAME, Some("daylike/manifest.jsonl"), None);
                self.push(record)?;
                return Ok(daylike);
            }
        }

        let result = (|| {
            let stage = &self.config.stages.night_to_day;
            let (manifest, status) = if night.is_empty() {
                let empty = Manifest {
                    header: night.header.clone(),
                    records: vec![],
                };
                (empty, StageStatus::CompleteEmpty)
            } else if stage.skip {
                (night.clone(), StageStatus::Skipped)
            } else {
                let spec = self.stage_spec(NAME, stage)?;
                let out = run_image_adapter(
                    &spec,
                    night,
                    &self.work_dir.join("night"),
                    &self.work_dir.join("daylike"),
                    self.config.luma,
                    &self.work_dir.join("logs"),
                )?;
                (out, StageStatus::Complete)
            };
            manifest.write_jsonl(&self.work_dir.join("daylike/manifest.jsonl"))?;
            Ok((manifest, status))
        })();

        match result {
            Ok((manifest, status)) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: (status == StageStatus::Complete).then_some(0),
                    output: Some("daylike/manifest.jsonl".into()),
                    detail: Some(format!("{} images", manifest.len())),
                };
                self.push(record)?;
                Ok(manifest)
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }

    fn stage_prepare_final(
        &mut self,
        clustered: &Manifest,
        daylike: &Manifest,
    ) -> Result<Manifest> {
        const NAME: &str = "prepare_final";
        let started = Instant::now();

        if self.resumable(NAME).is_some() {
            if let Some(final_manifest) = self.intact_manifest("final/manifest.jsonl") {
                let record = self.resume_record(NAME, Some("final/manifest.jsonl"), None);
                self.push(record)?;
                return Ok(final_manifest);
            }
        }

        let result = (|| {
            let other: Vec<ImageRecord> = clustered
                .records
                .iter()
                .filter(|r| r.cluster == Some(Cluster::Other))
                .cloned()
                .collect();
            let merged = prepare_final_dataset(&other, &daylike.records)?;
            let manifest = Manifest {
                header: clustered.header.clone(),
                records: merged,
            };
            let final_dir = self.work_dir.join("final");
            let manifest = materialize_input_dir(&manifest, &final_dir)?;
            manifest.write_jsonl(&final_dir.join("manifest.jsonl"))?;
            Ok(manifest)
        })();

        match result {
            Ok(manifest) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status: StageStatus::Complete,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: None,
                    output: Some("final/manifest.jsonl".into()),
                    detail: Some(format!("{} images", manifest.len())),
                };
                self.push(record)?;
                Ok(manifest)
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }

    fn stage_super_resolve(&mut self, final_manifest: &Manifest) -> Result<(Manifest, bool)> {
        const NAME: &str = "super_resolve";
        let started = Instant::now();
        let skip = self.config.stages.super_resolve.skip;

        if self.resumable(NAME).is_some() {
            if let Some(manifest) = self.intact_manifest("sr/manifest.jsonl") {
                let record = self.resume_record(NAME, Some("sr/manifest.jsonl"), None);
                self.push(record)?;
                return Ok((manifest, !skip));
            }
        }

        let result = (|| {
            let stage = &self.config.stages.super_resolve;
            let (manifest, status) = if skip {
                (final_manifest.clone(), StageStatus::Skipped)
            } else {
                let spec = self.stage_spec(NAME, stage)?;
                let out = run_image_adapter(
                    &spec,
                    final_manifest,
                    &self.work_dir.join("final"),
                    &self.work_dir.join("sr"),
                    self.config.luma,
                    &self.work_dir.join("logs"),
                )?;
                for (sr, original) in out.records.iter().zip(&final_manifest.records) {
                    let expected_w = (original.dims.width as f64 * self.config.sr_factor).round();
                    if (sr.dims.width as f64 - expected_w).abs() > 1.0 {
                        log::warn!(
                            "{}: super-resolved width {} differs from {} x sr_factor {}",
                            sr.image_id,
                            sr.dims.width,
                            original.dims.width,
                            self.config.sr_factor
                        );
                    }
                }
                (out, StageStatus::Complete)
            };
            manifest.write_jsonl(&self.work_dir.join("sr/manifest.jsonl"))?;
            Ok((manifest, status))
        })();

        match result {
            Ok((manifest, status)) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: (status == StageStatus::Complete).then_some(0),
                    output: Some("sr/manifest.jsonl".into()),
                    detail: Some(format!("{} images", manifest.len())),
                };
                self.push(record)?;
                Ok((manifest, status == StageStatus::Complete))
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }

    fn load_detect_listing(&self) -> Option<Vec<Vec<Detection>>> {
        let listing_path = self.work_dir.join("dets/manifest.json");
        let text = fs::read_to_string(&listing_path).ok()?;
        let listing: DetectListing = serde_json::from_str(&text).ok()?;
        if listing.models.len() != self.config.detectors.len()
            || !listing
                .models
                .iter()
                .zip(&self.config.detectors)
                .all(|(entry, det)| entry.tag == det.tag)
        {
            return None;
        }
        let mut per_model = Vec::new();
        for entry in &listing.models {
            let path = self.work_dir.join(&entry.file);
            let dets = parse_results(&path, &self.schema, &entry.tag).ok()?;
            per_model.push(dets);
        }
        Some(per_model)
    }

    fn stage_detect(
        &mut self,
        inference: &Manifest,
        final_manifest: &Manifest,
        raw_dims: &DimsTable,
        sr_applied: bool,
    ) -> Result<Vec<Vec<Detection>>> {
        const NAME: &str = "detect";
        let started = Instant::now();

        if self.resumable(NAME).is_some() {
            if let Some(per_model) = self.load_detect_listing() {
                let record = self.resume_record(NAME, Some("dets/manifest.json"), None);
                self.push(record)?;
                return Ok(per_model);
            }
        }

        let result = (|| {
            let mut listing = DetectListing { models: vec![] };
            let mut per_model = Vec::new();
            for detector in &self.config.detectors {
                let relative = PathBuf::from("dets").join(&detector.tag).join("remapped.json");
                // per-detector resume: a remapped file can only exist here
                // if a run under the same config hash wrote it completely
                if self.previous.is_some() {
                    if let Ok(dets) =
                        parse_results(&self.work_dir.join(&relative), &self.schema, &detector.tag)
                    {
                        log::info!(
                            "detect:{}: reusing {} detections from the previous run",
                            detector.tag,
                            dets.len()
                        );
                        listing.models.push(DetectEntry {
                            tag: detector.tag.clone(),
                            file: relative,
                            count: dets.len(),
                        });
                        per_model.push(dets);
                        continue;
                    }
                }
                let on_sr = sr_applied && detector.use_sr;
                let (input, input_dir) = if on_sr {
                    (inference, self.work_dir.join("sr"))
                } else {
                    (final_manifest, self.work_dir.join("final"))
                };
                let spec = AdapterSpec::new(
                    format!("detect:{}", detector.tag),
                    detector.command.clone(),
                    OutputKind::Detections,
                    detector.timeout(),
                    1,
                )?;
                let out_dir = self.work_dir.join("dets").join(&detector.tag).join("out");
                let files = run_detect_adapter(
                    &spec,
                    input,
                    &input_dir,
                    &out_dir,
                    &self.work_dir.join("logs"),
                )?;

                let input_dims = input.dims_table();
                let dets = match detector.format {
                    DetectionFormat::CocoResults => {
                        let json_files: Vec<&PathBuf> = files
                            .iter()
                            .filter(|f| f.extension().and_then(|e| e.to_str()) == Some("json"))
                            .collect();
                        if json_files.is_empty() {
                            return Err(Error::stage(
                                format!("detect:{}", detector.tag),
                                format!(
                                    "no .json results file found in {}",
                                    out_dir.display()
                                ),
                            ));
                        }
                        let mut all = Vec::new();
                        for file in json_files {
                            all.extend(parse_results(file, &self.schema, &detector.tag)?);
                        }
                        all
                    }
                    DetectionFormat::YoloTxtDir => {
                        parse_yolo_dir(&out_dir, &self.schema, &input_dims, &detector.tag)?
                    }
                };

                let factor = if on_sr { self.config.sr_factor } else { 1.0 };
                let remapped = remap_sr_detections(&dets, factor, raw_dims)?;
                let full = self.work_dir.join(&relative);
                let tmp = full.with_extension("json.tmp");
                write_results(&remapped, &tmp)?;
                fs::rename(&tmp, &full).map_err(|e| Error::io(&full, e))?;
                listing.models.push(DetectEntry {
                    tag: detector.tag.clone(),
                    file: relative,
                    count: remapped.len(),
                });
                per_model.push(remapped);
            }

            let listing_path = self.work_dir.join("dets/manifest.json");
            let text = serde_json::to_string_pretty(&listing)
                .map_err(|e| Error::parse(&listing_path, "json", e.to_string()))?;
            fs::write(&listing_path, text).map_err(|e| Error::io(&listing_path, e))?;
            let detail = listing
                .models
                .iter()
                .map(|m| format!("{}={}", m.tag, m.count))
                .collect::<Vec<_>>()
                .join(" ");
            Ok((per_model, detail))
        })();

        match result {
            Ok((per_model, detail)) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status: StageStatus::Complete,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: Some(0),
                    output: Some("dets/manifest.json".into()),
                    detail: Some(detail),
                };
                self.push(record)?;
                Ok(per_model)
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }

    fn stage_fuse(&mut self, per_model: &[Vec<Detection>]) -> Result<()> {
        const NAME: &str = "fuse";
        let started = Instant::now();
        let fused_relative = PathBuf::from("fused/detections.json");

        if self.resumable(NAME).is_some()
            && parse_results(&self.work_dir.join(&fused_relative), &self.schema, "fused").is_ok()
        {
            let record = self.resume_record(NAME, Some("fused/detections.json"), None);
            return self.push(record);
        }

        let result = (|| {
            // detector weights feed fusion unless explicit fusion weights
            // are configured
            let mut fusion = self.config.fusion.clone();
            if fusion.model_weights.is_none() {
                fusion.model_weights =
                    Some(self.config.detectors.iter().map(|d| d.weight).collect());
            }
            let fused = weighted_box_fusion_batch(per_model, &fusion)?;
            let echo = serde_json::json!({
                "fusion": serde_json::to_value(&fusion)
                    .map_err(|e| Error::parse(&fused_relative, "json", e.to_string()))?,
                "models": self.config.detectors.iter().map(|d| d.tag.clone()).collect::<Vec<_>>(),
                "sr_factor": self.config.sr_factor,
            });
            write_fused_results(&fused, &self.work_dir.join(&fused_relative), &echo)?;
            Ok(fused.len())
        })();

        match result {
            Ok(count) => {
                let record = StageRecord {
                    name: NAME.into(),
                    status: StageStatus::Complete,
                    duration_ms: started.elapsed().as_millis() as u64,
                    exit_code: None,
                    output: Some(fused_relative),
                    detail: Some(format!("{count} fused detections")),
                };
                self.push(record)
            }
            Err(e) => Err(self.fail(NAME, started, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundingBox, ImageDims};

    fn rec(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            path: PathBuf::from(format!("{id}.png")),
            dims: ImageDims::new(10, 10).unwrap(),
            stats: None,
            cluster: None,
            scenario: None,
            provenance: vec![],
        }
    }

    #[test]
    fn prepare_final_counts_and_collisions() {
        let other = vec![rec("a"), rec("b"), rec("c")];
        let daylike = vec![rec("d"), rec("e")];
        let merged = prepare_final_dataset(&other, &daylike).unwrap();
        assert_eq!(merged.len(), 5);

        let empty: Vec<ImageRecord> = vec![];
        assert_eq!(prepare_final_dataset(&other, &empty).unwrap().len(), 3);

        let clash = vec![rec("a")];
        let err = prepare_final_dataset(&other, &clash).unwrap_err();
        assert!(err.to_string().contains("'a'"));
    }

    #[test]
    fn remap_scales_and_clips() {
        let mut dims = DimsTable::new();
        dims.insert("i".into(), ImageDims::new(100, 100).unwrap());
        let det = Detection {
            image_id: "i".into(),
            class_id: 0,
            bbox: BoundingBox::from_corners(40.0, 80.0, 120.0, 160.0),
            score: 0.9,
            model_tag: "m".into(),
        };
        let out = remap_sr_detections(&[det.clone()], 4.0, &dims).unwrap();
        assert_eq!(out[0].bbox, BoundingBox::from_corners(10.0, 20.0, 30.0, 40.0));
        assert_eq!(out[0].score, 0.9);

        // a box that exceeds the frame after remapping gets clipped
        let wide = Detection {
            bbox: BoundingBox::from_corners(0.0, 0.0, 500.0, 120.0),
            ..det.clone()
        };
        let out = remap_sr_detections(&[wide], 4.0, &dims).unwrap();
        assert_eq!(out[0].bbox, BoundingBox::from_corners(0.0, 0.0, 100.0, 30.0));

        // factor 1 is the identity for interior boxes
        let interior = Detection {
            bbox: BoundingBox::from_corners(10.0, 10.0, 20.0, 20.0),
            ..det
        };
        let out = remap_sr_detections(&[interior.clone()], 1.0, &dims).unwrap();
        assert_eq!(out[0].bbox, interior.bbox);

        assert!(remap_sr_detections(&[], 0.0, &dims).is_err());
    }

    #[test]
    fn remap_unknown_image_is_referential() {
        let dims = DimsTable::new();
        let det = Detection {
            image_id: "ghost".into(),
            class_id: 0,
            bbox: BoundingBox::from_corners(0.0, 0.0, 10.0, 10.0),
            score: 0.5,
            model_tag: "m".into(),
        };
        assert!(matches!(
            remap_sr_detections(&[det], 4.0, &dims),
            Err(Error::Referential(_))
        ));
    }

    #[test]
    fn stage_order_is_fixed() {
        assert_eq!(
            STAGE_ORDER,
            [
                "enhance",
                "cluster",
                "convert_night_to_day",
                "prepare_final",
                "super_resolve",
                "detect",
                "fuse"
            ]
        );
    }
}
