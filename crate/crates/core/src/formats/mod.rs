//! Ingestion and persistence: ground truth, detection files, reports.
//!
//! Every parser converts boxes to the canonical corner-absolute convention
//! on the way in; every writer converts back at the boundary. Image ids are
//! opaque text matched exactly — numeric ids from COCO files are rendered
//! in decimal and compared as strings, never fuzzy-matched.

mod coco;
mod report;
mod yolo;

pub use coco::{parse_ground_truth, parse_results, write_fused_results, write_results};
pub use report::{format_metric, render_comparison, render_table, write_csv_matrix, EvalConfigEcho, EvalReport, ClassApRow, MatchCounts};
pub use yolo::{parse_yolo_dir, write_yolo_dir};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageDims};

/// Image id → dimensions, keyed by opaque id text.
pub type DimsTable = BTreeMap<String, ImageDims>;

/// Area below which an object counts as small (64x64 pixels).
pub const SMALL_OBJECT_AREA: f64 = 64.0 * 64.0;

/// Ordered class list. The default carries the five traffic classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSchema {
    classes: Vec<(u32, String)>,
}

impl ClassSchema {
    pub fn new(classes: Vec<(u32, String)>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (id, name) in &classes {
            if let Some(prev) = seen.insert(*id, name.clone()) {
                return Err(Error::Domain(format!(
                    "duplicate class id {id} ('{prev}' and '{name}')"
                )));
            }
        }
        Ok(ClassSchema { classes })
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.classes.iter().any(|(id, _)| *id == class_id)
    }

    pub fn name_of(&self, class_id: u32) -> Option<&str> {
        self.classes
            .iter()
            .find(|(id, _)| *id == class_id)
            .map(|(_, name)| name.as_str())
    }

    /// Classes in listed order.
    pub fn entries(&self) -> &[(u32, String)] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

impl Default for ClassSchema {
    fn default() -> Self {
        ClassSchema {
            classes: ["Bus", "Bike", "Car", "Pedestrian", "Truck"]
                .iter()
                .enumerate()
                .map(|(i, name)| (i as u32, name.to_string()))
                .collect(),
        }
    }
}

/// Ground-truth object: no score, optional crowd flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BoundingBox,
    /// Labeled area in square pixels (COCO `area`, or box area when absent).
    pub area: f64,
    pub crowd: bool,
}

impl Annotation {
    /// Small-object predicate: area under 64x64 pixels.
    pub fn is_small(&self) -> bool {
        self.area < SMALL_OBJECT_AREA
    }
}

/// One scored model output; the elements of the pipeline's result set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub score: f64,
    pub model_tag: String,
}

/// On-disk detection file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionFormat {
    /// Single JSON array of `{image_id, category_id, bbox, score}` records.
    CocoResults,
    /// Directory of per-image `.txt` files, lines `class cx cy w h conf`.
    YoloTxtDir,
}

impl std::str::FromStr for DetectionFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco-results" | "coco" => Ok(DetectionFormat::CocoResults),
            "yolo-txt-dir" | "yolo" => Ok(DetectionFormat::YoloTxtDir),
            other => Err(Error::InvalidArgument(format!(
                "unknown detection format '{other}' (expected coco-results or yolo-txt-dir)"
            ))),
        }
    }
}

/// Parsed ground-truth file: schema in listed order, annotations in file
/// order, and the image dimension table.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub schema: ClassSchema,
    pub annotations: Vec<Annotation>,
    pub dims: DimsTable,
}

/// Parse a detection file in either supported format.
pub fn parse_detections(
    path: &Path,
    format: DetectionFormat,
    schema: &ClassSchema,
    dims: &DimsTable,
    model_tag: &str,
) -> Result<Vec<Detection>> {
    match format {
        DetectionFormat::CocoResults => parse_results(path, schema, model_tag),
        DetectionFormat::YoloTxtDir => parse_yolo_dir(path, schema, dims, model_tag),
    }
}

/// Write detections in either supported format. `dims` is required for the
/// YOLO directory format, which stores normalized coordinates.
pub fn write_detections(
    dets: &[Detection],
    path: &Path,
    format: DetectionFormat,
    dims: Option<&DimsTable>,
) -> Result<()> {
    match format {
        DetectionFormat::CocoResults => write_results(dets, path),
        DetectionFormat::YoloTxtDir => {
            let dims = dims.ok_or_else(|| {
                Error::InvalidArgument("dims table required to write YOLO normalized files".into())
            })?;
            write_yolo_dir(dets, path, dims)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_the_five_classes() {
        let s = ClassSchema::default();
        let names: Vec<&str> = s.entries().iter().map(|(_, n)| n.as_str()).collect();
        assert_eq!(names, ["Bus", "Bike", "Car", "Pedestrian", "Truck"]);
        assert_eq!(s.len(), 5);
        assert!(s.contains(0) && s.contains(4) && !s.contains(5));
    }

    #[test]
    fn duplicate_class_ids_rejected() {
        let err = ClassSchema::new(vec![(1, "a".into()), (1, "b".into())]);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn small_object_threshold() {
        let ann = Annotation {
            image_id: "i".into(),
            class_id: 0,
            bbox: BoundingBox::from_corners(0.0, 0.0, 63.0, 63.0),
            area: 63.0 * 63.0,
            crowd: false,
        };
        assert!(ann.is_small());
        let big = Annotation { area: 64.0 * 64.0, ..ann };
        assert!(!big.is_small());
    }
}
