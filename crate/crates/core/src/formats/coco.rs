//! COCO-layout ground truth and results files.
//!
//! Results arrays are streamed record-by-record on the way in and out, so
//! six-figure detection files never need a whole-file buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::{DeserializeSeed, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer};

use super::{Annotation, ClassSchema, Detection, DimsTable, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox, ImageDims};

/// COCO ids may be numbers or strings; internally they are opaque text.
#[derive(Debug, Clone)]
struct IdValue(String);

impl<'de> Deserialize<'de> for IdValue {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct IdVisitor;
        impl Visitor<'_> for IdVisitor {
            type Value = IdValue;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an integer or string id")
            }
            fn visit_u64<E>(self, v: u64) -> std::result::Result<IdValue, E> {
                Ok(IdValue(v.to_string()))
            }
            fn visit_i64<E>(self, v: i64) -> std::result::Result<IdValue, E> {
                Ok(IdValue(v.to_string()))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<IdValue, E> {
                Ok(IdValue(v.to_string()))
            }
        }
        de.deserialize_any(IdVisitor)
    }
}

/// `iscrowd` appears as 0/1 or as a bool in the wild.
#[derive(Debug, Clone, Copy, Default)]
struct CrowdFlag(bool);

impl<'de> Deserialize<'de> for CrowdFlag {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct FlagVisitor;
        impl Visitor<'_> for FlagVisitor {
            type Value = CrowdFlag;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("0, 1, or a boolean")
            }
            fn visit_bool<E>(self, v: bool) -> std::result::Result<CrowdFlag, E> {
                Ok(CrowdFlag(v))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<CrowdFlag, E> {
                match v {
                    0 => Ok(CrowdFlag(false)),
                    1 => Ok(CrowdFlag(true)),
                    other => Err(E::custom(format!("iscrowd must be 0 or 1, got {other}"))),
                }
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<CrowdFlag, E> {
                self.visit_u64(v as u64)
            }
        }
        de.deserialize_any(FlagVisitor)
    }
}

#[derive(Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawImage {
    id: IdValue,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    id: Option<IdValue>,
    image_id: IdValue,
    category_id: u32,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: CrowdFlag,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u32,
    name: String,
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::parse(
        path,
        format!("line {}, column {}", e.line(), e.column()),
        e.to_string(),
    )
}

/// Parse a COCO-layout ground-truth file: schema from `categories` in
/// listed order, annotations converted to canonical corner boxes and
/// clipped to their image frame.
pub fn parse_ground_truth(path: &Path) -> Result<GroundTruth> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: RawDataset =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| json_err(path, e))?;

    let schema = ClassSchema::new(
        raw.categories
            .into_iter()
            .map(|c| (c.id, c.name))
            .collect(),
    )?;

    let mut dims = DimsTable::new();
    for img in raw.images {
        let d = ImageDims::new(img.width, img.height).map_err(|e| {
            Error::Domain(format!("image '{}': {e}", img.id.0))
        })?;
        if dims.insert(img.id.0.clone(), d).is_some() {
            return Err(Error::Domain(format!("duplicate image id '{}'", img.id.0)));
        }
    }

    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for ann in raw.annotations {
        let ann_name = ann
            .id
            .as_ref()
            .map(|v| v.0.clone())
            .unwrap_or_else(|| "<unnumbered>".into());
        let [x, y, w, h] = ann.bbox;
        if w < 0.0 || h < 0.0 {
            return Err(Error::Domain(format!(
                "annotation {ann_name}: negative bbox extent w={w}, h={h}"
            )));
        }
        let image_dims = *dims.get(&ann.image_id.0).ok_or_else(|| {
            Error::Referential(format!(
                "annotation {ann_name} references missing image '{}'",
                ann.image_id.0
            ))
        })?;
        if !schema.contains(ann.category_id) {
            return Err(Error::Referential(format!(
                "annotation {ann_name} references unknown category {}",
                ann.category_id
            )));
        }
        let bbox = clip_box(&BoundingBox::from_xywh(x, y, w, h)?, image_dims);
        let area = match ann.area {
            Some(a) if a >= 0.0 => a,
            Some(a) => {
                return Err(Error::Domain(format!(
                    "annotation {ann_name}: negative area {a}"
                )))
            }
            None => bbox.area(),
        };
        annotations.push(Annotation {
            image_id: ann.image_id.0,
            class_id: ann.category_id,
            bbox,
            area,
            crowd: ann.iscrowd.0,
        });
    }

    Ok(GroundTruth {
        schema,
        annotations,
        dims,
    })
}

#[derive(Deserialize)]
struct RawResult {
    image_id: IdValue,
    category_id: u32,
    bbox: [f64; 4],
    score: f64,
}

fn convert_result(
    raw: RawResult,
    schema: &ClassSchema,
    model_tag: &str,
    index: usize,
) -> Result<Detection> {
    if !raw.score.is_finite() || !(0.0..=1.0).contains(&raw.score) {
        return Err(Error::Domain(format!(
            "record {index} (image '{}'): score {} outside [0,1]",
            raw.image_id.0, raw.score
        )));
    }
    if !schema.contains(raw.category_id) {
        return Err(Error::Referential(format!(
            "record {index} (image '{}'): unknown category id {}",
            raw.image_id.0, raw.category_id
        )));
    }
    let [x, y, w, h] = raw.bbox;
    let bbox = BoundingBox::from_xywh(x, y, w, h).map_err(|e| {
        Error::Domain(format!("record {index} (image '{}'): {e}", raw.image_id.0))
    })?;
    Ok(Detection {
        image_id: raw.image_id.0,
        class_id: raw.category_id,
        bbox,
        score: raw.score,
        model_tag: model_tag.to_string(),
    })
}

/// Streaming sink for a results array; stops at the first invalid record
/// and surfaces its typed error instead of a generic syntax error.
struct RecordSink<'a> {
    schema: &'a ClassSchema,
    model_tag: &'a str,
    out: Vec<Detection>,
    pending: Option<Error>,
}

impl<'de> Visitor<'de> for &mut RecordSink<'_> {
    type Value = ();

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("an array of detection records")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<(), A::Error> {
        let mut index = 0usize;
        while let Some(raw) = seq.next_element::<RawResult>()? {
            match convert_result(raw, self.schema, self.model_tag, index) {
                Ok(det) => self.out.push(det),
                Err(e) => {
                    self.pending = Some(e);
                    return Err(serde::de::Error::custom("record rejected"));
                }
            }
            index += 1;
        }
        Ok(())
    }
}

impl<'de> DeserializeSeed<'de> for &mut RecordSink<'_> {
    type Value = ();
    fn deserialize<D: Deserializer<'de>>(self, de: D) -> std::result::Result<(), D::Error> {
        de.deserialize_seq(self)
    }
}

/// Fused files carry a config header next to the records.
#[derive(Deserialize)]
struct HeaderedResults {
    #[serde(default)]
    #[allow(dead_code)]
    fusion_config: Option<serde_json::Value>,
    results: Vec<RawResult>,
}

/// Parse a COCO results file: either a bare array of records or the
/// headered object form written by [`write_fused_results`].
pub fn parse_results(path: &Path, schema: &ClassSchema, model_tag: &str) -> Result<Vec<Detection>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    if first_significant_byte(&mut reader, path)? == b'{' {
        let headered: HeaderedResults =
            serde_json::from_reader(reader).map_err(|e| json_err(path, e))?;
        return headered
            .results
            .into_iter()
            .enumerate()
            .map(|(i, raw)| convert_result(raw, schema, model_tag, i))
            .collect();
    }

    let mut sink = RecordSink {
        schema,
        model_tag,
        out: Vec::new(),
        pending: None,
    };
    let mut de = serde_json::Deserializer::from_reader(reader);
    match (&mut sink).deserialize(&mut de) {
        Ok(()) => {
            de.end().map_err(|e| json_err(path, e))?;
            Ok(sink.out)
        }
        Err(e) => Err(sink.pending.take().unwrap_or_else(|| json_err(path, e))),
    }
}

fn first_significant_byte(reader: &mut BufReader<File>, path: &Path) -> Result<u8> {
    use std::io::BufRead;
    let buf = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    match buf.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(&b) => Ok(b),
        None => Err(Error::parse(path, "offset 0", "empty file")),
    }
}

/// Render an opaque id back to JSON: a number when that loses nothing,
/// otherwise a string.
fn id_to_json(id: &str) -> serde_json::Value {
    if let Ok(n) = id.parse::<u64>() {
        if n.to_string() == id {
            return serde_json::Value::from(n);
        }
    }
    if let Ok(n) = id.parse::<i64>() {
        if n.to_string() == id {
            return serde_json::Value::from(n);
        }
    }
    serde_json::Value::from(id)
}

fn write_record(w: &mut impl Write, det: &Detection, path: &Path) -> Result<()> {
    let value = serde_json::json!({
        "image_id": id_to_json(&det.image_id),
        "category_id": det.class_id,
        "bbox": [det.bbox.x1, det.bbox.y1, det.bbox.width(), det.bbox.height()],
        "score": det.score,
    });
    serde_json::to_writer(w, &value).map_err(|e| json_err(path, e))
}

/// Write a bare COCO results array, one record per line, input order kept.
pub fn write_results(dets: &[Detection], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    stream_array(&mut w, dets, path)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write fused detections with the fusion configuration echoed in the
/// file header for provenance.
pub fn write_fused_results(
    dets: &[Detection],
    path: &Path,
    fusion_config: &serde_json::Value,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(b"{\n\"fusion_config\": ")
        .map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(&mut w, fusion_config).map_err(|e| json_err(path, e))?;
    w.write_all(b",\n\"results\": ").map_err(|e| Error::io(path, e))?;
    stream_array(&mut w, dets, path)?;
    w.write_all(b"\n}\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn stream_array(w: &mut impl Write, dets: &[Detection], path: &Path) -> Result<()> {
    if dets.is_empty() {
        return w.write_all(b"[]").map_err(|e| Error::io(path, e));
    }
    w.write_all(b"[\n").map_err(|e| Error::io(path, e))?;
    for (i, det) in dets.iter().enumerate() {
        if i > 0 {
            w.write_all(b",\n").map_err(|e| Error::io(path, e))?;
        }
        write_record(w, det, path)?;
    }
    w.write_all(b"\n]").map_err(|e| Error::io(path, e))
}

#[allow(dead_code)]
fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}
