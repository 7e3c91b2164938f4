//! YOLO-style label directories: one `.txt` per image, lines of
//! `class cx cy w h conf` in normalized center form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ClassSchema, Detection, DimsTable};
use crate::error::{Error, Result};
use crate::geometry::{from_canonical, to_canonical, Convention};

/// Parse every `.txt` file in `dir`, in lexicographic filename order.
///
/// The file stem is the image id; the dims table is consulted to
/// denormalize coordinates, so every stem must be present in it.
pub fn parse_yolo_dir(
    dir: &Path,
    schema: &ClassSchema,
    dims: &DimsTable,
    model_tag: &str,
) -> Result<Vec<Detection>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
        .collect();
    files.sort();

    let mut out = Vec::new();
    for file in files {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::parse(&file, "filename", "non-UTF-8 file stem"))?
            .to_string();
        let image_dims = *dims.get(&stem).ok_or_else(|| {
            Error::Referential(format!(
                "{}: no image dimensions known for image id '{stem}'",
                file.display()
            ))
        })?;
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        for (line_index, line) in text.lines().enumerate() {
            let line_no = line_index + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::parse(
                    &file,
                    format!("line {line_no}"),
                    format!("expected 6 fields, found {}", fields.len()),
                ));
            }
            let class_id: u32 = fields[0].parse().map_err(|_| {
                Error::parse(
                    &file,
                    format!("line {line_no}"),
                    format!("class id '{}' is not an integer", fields[0]),
                )
            })?;
            let mut nums = [0.0f64; 5];
            for (i, field) in fields[1..].iter().enumerate() {
                nums[i] = field.parse().map_err(|_| {
                    Error::parse(
                        &file,
                        format!("line {line_no}"),
                        format!("field '{field}' is not a number"),
                    )
                })?;
            }
            let [cx, cy, w, h, conf] = nums;
            if !conf.is_finite() || !(0.0..=1.0).contains(&conf) {
                return Err(Error::Domain(format!(
                    "{}, line {line_no}: confidence {conf} outside [0,1]",
                    file.display()
                )));
            }
            if !schema.contains(class_id) {
                return Err(Error::Referential(format!(
                    "{}, line {line_no}: unknown class id {class_id}",
                    file.display()
                )));
            }
            let bbox = to_canonical([cx, cy, w, h], Convention::CenterNorm, Some(image_dims))
                .map_err(|e| Error::Domain(format!("{}, line {line_no}: {e}", file.display())))?;
            out.push(Detection {
                image_id: stem.clone(),
                class_id,
                bbox,
                score: conf,
                model_tag: model_tag.to_string(),
            });
        }
    }
    Ok(out)
}

/// Write detections as a YOLO label directory. Detections are grouped by
/// image (files come out in image-id order, input order kept within each
/// image); stale `.txt` files already in the directory are removed first.
pub fn write_yolo_dir(dets: &[Detection], dir: &Path, dims: &DimsTable) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }

    let mut by_image: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for det in dets {
        by_image.entry(det.image_id.as_str()).or_default().push(det);
    }

    for (image_id, group) in by_image {
        if image_id.contains(['/', '\\']) || image_id == ".." {
            return Err(Error::Domain(format!(
                "image id '{image_id}' cannot name a label file"
            )));
        }
        let image_dims = *dims.get(image_id).ok_or_else(|| {
            Error::Referential(format!(
                "no image dimensions known for image id '{image_id}'"
            ))
        })?;
        let mut content = String::new();
        for det in group {
            let quad = from_canonical(&det.bbox, Convention::CenterNorm, Some(image_dims))?;
            if quad.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!(
                    "image '{image_id}': box {:?} exceeds the frame and cannot be \
                     encoded in normalized form (clip it first)",
                    det.bbox
                )));
            }
            content.push_str(&format!(
                "{} {} {} {} {} {}\n",
                det.class_id, quad[0], quad[1], quad[2], quad[3], det.score
            ));
        }
        let path = dir.join(format!("{image_id}.txt"));
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundingBox, ImageDims};

    fn dims_100() -> DimsTable {
        let mut t = DimsTable::new();
        t.insert("img_a".into(), ImageDims::new(100, 100).unwrap());
        t.insert("img_b".into(), ImageDims::new(100, 100).unwrap());
        t
    }

    #[test]
    fn parse_hand_converted_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("img_a.txt"), "2 0.5 0.5 0.5 0.5 0.75\n").unwrap();
        let dets = parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims_100(), "y").unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 2);
        assert_eq!(dets[0].bbox, BoundingBox::from_corners(25.0, 25.0, 75.0, 75.0));
        assert_eq!(dets[0].score, 0.75);
        assert_eq!(dets[0].image_id, "img_a");
    }

    #[test]
    fn wrong_field_count_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("img_a.txt"), "2 0.5 0.5 0.5 0.5 0.75\n1 0.5 0.5\n").unwrap();
        match parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims_100(), "y").unwrap_err() {
            Error::Parse { path, locus, .. } => {
                assert!(path.to_string_lossy().contains("img_a.txt"));
                assert_eq!(locus, "line 2");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_fields_are_domain_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("img_a.txt"), "2 1.5 0.5 0.5 0.5 0.75\n").unwrap();
        assert!(matches!(
            parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims_100(), "y"),
            Err(Error::Domain(_))
        ));
        fs::write(dir.path().join("img_a.txt"), "2 0.5 0.5 0.5 0.5 1.75\n").unwrap();
        assert!(matches!(
            parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims_100(), "y"),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn missing_dims_is_referential() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mystery.txt"), "0 0.5 0.5 0.1 0.1 0.5\n").unwrap();
        assert!(matches!(
            parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims_100(), "y"),
            Err(Error::Referential(_))
        ));
    }

    #[test]
    fn roundtrip_on_dyadic_grid_is_exact() {
        // power-of-two dims keep normalize/denormalize exact
        let mut dims = DimsTable::new();
        dims.insert("img_a".into(), ImageDims::new(1024, 512).unwrap());
        let dets = vec![
            Detection {
                image_id: "img_a".into(),
                class_id: 3,
                bbox: BoundingBox::from_corners(16.0, 8.0, 272.25, 100.5),
                score: 0.625,
                model_tag: "y".into(),
            },
            Detection {
                image_id: "img_a".into(),
                class_id: 0,
                bbox: BoundingBox::from_corners(0.0, 0.0, 1024.0, 512.0),
                score: 1.0,
                model_tag: "y".into(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        write_yolo_dir(&dets, dir.path(), &dims).unwrap();
        let back = parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims, "y").unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn empty_set_writes_no_files() {
        let dir = tempfile::tempdir().unwrap();
        write_yolo_dir(&[], dir.path(), &dims_100()).unwrap();
        let back = parse_yolo_dir(dir.path(), &ClassSchema::default(), &dims_100(), "y").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn unencodable_box_refused_by_writer() {
        // center lies left of the frame, so cx < 0 in normalized form
        let dets = vec![Detection {
            image_id: "img_a".into(),
            class_id: 0,
            bbox: BoundingBox::from_corners(-5.0, 0.0, 2.0, 4.0),
            score: 0.5,
            model_tag: "y".into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_yolo_dir(&dets, dir.path(), &dims_100()),
            Err(Error::Domain(_))
        ));
    }
}
