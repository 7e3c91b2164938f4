//! Challenge-grade evaluation: greedy matching, per-class AP over an IoU
//! grid, mAP, and micro-averaged precision/recall/F1.
//!
//! Matching is the usual COCO discipline: detections in descending score
//! order claim the unmatched same-image annotation of highest IoU at or
//! above the threshold. Crowd annotations are never counted as false
//! negatives; they absorb otherwise-unmatched detections, which then count
//! neither as true nor as false positives.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{
    Annotation, ClassApRow, Detection, EvalConfigEcho, EvalReport, GroundTruth, MatchCounts,
};
use crate::geometry::iou;

/// Ordered IoU thresholds, each in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct IoUGrid {
    thresholds: Vec<f64>,
}

impl IoUGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidArgument("IoU grid cannot be empty".into()));
        }
        for pair in thresholds.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidArgument(format!(
                    "IoU grid must be strictly increasing, got {:?}",
                    thresholds
                )));
            }
        }
        if thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "IoU thresholds must lie in (0,1], got {:?}",
                thresholds
            )));
        }
        Ok(IoUGrid { thresholds })
    }

    /// The ten-threshold 0.50:0.95 grid.
    pub fn coco() -> Self {
        IoUGrid {
            thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

impl Default for IoUGrid {
    fn default() -> Self {
        IoUGrid::coco()
    }
}

/// How the area under the precision-recall curve is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// 101-point interpolation: mean over recall grid {0, 0.01, …, 1} of
    /// the best precision at or beyond each recall.
    #[default]
    Interp101,
    /// Exact trapezoidal area under the raw precision-recall points,
    /// for sensitivity checks.
    Trapezoid,
}

impl ApMode {
    pub fn label(&self) -> &'static str {
        match self {
            ApMode::Interp101 => "101-point",
            ApMode::Trapezoid => "trapezoid",
        }
    }
}

/// Per-detection outcome of greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    TruePositive,
    FalsePositive,
    /// Matched only a crowd region: neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// Index into the detection slice passed to the matcher.
    pub detection: usize,
    /// Index of the claimed annotation, for true positives.
    pub annotation: Option<usize>,
    pub iou: f64,
    pub kind: MatchKind,
}

/// Full matching result for one class at one threshold; outcomes are in
/// descending score order.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub outcomes: Vec<MatchOutcome>,
    pub counts: MatchCounts,
}

fn single_class_of(dets: &[Detection], gts: &[Annotation]) -> Result<()> {
    let mut class: Option<u32> = None;
    let ids = dets
        .iter()
        .map(|d| d.class_id)
        .chain(gts.iter().map(|g| g.class_id));
    for id in ids {
        match class {
            None => class = Some(id),
            Some(c) if c == id => {}
            Some(c) => {
                return Err(Error::InvalidArgument(format!(
                    "matcher expects a single class, found {c} and {id}"
                )))
            }
        }
    }
    Ok(())
}

/// Greedy matching of one class's detections against its annotations.
///
/// Score ties are broken by input order for determinism.
pub fn match_greedy(
    dets: &[Detection],
    gts: &[Annotation],
    iou_threshold: f64,
) -> Result<MatchResult> {
    single_class_of(dets, gts)?;

    let mut gts_by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        gts_by_image.entry(gt.image_id.as_str()).or_default().push(i);
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    let mut counts = MatchCounts::default();

    for &det_index in &order {
        let det = &dets[det_index];
        let candidates = gts_by_image
            .get(det.image_id.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[]);

        let mut best_regular: Option<(usize, f64)> = None;
        let mut best_crowd: Option<(usize, f64)> = None;
        for &gt_index in candidates {
            let overlap = iou(&det.bbox, &gts[gt_index].bbox);
            if overlap < iou_threshold {
                continue;
            }
            if gts[gt_index].crowd {
                if best_crowd.map(|(_, v)| overlap > v).unwrap_or(true) {
                    best_crowd = Some((gt_index, overlap));
                }
            } else if !gt_taken[gt_index]
                && best_regular.map(|(_, v)| overlap > v).unwrap_or(true)
            {
                best_regular = Some((gt_index, overlap));
            }
        }

        let outcome = if let Some((gt_index, overlap)) = best_regular {
            gt_taken[gt_index] = true;
            counts.true_positives += 1;
            MatchOutcome {
                detection: det_index,
                annotation: Some(gt_index),
                iou: overlap,
                kind: MatchKind::TruePositive,
            }
        } else if let Some((gt_index, overlap)) = best_crowd {
            MatchOutcome {
                detection: det_index,
                annotation: Some(gt_index),
                iou: overlap,
                kind: MatchKind::Ignored,
            }
        } else {
            counts.false_positives += 1;
            MatchOutcome {
                detection: det_index,
                annotation: None,
                iou: 0.0,
                kind: MatchKind::FalsePositive,
            }
        };
        outcomes.push(outcome);
    }

    let matched = gt_taken.iter().filter(|&&t| t).count() as u64;
    let regular = gts.iter().filter(|g| !g.crowd).count() as u64;
    counts.false_negatives = regular - matched;

    Ok(MatchResult { outcomes, counts })
}

/// Area under the PR curve built from match outcomes in score order.
fn ap_from_points(points: &[(f64, f64)], mode: ApMode) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    match mode {
        ApMode::Interp101 => {
            let n = points.len();
            let mut envelope = vec![0.0f64; n];
            let mut best = 0.0f64;
            for i in (0..n).rev() {
                best = best.max(points[i].1);
                envelope[i] = best;
            }
            let mut sum = 0.0;
            for i in 0..=100u32 {
                let r = i as f64 / 100.0;
                let idx = points.partition_point(|p| p.0 < r);
                if idx < n {
                    sum += envelope[idx];
                }
            }
            sum / 101.0
        }
        ApMode::Trapezoid => {
            let mut area = 0.0;
            let mut prev = (0.0, points[0].1);
            for &p in points {
                area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
                prev = p;
            }
            area
        }
    }
}

fn pr_points(result: &MatchResult, n_pos: usize) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(result.outcomes.len());
    let mut tp = 0u64;
    let mut fp = 0u64;
    for outcome in &result.outcomes {
        match outcome.kind {
            MatchKind::TruePositive => tp += 1,
            MatchKind::FalsePositive => fp += 1,
            MatchKind::Ignored => continue,
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    points
}

/// AP of one class at one threshold, or `None` (undefined) when the class
/// has no non-crowd ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[Annotation],
    class_id: u32,
    iou_threshold: f64,
) -> Result<Option<f64>> {
    average_precision_with(dets, gts, class_id, iou_threshold, ApMode::Interp101)
}

pub fn average_precision_with(
    dets: &[Detection],
    gts: &[Annotation],
    class_id: u32,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<Option<f64>> {
    let class_dets: Vec<Detection> = dets
        .iter()
        .filter(|d| d.class_id == class_id)
        .cloned()
        .collect();
    let class_gts: Vec<Annotation> = gts
        .iter()
        .filter(|g| g.class_id == class_id)
        .cloned()
        .collect();
    let n_pos = class_gts.iter().filter(|g| !g.crowd).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let result = match_greedy(&class_dets, &class_gts, iou_threshold)?;
    Ok(Some(ap_from_points(&pr_points(&result, n_pos), mode)))
}

/// Precomputed per-class state shared by every threshold: per-image IoU
/// matrices and the global score ordering.
struct ClassContext {
    n_pos: usize,
    /// (image bucket, local detection index), in descending score order.
    det_order: Vec<(usize, usize)>,
    buckets: Vec<ImageBucket>,
}

struct ImageBucket {
    gt_crowd: Vec<bool>,
    /// ious[local_det][gt]
    ious: Vec<Vec<f64>>,
}

impl ClassContext {
    fn build(dets: &[&Detection], gts: &[&Annotation]) -> Self {
        let mut image_index: HashMap<&str, usize> = HashMap::new();
        let mut gt_lists: Vec<Vec<&Annotation>> = Vec::new();
        let mut det_lists: Vec<Vec<&Detection>> = Vec::new();
        for gt in gts {
            let bucket = *image_index.entry(gt.image_id.as_str()).or_insert_with(|| {
                gt_lists.push(Vec::new());
                det_lists.push(Vec::new());
                gt_lists.len() - 1
            });
            gt_lists[bucket].push(gt);
        }
        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(dets.len());
        for det in dets {
            let bucket = *image_index.entry(det.image_id.as_str()).or_insert_with(|| {
                gt_lists.push(Vec::new());
                det_lists.push(Vec::new());
                gt_lists.len() - 1
            });
            det_lists[bucket].push(det);
            scored.push((det.score, bucket, det_lists[bucket].len() - 1));
        }
        // stable: ties keep input order
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

        let buckets: Vec<ImageBucket> = gt_lists
            .iter()
            .zip(&det_lists)
            .map(|(gts, dets)| ImageBucket {
                gt_crowd: gts.iter().map(|g| g.crowd).collect(),
                ious: dets
                    .iter()
                    .map(|d| gts.iter().map(|g| iou(&d.bbox, &g.bbox)).collect())
                    .collect(),
            })
            .collect();

        ClassContext {
            n_pos: gts.iter().filter(|g| !g.crowd).count(),
            det_order: scored.into_iter().map(|(_, b, i)| (b, i)).collect(),
            buckets,
        }
    }

    /// Matching at one threshold, reusing the precomputed IoU matrices.
    fn counts_and_points(&self, threshold: f64) -> (MatchCounts, Vec<(f64, f64)>) {
        let mut taken: Vec<Vec<bool>> = self
            .buckets
            .iter()
            .map(|b| vec![false; b.gt_crowd.len()])
            .collect();
        let mut counts = MatchCounts::default();
        let mut points = Vec::with_capacity(self.det_order.len());
        let mut tp = 0u64;
        let mut fp = 0u64;

        for &(bucket_idx, det_idx) in &self.det_order {
            let bucket = &self.buckets[bucket_idx];
            let ious = &bucket.ious[det_idx];
            let mut best_regular: Option<(usize, f64)> = None;
            let mut crowd_hit = false;
            for (gt_idx, &overlap) in ious.iter().enumerate() {
                if overlap < threshold {
                    continue;
                }
                if bucket.gt_crowd[gt_idx] {
                    crowd_hit = true;
                } else if !taken[bucket_idx][gt_idx]
                    && best_regular.map(|(_, v)| overlap > v).unwrap_or(true)
                {
                    best_regular = Some((gt_idx, overlap));
                }
            }
            if let Some((gt_idx, _)) = best_regular {
                taken[bucket_idx][gt_idx] = true;
                tp += 1;
            } else if crowd_hit {
                continue;
            } else {
                fp += 1;
            }
            if self.n_pos > 0 {
                points.push((tp as f64 / self.n_pos as f64, tp as f64 / (tp + fp) as f64));
            }
        }

        counts.true_positives = tp;
        counts.false_positives = fp;
        counts.false_negatives = self.n_pos as u64 - tp;
        (counts, points)
    }

    fn ap(&self, threshold: f64, mode: ApMode) -> Option<f64> {
        if self.n_pos == 0 {
            return None;
        }
        let (_, points) = self.counts_and_points(threshold);
        Some(ap_from_points(&points, mode))
    }
}

/// Per-class AP matrix plus the Eq.-1 mean over classes with defined AP.
#[derive(Debug, Clone)]
pub struct ApTable {
    pub thresholds: Vec<f64>,
    /// (class id, per-threshold AP, grid mean), in schema order.
    pub per_class: Vec<(u32, Vec<Option<f64>>, Option<f64>)>,
    pub map: f64,
}

/// Mean average precision over the IoU grid and the class schema.
///
/// Classes without ground truth are reported as undefined and excluded
/// from the mean; an entirely empty ground truth is an error.
pub fn mean_ap(
    dets: &[Detection],
    gts: &[Annotation],
    grid: &IoUGrid,
    schema: &crate::formats::ClassSchema,
) -> Result<ApTable> {
    mean_ap_with(dets, gts, grid, schema, ApMode::Interp101)
}

pub fn mean_ap_with(
    dets: &[Detection],
    gts: &[Annotation],
    grid: &IoUGrid,
    schema: &crate::formats::ClassSchema,
    mode: ApMode,
) -> Result<ApTable> {
    if gts.iter().filter(|g| !g.crowd).count() == 0 {
        return Err(Error::InvalidArgument(
            "ground truth contains no non-crowd annotations; nothing to evaluate".into(),
        ));
    }
    for det in dets {
        if !schema.contains(det.class_id) {
            return Err(Error::Referential(format!(
                "detection on image '{}' has class {} outside the schema",
                det.image_id, det.class_id
            )));
        }
    }

    let class_ids: Vec<u32> = schema.entries().iter().map(|(id, _)| *id).collect();
    let per_class: Vec<(u32, Vec<Option<f64>>, Option<f64>)> = class_ids
        .par_iter()
        .map(|&class_id| {
            let class_dets: Vec<&Detection> =
                dets.iter().filter(|d| d.class_id == class_id).collect();
            let class_gts: Vec<&Annotation> =
                gts.iter().filter(|g| g.class_id == class_id).collect();
            let context = ClassContext::build(&class_dets, &class_gts);
            let row: Vec<Option<f64>> = grid
                .thresholds()
                .iter()
                .map(|&t| context.ap(t, mode))
                .collect();
            let mean = if row.iter().all(|c| c.is_some()) && !row.is_empty() {
                Some(row.iter().map(|c| c.unwrap()).sum::<f64>() / row.len() as f64)
            } else {
                None
            };
            (class_id, row, mean)
        })
        .collect();

    let defined: Vec<f64> = per_class.iter().filter_map(|(_, _, m)| *m).collect();
    if defined.is_empty() {
        return Err(Error::InvalidArgument(
            "no schema class has ground truth; nothing to evaluate".into(),
        ));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;

    Ok(ApTable {
        thresholds: grid.thresholds().to_vec(),
        per_class,
        map,
    })
}

/// Precision, recall, and F1 from aggregate counts, with the 0/0 → 0
/// convention.
pub fn f1_from_counts(counts: &MatchCounts) -> (f64, f64, f64) {
    let tp = counts.true_positives as f64;
    let fp = counts.false_positives as f64;
    let fn_ = counts.false_negatives as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Stats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
}

/// Micro-averaged F1 at one IoU threshold: detections below the
/// confidence threshold are dropped, counts are summed over classes.
pub fn f1_score(
    dets: &[Detection],
    gts: &[Annotation],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<F1Stats> {
    let kept: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.score >= confidence_threshold)
        .collect();

    let mut class_ids: Vec<u32> = kept
        .iter()
        .map(|d| d.class_id)
        .chain(gts.iter().map(|g| g.class_id))
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    let mut counts = MatchCounts::default();
    for class_id in class_ids {
        let class_dets: Vec<&Detection> =
            kept.iter().copied().filter(|d| d.class_id == class_id).collect();
        let class_gts: Vec<&Annotation> =
            gts.iter().filter(|g| g.class_id == class_id).collect();
        let context = ClassContext::build(&class_dets, &class_gts);
        let (c, _) = context.counts_and_points(iou_threshold);
        counts.true_positives += c.true_positives;
        counts.false_positives += c.false_positives;
        counts.false_negatives += c.false_negatives;
    }

    let (precision, recall, f1) = f1_from_counts(&counts);
    Ok(F1Stats {
        precision,
        recall,
        f1,
        counts,
    })
}

/// Knobs for the full evaluation driver.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub grid: IoUGrid,
    pub f1_iou_threshold: f64,
    pub confidence_threshold: f64,
    pub ap_mode: ApMode,
    /// Keep only the top-K detections per image (by score) before
    /// evaluating; `None` keeps everything.
    pub top_k_per_image: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            grid: IoUGrid::coco(),
            f1_iou_threshold: 0.5,
            confidence_threshold: 0.0,
            ap_mode: ApMode::Interp101,
            top_k_per_image: None,
        }
    }
}

/// Full evaluation: AP matrix, mAP, and the F1 operating point, assembled
/// into a serializable report.
pub fn evaluate(
    dets: &[Detection],
    gt: &GroundTruth,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let capped: Vec<Detection> = match options.top_k_per_image {
        None => dets.to_vec(),
        Some(k) => {
            let mut by_image: HashMap<&str, Vec<&Detection>> = HashMap::new();
            for det in dets {
                by_image.entry(det.image_id.as_str()).or_default().push(det);
            }
            let mut keep: Vec<Detection> = Vec::new();
            let mut image_ids: Vec<&str> = by_image.keys().copied().collect();
            image_ids.sort_unstable();
            for image_id in image_ids {
                let mut group = by_image.remove(image_id).unwrap();
                group.sort_by(|a, b| {
                    b.score
                        .partial_cmp(&a.score)
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                keep.extend(group.into_iter().take(k).cloned());
            }
            keep
        }
    };

    let table = mean_ap_with(&capped, &gt.annotations, &options.grid, &gt.schema, options.ap_mode)?;
    let f1 = f1_score(
        &capped,
        &gt.annotations,
        options.f1_iou_threshold,
        options.confidence_threshold,
    )?;

    let classes = table
        .per_class
        .iter()
        .map(|(class_id, row, mean)| ClassApRow {
            class_id: *class_id,
            name: gt.schema.name_of(*class_id).unwrap_or("?").to_string(),
            ap_by_threshold: row.clone(),
            ap: *mean,
        })
        .collect();

    let report = EvalReport {
        iou_thresholds: table.thresholds.clone(),
        classes,
        map: table.map,
        precision: f1.precision,
        recall: f1.recall,
        f1: f1.f1,
        counts: f1.counts,
        config: EvalConfigEcho {
            f1_iou_threshold: options.f1_iou_threshold,
            confidence_threshold: options.confidence_threshold,
            ap_interpolation: options.ap_mode.label().to_string(),
            top_k_per_image: options.top_k_per_image,
        },
    };
    report.validate()?;
    Ok(report)
}
