//! Per-image illumination statistics and the night/other dataset split.
//!
//! Luminance is the unweighted mean of the three channel means (the
//! scatter of raw RGB means separates night frames cleanly); BT.601 luma
//! weighting is available as an option. The split is strict: an image is
//! night exactly when `L < T_night`, so a record sitting on the threshold
//! lands in the other-times cluster.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{
    Cluster, IlluminationStats, ImageRecord, LumaMode, Manifest, ManifestHeader, Scenario,
};

/// Luminance threshold for the night cluster, in the open interval (0, 255).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NightThreshold(f64);

impl NightThreshold {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 || value >= 255.0 {
            return Err(Error::Domain(format!(
                "night threshold must lie strictly between 0 and 255, got {value}"
            )));
        }
        Ok(NightThreshold(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Channel means and luminance of an 8-bit RGB pixel stream.
///
/// Sums are exact integer arithmetic, so the result is independent of
/// pixel order. Errors on an empty stream.
pub fn image_stats_with(
    pixels: impl IntoIterator<Item = [u8; 3]>,
    luma: LumaMode,
) -> Result<IlluminationStats> {
    let mut count: u64 = 0;
    let mut sum = [0u64; 3];
    for [r, g, b] in pixels {
        sum[0] += r as u64;
        sum[1] += g as u64;
        sum[2] += b as u64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cannot compute illumination stats of a zero-pixel image".into(),
        ));
    }
    let n = count as f64;
    let (mean_r, mean_g, mean_b) = (sum[0] as f64 / n, sum[1] as f64 / n, sum[2] as f64 / n);
    let luminance = match luma {
        LumaMode::Mean => (mean_r + mean_g + mean_b) / 3.0,
        LumaMode::Bt601 => 0.299 * mean_r + 0.587 * mean_g + 0.114 * mean_b,
    };
    Ok(IlluminationStats {
        mean_r,
        mean_g,
        mean_b,
        luminance,
    })
}

/// [`image_stats_with`] under the default mean-of-means luminance.
pub fn image_stats(pixels: impl IntoIterator<Item = [u8; 3]>) -> Result<IlluminationStats> {
    image_stats_with(pixels, LumaMode::Mean)
}

/// Stats of a decoded RGB image.
pub fn stats_of_image(img: &image::RgbImage, luma: LumaMode) -> Result<IlluminationStats> {
    image_stats_with(
        img.as_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]),
        luma,
    )
}

/// Partition records into (night, other) by strict `L < T_night`.
///
/// The partition is total and disjoint, input order is preserved within
/// each side, and each returned record has its cluster field set.
pub fn cluster_by_illumination(
    records: &[ImageRecord],
    t_night: NightThreshold,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let mut night = Vec::new();
    let mut other = Vec::new();
    for record in records {
        let stats = record.stats.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "record '{}' has no illumination stats",
                record.image_id
            ))
        })?;
        let mut tagged = record.clone();
        if stats.luminance < t_night.value() {
            tagged.cluster = Some(Cluster::Night);
            night.push(tagged);
        } else {
            tagged.cluster = Some(Cluster::Other);
            other.push(tagged);
        }
    }
    Ok((night, other))
}

/// A whole manifest after clustering: the full record list in original
/// order plus the two sides of the partition, all cluster-tagged.
#[derive(Debug, Clone)]
pub struct ClusteredManifest {
    pub full: Manifest,
    pub night: Vec<ImageRecord>,
    pub other: Vec<ImageRecord>,
}

/// Cluster a manifest in place: every record gets its cluster field, a
/// `cluster:night` / `cluster:other` provenance tag, and the header
/// records the threshold used.
pub fn apply_clustering(manifest: &Manifest, t_night: NightThreshold) -> Result<ClusteredManifest> {
    let mut full = Manifest {
        header: manifest.header.clone(),
        records: Vec::with_capacity(manifest.len()),
    };
    full.header.t_night = Some(t_night.value());
    let mut night = Vec::new();
    let mut other = Vec::new();
    for record in &manifest.records {
        let stats = record.stats.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "record '{}' has no illumination stats",
                record.image_id
            ))
        })?;
        let mut tagged = record.clone();
        if stats.luminance < t_night.value() {
            tagged.cluster = Some(Cluster::Night);
            tagged.provenance.push("cluster:night".into());
            night.push(tagged.clone());
        } else {
            tagged.cluster = Some(Cluster::Other);
            tagged.provenance.push("cluster:other".into());
            other.push(tagged.clone());
        }
        full.records.push(tagged);
    }
    Ok(ClusteredManifest { full, night, other })
}

/// Otsu's method over the 256-bin luminance histogram: picks the bin
/// split maximizing between-class variance (ties toward the lower bin)
/// and returns the strict-`<`threshold realizing it.
pub fn auto_threshold(records: &[ImageRecord]) -> Result<NightThreshold> {
    let mut hist = [0u64; 256];
    for record in records {
        let stats = record.stats.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "record '{}' has no illumination stats",
                record.image_id
            ))
        })?;
        let l = stats.luminance;
        if !(0.0..=255.0).contains(&l) {
            return Err(Error::Domain(format!(
                "record '{}': luminance {l} outside [0,255]",
                record.image_id
            )));
        }
        hist[(l.floor() as usize).min(255)] += 1;
    }

    let best = otsu_split(&hist).ok_or_else(|| {
        Error::Domain(
            "luminance histogram occupies a single bin; auto-thresholding cannot \
             separate it — supply an explicit night threshold"
                .into(),
        )
    })?;
    // Bins <= best go night; bin 254 is the one split whose upper
    // neighbour 255 sits outside the open threshold interval.
    let value = if best == 254 {
        255.0f64.next_down()
    } else {
        (best + 1) as f64
    };
    NightThreshold::new(value)
}

/// Maximizing split bin `t`: classes are bins `<= t` and `> t`. `None`
/// when every split leaves one class empty.
fn otsu_split(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let weighted_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(bin, &count)| bin as f64 * count as f64)
        .sum();

    let mut best: Option<(usize, f64)> = None;
    let mut weight_low: u64 = 0;
    let mut sum_low: f64 = 0.0;
    for (bin, &count) in hist.iter().enumerate() {
        weight_low += count;
        sum_low += bin as f64 * count as f64;
        let weight_high = total - weight_low;
        if weight_low == 0 || weight_high == 0 {
            continue;
        }
        let mean_low = sum_low / weight_low as f64;
        let mean_high = (weighted_total - sum_low) / weight_high as f64;
        let diff = mean_low - mean_high;
        let variance = weight_low as f64 * weight_high as f64 * diff * diff;
        match best {
            Some((_, v)) if variance <= v => {}
            _ => best = Some((bin, variance)),
        }
    }
    best.map(|(bin, _)| bin)
}

/// Write the plot-ready per-image scatter CSV:
/// `filename,mean_r,mean_g,mean_b,luminance,scenario,cluster`.
pub fn export_scatter(records: &[ImageRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, "csv", format!("{other:?}")),
    })?;
    w.write_record([
        "filename",
        "mean_r",
        "mean_g",
        "mean_b",
        "luminance",
        "scenario",
        "cluster",
    ])
    .map_err(|e| Error::parse(path, "csv", e.to_string()))?;
    for record in records {
        let stats = record.stats.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "record '{}' has no illumination stats",
                record.image_id
            ))
        })?;
        w.write_record([
            record.path.to_string_lossy().to_string(),
            stats.mean_r.to_string(),
            stats.mean_g.to_string(),
            stats.mean_b.to_string(),
            stats.luminance.to_string(),
            record.scenario.map(|s| s.to_string()).unwrap_or_default(),
            record.cluster.map(|c| c.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::parse(path, "csv", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Build a manifest from a directory of images: decode each file, record
/// dimensions and illumination stats, infer the scenario from the name.
/// Files that fail to decode are skipped with a warning so one broken
/// frame cannot abort a long batch.
pub fn build_manifest(dir: &Path, luma: LumaMode) -> Result<Manifest> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();

    let mut records: Vec<ImageRecord> = paths
        .par_iter()
        .filter_map(|path| match record_for_image(path, luma) {
            Ok(record) => Some(record),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                None
            }
        })
        .collect();

    // stems are the image ids downstream; keep the first of any clash
    let mut seen = std::collections::BTreeSet::new();
    records.retain(|r| {
        let fresh = seen.insert(r.image_id.clone());
        if !fresh {
            log::warn!("skipping {}: duplicate image id '{}'", r.path.display(), r.image_id);
        }
        fresh
    });

    Ok(Manifest {
        header: ManifestHeader {
            luma,
            ..ManifestHeader::default()
        },
        records,
    })
}

fn record_for_image(path: &Path, luma: LumaMode) -> Result<ImageRecord> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path, "image decode", e.to_string()))?
        .to_rgb8();
    let dims = crate::geometry::ImageDims::new(img.width(), img.height())?;
    let stats = stats_of_image(&img, luma)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path, "filename", "non-UTF-8 file stem"))?;
    Ok(ImageRecord {
        image_id: stem.to_string(),
        path: path.to_path_buf(),
        dims,
        stats: Some(stats),
        cluster: None,
        scenario: Scenario::infer_from_name(stem),
        provenance: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn record(id: &str, luminance: f64) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            path: PathBuf::from(format!("{id}.png")),
            dims: crate::geometry::ImageDims::new(8, 8).unwrap(),
            stats: Some(IlluminationStats {
                mean_r: luminance,
                mean_g: luminance,
                mean_b: luminance,
                luminance,
            }),
            cluster: None,
            scenario: None,
            provenance: vec![],
        }
    }

    #[test]
    fn stats_uniform_image() {
        let s = image_stats(std::iter::repeat([10u8, 10, 10]).take(12)).unwrap();
        assert_eq!((s.mean_r, s.mean_g, s.mean_b, s.luminance), (10.0, 10.0, 10.0, 10.0));
    }

    #[test]
    fn stats_channel_means() {
        let s = image_stats(std::iter::repeat([200u8, 100, 0]).take(5)).unwrap();
        assert_eq!(s.luminance, 100.0);
    }

    #[test]
    fn stats_two_pixel_symmetry() {
        let s = image_stats([[0u8, 0, 0], [255, 255, 255]]).unwrap();
        assert_eq!((s.mean_r, s.mean_g, s.mean_b, s.luminance), (127.5, 127.5, 127.5, 127.5));
    }

    #[test]
    fn stats_empty_errors() {
        assert!(image_stats(std::iter::empty()).is_err());
    }

    #[test]
    fn stats_bt601_weighting() {
        let s = image_stats_with(std::iter::once([100u8, 200, 50]), LumaMode::Bt601).unwrap();
        let expected = 0.299 * 100.0 + 0.587 * 200.0 + 0.114 * 50.0;
        assert!((s.luminance - expected).abs() < 1e-12);
    }

    #[test]
    fn cluster_strict_boundary() {
        let t = NightThreshold::new(50.0).unwrap();
        let (night, other) =
            cluster_by_illumination(&[record("lo", 10.0), record("edge", 50.0)], t).unwrap();
        assert_eq!(night.len(), 1);
        assert_eq!(night[0].image_id, "lo");
        assert_eq!(night[0].cluster, Some(Cluster::Night));
        assert_eq!(other[0].image_id, "edge");
        assert_eq!(other[0].cluster, Some(Cluster::Other));
    }

    #[test]
    fn cluster_elementwise_fixture() {
        let t = NightThreshold::new(50.0).unwrap();
        let records: Vec<ImageRecord> = [10.0, 40.0, 80.0, 200.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| record(&format!("r{i}"), l))
            .collect();
        let (night, other) = cluster_by_illumination(&records, t).unwrap();
        let ids = |v: &[ImageRecord]| v.iter().map(|r| r.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&night), ["r0", "r1"]);
        assert_eq!(ids(&other), ["r2", "r3"]);
    }

    #[test]
    fn cluster_missing_stats_names_record() {
        let mut bad = record("ghost", 1.0);
        bad.stats = None;
        let err = cluster_by_illumination(&[bad], NightThreshold::new(10.0).unwrap()).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn otsu_bimodal_fixture() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(record(&format!("d{i}"), 20.0));
            records.push(record(&format!("b{i}"), 200.0));
        }
        let t = auto_threshold(&records).unwrap();
        assert!(t.value() > 20.0 && t.value() < 200.0);
        let (night, other) = cluster_by_illumination(&records, t).unwrap();
        assert_eq!(night.len(), 10);
        assert_eq!(other.len(), 10);
        assert!(night.iter().all(|r| r.stats.unwrap().luminance == 20.0));
    }

    #[test]
    fn otsu_two_point_case() {
        let t = auto_threshold(&[record("a", 0.0), record("b", 255.0)]).unwrap();
        let (night, other) =
            cluster_by_illumination(&[record("a", 0.0), record("b", 255.0)], t).unwrap();
        assert_eq!((night.len(), other.len()), (1, 1));
    }

    #[test]
    fn otsu_uniform_errors() {
        let records: Vec<ImageRecord> =
            (0..5).map(|i| record(&format!("r{i}"), 100.0)).collect();
        let err = auto_threshold(&records).unwrap_err();
        assert!(err.to_string().contains("explicit night threshold"));
    }

    #[test]
    fn threshold_open_interval() {
        assert!(NightThreshold::new(0.0).is_err());
        assert!(NightThreshold::new(255.0).is_err());
        assert!(NightThreshold::new(254.9).is_ok());
    }

    #[test]
    fn scatter_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        let mut r = record("n1", 10.0);
        r.scenario = Some(Scenario::Night);
        r.cluster = Some(Cluster::Night);
        export_scatter(&[r], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "filename,mean_r,mean_g,mean_b,luminance,scenario,cluster"
        );
        let row = lines.next().unwrap();
        assert!(row.contains("Night"));
        assert!(lines.next().is_none());

        export_scatter(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    proptest! {
        #[test]
        fn partition_total_and_monotone(
            lums in proptest::collection::vec(0.0..255.0f64, 0..40),
            t1 in 0.5..254.5f64,
            t2 in 0.5..254.5f64,
        ) {
            let records: Vec<ImageRecord> = lums
                .iter()
                .enumerate()
                .map(|(i, &l)| record(&format!("r{i}"), l))
                .collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (night_lo, other_lo) =
                cluster_by_illumination(&records, NightThreshold::new(lo).unwrap()).unwrap();
            let (night_hi, _) =
                cluster_by_illumination(&records, NightThreshold::new(hi).unwrap()).unwrap();
            prop_assert_eq!(night_lo.len() + other_lo.len(), records.len());
            // raising the threshold never moves a record out of night
            let ids = |v: &[ImageRecord]| {
                v.iter().map(|r| r.image_id.clone()).collect::<std::collections::BTreeSet<_>>()
            };
            prop_assert!(ids(&night_lo).is_subset(&ids(&night_hi)));
        }

        #[test]
        fn stats_permutation_invariant(
            mut pixels in proptest::collection::vec(proptest::array::uniform3(0u8..=255), 1..200),
            seed in 0u64..1000,
        ) {
            let a = image_stats(pixels.iter().copied()).unwrap();
            // deterministic shuffle
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            pixels.shuffle(&mut rng);
            let b = image_stats(pixels.iter().copied()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
