//! Reproducible experiment protocols: data-ratio subsampling, systematic
//! keypoint dropping and pseudo-label synthesis.
//!
//! All randomness comes from [`crate::rng`], seeded from the split spec only.

use serde::{Deserialize, Serialize};

use crate::dataset::{Keypoint, PoseDataset};
use crate::error::{Error, Result};
use crate::eval::{heuristic_bbox, DEFAULT_BBOX_MARGIN};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    DataRatio,
    SparseKeypoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    /// Round down, but keep at least one item.
    FloorMinOne,
    Ceil,
    Nearest,
}

impl Rounding {
    fn apply(self, exact: f64) -> usize {
        // absorbs products like 0.29 * 100 = 28.999999999999996
        const SLACK: f64 = 1e-9;
        match self {
            Rounding::FloorMinOne => ((exact + SLACK).floor() as usize).max(1),
            Rounding::Ceil => (exact - SLACK).ceil().max(0.0) as usize,
            Rounding::Nearest => exact.round() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub fraction: f64,
    pub seed: u64,
    /// Defaults to floor-with-min-1 for data ratio and ceil for sparse keypoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding: Option<Rounding>,
}

impl SplitSpec {
    pub fn data_ratio(fraction: f64, seed: u64) -> Self {
        Self {
            kind: SplitKind::DataRatio,
            fraction,
            seed,
            rounding: None,
        }
    }

    pub fn sparse_keypoints(fraction: f64, seed: u64) -> Self {
        Self {
            kind: SplitKind::SparseKeypoints,
            fraction,
            seed,
            rounding: None,
        }
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = Some(rounding);
        self
    }

    fn rounding(&self) -> Rounding {
        self.rounding.unwrap_or(match self.kind {
            SplitKind::DataRatio => Rounding::FloorMinOne,
            SplitKind::SparseKeypoints => Rounding::Ceil,
        })
    }

    fn expect(&self, kind: SplitKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parameter(format!(
                "split spec is {:?}, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Subsample {
    pub dataset: PoseDataset,
    pub kept_image_ids: Vec<u64>,
}

/// Number of images kept by a data-ratio split of `n` images.
pub fn subsample_count(n: usize, spec: &SplitSpec) -> usize {
    spec.rounding().apply(spec.fraction * n as f64).clamp(1, n.max(1))
}

/// Keeps a seeded uniform sample of images (and all their annotations).
pub fn subsample_images(ds: &PoseDataset, spec: &SplitSpec) -> Result<Subsample> {
    spec.expect(SplitKind::DataRatio)?;
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "data-ratio fraction must lie in (0, 1], got {}",
            spec.fraction
        )));
    }
    if ds.images.is_empty() {
        return Err(Error::Parameter(format!("dataset `{}` has no images", ds.name)));
    }
    let mut ids: Vec<u64> = ds.images.iter().map(|img| img.id).collect();
    ids.sort_unstable();
    let count = subsample_count(ids.len(), spec);
    let mut kept: Vec<u64> = rng::sample_indices(&mut rng::seeded(spec.seed), ids.len(), count)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    kept.sort_unstable();

    let keep = |id: &u64| kept.binary_search(id).is_ok();
    let dataset = PoseDataset {
        images: ds.images.iter().filter(|i| keep(&i.id)).cloned().collect(),
        annotations: ds
            .annotations
            .iter()
            .filter(|a| keep(&a.image_id))
            .cloned()
            .collect(),
        ..ds.clone()
    };
    Ok(Subsample {
        dataset,
        kept_image_ids: kept,
    })
}

#[derive(Debug, Clone)]
pub struct DroppedKeypoints {
    pub dataset: PoseDataset,
    /// Dropped channel indices, ascending.
    pub channels: Vec<usize>,
    /// Names of the dropped channels, in channel order.
    pub names: Vec<String>,
}

/// The channels a sparse-keypoint split removes. Depends only on `m` and the split parameters.
pub fn dropped_channels(m: usize, spec: &SplitSpec) -> Result<Vec<usize>> {
    spec.expect(SplitKind::SparseKeypoints)?;
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::Parameter(format!(
            "keypoint drop fraction must lie in [0, 1], got {}",
            spec.fraction
        )));
    }
    let count = spec.rounding().apply(spec.fraction * m as f64);
    if count >= m && count > 0 {
        return Err(Error::Parameter(format!(
            "dropping {count} of {m} keypoints leaves none"
        )));
    }
    let mut channels = rng::sample_indices(&mut rng::seeded(spec.seed), m, count);
    channels.sort_unstable();
    Ok(channels)
}

/// Clears the same seeded set of channels in every annotation. Apply to the
/// training split only.
pub fn drop_keypoints(train: &PoseDataset, spec: &SplitSpec) -> Result<DroppedKeypoints> {
    let channels = dropped_channels(train.vocabulary.len(), spec)?;
    let mut dataset = train.clone();
    for ann in &mut dataset.annotations {
        for &k in &channels {
            if let Some(kp) = ann.keypoints.get_mut(k) {
                *kp = Keypoint::ABSENT;
            }
        }
        ann.recount();
    }
    let names = channels
        .iter()
        .map(|&k| train.vocabulary.names()[k].clone())
        .collect();
    Ok(DroppedKeypoints {
        dataset,
        channels,
        names,
    })
}

pub const PSEUDO_LABEL_KEY: &str = "pseudo_labels";

/// Turns predictions into ground truth: every predicted keypoint becomes
/// labeled-visible (`v = 2`), every prediction is kept whatever its score,
/// scores are dropped and boxes regenerated from the keypoints.
pub fn synthesize_pseudo_labels(predictions: &PoseDataset) -> Result<PoseDataset> {
    let images = predictions.image_index();
    let mut out = predictions.with_images_only();
    out.metadata
        .insert(PSEUDO_LABEL_KEY.to_string(), "true".to_string());
    for pred in &predictions.annotations {
        let image = images.get(&pred.image_id).ok_or_else(|| {
            Error::Schema(format!(
                "prediction {} references unknown image {}",
                pred.id, pred.image_id
            ))
        })?;
        let mut ann = pred.clone();
        for kp in &mut ann.keypoints {
            *kp = if kp.is_present() {
                Keypoint::visible(kp.x, kp.y)
            } else {
                Keypoint::ABSENT
            };
        }
        ann.recount();
        ann.score = None;
        ann.bbox = heuristic_bbox(&ann, image, DEFAULT_BBOX_MARGIN).ok();
        out.annotations.push(ann);
    }
    Ok(out)
}
