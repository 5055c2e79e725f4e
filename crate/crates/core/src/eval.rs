//! OKS-based mAP evaluation in the COCO keypoint style.
//!
//! Per image, predictions are visited in descending score order (ties by
//! annotation id) and, separately for each OKS threshold, greedily matched to
//! the unmatched ground truth with the highest OKS at or above the threshold.
//! AP uses the monotone precision envelope sampled at 101 recall points; mAP
//! is the mean AP over thresholds 0.50:0.05:0.95, reported on a 0-100 scale.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, BBox, ImageRecord, PoseDataset};
use crate::error::{Error, Result};

/// Per-keypoint sigmas of the 17 COCO human keypoints.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Sigma assigned to every keypoint of lab-mouse data.
pub const LAB_MOUSE_SIGMA: f64 = 0.1;

pub const DEFAULT_BBOX_MARGIN: f64 = 30.0;
pub const DEFAULT_MAX_DETS: usize = 20;

pub fn mean_coco_sigma() -> f64 {
    COCO_SIGMAS.iter().sum::<f64>() / COCO_SIGMAS.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaConfig {
    sigmas: Vec<f64>,
}

impl SigmaConfig {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Parameter("sigma vector is empty".into()));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be positive, got {s}")));
        }
        Ok(Self { sigmas })
    }

    pub fn broadcast(sigma: f64, m: usize) -> Result<Self> {
        Self::new(vec![sigma; m])
    }

    /// The mean COCO sigma on every keypoint (quadruped convention).
    pub fn coco_mean(m: usize) -> Self {
        Self::broadcast(mean_coco_sigma(), m).expect("mean COCO sigma is positive")
    }

    pub fn lab_mouse(m: usize) -> Self {
        Self::broadcast(LAB_MOUSE_SIGMA, m).expect("constant sigma is positive")
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Parses the TOML sigma file: `sigma = <scalar>` (broadcast to `m`),
    /// `sigma = "coco-mean"`, or `sigmas = [...]`.
    pub fn from_toml(text: &str, m: usize) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Scalar {
            Value(f64),
            Named(String),
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            sigma: Option<Scalar>,
            sigmas: Option<Vec<f64>>,
        }
        let file: File =
            toml::from_str(text).map_err(|e| Error::Parameter(format!("sigma config: {e}")))?;
        match (file.sigma, file.sigmas) {
            (Some(Scalar::Value(s)), None) => Self::broadcast(s, m),
            (Some(Scalar::Named(name)), None) => match name.as_str() {
                "coco-mean" => Ok(Self::coco_mean(m)),
                "lab-mouse" => Ok(Self::lab_mouse(m)),
                other => Err(Error::Parameter(format!("unknown sigma preset `{other}`"))),
            },
            (None, Some(list)) => Self::new(list),
            _ => Err(Error::Parameter(
                "sigma config needs exactly one of `sigma` or `sigmas`".into(),
            )),
        }
    }
}

/// Box around the labeled keypoints, grown by `margin` on every side.
///
/// The corner is clamped to the image origin and the size to the space left
/// inside the image from that corner.
pub fn heuristic_bbox(ann: &Annotation, image: &ImageRecord, margin: f64) -> Result<BBox> {
    let mut present = ann.keypoints.iter().filter(|kp| kp.is_present());
    let first = present.next().ok_or(Error::DegenerateAnnotation(ann.id))?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for kp in present {
        x0 = x0.min(kp.x);
        y0 = y0.min(kp.y);
        x1 = x1.max(kp.x);
        y1 = y1.max(kp.y);
    }
    let x = (x0 - margin).max(0.0);
    let y = (y0 - margin).max(0.0);
    let w = ((x1 - x0) + 2.0 * margin).min(f64::from(image.width) - x).max(0.0);
    let h = ((y1 - y0) + 2.0 * margin).min(f64::from(image.height) - y).max(0.0);
    Ok(BBox::new(x, y, w, h))
}

/// Object keypoint similarity over the keypoints labeled in `gt`.
pub fn oks(gt: &Annotation, pred: &Annotation, sigmas: &SigmaConfig, area: f64) -> Result<f64> {
    let m = gt.keypoints.len();
    if pred.keypoints.len() != m || sigmas.len() != m {
        return Err(Error::Evaluation(format!(
            "keypoint counts differ: gt {m}, prediction {}, sigmas {}",
            pred.keypoints.len(),
            sigmas.len()
        )));
    }
    if !(area > 0.0) {
        return Err(Error::Parameter(format!("OKS area must be positive, got {area}")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((g, p), sigma) in gt.keypoints.iter().zip(&pred.keypoints).zip(&sigmas.sigmas) {
        if !g.is_present() {
            continue;
        }
        let d2 = (g.x - p.x).powi(2) + (g.y - p.y).powi(2);
        let kappa = 2.0 * sigma;
        sum += (-d2 / (2.0 * area * kappa * kappa)).exp();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedOks(gt.id));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub max_dets: usize,
    /// Margin for ground truth lacking a stored bbox.
    pub bbox_margin: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            max_dets: DEFAULT_MAX_DETS,
            bbox_margin: DEFAULT_BBOX_MARGIN,
        }
    }
}

pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn recall_samples() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub image_id: u64,
    pub prediction_id: u64,
    pub gt_id: u64,
    pub oks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean AP over thresholds, 0-100.
    #[serde(rename = "mAP")]
    pub map: f64,
    /// AP per OKS threshold, 0-100.
    pub per_threshold: Vec<ThresholdAp>,
    /// Matches made at the loosest threshold (0.50).
    pub matches: Vec<MatchRecord>,
    /// Ground truth without labeled keypoints, excluded from evaluation.
    pub skipped_ground_truth: Vec<u64>,
}

impl EvalReport {
    pub fn write_matches_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "prediction_id", "gt_id", "oks"])?;
        for m in &self.matches {
            w.write_record([
                m.image_id.to_string(),
                m.prediction_id.to_string(),
                m.gt_id.to_string(),
                m.oks.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<match csv>", e))?;
        Ok(())
    }
}

/// `(score, prediction id, matched gt and OKS per threshold)`
type RankedDetection = (f64, u64, [Option<(u64, f64)>; 10]);

struct ImageEval {
    image_id: u64,
    detections: Vec<RankedDetection>,
    num_gt: usize,
    skipped: Vec<u64>,
}

fn evaluate_image(
    image: &ImageRecord,
    gts: &[&Annotation],
    preds: &[&Annotation],
    sigmas: &SigmaConfig,
    params: EvalParams,
) -> Result<ImageEval> {
    let mut skipped = Vec::new();
    let mut kept: Vec<(&Annotation, f64)> = Vec::new();
    for gt in gts {
        if gt.present_count() == 0 {
            skipped.push(gt.id);
            continue;
        }
        let bbox = match gt.bbox {
            Some(b) => b,
            None => heuristic_bbox(gt, image, params.bbox_margin)?,
        };
        if bbox.area() > 0.0 {
            kept.push((gt, bbox.area()));
        } else {
            skipped.push(gt.id);
        }
    }

    let mut dts: Vec<&Annotation> = preds.to_vec();
    for d in &dts {
        if d.score.is_none() {
            return Err(Error::Evaluation(format!("prediction {} has no score", d.id)));
        }
    }
    dts.sort_by(|a, b| {
        b.score
            .unwrap()
            .total_cmp(&a.score.unwrap())
            .then(a.id.cmp(&b.id))
    });
    dts.truncate(params.max_dets);

    let table: Vec<Vec<f64>> = dts
        .iter()
        .map(|d| {
            kept.iter()
                .map(|(g, area)| oks(g, d, sigmas, *area))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let thresholds = oks_thresholds();
    let mut matched: Vec<[Option<(u64, f64)>; 10]> = vec![[None; 10]; dts.len()];
    for (t, &thr) in thresholds.iter().enumerate() {
        let mut taken = vec![false; kept.len()];
        for (d, row) in table.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (g, &value) in row.iter().enumerate() {
                if taken[g] || value < thr {
                    continue;
                }
                if best.is_none_or(|(_, b)| value > b) {
                    best = Some((g, value));
                }
            }
            if let Some((g, value)) = best {
                taken[g] = true;
                matched[d][t] = Some((kept[g].0.id, value));
            }
        }
    }

    Ok(ImageEval {
        image_id: image.id,
        detections: dts
            .iter()
            .zip(matched)
            .map(|(d, m)| (d.score.unwrap(), d.id, m))
            .collect(),
        num_gt: kept.len(),
        skipped,
    })
}

/// Average precision from true/false-positive flags already in ranking order.
pub fn average_precision(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || is_tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let sum: f64 = recall_samples()
        .map(|r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    sum / 101.0
}

pub fn evaluate(
    gt: &PoseDataset,
    predictions: &PoseDataset,
    sigmas: &SigmaConfig,
    params: EvalParams,
) -> Result<EvalReport> {
    if gt.vocabulary != predictions.vocabulary {
        return Err(Error::Evaluation(
            "ground truth and predictions use different keypoint vocabularies".into(),
        ));
    }
    if sigmas.len() != gt.vocabulary.len() {
        return Err(Error::Evaluation(format!(
            "{} sigmas for {} keypoints",
            sigmas.len(),
            gt.vocabulary.len()
        )));
    }
    let images = gt.image_index();
    if let Some(p) = predictions
        .annotations
        .iter()
        .find(|p| !images.contains_key(&p.image_id))
    {
        return Err(Error::Evaluation(format!(
            "prediction {} references image {} absent from ground truth",
            p.id, p.image_id
        )));
    }

    let mut gt_by_image: HashMap<u64, Vec<&Annotation>> = HashMap::new();
    for a in &gt.annotations {
        gt_by_image.entry(a.image_id).or_default().push(a);
    }
    let mut pred_by_image: HashMap<u64, Vec<&Annotation>> = HashMap::new();
    for a in &predictions.annotations {
        pred_by_image.entry(a.image_id).or_default().push(a);
    }

    let empty = Vec::new();
    let per_image = gt
        .images
        .par_iter()
        .map(|img| {
            evaluate_image(
                img,
                gt_by_image.get(&img.id).unwrap_or(&empty),
                pred_by_image.get(&img.id).unwrap_or(&empty),
                sigmas,
                params,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let num_gt: usize = per_image.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return Err(Error::Evaluation(
            "ground truth has no annotations with labeled keypoints".into(),
        ));
    }

    let mut ranked: Vec<RankedDetection> = per_image
        .iter()
        .flat_map(|e| e.detections.iter().copied())
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let per_threshold: Vec<ThresholdAp> = oks_thresholds()
        .iter()
        .enumerate()
        .map(|(t, &threshold)| {
            let flags: Vec<bool> = ranked.iter().map(|d| d.2[t].is_some()).collect();
            ThresholdAp {
                threshold,
                ap: 100.0 * average_precision(&flags, num_gt),
            }
        })
        .collect();
    let map = per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64;

    let matches = per_image
        .iter()
        .flat_map(|e| {
            e.detections.iter().filter_map(move |(_, pid, m)| {
                m[0].map(|(gid, value)| MatchRecord {
                    image_id: e.image_id,
                    prediction_id: *pid,
                    gt_id: gid,
                    oks: value,
                })
            })
        })
        .collect();
    let skipped_ground_truth = per_image.iter().flat_map(|e| e.skipped.clone()).collect();

    Ok(EvalReport {
        map,
        per_threshold,
        matches,
        skipped_ground_truth,
    })
}
