//! Reference implementations kept deliberately naive: scalar loops, no
//! sharing with the library's code paths.
#![allow(dead_code)]

use std::path::PathBuf;

use panpose::{Annotation, ImageRecord, Keypoint, KeypointVocabulary, PoseDataset};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn vocab(m: usize) -> KeypointVocabulary {
    KeypointVocabulary::new((0..m).map(|k| format!("kp{k}"))).unwrap()
}

pub fn ann(id: u64, image_id: u64, pts: &[(f64, f64)]) -> Annotation {
    Annotation::new(id, image_id, pts.iter().map(|&(x, y)| Keypoint::visible(x, y)).collect())
}

/// OKS written straight from the definition, with the box area supplied.
pub fn oracle_oks(gt: &Annotation, pred: &Annotation, sigmas: &[f64], area: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for k in 0..gt.keypoints.len() {
        let g = gt.keypoints[k];
        if g.v == 0 {
            continue;
        }
        let p = pred.keypoints[k];
        let dx = g.x - p.x;
        let dy = g.y - p.y;
        let var = (2.0 * sigmas[k]) * (2.0 * sigmas[k]);
        total += f64::exp(-(dx * dx + dy * dy) / var / (area + area));
        n += 1.0;
    }
    total / n
}

/// Box from the keypoint extent grown by `margin`, clipped to the image.
pub fn oracle_area(gt: &Annotation, image: &ImageRecord, margin: f64) -> f64 {
    let xs: Vec<f64> = gt.keypoints.iter().filter(|k| k.v > 0).map(|k| k.x).collect();
    let ys: Vec<f64> = gt.keypoints.iter().filter(|k| k.v > 0).map(|k| k.y).collect();
    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x = f64::max(lo(&xs) - margin, 0.0);
    let y = f64::max(lo(&ys) - margin, 0.0);
    let w = f64::min(hi(&xs) - lo(&xs) + 2.0 * margin, image.width as f64 - x);
    let h = f64::min(hi(&ys) - lo(&ys) + 2.0 * margin, image.height as f64 - y);
    w * h
}

/// mAP (0-100) by brute force: per image and threshold, walk detections in
/// score order and take the unmatched gt with the highest OKS at or above the
/// threshold; then AP is the mean over r in {0, 0.01, .., 1} of the best
/// precision achieved at any recall >= r.
pub fn oracle_map(gt: &PoseDataset, preds: &PoseDataset, sigmas: &[f64], margin: f64, max_dets: usize) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut aps = Vec::new();
    for &thr in &thresholds {
        // (score, id, is_tp)
        let mut ranked: Vec<(f64, u64, bool)> = Vec::new();
        let mut num_gt = 0usize;
        for image in &gt.images {
            let gts: Vec<(&Annotation, f64)> = gt
                .annotations
                .iter()
                .filter(|a| a.image_id == image.id && a.keypoints.iter().any(|k| k.v > 0))
                .map(|a| {
                    let area = match a.bbox {
                        Some(b) => b.w * b.h,
                        None => oracle_area(a, image, margin),
                    };
                    (a, area)
                })
                .filter(|(_, area)| *area > 0.0)
                .collect();
            num_gt += gts.len();
            let mut dts: Vec<&Annotation> = preds.annotations.iter().filter(|p| p.image_id == image.id).collect();
            dts.sort_by(|a, b| {
                b.score
                    .unwrap()
                    .partial_cmp(&a.score.unwrap())
                    .unwrap()
                    .then(a.id.cmp(&b.id))
            });
            dts.truncate(max_dets);
            let mut used = vec![false; gts.len()];
            for d in dts {
                let mut best = None;
                let mut best_oks = -1.0;
                for (g, (ga, area)) in gts.iter().enumerate() {
                    let o = oracle_oks(ga, d, sigmas, *area);
                    if !used[g] && o >= thr && o > best_oks {
                        best = Some(g);
                        best_oks = o;
                    }
                }
                if let Some(g) = best {
                    used[g] = true;
                }
                ranked.push((d.score.unwrap(), d.id, best.is_some()));
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut points = Vec::new();
        let mut tp = 0.0;
        for (i, &(_, _, hit)) in ranked.iter().enumerate() {
            if hit {
                tp += 1.0;
            }
            points.push((tp / num_gt as f64, tp / (i + 1) as f64));
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            let best = points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += best;
        }
        aps.push(100.0 * ap / 101.0);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// A small randomized gt/prediction pair: up to 4 images, 3 gt and 3
/// predictions per image, 5 keypoints.
pub fn random_eval_instance(seed: u64) -> (PoseDataset, PoseDataset, Vec<f64>) {
    use rand::Rng;
    let mut rng = panpose::rng::seeded(seed);
    let m = rng.gen_range(1..=5);
    let vocabulary = vocab(m);
    let mut gt = PoseDataset::new("gt", vocabulary.clone());
    let mut preds = PoseDataset::new("pred", vocabulary);
    let sigmas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.03..0.12)).collect();
    let (mut gid, mut pid) = (0u64, 0u64);
    for image_id in 0..rng.gen_range(1..=4u64) {
        let image = ImageRecord::new(image_id, format!("{image_id}.png"), 160, 120);
        let mut centres = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let (cx, cy) = (rng.gen_range(20.0..140.0), rng.gen_range(20.0..100.0));
            centres.push((cx, cy));
            let kps = (0..m)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        Keypoint::ABSENT
                    } else {
                        Keypoint::new(cx + rng.gen_range(-15.0..15.0), cy + rng.gen_range(-15.0..15.0), rng.gen_range(1..=2))
                    }
                })
                .collect();
            let mut a = Annotation::new(gid, image_id, kps);
            if rng.gen_bool(0.3) {
                a = a.with_bbox(panpose::BBox::new(cx - 20.0, cy - 20.0, rng.gen_range(10.0..60.0), 40.0));
            }
            gt.annotations.push(a);
            gid += 1;
        }
        for _ in 0..rng.gen_range(0..=3) {
            let (cx, cy) = if !centres.is_empty() && rng.gen_bool(0.7) {
                centres[rng.gen_range(0..centres.len())]
            } else {
                (rng.gen_range(20.0..140.0), rng.gen_range(20.0..100.0))
            };
            let src: Vec<Keypoint> = gt
                .annotations
                .iter()
                .rev()
                .find(|a| a.image_id == image_id)
                .map(|a| a.keypoints.clone())
                .unwrap_or_default();
            let jitter = rng.gen_range(0.0..8.0);
            let kps = (0..m)
                .map(|k| {
                    let (bx, by) = match src.get(k) {
                        Some(kp) if kp.v > 0 && rng.gen_bool(0.5) => (kp.x, kp.y),
                        _ => (cx, cy),
                    };
                    Keypoint::visible(bx + rng.gen_range(-jitter..=jitter), by + rng.gen_range(-jitter..=jitter))
                })
                .collect();
            preds
                .annotations
                .push(Annotation::new(pid, image_id, kps).with_score(rng.gen_range(0.0..1.0)));
            pid += 1;
        }
        gt.images.push(image.clone());
        preds.images.push(image);
    }
    // at least one labeled gt so the evaluation is defined
    if !gt.annotations.iter().any(|a| a.present_count() > 0) {
        gt.annotations.push(ann(gid, 0, &vec![(50.0, 50.0); m]));
    }
    (gt, preds, sigmas)
}

/// Central finite-difference check of the masked loss gradient. Returns
/// (worst relative error on supervised channels, whether every masked entry
/// was exactly zero).
pub fn finite_difference_check(seed: u64) -> (f64, bool) {
    use panpose::heatmap::HeatmapStack;
    use rand::Rng;
    let mut rng = panpose::rng::seeded(seed);
    let m = rng.gen_range(1..=5);
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let mut pred = HeatmapStack::zeros(m, h, w, 4);
    let mut target = HeatmapStack::zeros(m, h, w, 4);
    for v in pred.values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in target.values_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let mask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.6)).collect();
    target.set_mask(mask.clone()).unwrap();
    let grad = panpose::masked_mse_grad(&pred, &target, true).unwrap();
    let loss = |p: &HeatmapStack| panpose::masked_mse(p, &target, true).unwrap().total;
    let eps = 1e-6;
    let plane = h * w;
    let mut worst = 0.0f64;
    let mut zeros = true;
    for i in 0..m * plane {
        let k = i / plane;
        let analytic = grad.values()[i];
        if !mask[k] {
            zeros &= analytic == 0.0;
            continue;
        }
        let mut plus = pred.clone();
        plus.values_mut()[i] += eps;
        let mut minus = pred.clone();
        minus.values_mut()[i] -= eps;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    (worst, zeros)
}
