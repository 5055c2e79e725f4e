//! Synthetic scenes and feature planes for desk-scale training runs.
//!
//! Every image gets `2 + 2m` feature planes: normalised row and column
//! grids, one "appearance" plane per keypoint (a noisy copy of that
//! keypoint's Gaussian) and one "style" plane per keypoint, which carries
//! the same Gaussian only for images of the styled source and is zero
//! elsewhere. The style planes let a linear model tell the two sources
//! apart, which is what lets unmasked training learn to suppress channels
//! a source never labels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dataset::{Annotation, ImageRecord, Keypoint, KeypointVocabulary, PoseDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalParams, SigmaConfig};
use crate::heatmap::{draw_gaussian, encode_targets, heatmap_size, single_instance_prediction, EncodeParams};
use crate::rng::{self, ProtocolRng};
use crate::training::{train, FeaturePlanes, ToyPredictor, TrainConfig, TrainSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureRenderer {
    pub num_keypoints: usize,
    pub encode: EncodeParams,
    /// Standard deviation of the additive Gaussian noise on every plane.
    pub noise: f64,
}

impl FeatureRenderer {
    pub fn feature_count(&self) -> usize {
        2 + 2 * self.num_keypoints
    }

    /// Renders the planes for one image from the keypoints in `truth`
    /// (absent keypoints leave their planes as pure noise).
    pub fn render(
        &self,
        image: &ImageRecord,
        truth: &[&Annotation],
        styled: bool,
        rng: &mut ProtocolRng,
    ) -> Result<FeaturePlanes> {
        let m = self.num_keypoints;
        let (h, w) = heatmap_size(image, self.encode.stride);
        let n = h * w;
        let mut values = vec![0.0; self.feature_count() * n];
        for row in 0..h {
            for col in 0..w {
                values[row * w + col] = row as f64 / h as f64;
                values[n + row * w + col] = col as f64 / w as f64;
            }
        }
        let stride = f64::from(self.encode.stride);
        for ann in truth {
            if ann.keypoints.len() != m {
                return Err(Error::Parameter(format!(
                    "annotation {} has {} keypoints, renderer expects {m}",
                    ann.id,
                    ann.keypoints.len()
                )));
            }
            for (k, kp) in ann.keypoints.iter().enumerate() {
                if !kp.is_present() {
                    continue;
                }
                let (cx, cy) = (kp.x / stride, kp.y / stride);
                let appearance = (2 + k) * n;
                draw_gaussian(&mut values[appearance..appearance + n], h, w, cx, cy, self.encode.sigma);
                if styled {
                    let style = (2 + m + k) * n;
                    draw_gaussian(&mut values[style..style + n], h, w, cx, cy, self.encode.sigma);
                }
            }
        }
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise)
                .map_err(|e| Error::Parameter(format!("feature noise: {e}")))?;
            let noisy_from = 2 * n;
            let noisy_to = if styled { values.len() } else { (2 + m) * n };
            for v in &mut values[noisy_from..noisy_to] {
                *v += normal.sample(rng);
            }
        }
        FeaturePlanes::new(self.feature_count(), h, w, values)
    }
}

/// Training samples for every image of `ds`: features from the dataset's own
/// labels, targets from [`encode_targets`]. Images whose source equals
/// `styled_source` get style planes.
pub fn samples_from_dataset(
    ds: &PoseDataset,
    renderer: &FeatureRenderer,
    styled_source: Option<&str>,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let by_image = ds.annotations_by_image();
    let mut rng = rng::seeded(seed);
    ds.images
        .iter()
        .map(|img| {
            let anns = by_image.get(&img.id).cloned().unwrap_or_default();
            let styled = styled_source.is_some() && img.source.as_deref() == styled_source;
            Ok(TrainSample {
                features: renderer.render(img, &anns, styled, &mut rng)?,
                target: encode_targets(&anns, img, renderer.num_keypoints, renderer.encode)?,
            })
        })
        .collect()
}

/// Single-instance predictions for every image, one annotation per image
/// that has at least one peak above `threshold`.
pub fn predict_dataset(
    predictor: &ToyPredictor,
    images: &[ImageRecord],
    features: &[FeaturePlanes],
    stride: u32,
    threshold: f64,
    vocabulary: &KeypointVocabulary,
) -> Result<PoseDataset> {
    let mut out = PoseDataset::new("predictions", vocabulary.clone());
    out.images = images.to_vec();
    for (img, feat) in images.iter().zip(features) {
        let stack = predictor.predict(feat, stride)?;
        let id = out.annotations.len() as u64;
        if let Some(ann) = single_instance_prediction(&stack, threshold, id, img.id) {
            out.annotations.push(ann);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingExperiment {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: u32,
    pub num_keypoints: usize,
    /// Channels `0..split` belong to source A, `split..m` to source B.
    pub split: usize,
    pub noise: f64,
    pub peak_threshold: f64,
    pub sigma_oks: f64,
    pub train: TrainConfig,
}

impl Default for MaskingExperiment {
    fn default() -> Self {
        Self {
            seed: 0,
            train_images: 200,
            test_images: 100,
            image_size: 64,
            num_keypoints: 6,
            split: 3,
            noise: 0.05,
            peak_threshold: 0.1,
            sigma_oks: 0.1,
            train: TrainConfig {
                learning_rate: 2e-2,
                epochs: 40,
                batch_size: 20,
                ..TrainConfig::toy()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingRun {
    pub masking_enabled: bool,
    /// Test mAP on the densely labeled test set, 0-100.
    pub map: f64,
    /// Mean per-image squared heatmap error of each channel on the test set.
    pub per_channel_error: Vec<f64>,
    /// Mean error over channels the image's own source never labels.
    pub cross_source_error: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingComparison {
    pub seed: u64,
    pub masked: MaskingRun,
    pub unmasked: MaskingRun,
}

impl MaskingComparison {
    pub fn masked_wins(&self) -> bool {
        self.masked.map > self.unmasked.map
    }

    pub fn cross_source_error_ratio(&self) -> f64 {
        self.unmasked.cross_source_error / self.masked.cross_source_error
    }
}

struct Scene {
    image: ImageRecord,
    /// All keypoints, labeled.
    dense: Annotation,
    source: usize,
}

struct Prepared {
    vocabulary: KeypointVocabulary,
    train: Vec<TrainSample>,
    test_features: Vec<FeaturePlanes>,
    test_targets: Vec<crate::heatmap::HeatmapStack>,
    test_gt: PoseDataset,
    test_sources: Vec<usize>,
    renderer: FeatureRenderer,
}

impl MaskingExperiment {
    fn scene(&self, id: u64, source: usize, rng: &mut ProtocolRng) -> Scene {
        let size = f64::from(self.image_size);
        let margin = 8.0;
        let spread = size * 0.25;
        let cx = rng.gen_range(margin + spread..size - margin - spread);
        let cy = rng.gen_range(margin + spread..size - margin - spread);
        let keypoints = (0..self.num_keypoints)
            .map(|_| {
                let x = cx + rng.gen_range(-spread..spread);
                let y = cy + rng.gen_range(-spread..spread);
                Keypoint::visible(x, y)
            })
            .collect();
        Scene {
            image: ImageRecord::new(id, format!("scene{id:04}.png"), self.image_size, self.image_size),
            dense: Annotation::new(id, id, keypoints),
            source,
        }
    }

    /// Source-specific labels: only the channels the source annotates.
    fn labeled(&self, scene: &Scene) -> Annotation {
        let keypoints = scene
            .dense
            .keypoints
            .iter()
            .enumerate()
            .map(|(k, kp)| {
                let owned = if scene.source == 0 { k < self.split } else { k >= self.split };
                if owned {
                    *kp
                } else {
                    Keypoint::ABSENT
                }
            })
            .collect();
        Annotation::new(scene.dense.id, scene.dense.image_id, keypoints)
    }

    fn prepare(&self) -> Result<Prepared> {
        if self.split == 0 || self.split >= self.num_keypoints {
            return Err(Error::Parameter("channel split must leave both sources a channel".into()));
        }
        let renderer = FeatureRenderer {
            num_keypoints: self.num_keypoints,
            encode: EncodeParams::default(),
            noise: self.noise,
        };
        let vocabulary = KeypointVocabulary::new((0..self.num_keypoints).map(|k| format!("kp{k}")))?;
        let mut rng = rng::seeded(self.seed);

        let mut train = Vec::with_capacity(self.train_images);
        for i in 0..self.train_images {
            let source = usize::from(i >= self.train_images / 2);
            let scene = self.scene(i as u64, source, &mut rng);
            let labeled = self.labeled(&scene);
            // features see the whole animal; targets only what the source labels
            train.push(TrainSample {
                features: renderer.render(&scene.image, &[&scene.dense], source == 0, &mut rng)?,
                target: encode_targets(&[&labeled], &scene.image, self.num_keypoints, renderer.encode)?,
            });
        }

        let mut test_gt = PoseDataset::new("synthetic-test", vocabulary.clone());
        let mut test_features = Vec::new();
        let mut test_targets = Vec::new();
        let mut test_sources = Vec::new();
        for i in 0..self.test_images {
            let source = i % 2;
            let scene = self.scene(i as u64, source, &mut rng);
            test_features.push(renderer.render(&scene.image, &[&scene.dense], source == 0, &mut rng)?);
            test_targets.push(encode_targets(&[&scene.dense], &scene.image, self.num_keypoints, renderer.encode)?);
            test_sources.push(source);
            test_gt.images.push(scene.image);
            test_gt.annotations.push(scene.dense);
        }
        Ok(Prepared {
            vocabulary,
            train,
            test_features,
            test_targets,
            test_gt,
            test_sources,
            renderer,
        })
    }

    fn run_prepared(&self, prepared: &Prepared, masking: bool) -> Result<MaskingRun> {
        let config = TrainConfig {
            masking_enabled: masking,
            seed: self.seed,
            ..self.train.clone()
        };
        let outcome = train(
            ToyPredictor::zeros(self.num_keypoints, prepared.renderer.feature_count()),
            &prepared.train,
            &config,
        )?;
        let stride = prepared.renderer.encode.stride;
        let predictions = predict_dataset(
            &outcome.predictor,
            &prepared.test_gt.images,
            &prepared.test_features,
            stride,
            self.peak_threshold,
            &prepared.vocabulary,
        )?;
        let sigmas = SigmaConfig::broadcast(self.sigma_oks, self.num_keypoints)?;
        let report = evaluate(&prepared.test_gt, &predictions, &sigmas, EvalParams::default())?;

        let m = self.num_keypoints;
        let mut per_channel = vec![0.0; m];
        let mut cross = 0.0;
        let mut cross_count = 0usize;
        for ((feat, target), &source) in prepared
            .test_features
            .iter()
            .zip(&prepared.test_targets)
            .zip(&prepared.test_sources)
        {
            let pred = outcome.predictor.predict(feat, stride)?;
            for (k, slot) in per_channel.iter_mut().enumerate() {
                let err: f64 = pred
                    .channel(k)
                    .iter()
                    .zip(target.channel(k))
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum();
                *slot += err;
                let own = if source == 0 { k < self.split } else { k >= self.split };
                if !own {
                    cross += err;
                    cross_count += 1;
                }
            }
        }
        let n = prepared.test_features.len() as f64;
        per_channel.iter_mut().for_each(|e| *e /= n);

        Ok(MaskingRun {
            masking_enabled: masking,
            map: report.map,
            per_channel_error: per_channel,
            cross_source_error: cross / cross_count.max(1) as f64,
            final_train_loss: outcome.history.last().map_or(f64::NAN, |r| r.total_loss),
        })
    }

    /// One training run on the synthetic merged set.
    pub fn run(&self, masking: bool) -> Result<MaskingRun> {
        self.run_prepared(&self.prepare()?, masking)
    }

    /// Masked and unmasked runs on identical data and shuffle order.
    pub fn compare(&self) -> Result<MaskingComparison> {
        let prepared = self.prepare()?;
        Ok(MaskingComparison {
            seed: self.seed,
            masked: self.run_prepared(&prepared, true)?,
            unmasked: self.run_prepared(&prepared, false)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_layout() {
        let r = FeatureRenderer {
            num_keypoints: 2,
            encode: EncodeParams::default(),
            noise: 0.0,
        };
        let img = ImageRecord::new(0, "a", 32, 32);
        let ann = Annotation::new(0, 0, vec![Keypoint::visible(8.0, 12.0), Keypoint::ABSENT]);
        let mut rng = rng::seeded(0);
        let plain = r.render(&img, &[&ann], false, &mut rng).unwrap();
        assert_eq!(plain.count(), 6);
        assert_eq!(plain.plane(2)[3 * 8 + 2], 1.0);
        assert!(plain.plane(3).iter().all(|&v| v == 0.0));
        assert!(plain.plane(4).iter().all(|&v| v == 0.0));
        let styled = r.render(&img, &[&ann], true, &mut rng).unwrap();
        assert_eq!(styled.plane(4)[3 * 8 + 2], 1.0);
        assert_eq!(plain.plane(1)[5], 5.0 / 8.0);
    }

    #[test]
    fn small_experiment_runs() {
        let exp = MaskingExperiment {
            train_images: 20,
            test_images: 6,
            train: TrainConfig {
                epochs: 3,
                ..MaskingExperiment::default().train
            },
            ..Default::default()
        };
        let cmp = exp.compare().unwrap();
        assert_eq!(cmp.masked.per_channel_error.len(), 6);
        assert!(cmp.masked.map >= 0.0 && cmp.masked.map <= 100.0);
    }
}
