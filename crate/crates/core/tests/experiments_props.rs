mod common;

use panpose::experiments::{
    drop_keypoints, dropped_channels, subsample_count, subsample_images, synthesize_pseudo_labels, Rounding, SplitSpec,
};
use panpose::{Annotation, ImageRecord, Keypoint, PoseDataset};
use proptest::prelude::*;

fn dataset(n: u64, m: usize) -> PoseDataset {
    let mut ds = PoseDataset::new("d", common::vocab(m));
    for i in 0..n {
        ds.images.push(ImageRecord::new(10 * i + 3, format!("{i}.png"), 64, 64));
        let kps = (0..m).map(|k| Keypoint::visible(k as f64, 1.0)).collect();
        ds.annotations.push(Annotation::new(i, 10 * i + 3, kps));
    }
    ds
}

proptest! {
    #[test]
    fn subsample_is_a_seeded_subset(n in 1u64..300, fraction in 0.001..1.0f64, seed in any::<u64>()) {
        let ds = dataset(n, 2);
        let spec = SplitSpec::data_ratio(fraction, seed);
        let a = subsample_images(&ds, &spec).unwrap();
        let b = subsample_images(&ds, &spec).unwrap();
        prop_assert_eq!(&a.kept_image_ids, &b.kept_image_ids);
        prop_assert_eq!(a.kept_image_ids.len(), subsample_count(n as usize, &spec));
        prop_assert!(!a.kept_image_ids.is_empty());
        prop_assert!(a.kept_image_ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(a.dataset.annotations.len(), a.dataset.images.len());
        for ann in &a.dataset.annotations {
            prop_assert!(a.kept_image_ids.contains(&ann.image_id));
        }
    }

    #[test]
    fn drop_then_subsample_commutes(n in 2u64..60, seed in any::<u64>(), drop in 0.0..0.8f64) {
        let ds = dataset(n, 10);
        let sub = SplitSpec::data_ratio(0.5, seed);
        let sparse = SplitSpec::sparse_keypoints(drop, seed);
        let a = subsample_images(&drop_keypoints(&ds, &sparse).unwrap().dataset, &sub).unwrap().dataset;
        let b = drop_keypoints(&subsample_images(&ds, &sub).unwrap().dataset, &sparse).unwrap().dataset;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dropped_channels_depend_only_on_size_and_seed(m in 2usize..40, drop in 0.0..0.5f64, seed in any::<u64>()) {
        let spec = SplitSpec::sparse_keypoints(drop, seed);
        let channels = dropped_channels(m, &spec).unwrap();
        let out = drop_keypoints(&dataset(3, m), &spec).unwrap();
        prop_assert_eq!(&out.channels, &channels);
        prop_assert_eq!(channels.len(), (drop * m as f64 - 1e-9).ceil() as usize);
        for ann in &out.dataset.annotations {
            prop_assert_eq!(ann.num_keypoints, m - channels.len());
        }
    }
}

#[test]
fn rounding_modes() {
    let spec = |r| SplitSpec::data_ratio(0.01, 0).with_rounding(r);
    assert_eq!(subsample_count(150, &spec(Rounding::FloorMinOne)), 1);
    assert_eq!(subsample_count(150, &spec(Rounding::Ceil)), 2);
    assert_eq!(subsample_count(150, &spec(Rounding::Nearest)), 2);
    assert_eq!(subsample_count(10, &spec(Rounding::FloorMinOne)), 1);
}

#[test]
fn pseudo_labels_from_fixture_predictions() {
    let mut preds = dataset(3, 4);
    for (i, a) in preds.annotations.iter_mut().enumerate() {
        a.keypoints[1] = Keypoint::ABSENT;
        a.keypoints[2].v = 1;
        a.recount();
        a.score = Some(0.1 * i as f64);
    }
    let pseudo = synthesize_pseudo_labels(&preds).unwrap();
    assert_eq!(pseudo.annotations.len(), 3);
    assert_eq!(pseudo.metadata.get("pseudo_labels").map(String::as_str), Some("true"));
    for a in &pseudo.annotations {
        assert_eq!(a.keypoints[1], Keypoint::ABSENT);
        assert!(a.keypoints.iter().filter(|k| k.is_present()).all(|k| k.v == 2));
        assert!(a.score.is_none() && a.bbox.is_some());
    }
    assert_eq!(panpose::dataset::validate(&pseudo).error_count(), 0);
}
