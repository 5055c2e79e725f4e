//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are pinned in the constants below.

mod common;

use std::time::{Duration, Instant};

use panpose::dataset::validate;
use panpose::eval::{heuristic_bbox, EvalParams, SigmaConfig, DEFAULT_BBOX_MARGIN};
use panpose::experiments::{drop_keypoints, subsample_images, synthesize_pseudo_labels, SplitSpec};
use panpose::heatmap::{
    decode_heatmaps, encode_targets, group_by_tags, DecodeMode, DecodeParams, EncodeParams, GroupParams, TagMap,
};
use panpose::merge::{build_superset, coverage, project_dataset, ConversionTable};
use panpose::synthetic::MaskingExperiment;
use panpose::training::{finetune_pseudo, FeaturePlanes, FinetuneOverride, TrainConfig, TrainSample};
use panpose::{evaluate, read_dataset, Annotation, BBox, ImageRecord, Keypoint, PoseDataset, ToyPredictor};
use rand::Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(5);
const AB_SEEDS: u64 = 10;
const AB_MIN_WINS: usize = 9;
const AB_MIN_ERROR_RATIO: f64 = 2.0;
const AB_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-9;
const ROUND_TRIP_MAX_PX: f64 = 2.0;
const ROUND_TRIP_MEAN_PX: f64 = 1.0;
const BBOX_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradient() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut zeros = true;
    for seed in 0..100 {
        let (rel, z) = common::finite_difference_check(seed);
        worst = worst.max(rel);
        zeros &= z;
    }
    let elapsed = start.elapsed();
    check(
        worst <= GRAD_REL_TOL && zeros && elapsed < GRAD_BUDGET,
        format!("max rel err {worst:.2e}, masked entries all zero: {zeros}, {elapsed:.2?}"),
    )
}

fn c2_masking_ab() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut ratios = Vec::new();
    let mut maps = Vec::new();
    for seed in 0..AB_SEEDS {
        let cmp = MaskingExperiment {
            seed,
            ..Default::default()
        }
        .compare()
        .map_err(|e| e.to_string())?;
        if cmp.masked_wins() {
            wins += 1;
        }
        ratios.push(cmp.cross_source_error_ratio());
        maps.push((cmp.masked.map, cmp.unmasked.map));
    }
    let elapsed = start.elapsed();
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = |f: fn(&(f64, f64)) -> f64| maps.iter().map(f).sum::<f64>() / maps.len() as f64;
    check(
        wins >= AB_MIN_WINS && min_ratio >= AB_MIN_ERROR_RATIO && elapsed < AB_BUDGET,
        format!(
            "masked wins {wins}/{AB_SEEDS}, mean mAP masked {:.1} vs unmasked {:.1}, min cross-source error ratio {min_ratio:.2}, {elapsed:.2?}",
            mean(|m| m.0),
            mean(|m| m.1)
        ),
    )
}

fn load_family(dir: &str) -> Result<(ConversionTable, Vec<PoseDataset>), String> {
    let root = common::fixtures().join(dir);
    let table = ConversionTable::read(root.join("table.csv"), None).map_err(|e| e.to_string())?;
    let mut paths: Vec<_> = std::fs::read_dir(root.join("sources"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    let datasets = paths
        .iter()
        .map(|p| read_dataset(p).map(|d| d.dataset).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok((table, datasets))
}

fn c3_merge() -> Outcome {
    let (mice_table, mice) = load_family("labmice3k")?;
    let (quad_table, quads) = load_family("quadruped40k")?;
    let mice_superset = build_superset(&mice_table, &mice).map_err(|e| e.to_string())?;
    let quad_superset = build_superset(&quad_table, &quads).map_err(|e| e.to_string())?;

    let openfield = mice.iter().find(|d| d.name == "Openfield").ok_or("no Openfield fixture")?;
    let projected = project_dataset(openfield, &mice_table, &mice_superset)
        .map_err(|e| e.to_string())?
        .dataset;
    let mut nonzero: Vec<&str> = (0..mice_superset.len())
        .filter(|&k| projected.annotations.iter().any(|a| a.keypoints[k].is_present()))
        .map(|k| mice_superset.names()[k].as_str())
        .collect();
    nonzero.sort_unstable();
    let expected = ["left_ear", "nose", "right_ear", "tail_base"];
    check(
        mice_superset.len() == 26 && quad_superset.len() == 39 && nonzero == expected,
        format!(
            "supersets {} / {}, Openfield channels {:?} (coverage {:.3})",
            mice_superset.len(),
            quad_superset.len(),
            nonzero,
            coverage(&projected)
        ),
    )
}

fn c4_evaluator() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let (gt, preds, sigmas) = common::random_eval_instance(1000 + seed);
        let report = evaluate(&gt, &preds, &SigmaConfig::new(sigmas.clone()).unwrap(), EvalParams::default())
            .map_err(|e| e.to_string())?;
        let oracle = common::oracle_map(&gt, &preds, &sigmas, DEFAULT_BBOX_MARGIN, 20);
        worst = worst.max((report.map - oracle).abs());
    }

    let (gt, _, sigmas) = common::random_eval_instance(7);
    let sigmas = SigmaConfig::new(sigmas).unwrap();
    let mut perfect = gt.with_images_only();
    perfect.annotations = gt
        .annotations
        .iter()
        .filter(|a| a.present_count() > 0)
        .map(|a| a.clone().with_score(1.0))
        .collect();
    let perfect_map = evaluate(&gt, &perfect, &sigmas, EvalParams::default())
        .map_err(|e| e.to_string())?
        .map;
    let empty_map = evaluate(&gt, &gt.with_images_only(), &sigmas, EvalParams::default())
        .map_err(|e| e.to_string())?
        .map;
    check(
        worst <= ORACLE_TOL && perfect_map == 100.0 && empty_map == 0.0,
        format!("max |mAP - oracle| {worst:.1e} over 50 instances, perfect {perfect_map}, empty {empty_map}"),
    )
}

fn c5_round_trip() -> Outcome {
    let params = EncodeParams::default();
    let border = 3.0 * params.sigma * f64::from(params.stride);
    let mut rng = panpose::rng::seeded(5);
    let mut errors = Vec::new();
    for i in 0..100u64 {
        let (w, h) = (rng.gen_range(80..240u32), rng.gen_range(80..240u32));
        let image = ImageRecord::new(i, "rt.png", w, h);
        let m = rng.gen_range(1..=6);
        let kps: Vec<Keypoint> = (0..m)
            .map(|_| {
                Keypoint::visible(
                    rng.gen_range(border..f64::from(w) - border),
                    rng.gen_range(border..f64::from(h) - border),
                )
            })
            .collect();
        let ann = Annotation::new(i, i, kps.clone());
        let stack = encode_targets(&[&ann], &image, m, params).map_err(|e| e.to_string())?;
        let dets = decode_heatmaps(
            &stack,
            DecodeParams {
                threshold: 0.1,
                mode: DecodeMode::SingleInstance,
            },
        );
        if dets.len() != m {
            return Err(format!("annotation {i}: {} of {m} keypoints decoded", dets.len()));
        }
        for d in dets {
            let kp = kps[d.keypoint];
            errors.push(((d.x - kp.x).powi(2) + (d.y - kp.y).powi(2)).sqrt());
        }
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    check(
        max <= ROUND_TRIP_MAX_PX && mean <= ROUND_TRIP_MEAN_PX,
        format!("{} keypoints, max err {max:.3} px, mean err {mean:.3} px", errors.len()),
    )
}

fn c6_pseudo_labels() -> Outcome {
    let vocab = common::vocab(3);
    let mut preds = PoseDataset::new("predictions", vocab);
    preds.images.push(ImageRecord::new(0, "a.png", 64, 64));
    preds.images.push(ImageRecord::new(1, "b.png", 64, 64));
    preds
        .annotations
        .push(common::ann(0, 0, &[(10.0, 12.0), (20.0, 22.0), (30.0, 33.0)]).with_score(0.9));
    preds
        .annotations
        .push(common::ann(1, 1, &[(40.0, 40.0), (44.0, 48.0), (50.0, 60.0)]).with_score(0.01));
    let pseudo = synthesize_pseudo_labels(&preds).map_err(|e| e.to_string())?;
    let errors = validate(&pseudo).error_count();
    let all_v2 = pseudo
        .annotations
        .iter()
        .flat_map(|a| &a.keypoints)
        .all(|kp| kp.v == 2);
    let low_score_kept = pseudo.annotations.iter().any(|a| a.id == 1);

    let img = ImageRecord::new(0, "a.png", 16, 16);
    let target = encode_targets(&[&pseudo.annotations[0]], &img, 3, EncodeParams::default()).unwrap();
    let sample = TrainSample {
        features: FeaturePlanes::new(1, 4, 4, vec![1.0; 16]).unwrap(),
        target,
    };
    let base = TrainConfig::preset("bottom-up-finetune").unwrap();
    let outcome = finetune_pseudo(ToyPredictor::zeros(3, 1), &[sample], &base, FinetuneOverride::default())
        .map_err(|e| e.to_string())?;
    let epochs = outcome.history.len();
    let lrs_ok = outcome.history.iter().all(|r| r.lr == 1e-4);
    check(
        errors == 0 && all_v2 && low_score_kept && pseudo.annotations.len() == 2 && epochs == 5 && lrs_ok,
        format!(
            "validation errors {errors}, all v=2: {all_v2}, score-0.01 prediction kept: {low_score_kept}, fine-tune epochs {epochs} at lr 1e-4: {lrs_ok}"
        ),
    )
}

fn sized(n: u64, m: usize) -> PoseDataset {
    let mut ds = PoseDataset::new(format!("n{n}"), common::vocab(m));
    for i in 0..n {
        ds.images.push(ImageRecord::new(i, format!("{i}.png"), 64, 64));
        let kps = (0..m).map(|k| Keypoint::visible(k as f64 + 1.0, 5.0)).collect();
        ds.annotations.push(Annotation::new(i, i, kps));
    }
    ds
}

fn c7_splits() -> Outcome {
    let counts: Vec<usize> = [744u64, 436, 312, 112]
        .iter()
        .map(|&n| subsample_images(&sized(n, 1), &SplitSpec::data_ratio(0.01, 0)).map(|s| s.kept_image_ids.len()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let again = subsample_images(&sized(744, 1), &SplitSpec::data_ratio(0.01, 0)).unwrap();
    let first = subsample_images(&sized(744, 1), &SplitSpec::data_ratio(0.01, 0)).unwrap();
    let deterministic = again.kept_image_ids == first.kept_image_ids;

    let train = sized(40, 26);
    let test = sized(10, 26);
    let test_before = test.clone();
    let dropped = drop_keypoints(&train, &SplitSpec::sparse_keypoints(0.9, 0)).map_err(|e| e.to_string())?;
    let same_everywhere = dropped.dataset.annotations.iter().all(|a| {
        (0..26).all(|k| a.keypoints[k].is_present() != dropped.channels.contains(&k))
    });
    check(
        counts == [7, 4, 3, 1] && deterministic && dropped.channels.len() == 24 && same_everywhere && test == test_before,
        format!(
            "1% counts {counts:?}, repeatable: {deterministic}, dropped {} of 26 channels in every training annotation: {same_everywhere}, test split untouched: {}",
            dropped.channels.len(),
            test == test_before
        ),
    )
}

fn c8_bbox() -> Outcome {
    let cases = [
        // near the origin: the corner clamps to (0, 0)
        (ImageRecord::new(0, "a.png", 200, 200), vec![(10.0, 10.0), (50.0, 40.0)], BBox::new(0.0, 0.0, 100.0, 90.0)),
        // interior: grown by 30 on each side
        (ImageRecord::new(1, "b.png", 640, 480), vec![(100.0, 80.0), (150.0, 120.0), (120.0, 100.0)], BBox::new(70.0, 50.0, 110.0, 100.0)),
        // far corner: size limited to what is left of the image
        (ImageRecord::new(2, "c.png", 640, 480), vec![(600.0, 450.0), (630.0, 470.0)], BBox::new(570.0, 420.0, 70.0, 60.0)),
    ];
    let mut got = Vec::new();
    let mut ok = true;
    for (image, pts, expected) in &cases {
        let b = heuristic_bbox(&common::ann(0, image.id, pts), image, DEFAULT_BBOX_MARGIN).map_err(|e| e.to_string())?;
        ok &= (b.x - expected.x).abs() <= BBOX_TOL
            && (b.y - expected.y).abs() <= BBOX_TOL
            && (b.w - expected.w).abs() <= BBOX_TOL
            && (b.h - expected.h).abs() <= BBOX_TOL;
        got.push(format!("({}, {}, {}, {})", b.x, b.y, b.w, b.h));
    }
    check(ok, format!("boxes {}", got.join(" ")))
}

/// Three animals in a 64x64 heatmap, each showing two of six keypoints
/// (the rest occluded), as a crowded top view would.
fn crowded_scene(tags_for: impl Fn(usize) -> f64) -> (Vec<panpose::heatmap::Detection>, TagMap) {
    let params = EncodeParams::default();
    let image = ImageRecord::new(0, "crowd.png", 256, 256);
    let animals = [
        [(40.0, 40.0), (60.0, 48.0)],
        [(140.0, 60.0), (160.0, 80.0)],
        [(80.0, 180.0), (100.0, 200.0)],
    ];
    let mut anns = Vec::new();
    for (i, pts) in animals.iter().enumerate() {
        let mut kps = vec![Keypoint::ABSENT; 6];
        kps[2 * i] = Keypoint::visible(pts[0].0, pts[0].1);
        kps[2 * i + 1] = Keypoint::visible(pts[1].0, pts[1].1);
        anns.push(Annotation::new(i as u64, 0, kps));
    }
    let refs: Vec<&Annotation> = anns.iter().collect();
    let stack = encode_targets(&refs, &image, 6, params).unwrap();
    let dets = decode_heatmaps(&stack, DecodeParams::default());
    let mut tags = TagMap::filled(6, stack.height(), stack.width(), 0.0);
    for d in &dets {
        let (row, col) = ((d.y / 4.0).round() as usize, (d.x / 4.0).round() as usize);
        tags.set(d.keypoint, row, col, tags_for(d.keypoint / 2));
    }
    (dets, tags)
}

/// Fully visible animals with collapsed tags: grouping still yields one group
/// per animal (each channel may appear once per group) but assembles them
/// from the wrong parts.
fn mixed_assembly() -> bool {
    let mut dets = Vec::new();
    let positions = [[(8.0, 8.0), (16.0, 8.0)], [(100.0, 100.0), (108.0, 100.0)], [(200.0, 40.0), (208.0, 40.0)]];
    let scores = [[0.9, 0.5], [0.8, 0.7], [0.7, 0.9]];
    for (i, pts) in positions.iter().enumerate() {
        for k in 0..2 {
            dets.push(panpose::heatmap::Detection {
                keypoint: k,
                x: pts[k].0,
                y: pts[k].1,
                score: scores[i][k],
            });
        }
    }
    let tags = TagMap::filled(2, 64, 64, 0.0);
    let groups = group_by_tags(&dets, &tags, GroupParams::default(), 0).unwrap();
    groups.iter().any(|g| {
        let (a, b) = (g.keypoints[0], g.keypoints[1]);
        (a.x - b.x).abs() > 8.0 || (a.y - b.y).abs() > 0.0
    })
}

fn c9_grouping() -> Outcome {
    let (dets, collapsed) = crowded_scene(|_| 0.5);
    let merged = group_by_tags(&dets, &collapsed, GroupParams::default(), 0).map_err(|e| e.to_string())?;
    let (dets, separated) = crowded_scene(|animal| 3.0 * animal as f64);
    let split = group_by_tags(&dets, &separated, GroupParams::default(), 0).map_err(|e| e.to_string())?;
    let channel_unique = split.iter().all(|g| g.num_keypoints == 2)
        && split.iter().enumerate().all(|(i, g)| {
            g.keypoints[2 * i].is_present() && g.keypoints[2 * i + 1].is_present()
        });
    let mixed = mixed_assembly();
    check(
        merged.len() < 3 && split.len() == 3 && channel_unique && mixed,
        format!(
            "collapsed tags -> {} group(s), separated tags -> {} groups (one animal each: {channel_unique}), fully visible collapsed scene mis-assembled: {mixed}",
            merged.len(),
            split.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("masked gradient matches finite differences", c1_gradient),
        ("gradient masking improves cross-source channels", c2_masking_ab),
        ("conversion tables give 26/39-name supersets", c3_merge),
        ("evaluator agrees with brute-force oracle", c4_evaluator),
        ("heatmap encode/decode round trip", c5_round_trip),
        ("pseudo-label contract", c6_pseudo_labels),
        ("seeded splits and subsample counts", c7_splits),
        ("heuristic bounding boxes", c8_bbox),
        ("tag grouping with collapsed and separated tags", c9_grouping),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
