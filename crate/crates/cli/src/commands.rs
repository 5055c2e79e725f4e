use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use log::{info, warn};
use panpose::dataset::{parse_dataset_lenient, validate, ParsedDataset};
use panpose::eval::{heuristic_bbox, EvalParams};
use panpose::experiments::{drop_keypoints, subsample_images, synthesize_pseudo_labels, SplitKind, SplitSpec};
use panpose::heatmap::{
    decode_heatmaps, encode_targets, group_by_tags, single_instance_prediction, DecodeMode, DecodeParams,
    GroupParams, HeatmapStack, TagMap, DEFAULT_PEAK_THRESHOLD,
};
use panpose::merge::{merge, merge_with_table, project_dataset, ConversionTable};
use panpose::synthetic::{predict_dataset, samples_from_dataset, FeatureRenderer, MaskingExperiment};
use panpose::training::{finetune_pseudo, write_loss_csv, EpochRecord, FinetuneOverride, TrainSample};
use panpose::{evaluate, KeypointVocabulary, PoseDataset, ToyPredictor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, usage, FileConfig};
use crate::{Cli, Command, DecodeModeArg, FeatureArgs, SplitKindArg};

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    let out = Output { json: cli.json };
    match &cli.command {
        Command::Validate { input } => validate_cmd(&out, input),
        Command::Merge(a) => {
            let datasets = a.inputs.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
            let (merged, report) = match &a.table {
                Some(table) => {
                    let table = ConversionTable::read(table, a.superset.as_deref())?;
                    merge_with_table(&table, &datasets)?
                }
                None => merge(&datasets)?,
            };
            write_dataset(&merged, &a.out)?;
            let report_json = serde_json::to_value(&report)?;
            if let Some(path) = &a.report {
                write_json(path, &report_json)?;
            }
            let mut text = format!(
                "merged {} datasets: {} images, {} annotations, {} keypoints -> {}\nsparsity {:.4}\n",
                datasets.len(),
                merged.images.len(),
                merged.annotations.len(),
                report.superset_size,
                a.out.display(),
                report.sparsity
            );
            for c in &report.per_dataset_coverage {
                text += &format!("  {:<20} coverage {:.4}\n", c.dataset, c.coverage);
            }
            for u in &report.unmapped_keypoints {
                text += &format!("  unmapped: {} / {}\n", u.dataset, u.keypoint);
            }
            out.emit(text, report_json);
            Ok(ExitCode::SUCCESS)
        }
        Command::Project(a) => {
            let ds = read(&a.input)?;
            let table = ConversionTable::read(&a.table, a.superset.as_deref())?;
            let superset = match table.declared_superset() {
                Some(s) => s.clone(),
                None => table_superset(&table)?,
            };
            let projection = project_dataset(&ds, &table, &superset)?;
            write_dataset(&projection.dataset, &a.out)?;
            out.emit(
                format!(
                    "projected `{}` onto {} keypoints -> {}\nunmapped: {}\n",
                    ds.name,
                    superset.len(),
                    a.out.display(),
                    if projection.unmapped.is_empty() { "none".to_string() } else { projection.unmapped.join(", ") }
                ),
                json!({"keypoints": superset.len(), "unmapped": projection.unmapped}),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Encode(a) => {
            let ds = read(&a.input)?;
            let mut params = cfg.encode_params();
            if let Some(s) = a.sigma {
                params.sigma = s;
            }
            if let Some(s) = a.stride {
                params.stride = s;
            }
            create_dir(&a.out_dir)?;
            let by_image = ds.annotations_by_image();
            for img in &ds.images {
                let anns = by_image.get(&img.id).cloned().unwrap_or_default();
                let stack = encode_targets(&anns, img, ds.num_keypoints(), params)?;
                stack.write_file(a.out_dir.join(format!("{}.hm", img.id)))?;
            }
            out.emit(
                format!(
                    "wrote {} heatmap stacks (sigma {}, stride {}) to {}\n",
                    ds.images.len(),
                    params.sigma,
                    params.stride,
                    a.out_dir.display()
                ),
                json!({"stacks": ds.images.len(), "sigma": params.sigma, "stride": params.stride}),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Decode(a) => decode_cmd(&out, &cfg, a),
        Command::Split(a) => split_cmd(&out, a, seed),
        Command::PseudoLabel { predictions, out: path } => {
            let preds = read(predictions)?;
            let pseudo = synthesize_pseudo_labels(&preds)?;
            write_dataset(&pseudo, path)?;
            let keypoints: usize = pseudo.annotations.iter().map(|a| a.num_keypoints).sum();
            out.emit(
                format!(
                    "{} pseudo-labeled annotations ({keypoints} keypoints) -> {}\n",
                    pseudo.annotations.len(),
                    path.display()
                ),
                json!({"annotations": pseudo.annotations.len(), "keypoints": keypoints}),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainToy(a) => {
            let ds = read(&a.dataset)?;
            let mut config = cfg.train_config(a.preset.as_deref())?;
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            if let Some(lr) = a.learning_rate {
                config.learning_rate = lr;
            }
            if let Some(b) = a.batch_size {
                config.batch_size = b;
            }
            if a.no_masking {
                config.masking_enabled = false;
            }
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let (renderer, samples) = render(&ds, &cfg, &a.features, config.seed)?;
            let outcome = panpose::train(ToyPredictor::zeros(ds.num_keypoints(), renderer.feature_count()), &samples, &config)?;
            outcome.predictor.save(&a.out)?;
            finish_training(&out, &outcome.history, a.loss_csv.as_deref(), &a.out)
        }
        Command::Predict(a) => {
            let ds = read(&a.dataset)?;
            let predictor = ToyPredictor::load(&a.params)?;
            let (renderer, samples) = render(&ds, &cfg, &a.features, seed)?;
            check_predictor(&predictor, &renderer)?;
            let features: Vec<_> = samples.into_iter().map(|s| s.features).collect();
            let threshold = a.threshold.or(cfg.decode().threshold).unwrap_or(DEFAULT_PEAK_THRESHOLD);
            let mut preds = predict_dataset(
                &predictor,
                &ds.images,
                &features,
                renderer.encode.stride,
                threshold,
                &ds.vocabulary,
            )?;
            preds.name = format!("{}-predictions", ds.name);
            write_dataset(&preds, &a.out)?;
            out.emit(
                format!("{} predictions -> {}\n", preds.annotations.len(), a.out.display()),
                json!({"predictions": preds.annotations.len()}),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::FinetunePseudo(a) => {
            let pseudo = read(&a.pseudo)?;
            let predictor = ToyPredictor::load(&a.params)?;
            let mut base = cfg.train_config(None)?;
            if let Some(s) = cli.seed {
                base.seed = s;
            }
            let (renderer, samples) = render(&pseudo, &cfg, &a.features, base.seed)?;
            check_predictor(&predictor, &renderer)?;
            let defaults = FinetuneOverride::default();
            let overrides = FinetuneOverride {
                learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
                epochs: a.epochs.unwrap_or(defaults.epochs),
            };
            let outcome = finetune_pseudo(predictor, &samples, &base, overrides)?;
            outcome.predictor.save(&a.out)?;
            finish_training(&out, &outcome.history, a.loss_csv.as_deref(), &a.out)
        }
        Command::BboxHeuristic {
            input,
            out: path,
            margin,
            overwrite,
        } => {
            let mut ds = read(input)?;
            let images = ds.images.clone();
            let (mut filled, mut skipped) = (0, 0);
            for ann in &mut ds.annotations {
                if ann.bbox.is_some() && !overwrite {
                    continue;
                }
                let image = images
                    .iter()
                    .find(|i| i.id == ann.image_id)
                    .ok_or_else(|| panpose::Error::Schema(format!("annotation {} has no image", ann.id)))?;
                match heuristic_bbox(ann, image, *margin) {
                    Ok(b) => {
                        ann.bbox = Some(b);
                        filled += 1;
                    }
                    Err(e) => {
                        warn!("{e}; left without a box");
                        skipped += 1;
                    }
                }
            }
            write_dataset(&ds, path)?;
            out.emit(
                format!("{filled} boxes generated, {skipped} annotations without keypoints -> {}\n", path.display()),
                json!({"filled": filled, "skipped": skipped}),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(a) => eval_cmd(&out, &cfg, a),
        Command::DemoMasking(a) => demo_cmd(&out, a, seed),
    }
}

struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, text: String, value: Value) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));
        } else {
            print!("{text}");
        }
    }
}

fn read(path: &Path) -> Result<PoseDataset> {
    let ParsedDataset { dataset, warnings } =
        panpose::read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    for w in &warnings {
        warn!("{}: {w}", path.display());
    }
    Ok(dataset)
}

fn write_dataset(ds: &PoseDataset, path: &Path) -> Result<()> {
    panpose::write_dataset(ds, path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| panpose::Error::io(path, e))?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| panpose::Error::io(path, e))?;
    Ok(())
}

/// Main names in table order, for tables without a declared superset.
fn table_superset(table: &ConversionTable) -> Result<KeypointVocabulary> {
    let mut names: Vec<&str> = Vec::new();
    for e in table.entries() {
        if !names.contains(&e.main_name.as_str()) {
            names.push(&e.main_name);
        }
    }
    Ok(KeypointVocabulary::new(names)?)
}

fn validate_cmd(out: &Output, input: &Path) -> Result<ExitCode> {
    let bytes = fs::read(input).map_err(|e| panpose::Error::io(input, e))?;
    let ds = parse_dataset_lenient(&bytes).with_context(|| format!("reading {}", input.display()))?;
    let report = validate(&ds);
    let mut text = format!(
        "{}: {} images, {} annotations, {} keypoints\n",
        input.display(),
        ds.images.len(),
        ds.annotations.len(),
        ds.num_keypoints()
    );
    for issue in &report.issues {
        text += &format!("  {issue}\n");
    }
    text += &format!(
        "{} error(s), {} warning(s)\n",
        report.error_count(),
        report.issues.len() - report.error_count()
    );
    out.emit(
        text,
        json!({
            "images": ds.images.len(),
            "annotations": ds.annotations.len(),
            "keypoints": ds.num_keypoints(),
            "issues": report.issues,
        }),
    );
    Ok(if report.has_errors() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn decode_cmd(out: &Output, cfg: &FileConfig, a: &crate::DecodeArgs) -> Result<ExitCode> {
    let ds = read(&a.dataset)?;
    let section = cfg.decode();
    let threshold = a.threshold.or(section.threshold).unwrap_or(DEFAULT_PEAK_THRESHOLD);
    let group = GroupParams {
        max_individuals: a.max_individuals.or(section.max_individuals).unwrap_or(GroupParams::default().max_individuals),
        tag_threshold: a.tag_threshold.or(section.tag_threshold).unwrap_or(GroupParams::default().tag_threshold),
        ..GroupParams::default()
    };
    let tags_dir = match (a.mode, &a.tags) {
        (DecodeModeArg::Multi, None) => return Err(usage("--mode multi needs --tags")),
        (_, tags) => tags.clone(),
    };
    let m = ds.num_keypoints();
    let mut preds = ds.with_images_only();
    preds.name = format!("{}-predictions", ds.name);
    let mut missing = 0;
    for img in &ds.images {
        let path = a.heatmaps.join(format!("{}.hm", img.id));
        if !path.exists() {
            missing += 1;
            warn!("no heatmaps for image {} ({})", img.id, path.display());
            continue;
        }
        let stack = HeatmapStack::read_file(&path)?;
        if stack.channels() != m {
            return Err(panpose::Error::Parameter(format!(
                "{}: {} channels, dataset has {m} keypoints",
                path.display(),
                stack.channels()
            ))
            .into());
        }
        match a.mode {
            DecodeModeArg::Single => {
                let id = preds.annotations.len() as u64;
                if let Some(ann) = single_instance_prediction(&stack, threshold, id, img.id) {
                    preds.annotations.push(ann);
                }
            }
            DecodeModeArg::Multi => {
                let dir = tags_dir.as_ref().expect("checked above");
                let tag_path = dir.join(format!("{}.tag", img.id));
                let raw = HeatmapStack::read_file(&tag_path)?;
                let tags = TagMap::new(raw.channels(), raw.height(), raw.width(), raw.values().to_vec())?;
                if !tags.matches(&stack) {
                    return Err(panpose::Error::Parameter(format!(
                        "{} does not match the shape of {}",
                        tag_path.display(),
                        path.display()
                    ))
                    .into());
                }
                let dets = decode_heatmaps(
                    &stack,
                    DecodeParams {
                        threshold,
                        mode: DecodeMode::AllPeaks,
                    },
                );
                let params = GroupParams {
                    stride: stack.stride(),
                    ..group
                };
                for mut ann in group_by_tags(&dets, &tags, params, img.id)? {
                    ann.id = preds.annotations.len() as u64;
                    preds.annotations.push(ann);
                }
            }
        }
    }
    write_dataset(&preds, &a.out)?;
    out.emit(
        format!(
            "{} predictions from {} images ({missing} without heatmaps) -> {}\n",
            preds.annotations.len(),
            ds.images.len() - missing,
            a.out.display()
        ),
        json!({"predictions": preds.annotations.len(), "missing_heatmaps": missing}),
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SplitManifest {
    kind: SplitKind,
    fraction: f64,
    seed: u64,
    dropped_keypoints: Vec<String>,
    kept_image_ids: Vec<u64>,
}

fn split_cmd(out: &Output, a: &crate::SplitArgs, seed: u64) -> Result<ExitCode> {
    let train = read(&a.train)?;
    let (result, manifest) = match a.kind {
        SplitKindArg::DataRatio => {
            let spec = SplitSpec::data_ratio(a.fraction, seed);
            let sub = subsample_images(&train, &spec)?;
            let manifest = SplitManifest {
                kind: spec.kind,
                fraction: spec.fraction,
                seed,
                dropped_keypoints: Vec::new(),
                kept_image_ids: sub.kept_image_ids,
            };
            (sub.dataset, manifest)
        }
        SplitKindArg::SparseKeypoints => {
            let spec = SplitSpec::sparse_keypoints(a.fraction, seed);
            let dropped = drop_keypoints(&train, &spec)?;
            let mut ids: Vec<u64> = train.images.iter().map(|i| i.id).collect();
            ids.sort_unstable();
            let manifest = SplitManifest {
                kind: spec.kind,
                fraction: spec.fraction,
                seed,
                dropped_keypoints: dropped.names,
                kept_image_ids: ids,
            };
            (dropped.dataset, manifest)
        }
    };
    create_dir(&a.out_dir)?;
    write_dataset(&result, &a.out_dir.join("train.json"))?;
    if let Some(test) = &a.test {
        // validated, then copied byte for byte
        read(test)?;
        let target = a.out_dir.join("test.json");
        fs::copy(test, &target).map_err(|e| panpose::Error::io(test, e))?;
    }
    write_json(&a.out_dir.join("manifest.json"), &manifest)?;
    out.emit(
        format!(
            "kept {} images, dropped {} keypoints{} -> {}\n",
            manifest.kept_image_ids.len(),
            manifest.dropped_keypoints.len(),
            if manifest.dropped_keypoints.is_empty() {
                String::new()
            } else {
                format!(" ({})", manifest.dropped_keypoints.join(", "))
            },
            a.out_dir.display()
        ),
        serde_json::to_value(&manifest)?,
    );
    Ok(ExitCode::SUCCESS)
}

fn render(
    ds: &PoseDataset,
    cfg: &FileConfig,
    features: &FeatureArgs,
    seed: u64,
) -> Result<(FeatureRenderer, Vec<TrainSample>)> {
    let renderer = FeatureRenderer {
        num_keypoints: ds.num_keypoints(),
        encode: cfg.encode_params(),
        noise: features.noise,
    };
    let samples = samples_from_dataset(ds, &renderer, features.styled_source.as_deref(), seed)?;
    Ok((renderer, samples))
}

fn check_predictor(predictor: &ToyPredictor, renderer: &FeatureRenderer) -> Result<()> {
    if predictor.channels() != renderer.num_keypoints || predictor.features() != renderer.feature_count() {
        return Err(panpose::Error::Parameter(format!(
            "parameters are for {} keypoints / {} features, dataset needs {} / {}",
            predictor.channels(),
            predictor.features(),
            renderer.num_keypoints,
            renderer.feature_count()
        ))
        .into());
    }
    Ok(())
}

fn finish_training(out: &Output, history: &[EpochRecord], loss_csv: Option<&Path>, params: &Path) -> Result<ExitCode> {
    if let Some(path) = loss_csv {
        let file = fs::File::create(path).map_err(|e| panpose::Error::io(path, e))?;
        write_loss_csv(history, file)?;
    }
    let last = history.last().map_or(f64::NAN, |r| r.total_loss);
    out.emit(
        format!("{} epochs, final loss {last:.6} -> {}\n", history.len(), params.display()),
        json!({"epochs": history.len(), "final_loss": last}),
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(out: &Output, cfg: &FileConfig, a: &crate::EvalArgs) -> Result<ExitCode> {
    let gt = read(&a.gt)?;
    let mut preds = read(&a.pred)?;
    let mut injected = 0;
    for p in &mut preds.annotations {
        if p.score.is_none() {
            p.score = Some(1.0);
            injected += 1;
        }
    }
    if injected > 0 {
        info!("{injected} predictions had no score; using 1.0");
    }
    let sigmas = config::sigmas(a.sigma.as_deref(), a.sigma_config.as_deref(), cfg, gt.num_keypoints())?;
    let report = evaluate(
        &gt,
        &preds,
        &sigmas,
        EvalParams {
            max_dets: a.max_dets,
            bbox_margin: a.bbox_margin,
        },
    )?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if let Some(path) = &a.matches {
        let file = fs::File::create(path).map_err(|e| panpose::Error::io(path, e))?;
        report.write_matches_csv(file)?;
    }
    let mut text = format!("mAP: {:?}\n", report.map);
    for t in &report.per_threshold {
        text += &format!("  AP@{:.2}: {:.4}\n", t.threshold, t.ap);
    }
    if !report.skipped_ground_truth.is_empty() {
        text += &format!("  skipped ground truth: {:?}\n", report.skipped_ground_truth);
    }
    out.emit(text, serde_json::to_value(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn demo_cmd(out: &Output, a: &crate::DemoArgs, seed: u64) -> Result<ExitCode> {
    let mut exp = MaskingExperiment {
        seed,
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        exp.train.epochs = e;
    }
    if let Some(n) = a.train_images {
        exp.train_images = n;
    }
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join("masking_report.json");
    if a.masking_only {
        let run = exp.run(true)?;
        write_json(&path, &json!({"experiment": exp, "masked": run}))?;
        out.emit(
            format!("masked run: mAP {:.2}, cross-source error {:.4} -> {}\n", run.map, run.cross_source_error, path.display()),
            json!({"masked": run}),
        );
        return Ok(ExitCode::SUCCESS);
    }
    let cmp = exp.compare()?;
    let holds = cmp.masked.map >= cmp.unmasked.map;
    write_json(
        &path,
        &json!({
            "experiment": exp,
            "masked": cmp.masked,
            "unmasked": cmp.unmasked,
            "cross_source_error_ratio": cmp.cross_source_error_ratio(),
            "masked_at_least_unmasked": holds,
        }),
    )?;
    out.emit(
        format!(
            "masked   mAP {:.2}, cross-source error {:.4}\nunmasked mAP {:.2}, cross-source error {:.4}\nreport -> {}\n",
            cmp.masked.map,
            cmp.masked.cross_source_error,
            cmp.unmasked.map,
            cmp.unmasked.cross_source_error,
            path.display()
        ),
        json!({"masked": cmp.masked, "unmasked": cmp.unmasked}),
    );
    if !holds {
        eprintln!("error: masked mAP fell below unmasked mAP");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
