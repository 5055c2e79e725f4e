//! Keypoint superset construction and projection of differently-labeled
//! datasets into one sparse merged dataset.
//!
//! The mapping from each source dataset's keypoint names to the superset
//! names is a human-authored conversion table (CSV with header
//! `source_dataset,source_keypoint,main_name`), optionally accompanied by a
//! file fixing the superset order, one name per line.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ImageRecord, Keypoint, KeypointVocabulary, PoseDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub source_dataset: String,
    pub source_keypoint: String,
    pub main_name: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConversionTable {
    entries: Vec<TableEntry>,
    declared_superset: Option<KeypointVocabulary>,
}

impl ConversionTable {
    /// Builds a table, rejecting a source keypoint listed twice and two
    /// source keypoints of one dataset sharing a main name.
    pub fn new(entries: Vec<TableEntry>) -> Result<Self> {
        let mut by_source: HashMap<(&str, &str), &str> = HashMap::new();
        let mut by_main: HashMap<(&str, &str), &str> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            for (field, value) in [
                ("source_dataset", &e.source_dataset),
                ("source_keypoint", &e.source_keypoint),
                ("main_name", &e.main_name),
            ] {
                if value.is_empty() {
                    return Err(Error::Table {
                        line: i as u64 + 2,
                        message: format!("empty {field}"),
                    });
                }
            }
            let ds = e.source_dataset.as_str();
            if let Some(prev) = by_source.insert((ds, &e.source_keypoint), &e.main_name) {
                return Err(Error::Mapping(format!(
                    "dataset `{ds}`: source keypoint `{}` is mapped to both `{prev}` and `{}`",
                    e.source_keypoint, e.main_name
                )));
            }
            if let Some(prev) = by_main.insert((ds, &e.main_name), &e.source_keypoint) {
                return Err(Error::Injectivity {
                    dataset: ds.to_string(),
                    first: prev.to_string(),
                    second: e.source_keypoint.clone(),
                    main_name: e.main_name.clone(),
                });
            }
        }
        Ok(Self {
            entries,
            declared_superset: None,
        })
    }

    /// Fixes the superset order. Every main name in the table must appear.
    pub fn with_declared_superset(mut self, superset: KeypointVocabulary) -> Result<Self> {
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| !superset.contains(&e.main_name))
        {
            return Err(Error::Mapping(format!(
                "main name `{}` (dataset `{}`) is not in the declared superset",
                e.main_name, e.source_dataset
            )));
        }
        self.declared_superset = Some(superset);
        Ok(self)
    }

    /// Maps every keypoint of `vocabulary` onto itself for dataset `name`.
    pub fn identity(name: &str, vocabulary: &KeypointVocabulary) -> Self {
        let entries = vocabulary
            .names()
            .iter()
            .map(|k| TableEntry {
                source_dataset: name.to_string(),
                source_keypoint: k.clone(),
                main_name: k.clone(),
            })
            .collect();
        Self {
            entries,
            declared_superset: Some(vocabulary.clone()),
        }
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["source_dataset", "source_keypoint", "main_name"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Table {
                line: 1,
                message: format!("expected header `{}`", expected.join(",")),
            });
        }
        let mut entries = Vec::new();
        for record in rdr.deserialize() {
            let entry: TableEntry = record?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    /// Reads a table and, when given, its superset-order companion file.
    pub fn read(table: impl AsRef<Path>, superset: Option<&Path>) -> Result<Self> {
        let table = table.as_ref();
        let file = std::fs::File::open(table).map_err(|e| Error::io(table, e))?;
        let parsed = Self::from_csv(file)?;
        match superset {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parsed.with_declared_superset(parse_superset_list(&text)?)
            }
            None => Ok(parsed),
        }
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn declared_superset(&self) -> Option<&KeypointVocabulary> {
        self.declared_superset.as_ref()
    }

    pub fn entries_for<'a, 'b>(&'a self, dataset: &'b str) -> impl Iterator<Item = &'a TableEntry> + use<'a, 'b> {
        self.entries
            .iter()
            .filter(move |e| e.source_dataset == dataset)
    }

    /// Source dataset names in order of first appearance.
    pub fn sources(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.source_dataset.as_str()) {
                out.push(&e.source_dataset);
            }
        }
        out
    }

    /// Source keypoint names of `dataset` in table order.
    pub fn source_vocabulary(&self, dataset: &str) -> Result<KeypointVocabulary> {
        KeypointVocabulary::new(self.entries_for(dataset).map(|e| e.source_keypoint.clone()))
    }

    /// Per source channel, the main name it maps to (if any).
    fn channel_map<'a>(&'a self, ds: &PoseDataset) -> Result<Vec<Option<&'a str>>> {
        let mut map = vec![None; ds.vocabulary.len()];
        let mut any = false;
        for e in self.entries_for(&ds.name) {
            any = true;
            let k = ds.vocabulary.index_of(&e.source_keypoint).ok_or_else(|| {
                Error::Mapping(format!(
                    "dataset `{}` has no keypoint `{}` (mapped to `{}`)",
                    ds.name, e.source_keypoint, e.main_name
                ))
            })?;
            map[k] = Some(e.main_name.as_str());
        }
        if !any {
            return Err(Error::Mapping(format!(
                "conversion table has no entries for dataset `{}`",
                ds.name
            )));
        }
        Ok(map)
    }
}

fn parse_superset_list(text: &str) -> Result<KeypointVocabulary> {
    KeypointVocabulary::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string),
    )
}

/// The keypoint superset: the union of every dataset's keypoints after
/// renaming through the table. A declared superset fixes the order;
/// otherwise names appear in first-seen order across `datasets`.
pub fn build_superset(
    table: &ConversionTable,
    datasets: &[PoseDataset],
) -> Result<KeypointVocabulary> {
    let mut names: Vec<String> = Vec::new();
    for ds in datasets {
        for main in table.channel_map(ds)?.into_iter().flatten() {
            if !names.iter().any(|n| n == main) {
                names.push(main.to_string());
            }
        }
    }
    match table.declared_superset() {
        Some(declared) => Ok(declared.clone()),
        None => KeypointVocabulary::new(names),
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub dataset: PoseDataset,
    /// Source keypoints without a table entry; dropped from the projection.
    pub unmapped: Vec<String>,
}

/// Re-indexes every annotation of `ds` into superset channel order.
/// Mapped triples are copied unchanged; all other channels become `(0, 0, 0)`.
pub fn project_dataset(
    ds: &PoseDataset,
    table: &ConversionTable,
    superset: &KeypointVocabulary,
) -> Result<Projection> {
    let channel_map = table.channel_map(ds)?;
    let mut target = Vec::with_capacity(channel_map.len());
    let mut unmapped = Vec::new();
    for (k, main) in channel_map.iter().enumerate() {
        match main {
            Some(main) => {
                let s = superset.index_of(main).ok_or_else(|| {
                    Error::Mapping(format!("main name `{main}` is not in the superset"))
                })?;
                target.push(Some(s));
            }
            None => {
                unmapped.push(ds.vocabulary.names()[k].clone());
                target.push(None);
            }
        }
    }

    let m = superset.len();
    let annotations = ds
        .annotations
        .iter()
        .map(|ann| {
            let mut keypoints = vec![Keypoint::ABSENT; m];
            for (kp, slot) in ann.keypoints.iter().zip(&target) {
                if let Some(s) = slot {
                    keypoints[*s] = *kp;
                }
            }
            let mut out = Annotation {
                keypoints,
                ..ann.clone()
            };
            out.recount();
            out
        })
        .collect();

    Ok(Projection {
        dataset: PoseDataset {
            vocabulary: superset.clone(),
            annotations,
            ..ds.clone()
        },
        unmapped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetCoverage {
    pub dataset: String,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnmappedKeypoint {
    pub dataset: String,
    pub keypoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub superset_size: usize,
    /// Fraction of superset channels each input labels in at least one annotation.
    pub per_dataset_coverage: Vec<DatasetCoverage>,
    /// Fraction of (annotation, keypoint) slots with `v = 0` after merging.
    pub sparsity: f64,
    pub unmapped_keypoints: Vec<UnmappedKeypoint>,
}

/// Concatenates datasets that already share one vocabulary.
///
/// Images and annotations are renumbered from 0 in `(input order, original
/// id)` order. Images not yet tagged with a source get the input dataset's
/// name as source and have their file name prefixed with it.
pub fn merge(datasets: &[PoseDataset]) -> Result<(PoseDataset, MergeReport)> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Merge("nothing to merge".into()))?;
    if let Some(ds) = datasets.iter().find(|ds| ds.vocabulary != first.vocabulary) {
        return Err(Error::Merge(format!(
            "dataset `{}` does not share the vocabulary of `{}`",
            ds.name, first.name
        )));
    }

    let mut images = Vec::new();
    let mut image_ids: HashMap<(usize, u64), u64> = HashMap::new();
    for (src, ds) in datasets.iter().enumerate() {
        let mut sorted: Vec<&ImageRecord> = ds.images.iter().collect();
        sorted.sort_by_key(|img| img.id);
        for img in sorted {
            let id = images.len() as u64;
            image_ids.insert((src, img.id), id);
            let (file_name, source) = match &img.source {
                Some(s) => (img.file_name.clone(), s.clone()),
                None => (format!("{}/{}", ds.name, img.file_name), ds.name.clone()),
            };
            images.push(ImageRecord {
                id,
                file_name,
                width: img.width,
                height: img.height,
                source: Some(source),
            });
        }
    }

    let mut annotations = Vec::new();
    for (src, ds) in datasets.iter().enumerate() {
        let mut sorted: Vec<&Annotation> = ds.annotations.iter().collect();
        sorted.sort_by_key(|ann| ann.id);
        for ann in sorted {
            let image_id = *image_ids.get(&(src, ann.image_id)).ok_or_else(|| {
                Error::Merge(format!(
                    "dataset `{}`: annotation {} references unknown image {}",
                    ds.name, ann.id, ann.image_id
                ))
            })?;
            annotations.push(Annotation {
                id: annotations.len() as u64,
                image_id,
                ..ann.clone()
            });
        }
    }

    let mut metadata = BTreeMap::new();
    for ds in datasets {
        for (k, v) in &ds.metadata {
            metadata.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }

    let merged = PoseDataset {
        name: datasets
            .iter()
            .map(|ds| ds.name.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        category: first.category.clone(),
        vocabulary: first.vocabulary.clone(),
        images,
        annotations,
        metadata,
    };

    let report = MergeReport {
        superset_size: merged.vocabulary.len(),
        per_dataset_coverage: datasets
            .iter()
            .map(|ds| DatasetCoverage {
                dataset: ds.name.clone(),
                coverage: coverage(ds),
            })
            .collect(),
        sparsity: sparsity(&merged),
        unmapped_keypoints: Vec::new(),
    };
    Ok((merged, report))
}

/// Builds the superset, projects every dataset and merges the projections.
pub fn merge_with_table(
    table: &ConversionTable,
    datasets: &[PoseDataset],
) -> Result<(PoseDataset, MergeReport)> {
    let superset = build_superset(table, datasets)?;
    let projections = datasets
        .par_iter()
        .map(|ds| project_dataset(ds, table, &superset))
        .collect::<Result<Vec<_>>>()?;
    let unmapped = projections
        .iter()
        .flat_map(|p| {
            p.unmapped.iter().map(|k| UnmappedKeypoint {
                dataset: p.dataset.name.clone(),
                keypoint: k.clone(),
            })
        })
        .collect();
    let projected: Vec<PoseDataset> = projections.into_iter().map(|p| p.dataset).collect();
    let (merged, mut report) = merge(&projected)?;
    report.unmapped_keypoints = unmapped;
    Ok((merged, report))
}

/// Fraction of vocabulary channels labeled in at least one annotation.
pub fn coverage(ds: &PoseDataset) -> f64 {
    let m = ds.vocabulary.len();
    if m == 0 {
        return 0.0;
    }
    let labeled = (0..m)
        .filter(|&k| {
            ds.annotations
                .iter()
                .any(|a| a.keypoints.get(k).is_some_and(Keypoint::is_present))
        })
        .count();
    labeled as f64 / m as f64
}

/// Fraction of (annotation, keypoint) slots with `v = 0`.
pub fn sparsity(ds: &PoseDataset) -> f64 {
    let slots: usize = ds.annotations.iter().map(|a| a.keypoints.len()).sum();
    if slots == 0 {
        return 0.0;
    }
    let absent: usize = ds
        .annotations
        .iter()
        .map(|a| a.keypoints.iter().filter(|kp| !kp.is_present()).count())
        .sum();
    absent as f64 / slots as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(ds: &str, src: &str, main: &str) -> TableEntry {
        TableEntry {
            source_dataset: ds.into(),
            source_keypoint: src.into(),
            main_name: main.into(),
        }
    }

    fn dataset(name: &str, names: &[&str], n_images: u64) -> PoseDataset {
        let vocab = KeypointVocabulary::new(names.iter().copied()).unwrap();
        let mut ds = PoseDataset::new(name, vocab);
        for i in 0..n_images {
            ds.images.push(ImageRecord::new(10 + i, format!("f{i}.png"), 100, 100));
            let kps = (0..names.len())
                .map(|k| Keypoint::visible(5.0 + k as f64, 7.0 + i as f64))
                .collect();
            ds.annotations.push(Annotation::new(100 + i, 10 + i, kps));
        }
        ds
    }

    fn two_source_table() -> ConversionTable {
        ConversionTable::new(vec![
            entry("A", "nose", "nose"),
            entry("A", "leftear", "leftear"),
            entry("B", "snout", "nose"),
            entry("B", "tail", "tail"),
        ])
        .unwrap()
    }

    #[test]
    fn union_with_renaming() {
        let a = dataset("A", &["nose", "leftear"], 1);
        let b = dataset("B", &["snout", "tail"], 1);
        let k = build_superset(&two_source_table(), &[a, b]).unwrap();
        assert_eq!(k.names(), ["nose", "leftear", "tail"]);
    }

    #[test]
    fn entry_for_missing_keypoint_is_mapping_error() {
        let a = dataset("A", &["nose"], 1);
        let table = ConversionTable::new(vec![entry("A", "ear", "ear")]).unwrap();
        assert!(matches!(build_superset(&table, &[a]), Err(Error::Mapping(_))));
    }

    #[test]
    fn collision_names_both_source_keypoints() {
        let err = ConversionTable::new(vec![
            entry("A", "earl", "ear"),
            entry("A", "earr", "ear"),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("earl") && msg.contains("earr"), "{msg}");
    }

    #[test]
    fn split_mapping_rejected() {
        assert!(ConversionTable::new(vec![entry("A", "ear", "l"), entry("A", "ear", "r")]).is_err());
    }

    #[test]
    fn declared_superset_must_cover_main_names() {
        let vocab = KeypointVocabulary::new(["nose"]).unwrap();
        assert!(two_source_table().with_declared_superset(vocab).is_err());
    }

    #[test]
    fn projection_fills_absent_channels() {
        let ds = dataset("S", &["a", "b", "c"], 1);
        let table = ConversionTable::new(vec![
            entry("S", "a", "p"),
            entry("S", "b", "r"),
            entry("S", "c", "t"),
        ])
        .unwrap();
        let superset = KeypointVocabulary::new(["p", "q", "r", "s", "t"]).unwrap();
        let proj = project_dataset(&ds, &table, &superset).unwrap();
        let kps = &proj.dataset.annotations[0].keypoints;
        assert_eq!(kps.len(), 5);
        assert_eq!(kps.iter().filter(|k| **k == Keypoint::ABSENT).count(), 2);
        assert_eq!(kps[2], ds.annotations[0].keypoints[1]);
        assert_eq!(proj.dataset.annotations[0].num_keypoints, 3);
    }

    #[test]
    fn unmapped_keypoints_are_reported() {
        let ds = dataset("S", &["a", "b"], 1);
        let table = ConversionTable::new(vec![entry("S", "a", "a")]).unwrap();
        let (merged, report) = merge_with_table(&table, &[ds]).unwrap();
        assert_eq!(merged.vocabulary.len(), 1);
        assert_eq!(
            report.unmapped_keypoints,
            vec![UnmappedKeypoint {
                dataset: "S".into(),
                keypoint: "b".into()
            }]
        );
    }

    #[test]
    fn identity_projection_is_identity() {
        let ds = dataset("S", &["a", "b", "c"], 2);
        let table = ConversionTable::identity("S", &ds.vocabulary);
        let proj = project_dataset(&ds, &table, &ds.vocabulary).unwrap();
        assert_eq!(proj.dataset, ds);
    }

    #[test]
    fn merge_renumbers_ids() {
        let a = dataset("A", &["x"], 2);
        let b = dataset("B", &["x"], 3);
        let (merged, report) = merge(&[a, b]).unwrap();
        let ids: Vec<u64> = merged.images.iter().map(|i| i.id).collect();
        assert_eq!(ids, [0, 1, 2, 3, 4]);
        assert_eq!(merged.annotations.len(), 5);
        assert_eq!(merged.images[3].file_name, "B/f1.png");
        assert_eq!(merged.images[3].source.as_deref(), Some("B"));
        assert_eq!(merged.annotations[3].image_id, 3);
        assert_eq!(report.sparsity, 0.0);
    }

    #[test]
    fn merge_rejects_vocabulary_mismatch() {
        let a = dataset("A", &["x"], 1);
        let b = dataset("B", &["y"], 1);
        assert!(matches!(merge(&[a, b]), Err(Error::Merge(_))));
    }

    #[test]
    fn merge_is_idempotent() {
        let a = dataset("A", &["x", "y"], 2);
        let b = dataset("B", &["x", "y"], 3);
        let (once, _) = merge(&[a, b]).unwrap();
        let (twice, _) = merge(std::slice::from_ref(&once)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn single_dataset_merge_keeps_annotations_and_sparsity() {
        let mut a = dataset("A", &["x", "y", "z"], 2);
        a.annotations[0].keypoints[1] = Keypoint::ABSENT;
        a.annotations[0].recount();
        let (merged, report) = merge(std::slice::from_ref(&a)).unwrap();
        assert_eq!(report.sparsity, sparsity(&a));
        for (m, o) in merged.annotations.iter().zip(&a.annotations) {
            assert_eq!(m.keypoints, o.keypoints);
        }
    }
}
