//! In-memory pose dataset model and the COCO keypoint JSON interchange format.
//!
//! Keypoints follow the COCO convention: a flat `[x, y, v, ...]` array with
//! `v = 0` for absent/unlabeled, `1` for labeled-occluded and `2` for
//! labeled-visible. Absent keypoints are stored as `(0, 0, 0)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::error::{Error, Result};

/// Ordered, unique keypoint names. The position of a name is its heatmap channel.
#[derive(Debug, Clone, Default)]
pub struct KeypointVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl KeypointVocabulary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Schema(format!("keypoint {k} has an empty name")));
            }
            if index.insert(name.clone(), k).is_some() {
                return Err(Error::Schema(format!("duplicate keypoint name `{name}`")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> Option<&str> {
        self.names.get(k).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

impl PartialEq for KeypointVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
    }
}

impl Eq for KeypointVocabulary {}

/// A single `(x, y, v)` triple in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub const ABSENT: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        v: 0,
    };

    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Self { x, y, v }
    }

    pub fn visible(x: f64, y: f64) -> Self {
        Self { x, y, v: 2 }
    }

    /// Labeled at all, occluded or not.
    pub fn is_present(&self) -> bool {
        self.v > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Name of the dataset the image came from; set when datasets are merged.
    pub source: Option<String>,
}

impl ImageRecord {
    pub fn new(id: u64, file_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id,
            file_name: file_name.into(),
            width,
            height,
            source: None,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < f64::from(self.width) && y < f64::from(self.height)
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub num_keypoints: usize,
    pub bbox: Option<BBox>,
    /// Confidence, predictions only.
    pub score: Option<f64>,
}

impl Annotation {
    /// Builds an annotation with `num_keypoints` derived from the triples.
    pub fn new(id: u64, image_id: u64, keypoints: Vec<Keypoint>) -> Self {
        let num_keypoints = count_present(&keypoints);
        Self {
            id,
            image_id,
            keypoints,
            num_keypoints,
            bbox: None,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn recount(&mut self) {
        self.num_keypoints = count_present(&self.keypoints);
    }

    pub fn present_count(&self) -> usize {
        count_present(&self.keypoints)
    }
}

fn count_present(keypoints: &[Keypoint]) -> usize {
    keypoints.iter().filter(|kp| kp.is_present()).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

impl Default for Category {
    fn default() -> Self {
        Self {
            id: 1,
            name: "animal".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseDataset {
    pub name: String,
    pub category: Category,
    pub vocabulary: KeypointVocabulary,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    /// Free-form dataset-level metadata, stored in the `info` object.
    pub metadata: BTreeMap<String, String>,
}

impl PoseDataset {
    pub fn new(name: impl Into<String>, vocabulary: KeypointVocabulary) -> Self {
        Self {
            name: name.into(),
            category: Category::default(),
            vocabulary,
            images: Vec::new(),
            annotations: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.id == id)
    }

    pub fn image_index(&self) -> HashMap<u64, &ImageRecord> {
        self.images.iter().map(|img| (img.id, img)).collect()
    }

    /// Annotations grouped by image id, in annotation order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut out: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for ann in &self.annotations {
            out.entry(ann.image_id).or_default().push(ann);
        }
        out
    }

    /// A copy with the same vocabulary and images but no annotations.
    pub fn with_images_only(&self) -> Self {
        Self {
            annotations: Vec::new(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IssueKind {
    InvalidImageSize { image_id: u64 },
    DuplicateImageId { image_id: u64 },
    DuplicateAnnotationId { annotation_id: u64 },
    UnresolvedImage { annotation_id: u64, image_id: u64 },
    KeypointCount { annotation_id: u64, expected: usize, found: usize },
    InvalidVisibility { annotation_id: u64, keypoint: usize, v: u8 },
    AbsentNotZero { annotation_id: u64, keypoint: usize },
    NonFinite { annotation_id: u64, keypoint: usize },
    OffImage { annotation_id: u64, keypoint: usize, x: f64, y: f64 },
    CountMismatch { annotation_id: u64, stated: usize, actual: usize },
    ScoreOutOfRange { annotation_id: u64, score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub severity: Severity,
    #[serde(flatten)]
    pub kind: IssueKind,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.kind {
            IssueKind::InvalidImageSize { image_id } => {
                write!(f, "{sev}: image {image_id} has a zero width or height")
            }
            IssueKind::DuplicateImageId { image_id } => {
                write!(f, "{sev}: duplicate image id {image_id}")
            }
            IssueKind::DuplicateAnnotationId { annotation_id } => {
                write!(f, "{sev}: duplicate annotation id {annotation_id}")
            }
            IssueKind::UnresolvedImage {
                annotation_id,
                image_id,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} references unknown image {image_id}"
            ),
            IssueKind::KeypointCount {
                annotation_id,
                expected,
                found,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} has {found} keypoint triples, vocabulary has {expected}"
            ),
            IssueKind::InvalidVisibility {
                annotation_id,
                keypoint,
                v,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} keypoint {keypoint} has visibility {v}"
            ),
            IssueKind::AbsentNotZero {
                annotation_id,
                keypoint,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} keypoint {keypoint} has v=0 but nonzero coordinates"
            ),
            IssueKind::NonFinite {
                annotation_id,
                keypoint,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} keypoint {keypoint} has non-finite coordinates"
            ),
            IssueKind::OffImage {
                annotation_id,
                keypoint,
                x,
                y,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} keypoint {keypoint} at ({x}, {y}) lies outside its image"
            ),
            IssueKind::CountMismatch {
                annotation_id,
                stated,
                actual,
            } => write!(
                f,
                "{sev}: annotation {annotation_id} states num_keypoints={stated} but {actual} are labeled"
            ),
            IssueKind::ScoreOutOfRange {
                annotation_id,
                score,
            } => write!(f, "{sev}: annotation {annotation_id} has score {score} outside [0, 1]"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Warning)
    }

    pub fn error_count(&self) -> usize {
        self.errors().count()
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    fn push(&mut self, severity: Severity, kind: IssueKind) {
        self.issues.push(Issue { severity, kind });
    }
}

/// Lists every invariant violation of `ds`. Off-image keypoints and
/// out-of-range scores are warnings; everything else is an error.
pub fn validate(ds: &PoseDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = ds.vocabulary.len();

    let mut images: HashMap<u64, &ImageRecord> = HashMap::new();
    for img in &ds.images {
        if img.width == 0 || img.height == 0 {
            report.push(
                Severity::Error,
                IssueKind::InvalidImageSize { image_id: img.id },
            );
        }
        if images.insert(img.id, img).is_some() {
            report.push(
                Severity::Error,
                IssueKind::DuplicateImageId { image_id: img.id },
            );
        }
    }

    let mut seen = HashSet::new();
    for ann in &ds.annotations {
        let id = ann.id;
        if !seen.insert(id) {
            report.push(
                Severity::Error,
                IssueKind::DuplicateAnnotationId { annotation_id: id },
            );
        }
        let image = images.get(&ann.image_id).copied();
        if image.is_none() {
            report.push(
                Severity::Error,
                IssueKind::UnresolvedImage {
                    annotation_id: id,
                    image_id: ann.image_id,
                },
            );
        }
        if ann.keypoints.len() != m {
            report.push(
                Severity::Error,
                IssueKind::KeypointCount {
                    annotation_id: id,
                    expected: m,
                    found: ann.keypoints.len(),
                },
            );
        }
        for (k, kp) in ann.keypoints.iter().enumerate() {
            if kp.v > 2 {
                report.push(
                    Severity::Error,
                    IssueKind::InvalidVisibility {
                        annotation_id: id,
                        keypoint: k,
                        v: kp.v,
                    },
                );
            }
            if !kp.x.is_finite() || !kp.y.is_finite() {
                report.push(
                    Severity::Error,
                    IssueKind::NonFinite {
                        annotation_id: id,
                        keypoint: k,
                    },
                );
                continue;
            }
            if kp.v == 0 {
                if kp.x != 0.0 || kp.y != 0.0 {
                    report.push(
                        Severity::Error,
                        IssueKind::AbsentNotZero {
                            annotation_id: id,
                            keypoint: k,
                        },
                    );
                }
            } else if let Some(img) = image {
                if !img.contains(kp.x, kp.y) {
                    report.push(
                        Severity::Warning,
                        IssueKind::OffImage {
                            annotation_id: id,
                            keypoint: k,
                            x: kp.x,
                            y: kp.y,
                        },
                    );
                }
            }
        }
        let actual = ann.present_count();
        if actual != ann.num_keypoints {
            report.push(
                Severity::Error,
                IssueKind::CountMismatch {
                    annotation_id: id,
                    stated: ann.num_keypoints,
                    actual,
                },
            );
        }
        if let Some(score) = ann.score {
            if !(0.0..=1.0).contains(&score) {
                report.push(
                    Severity::Warning,
                    IssueKind::ScoreOutOfRange {
                        annotation_id: id,
                        score,
                    },
                );
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// JSON interchange

#[derive(Serialize, Deserialize)]
struct WireDataset {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<BTreeMap<String, String>>,
    images: Vec<WireImage>,
    annotations: Vec<WireAnnotation>,
    categories: Vec<WireCategory>,
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireAnnotation {
    id: u64,
    image_id: u64,
    keypoints: Vec<Number>,
    #[serde(default)]
    num_keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireCategory {
    id: u64,
    name: String,
    keypoints: Vec<String>,
}

const NAME_KEY: &str = "description";

/// A dataset together with the soft violations found while reading it.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub dataset: PoseDataset,
    pub warnings: Vec<Issue>,
}

/// Reads COCO keypoint JSON without enforcing dataset invariants.
///
/// Only structural problems fail here: malformed JSON, a flat keypoint array
/// whose length is not a multiple of three, a non-integer visibility, or a
/// category count other than one. Use [`validate`] (or [`parse_dataset`]) for
/// the rest.
pub fn parse_dataset_lenient(bytes: &[u8]) -> Result<PoseDataset> {
    let wire: WireDataset = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let category = match wire.categories.as_slice() {
        [c] => c,
        [] => return Err(Error::Schema("no category defined".into())),
        cs => {
            return Err(Error::Schema(format!(
                "{} categories found; only single-category datasets are supported",
                cs.len()
            )))
        }
    };
    let vocabulary = KeypointVocabulary::new(category.keypoints.iter().cloned())?;

    let images = wire
        .images
        .into_iter()
        .map(|img| ImageRecord {
            id: img.id,
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            source: img.source,
        })
        .collect();

    let mut annotations = Vec::with_capacity(wire.annotations.len());
    for ann in wire.annotations {
        let keypoints = decode_triples(ann.id, &ann.keypoints)?;
        let num_keypoints = ann.num_keypoints.unwrap_or_else(|| count_present(&keypoints));
        annotations.push(Annotation {
            id: ann.id,
            image_id: ann.image_id,
            keypoints,
            num_keypoints,
            bbox: ann.bbox.map(|[x, y, w, h]| BBox { x, y, w, h }),
            score: ann.score,
        });
    }

    let mut metadata = wire.info.unwrap_or_default();
    let name = metadata.remove(NAME_KEY).unwrap_or_default();

    Ok(PoseDataset {
        name,
        category: Category {
            id: category.id,
            name: category.name.clone(),
        },
        vocabulary,
        images,
        annotations,
        metadata,
    })
}

/// Reads and validates COCO keypoint JSON. Any error-level violation fails
/// the parse; warnings travel with the result.
pub fn parse_dataset(bytes: &[u8]) -> Result<ParsedDataset> {
    let dataset = parse_dataset_lenient(bytes)?;
    let report = validate(&dataset);
    if report.has_errors() {
        let msg = report
            .errors()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Schema(msg));
    }
    Ok(ParsedDataset {
        dataset,
        warnings: report.issues,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<ParsedDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes)
}

/// Deterministic pretty-printed JSON. Coordinates use shortest round-trip
/// formatting, so re-parsing yields bit-identical values.
pub fn serialize_dataset(ds: &PoseDataset) -> Vec<u8> {
    let mut info = ds.metadata.clone();
    if !ds.name.is_empty() {
        info.insert(NAME_KEY.to_string(), ds.name.clone());
    }
    let wire = WireDataset {
        info: (!info.is_empty()).then_some(info),
        images: ds
            .images
            .iter()
            .map(|img| WireImage {
                id: img.id,
                file_name: img.file_name.clone(),
                width: img.width,
                height: img.height,
                source: img.source.clone(),
            })
            .collect(),
        annotations: ds
            .annotations
            .iter()
            .map(|ann| WireAnnotation {
                id: ann.id,
                image_id: ann.image_id,
                keypoints: encode_triples(&ann.keypoints),
                num_keypoints: Some(ann.num_keypoints),
                bbox: ann.bbox.map(|b| [b.x, b.y, b.w, b.h]),
                score: ann.score,
            })
            .collect(),
        categories: vec![WireCategory {
            id: ds.category.id,
            name: ds.category.name.clone(),
            keypoints: ds.vocabulary.names().to_vec(),
        }],
    };
    let mut out = serde_json::to_vec_pretty(&wire).expect("dataset serialization is infallible");
    out.push(b'\n');
    out
}

pub fn write_dataset(ds: &PoseDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_dataset(ds)).map_err(|e| Error::io(path, e))
}

fn decode_triples(annotation_id: u64, flat: &[Number]) -> Result<Vec<Keypoint>> {
    if !flat.len().is_multiple_of(3) {
        return Err(Error::Schema(format!(
            "annotation {annotation_id}: keypoints array length {} is not a multiple of 3",
            flat.len()
        )));
    }
    flat.chunks_exact(3)
        .enumerate()
        .map(|(k, t)| {
            let num = |n: &Number| n.as_f64().unwrap_or(f64::NAN);
            let v = num(&t[2]);
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Schema(format!(
                    "annotation {annotation_id}: keypoint {k} has non-integer visibility {v}"
                )));
            }
            Ok(Keypoint {
                x: num(&t[0]),
                y: num(&t[1]),
                v: v as u8,
            })
        })
        .collect()
}

fn encode_triples(keypoints: &[Keypoint]) -> Vec<Number> {
    let float = |x: f64| Number::from_f64(x).unwrap_or_else(|| Number::from(0));
    keypoints
        .iter()
        .flat_map(|kp| [float(kp.x), float(kp.y), Number::from(kp.v)])
        .collect()
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

/// Convenience for building JSON values in tests and tools.
pub fn to_json_value(ds: &PoseDataset) -> Value {
    serde_json::from_slice(&serialize_dataset(ds)).expect("serialized dataset is valid JSON")
}
