//! Gaussian heatmap targets, peak decoding and associative-embedding grouping.
//!
//! Heatmap cell `(row, col)` of a stack with stride `s` corresponds to image
//! pixel `(col * s, row * s)`; a keypoint at pixel `(x, y)` sits at heatmap
//! location `(x / s, y / s)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ImageRecord, Keypoint};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_STRIDE: u32 = 4;
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.1;
pub const DEFAULT_TAG_THRESHOLD: f64 = 1.0;

/// `m` channels of `height x width` values plus the per-channel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    stride: u32,
    mask: Vec<bool>,
    values: Vec<f64>,
}

impl HeatmapStack {
    /// All-zero stack with every channel unmasked.
    pub fn zeros(channels: usize, height: usize, width: usize, stride: u32) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            mask: vec![true; channels],
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        stride: u32,
        mask: Vec<bool>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if mask.len() != channels {
            return Err(Error::Parameter(format!(
                "mask has {} entries for {channels} channels",
                mask.len()
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Parameter(format!(
                "{} values for a {channels}x{height}x{width} stack",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            mask,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.channels {
            return Err(Error::Parameter("mask length differs from channel count".into()));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> f64 {
        self.values[(k * self.height + row) * self.width + col]
    }

    pub fn same_shape(&self, other: &HeatmapStack) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Writes the flat little-endian format: `m, h, w, stride` as `u32`, one
    /// mask byte per channel, then the values as row-major `f32`.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for dim in [self.channels, self.height, self.width] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        out.write_all(&self.stride.to_le_bytes())?;
        let mask: Vec<u8> = self.mask.iter().map(|&b| u8::from(b)).collect();
        out.write_all(&mask)?;
        for &v in &self.values {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Parameter(format!("truncated heatmap stack: {e}"));
        let mut word = [0u8; 4];
        let mut header = [0u32; 4];
        for slot in &mut header {
            input.read_exact(&mut word).map_err(bad)?;
            *slot = u32::from_le_bytes(word);
        }
        let [m, h, w, stride] = header.map(|x| x as usize);
        let mut mask = vec![0u8; m];
        input.read_exact(&mut mask).map_err(bad)?;
        let mut values = Vec::with_capacity(m * h * w);
        for _ in 0..m * h * w {
            input.read_exact(&mut word).map_err(bad)?;
            values.push(f64::from(f32::from_le_bytes(word)));
        }
        let mask = mask
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Parameter(format!("mask byte {b} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Self::from_parts(m, h, w, stride as u32, mask, values)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeParams {
    /// Gaussian standard deviation in heatmap cells.
    pub sigma: f64,
    pub stride: u32,
}

impl Default for EncodeParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            stride: DEFAULT_STRIDE,
        }
    }
}

/// Heatmap resolution for an image.
pub fn heatmap_size(image: &ImageRecord, stride: u32) -> (usize, usize) {
    (
        image.height.div_ceil(stride) as usize,
        image.width.div_ceil(stride) as usize,
    )
}

/// Renders the target stack for one image.
///
/// Channel `k` holds a Gaussian (peak 1) at every labeled instance of
/// keypoint `k`, truncated to a window of radius `ceil(3 sigma)` cells;
/// overlapping instances take the per-pixel maximum. The mask is set for a
/// channel iff some annotation labels it; unlabeled channels stay all-zero.
pub fn encode_targets(
    annotations: &[&Annotation],
    image: &ImageRecord,
    num_keypoints: usize,
    params: EncodeParams,
) -> Result<HeatmapStack> {
    if !(params.sigma > 0.0) || !params.sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {}", params.sigma)));
    }
    if params.stride == 0 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    let (h, w) = heatmap_size(image, params.stride);
    let mut stack = HeatmapStack::zeros(num_keypoints, h, w, params.stride);
    stack.mask = vec![false; num_keypoints];

    for ann in annotations {
        if ann.keypoints.len() != num_keypoints {
            return Err(Error::Parameter(format!(
                "annotation {} has {} keypoints, expected {num_keypoints}",
                ann.id,
                ann.keypoints.len()
            )));
        }
        for (k, kp) in ann.keypoints.iter().enumerate() {
            if !kp.is_present() {
                continue;
            }
            stack.mask[k] = true;
            let stride = f64::from(params.stride);
            draw_gaussian(
                stack.channel_mut(k),
                h,
                w,
                kp.x / stride,
                kp.y / stride,
                params.sigma,
            );
        }
    }
    Ok(stack)
}

/// Max-composites a truncated Gaussian centred at heatmap location `(cx, cy)`.
pub fn draw_gaussian(plane: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, sigma: f64) {
    if !cx.is_finite() || !cy.is_finite() {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let (ccol, crow) = (cx.round() as i64, cy.round() as i64);
    let two_var = 2.0 * sigma * sigma;
    let rows = (crow - radius).max(0)..=(crow + radius).min(h as i64 - 1);
    for row in rows {
        let dy = row as f64 - cy;
        for col in (ccol - radius).max(0)..=(ccol + radius).min(w as i64 - 1) {
            let dx = col as f64 - cx;
            let v = (-(dx * dx + dy * dy) / two_var).exp();
            let cell = &mut plane[row as usize * w + col as usize];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Every local maximum above threshold (bottom-up).
    #[default]
    AllPeaks,
    /// The global maximum of each channel (single instance / top-down).
    SingleInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub threshold: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_PEAK_THRESHOLD,
            mode: DecodeMode::AllPeaks,
        }
    }
}

/// A decoded peak in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub keypoint: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Extracts peaks per channel, ordered by channel then descending score.
///
/// Each peak is shifted a quarter cell along each axis toward the larger of
/// its two neighbours on that axis, then scaled by the stride.
pub fn decode_heatmaps(stack: &HeatmapStack, params: DecodeParams) -> Vec<Detection> {
    let (h, w) = (stack.height, stack.width);
    let stride = f64::from(stack.stride);
    let mut out = Vec::new();
    for k in 0..stack.channels {
        let plane = stack.channel(k);
        let mut peaks: Vec<(usize, f64)> = match params.mode {
            DecodeMode::SingleInstance => {
                let mut best: Option<(usize, f64)> = None;
                for (idx, &v) in plane.iter().enumerate() {
                    if v > params.threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((idx, v));
                    }
                }
                best.into_iter().collect()
            }
            DecodeMode::AllPeaks => (0..plane.len())
                .filter(|&idx| plane[idx] > params.threshold && is_local_max(plane, h, w, idx))
                .map(|idx| (idx, plane[idx]))
                .collect(),
        };
        peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (idx, score) in peaks {
            let (row, col) = (idx / w, idx % w);
            let at = |r: usize, c: usize| plane[r * w + c];
            let mut fx = col as f64;
            let mut fy = row as f64;
            if col > 0 && col + 1 < w {
                fx += 0.25 * quarter_sign(at(row, col + 1) - at(row, col - 1));
            }
            if row > 0 && row + 1 < h {
                fy += 0.25 * quarter_sign(at(row + 1, col) - at(row - 1, col));
            }
            out.push(Detection {
                keypoint: k,
                x: fx * stride,
                y: fy * stride,
                score,
            });
        }
    }
    out
}

fn quarter_sign(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `>=` all 8 neighbours and strictly `>` those earlier in raster order, so a
/// plateau yields exactly one peak.
fn is_local_max(plane: &[f64], h: usize, w: usize, idx: usize) -> bool {
    let (row, col) = ((idx / w) as i64, (idx % w) as i64);
    let v = plane[idx];
    for dr in -1..=1i64 {
        for dc in -1..=1i64 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (r, c) = (row + dr, col + dc);
            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                continue;
            }
            let n = plane[(r * w as i64 + c) as usize];
            let earlier = dr < 0 || (dr == 0 && dc < 0);
            if n > v || (earlier && n == v) {
                return false;
            }
        }
    }
    true
}

/// One-dimensional associative-embedding tags, same shape as a heatmap stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TagMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl TagMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Parameter(format!(
                "{} tag values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn set(&mut self, k: usize, row: usize, col: usize, value: f64) {
        self.values[(k * self.height + row) * self.width + col] = value;
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> f64 {
        self.values[(k * self.height + row) * self.width + col]
    }

    pub fn matches(&self, stack: &HeatmapStack) -> bool {
        self.channels == stack.channels && self.height == stack.height && self.width == stack.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub max_individuals: usize,
    pub tag_threshold: f64,
    pub stride: u32,
}

impl Default for GroupParams {
    fn default() -> Self {
        Self {
            max_individuals: 20,
            tag_threshold: DEFAULT_TAG_THRESHOLD,
            stride: DEFAULT_STRIDE,
        }
    }
}

struct Group {
    members: Vec<Option<Detection>>,
    tag_sum: f64,
    count: usize,
}

impl Group {
    fn mean_tag(&self) -> f64 {
        self.tag_sum / self.count as f64
    }
}

/// Greedy tag grouping of detections into individuals.
///
/// Channels are visited in vocabulary order and detections within a channel
/// by descending score. A detection joins the group (lacking that channel)
/// whose mean tag is nearest, provided the gap is within `tag_threshold`;
/// otherwise it opens a new group unless `max_individuals` groups exist, in
/// which case it is dropped. Each group becomes one prediction whose score is
/// the mean of its detection scores. Returned annotations have ids from 0
/// and `image_id` as given.
pub fn group_by_tags(
    detections: &[Detection],
    tags: &TagMap,
    params: GroupParams,
    image_id: u64,
) -> Result<Vec<Annotation>> {
    let m = tags.channels;
    let stride = f64::from(params.stride.max(1));
    let mut per_channel: Vec<Vec<(Detection, f64)>> = vec![Vec::new(); m];
    for d in detections {
        if d.keypoint >= m {
            return Err(Error::Parameter(format!(
                "detection for keypoint {} but tag map has {m} channels",
                d.keypoint
            )));
        }
        let col = (d.x / stride).round();
        let row = (d.y / stride).round();
        if !(col >= 0.0 && row >= 0.0 && (col as usize) < tags.width && (row as usize) < tags.height)
        {
            return Err(Error::Parameter(format!(
                "detection at ({}, {}) lies outside the {}x{} tag map",
                d.x, d.y, tags.width, tags.height
            )));
        }
        let tag = tags.get(d.keypoint, row as usize, col as usize);
        per_channel[d.keypoint].push((*d, tag));
    }

    let mut groups: Vec<Group> = Vec::new();
    for (k, dets) in per_channel.iter_mut().enumerate() {
        dets.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
        for &(det, tag) in dets.iter() {
            let nearest = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.members[k].is_none())
                .map(|(i, g)| ((g.mean_tag() - tag).abs(), i))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match nearest {
                Some((gap, i)) if gap <= params.tag_threshold => {
                    let g = &mut groups[i];
                    g.members[k] = Some(det);
                    g.tag_sum += tag;
                    g.count += 1;
                }
                _ if groups.len() < params.max_individuals => {
                    let mut members = vec![None; m];
                    members[k] = Some(det);
                    groups.push(Group {
                        members,
                        tag_sum: tag,
                        count: 1,
                    });
                }
                _ => {}
            }
        }
    }

    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let score_sum: f64 = g.members.iter().flatten().map(|d| d.score).sum();
            let keypoints = g
                .members
                .iter()
                .map(|d| match d {
                    Some(d) => Keypoint::visible(d.x, d.y),
                    None => Keypoint::ABSENT,
                })
                .collect();
            Annotation::new(i as u64, image_id, keypoints).with_score(score_sum / g.count as f64)
        })
        .collect())
}

/// Single-instance prediction: the best peak of every channel as one annotation.
pub fn single_instance_prediction(
    stack: &HeatmapStack,
    threshold: f64,
    annotation_id: u64,
    image_id: u64,
) -> Option<Annotation> {
    let dets = decode_heatmaps(
        stack,
        DecodeParams {
            threshold,
            mode: DecodeMode::SingleInstance,
        },
    );
    if dets.is_empty() {
        return None;
    }
    let mut keypoints = vec![Keypoint::ABSENT; stack.channels];
    for d in &dets {
        keypoints[d.keypoint] = Keypoint::visible(d.x, d.y);
    }
    let score = dets.iter().map(|d| d.score).sum::<f64>() / dets.len() as f64;
    Some(Annotation::new(annotation_id, image_id, keypoints).with_score(score))
}
