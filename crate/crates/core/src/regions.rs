//! Text-region geometry: detection contract, reading order and slice merging.
//!
//! Reading order clusters boxes into lines (two boxes are co-linear when
//! their vertical overlap covers at least half of the shorter box), sorts
//! lines top to bottom and boxes within a line left to right. Merging then
//! joins boxes that sit close on the same line, or that are left-aligned on
//! adjacent lines, and takes connected components of that relation.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{crop_region, Image, ImagingError, SliceCrop};

/// Axis-aligned box in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default = "full_confidence")]
    pub confidence: f64,
}

fn full_confidence() -> f64 {
    1.0
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self::with_confidence(x_min, y_min, x_max, y_max, 1.0)
    }

    pub fn with_confidence(x_min: f64, y_min: f64, x_max: f64, y_max: f64, confidence: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && (0.0..=1.0).contains(&self.confidence)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Tight union; confidence is the maximum of the two.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
            confidence: self.confidence.max(other.confidence),
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Length of the shared vertical span.
    pub fn vertical_overlap(&self, other: &BoundingBox) -> f64 {
        (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0)
    }

    /// Co-linearity test used by the reading order.
    pub fn is_colinear(&self, other: &BoundingBox) -> bool {
        let shorter = self.height().min(other.height());
        self.vertical_overlap(other) >= 0.5 * shorter
    }

    fn clamp_to(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            confidence: self.confidence.clamp(0.0, 1.0),
        }
    }

    /// Total order on box geometry then confidence.
    fn geometry_cmp(&self, other: &BoundingBox) -> Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
            .then(self.confidence.total_cmp(&other.confidence))
    }
}

/// Detected boxes for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub boxes: Vec<BoundingBox>,
    pub source_dims: (u32, u32),
}

impl RegionSet {
    pub fn new(boxes: Vec<BoundingBox>, source_dims: (u32, u32)) -> Self {
        Self { boxes, source_dims }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.boxes.is_empty() {
            return 0.0;
        }
        self.boxes.iter().map(|b| b.confidence).sum::<f64>() / self.boxes.len() as f64
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("detector request failed: {0}")]
    Request(String),
    #[error("detector returned malformed response: {0}")]
    Malformed(String),
    #[error("no ground truth available for this image")]
    UnknownImage,
}

#[derive(Debug, Error)]
#[error("detector `{detector}` failed: {source}")]
pub struct DetectionError {
    pub detector: String,
    #[source]
    pub source: DetectorError,
}

/// Text-region detector: image in, boxes with confidences out.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, image: &Image) -> Result<Vec<BoundingBox>, DetectorError>;
}

impl<T: Detector + ?Sized> Detector for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn detect(&self, image: &Image) -> Result<Vec<BoundingBox>, DetectorError> {
        (**self).detect(image)
    }
}

/// Run a detector, clamp its boxes to the image and drop empty ones.
pub fn detect_regions(image: &Image, detector: &dyn Detector) -> Result<RegionSet, DetectionError> {
    let raw = detector.detect(image).map_err(|source| DetectionError {
        detector: detector.name().to_string(),
        source,
    })?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let boxes = raw
        .into_iter()
        .filter(|b| b.x_min.is_finite() && b.y_min.is_finite() && b.x_max.is_finite() && b.y_max.is_finite())
        .map(|b| b.clamp_to(w, h))
        .filter(|b| b.area() > 0.0)
        .collect();
    Ok(RegionSet::new(boxes, (image.width(), image.height())))
}

/// Boxes sharing one text line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineCluster {
    /// Indices into the box list the cluster was computed from, in
    /// left-to-right order.
    pub members: Vec<usize>,
    pub top: f64,
    pub baseline_y: f64,
    pub line_height: f64,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller root so component ids are stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    fn components(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..self.parent.len() {
            let r = self.find(i);
            by_root.entry(r).or_default().push(i);
        }
        let mut comps: Vec<_> = by_root.into_values().collect();
        comps.sort_by_key(|c| c[0]);
        comps
    }
}

/// Group boxes into reading-order lines. Lines are the connected components
/// of the co-linearity relation, returned top to bottom.
pub fn line_clusters(boxes: &[BoundingBox]) -> Vec<LineCluster> {
    let mut sets = DisjointSet::new(boxes.len());
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].is_colinear(&boxes[j]) {
                sets.union(i, j);
            }
        }
    }
    let within = |a: &usize, b: &usize| boxes[*a].geometry_cmp(&boxes[*b]).then(a.cmp(b));
    let mut lines: Vec<LineCluster> = sets
        .components()
        .into_iter()
        .map(|mut members| {
            members.sort_by(within);
            let top = members.iter().map(|&i| boxes[i].y_min).fold(f64::INFINITY, f64::min);
            let bottom = members
                .iter()
                .map(|&i| boxes[i].y_max)
                .fold(f64::NEG_INFINITY, f64::max);
            LineCluster {
                members,
                top,
                baseline_y: bottom,
                line_height: bottom - top,
            }
        })
        .collect();
    lines.sort_by(|a, b| {
        a.top
            .total_cmp(&b.top)
            .then_with(|| within(&a.members[0], &b.members[0]))
    });
    lines
}

/// Reading-order permutation of `boxes` (indices into the input).
pub fn reading_order(boxes: &[BoundingBox]) -> Vec<usize> {
    line_clusters(boxes)
        .into_iter()
        .flat_map(|line| line.members)
        .collect()
}

/// Reorder a region set into reading order.
pub fn order_regions(rs: &RegionSet) -> RegionSet {
    let boxes = reading_order(&rs.boxes)
        .into_iter()
        .map(|i| rs.boxes[i])
        .collect();
    RegionSet::new(boxes, rs.source_dims)
}

/// Alignment tolerance for the adjacent-line merge rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignTolerance {
    Pixels(f64),
    /// Multiple of the median line height.
    LineHeights(f64),
}

/// Thresholds of the merge relation. A factor of zero disables its rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    /// Same-line horizontal gap, in median line heights.
    pub alpha: f64,
    /// Same-line vertical centre offset, in median line heights.
    pub beta: f64,
    /// Adjacent-line vertical gap, in median line heights.
    pub gamma: f64,
    pub align_tol: AlignTolerance,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.5,
            align_tol: AlignTolerance::LineHeights(0.5),
        }
    }
}

impl GroupingParams {
    /// Parameters under which no pair is mergeable.
    pub fn disabled() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            align_tol: AlignTolerance::Pixels(0.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        let tol = match self.align_tol {
            AlignTolerance::Pixels(v) | AlignTolerance::LineHeights(v) => v,
        };
        [self.alpha, self.beta, self.gamma, tol]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    fn align_px(&self, line_height: f64) -> f64 {
        match self.align_tol {
            AlignTolerance::Pixels(px) => px,
            AlignTolerance::LineHeights(k) => k * line_height,
        }
    }
}

/// Median box height, the typographic unit of the merge thresholds.
pub fn median_line_height(boxes: &[BoundingBox]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut heights: Vec<f64> = boxes.iter().map(BoundingBox::height).collect();
    heights.sort_by(f64::total_cmp);
    let n = heights.len();
    if n % 2 == 1 {
        heights[n / 2]
    } else {
        0.5 * (heights[n / 2 - 1] + heights[n / 2])
    }
}

/// A merged group of boxes that becomes one local slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGroup {
    pub members: Vec<BoundingBox>,
    /// Positions of the members in the ordered region set.
    pub member_indices: Vec<usize>,
    pub union_box: BoundingBox,
    pub order_index: usize,
}

/// Merge an ordered region set into slice groups.
pub fn merge_regions(rs: &RegionSet, params: &GroupingParams) -> Vec<SliceGroup> {
    let boxes = &rs.boxes;
    if boxes.is_empty() {
        return Vec::new();
    }
    let unit = median_line_height(boxes);
    let align = params.align_px(unit);

    let lines = line_clusters(boxes);
    let mut line_of = vec![0usize; boxes.len()];
    for (li, line) in lines.iter().enumerate() {
        for &m in &line.members {
            line_of[m] = li;
        }
    }

    let mut sets = DisjointSet::new(boxes.len());
    for (li, line) in lines.iter().enumerate() {
        if params.alpha > 0.0 {
            for (k, &a) in line.members.iter().enumerate() {
                for &b in &line.members[k + 1..] {
                    if same_line_mergeable(&boxes[a], &boxes[b], params, unit) {
                        sets.union(a, b);
                    }
                }
            }
        }
        if params.gamma > 0.0 {
            if let Some(next) = lines.get(li + 1) {
                for &a in &line.members {
                    for &b in &next.members {
                        let (upper, lower) = (&boxes[a], &boxes[b]);
                        let aligned = (upper.x_min - lower.x_min).abs() <= align;
                        let gap = lower.y_min - upper.y_max;
                        if aligned && gap <= params.gamma * unit {
                            sets.union(a, b);
                        }
                    }
                }
            }
        }
    }

    let mut groups: Vec<SliceGroup> = sets
        .components()
        .into_iter()
        .map(|member_indices| {
            let members: Vec<BoundingBox> = member_indices.iter().map(|&i| boxes[i]).collect();
            let union_box = members[1..]
                .iter()
                .fold(members[0], |acc, b| acc.union(b));
            SliceGroup {
                order_index: member_indices[0],
                members,
                member_indices,
                union_box,
            }
        })
        .collect();
    groups.sort_by_key(|g| g.order_index);
    for (rank, g) in groups.iter_mut().enumerate() {
        g.order_index = rank;
    }
    groups
}

fn same_line_mergeable(a: &BoundingBox, b: &BoundingBox, params: &GroupingParams, unit: f64) -> bool {
    let gap = a.x_min.max(b.x_min) - a.x_max.min(b.x_max);
    let dy = (a.center().1 - b.center().1).abs();
    gap <= params.alpha * unit && dy <= params.beta * unit
}

/// Order, merge and crop. Returns one crop per group in reading order.
pub fn build_slices(
    image: &Image,
    rs: &RegionSet,
    params: &GroupingParams,
    cap: u32,
) -> Result<Vec<(SliceGroup, SliceCrop)>, ImagingError> {
    let ordered = order_regions(rs);
    merge_regions(&ordered, params)
        .into_iter()
        .map(|g| {
            let crop = crop_region(image, &g.union_box, cap)?;
            Ok((g, crop))
        })
        .collect()
}

/// Detector returning a fixed list of boxes for every image.
#[derive(Debug, Clone)]
pub struct StaticDetector {
    pub boxes: Vec<BoundingBox>,
}

impl Detector for StaticDetector {
    fn name(&self) -> &str {
        "static"
    }

    fn detect(&self, _image: &Image) -> Result<Vec<BoundingBox>, DetectorError> {
        Ok(self.boxes.clone())
    }
}

/// Sidecar file format for ground-truth detections: `<stem>.regions.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSidecar {
    pub boxes: Vec<BoundingBox>,
}

/// Deterministic mock detector reading ground truth from sidecar files.
///
/// Images are matched by a SHA-256 digest of their decoded pixels, so the
/// detector can be handed any in-memory image.
#[derive(Debug, Default, Clone)]
pub struct SidecarDetector {
    by_digest: HashMap<[u8; 32], Vec<BoundingBox>>,
}

impl SidecarDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: &Image, boxes: Vec<BoundingBox>) {
        self.by_digest.insert(pixel_digest(image), boxes);
    }

    /// Take over every entry of `other`; its entries win on collision.
    pub fn extend(&mut self, other: SidecarDetector) {
        self.by_digest.extend(other.by_digest);
    }

    /// Scan a directory for `<stem>.png|jpg` + `<stem>.regions.json` pairs.
    pub fn from_dir(dir: impl AsRef<std::path::Path>) -> Result<Self, DetectorError> {
        let mut det = Self::new();
        let entries = std::fs::read_dir(dir.as_ref()).map_err(|e| DetectorError::Request(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| DetectorError::Request(e.to_string()))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(".regions.json") else {
                continue;
            };
            let sidecar: RegionSidecar = serde_json::from_slice(
                &std::fs::read(&path).map_err(|e| DetectorError::Request(e.to_string()))?,
            )
            .map_err(|e| DetectorError::Malformed(format!("{}: {e}", path.display())))?;
            let image_path = ["png", "jpg", "jpeg"]
                .iter()
                .map(|ext| path.with_file_name(format!("{stem}.{ext}")))
                .find(|p| p.exists());
            if let Some(image_path) = image_path {
                match crate::imaging::load_image(&image_path) {
                    Ok(img) => det.insert(&img, sidecar.boxes),
                    Err(e) => log::warn!("skipping sidecar for {}: {e}", image_path.display()),
                }
            }
        }
        Ok(det)
    }

    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }
}

pub(crate) fn pixel_digest(image: &Image) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.pixels());
    h.finalize().into()
}

impl Detector for SidecarDetector {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn detect(&self, image: &Image) -> Result<Vec<BoundingBox>, DetectorError> {
        self.by_digest
            .get(&pixel_digest(image))
            .cloned()
            .ok_or(DetectorError::UnknownImage)
    }
}
