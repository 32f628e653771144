//! Global-local dataset curation.
//!
//! Stages, per sample: pre-filtering (resolution, sharpness, OCR confidence,
//! text richness, licence), fusion of two detectors, grouping into slices,
//! fusion of a local and a context recognition, multi-round mutual
//! back-translation, then record- and region-level quality control.
//! Surviving records are written as JSON lines with a per-scene manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{laplacian_variance, Image};
use crate::prompt::Language;
use crate::regions::{self, BoundingBox, Detector, GroupingParams, RegionSet};

/// Seed list of scene tags.
pub const SCENES: [&str; 40] = [
    "document", "paper", "news", "novel", "poster", "leaflet", "cover", "title", "sign", "introduction",
    "menu", "road_sign", "receipt", "invoice", "ticket", "product_label", "packaging", "book_page",
    "magazine", "comic", "slide", "whiteboard", "screenshot", "web_page", "form", "certificate",
    "map", "timetable", "storefront", "banner", "billboard", "museum_label", "notice", "manual",
    "recipe", "brochure", "calendar", "catalogue", "infographic", "handwritten_note",
];

pub const GAP_MARKER: &str = "∅";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("all translators failed: {0}")]
    AllTranslatorsFailed(String),
    #[error("record has no fused translation")]
    MissingTranslation,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed dataset line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ContractError {
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("request failed: {0}")]
    Failed(String),
}

/// Text translator: `{text, src, tgt} -> text`.
pub trait Translator: Send + Sync {
    fn name(&self) -> &str;
    fn translate(&self, text: &str, src: Language, tgt: Language) -> Result<String, ContractError>;
}

/// Sentence embedder: `{text} -> vector`.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ContractError>;
}

/// Text recogniser for a region of an image.
pub trait Recognizer: Send + Sync {
    fn name(&self) -> &str;
    fn recognize(&self, image: &Image, region: &BoundingBox) -> Result<String, ContractError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcThresholds {
    pub tau_ocr: f64,
    pub min_regions: usize,
    pub min_side: u32,
    pub blur_floor: f64,
    pub tau_embed: f64,
    pub tau_roundtrip: f64,
    pub iou_min: f64,
    pub rounds: usize,
}

impl Default for QcThresholds {
    fn default() -> Self {
        Self {
            tau_ocr: 0.7,
            min_regions: 3,
            min_side: 448,
            blur_floor: 50.0,
            tau_embed: 0.75,
            tau_roundtrip: 0.6,
            iou_min: 0.5,
            rounds: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub image_id: String,
    pub image_path: String,
    pub scene: String,
    pub license_permissive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    LowResolution,
    Blur,
    LowOcrConfidence,
    LowTextRichness,
    License,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

/// Reject low-resolution, blurred, low-confidence, text-poor or
/// non-permissively licensed samples.
pub fn prefilter(sample: &RawSample, image: &Image, detections: &RegionSet, t: &QcThresholds) -> FilterVerdict {
    let mut reasons = Vec::new();
    if image.width().min(image.height()) < t.min_side {
        reasons.push(RejectReason::LowResolution);
    }
    if laplacian_variance(image) < t.blur_floor {
        reasons.push(RejectReason::Blur);
    }
    if detections.mean_confidence() < t.tau_ocr {
        reasons.push(RejectReason::LowOcrConfidence);
    }
    if detections.len() < t.min_regions {
        reasons.push(RejectReason::LowTextRichness);
    }
    if !sample.license_permissive {
        reasons.push(RejectReason::License);
    }
    FilterVerdict {
        accepted: reasons.is_empty(),
        reasons,
    }
}

/// Greedy descending-IoU fusion of two detectors' boxes. Matched pairs
/// become their union with the higher confidence; unmatched boxes survive
/// only with confidence at least `tau_ocr`.
pub fn fuse_detections(a: &RegionSet, b: &RegionSet, iou_min: f64, tau_ocr: f64) -> RegionSet {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ba) in a.boxes.iter().enumerate() {
        for (j, bb) in b.boxes.iter().enumerate() {
            let iou = ba.iou(bb);
            if iou >= iou_min && iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut match_a: Vec<Option<usize>> = vec![None; a.len()];
    let mut used_b = vec![false; b.len()];
    for (_, i, j) in pairs {
        if match_a[i].is_none() && !used_b[j] {
            match_a[i] = Some(j);
            used_b[j] = true;
        }
    }
    let mut out = Vec::new();
    for (i, ba) in a.boxes.iter().enumerate() {
        match match_a[i] {
            Some(j) => out.push(ba.union(&b.boxes[j])),
            None if ba.confidence >= tau_ocr => out.push(*ba),
            None => {}
        }
    }
    for (j, bb) in b.boxes.iter().enumerate() {
        if !used_b[j] && bb.confidence >= tau_ocr {
            out.push(*bb);
        }
    }
    RegionSet::new(out, a.source_dims)
}

/// Fill `∅` gaps in the local recognition from the context recognition.
///
/// Tokens are aligned by a longest-common-subsequence DP in which a gap
/// marker may also pair with any context token. Exact matches are maximised
/// first and gap pairings second. Non-gap local tokens are never changed.
pub fn fuse_recognition(local_text: &str, context_text: &str) -> String {
    let local: Vec<&str> = local_text.split_whitespace().collect();
    let context: Vec<&str> = context_text.split_whitespace().collect();
    if !local.contains(&GAP_MARKER) {
        return local.join(" ");
    }
    let (n, m) = (local.len(), context.len());
    // score = exact * (n + 1) + wildcard
    let exact = (n + 1) as u64;
    let mut dp = vec![vec![0u64; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let mut best = dp[i + 1][j].max(dp[i][j + 1]);
            if local[i] == GAP_MARKER {
                best = best.max(1 + dp[i + 1][j + 1]);
            } else if local[i] == context[j] {
                best = best.max(exact + dp[i + 1][j + 1]);
            }
            dp[i][j] = best;
        }
    }
    let mut out: Vec<&str> = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < n {
        if j < m {
            let diag = if local[i] == GAP_MARKER {
                Some(1)
            } else if local[i] == context[j] {
                Some(exact)
            } else {
                None
            };
            if let Some(w) = diag {
                if dp[i][j] == w + dp[i + 1][j + 1] {
                    out.push(if local[i] == GAP_MARKER { context[j] } else { local[i] });
                    i += 1;
                    j += 1;
                    continue;
                }
            }
            if dp[i][j] == dp[i + 1][j] {
                out.push(local[i]);
                i += 1;
            } else {
                j += 1;
            }
        } else {
            out.push(local[i]);
            i += 1;
        }
    }
    out.join(" ")
}

fn char_ngrams(text: &str, n: usize) -> BTreeMap<String, f64> {
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut counts = BTreeMap::new();
    if chars.is_empty() {
        return counts;
    }
    if chars.len() < n {
        counts.insert(chars.iter().collect(), 1.0);
        return counts;
    }
    for w in chars.windows(n) {
        *counts.entry(w.iter().collect()).or_insert(0.0) += 1.0;
    }
    counts
}

/// Character-trigram count vector (whitespace removed).
pub fn ngram_profile(text: &str) -> BTreeMap<String, f64> {
    char_ngrams(text, 3)
}

/// Cosine of character-trigram count vectors; in `[0, 1]`.
pub fn ngram_similarity(a: &str, b: &str) -> f64 {
    let (pa, pb) = (ngram_profile(a), ngram_profile(b));
    let dot: f64 = pa.iter().filter_map(|(k, v)| pb.get(k).map(|w| v * w)).sum();
    let na: f64 = pa.values().map(|v| v * v).sum();
    let nb: f64 = pb.values().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        // a single square root keeps identical profiles at exactly 1
        (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub translator: String,
    pub round: usize,
    pub text: String,
    /// Best similarity between the source and a back-translation of `text`.
    pub score: f64,
    pub back_translation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationFusion {
    pub fused: String,
    pub score: f64,
    pub candidates: Vec<Candidate>,
}

fn score_candidate(
    src: &str,
    text: &str,
    author: Option<usize>,
    translators: &[&dyn Translator],
    langs: (Language, Language),
) -> Option<(f64, String)> {
    let mut best: Option<(f64, String)> = None;
    for (k, t) in translators.iter().enumerate() {
        // back-translate with the other translators; a lone translator checks itself
        if Some(k) == author && translators.len() > 1 {
            continue;
        }
        if let Ok(back) = t.translate(text, langs.1, langs.0) {
            let s = ngram_similarity(src, &back);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, back));
            }
        }
    }
    best
}

/// Multi-round mutual back-translation. Round one translates the source
/// with every translator; later rounds keep the previous winner and
/// re-translate its best back-translation. The winner is the candidate
/// whose back-translation is most similar to the source.
pub fn fuse_translation(
    src: &str,
    translators: &[&dyn Translator],
    langs: (Language, Language),
    rounds: usize,
) -> Result<TranslationFusion, CurationError> {
    if translators.is_empty() {
        return Err(CurationError::AllTranslatorsFailed("no translators configured".into()));
    }
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut winner: Option<Candidate> = None;
    let mut errors = Vec::new();
    for round in 1..=rounds.max(1) {
        let seed = match &winner {
            None => src.to_string(),
            Some(w) => w.back_translation.clone(),
        };
        let mut round_best = winner.clone();
        for (k, t) in translators.iter().enumerate() {
            let text = match t.translate(&seed, langs.0, langs.1) {
                Ok(text) => text,
                Err(e) => {
                    errors.push(format!("{}: {e}", t.name()));
                    continue;
                }
            };
            let (score, back) = score_candidate(src, &text, Some(k), translators, langs).unwrap_or((0.0, String::new()));
            let cand = Candidate {
                translator: t.name().to_string(),
                round,
                text,
                score,
                back_translation: back,
            };
            if round_best.as_ref().is_none_or(|b| cand.score > b.score) {
                round_best = Some(cand.clone());
            }
            candidates.push(cand);
        }
        winner = round_best;
        if winner.is_none() {
            break;
        }
    }
    let winner = winner.ok_or_else(|| CurationError::AllTranslatorsFailed(errors.join("; ")))?;
    Ok(TranslationFusion {
        fused: winner.text,
        score: winner.score,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedSlice {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub recognized_local: String,
    pub recognized_context: String,
    pub src_text: String,
    pub translation: String,
    pub region_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcScores {
    pub embed_sim: f64,
    pub roundtrip_sim: f64,
    /// Embedder that produced `embed_sim`.
    pub embedder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub image_id: String,
    pub scene: String,
    pub global_image: String,
    pub slices: Vec<CuratedSlice>,
    pub fused_source: String,
    pub candidate_translations: Vec<Candidate>,
    pub fused_translation: Option<String>,
    pub qc: Option<QcScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcDropReason {
    LowEmbedSimilarity,
    LowRoundtripSimilarity,
    NoRegionsLeft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcOutcome {
    pub keep: bool,
    pub reasons: Vec<QcDropReason>,
    pub record: CurationRecord,
    /// Slices removed for semantic drift, as indices into the input record.
    pub dropped_regions: Vec<usize>,
}

/// Built-in character-trigram embedder used when no embedder is reachable.
#[derive(Debug, Clone, Default)]
pub struct NgramEmbedder;

pub const BUILTIN_EMBEDDER: &str = "builtin-char3";

const HASHED_DIMS: usize = 2048;

impl Embedder for NgramEmbedder {
    fn name(&self) -> &str {
        BUILTIN_EMBEDDER
    }

    /// Trigram counts hashed (FNV-1a) into a fixed-width vector.
    fn embed(&self, text: &str) -> Result<Vec<f64>, ContractError> {
        let mut v = vec![0.0; HASHED_DIMS];
        for (gram, count) in ngram_profile(text) {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in gram.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            v[(h % HASHED_DIMS as u64) as usize] += count;
        }
        Ok(v)
    }
}

struct Similarity<'a> {
    embedder: Option<&'a dyn Embedder>,
    name: String,
}

impl<'a> Similarity<'a> {
    fn new(embedder: Option<&'a dyn Embedder>) -> Self {
        let name = embedder.map_or(BUILTIN_EMBEDDER.to_string(), |e| e.name().to_string());
        Self { embedder, name }
    }

    fn sim(&mut self, a: &str, b: &str) -> f64 {
        if let Some(e) = self.embedder {
            match (e.embed(a), e.embed(b)) {
                (Ok(va), Ok(vb)) => return cosine(&va, &vb),
                (Err(err), _) | (_, Err(err)) => {
                    log::warn!("embedder {} unavailable ({err}); falling back to {BUILTIN_EMBEDDER}", e.name());
                    self.embedder = None;
                    self.name = format!("{BUILTIN_EMBEDDER} (fallback from {})", e.name());
                }
            }
        }
        ngram_similarity(a, b)
    }
}

/// Record- and region-level quality control.
pub fn quality_control(
    record: &CurationRecord,
    embedder: Option<&dyn Embedder>,
    translators: &[&dyn Translator],
    langs: (Language, Language),
    t: &QcThresholds,
) -> Result<QcOutcome, CurationError> {
    let translation = record
        .fused_translation
        .clone()
        .ok_or(CurationError::MissingTranslation)?;
    let mut sim = Similarity::new(embedder);
    let embed_sim = sim.sim(&record.fused_source, &translation);
    let roundtrip_sim = translators
        .iter()
        .filter_map(|tr| tr.translate(&translation, langs.1, langs.0).ok())
        .map(|back| ngram_similarity(&record.fused_source, &back))
        .fold(0.0, f64::max);

    let global_lines: Vec<&str> = translation.lines().collect();
    let aligned = global_lines.len() == record.slices.len();
    let mut kept = Vec::new();
    let mut dropped_regions = Vec::new();
    for (k, slice) in record.slices.iter().enumerate() {
        let reference = if aligned { global_lines[k] } else { translation.as_str() };
        let s = sim.sim(&slice.translation, reference);
        let mut slice = slice.clone();
        slice.region_sim = Some(s);
        if s < t.tau_embed {
            dropped_regions.push(k);
        } else {
            kept.push(slice);
        }
    }

    let mut reasons = Vec::new();
    if embed_sim < t.tau_embed {
        reasons.push(QcDropReason::LowEmbedSimilarity);
    }
    if roundtrip_sim < t.tau_roundtrip {
        reasons.push(QcDropReason::LowRoundtripSimilarity);
    }
    if kept.is_empty() {
        reasons.push(QcDropReason::NoRegionsLeft);
    }
    let mut scored = record.clone();
    scored.slices = kept;
    scored.qc = Some(QcScores {
        embed_sim,
        roundtrip_sim,
        embedder: sim.name.clone(),
    });
    Ok(QcOutcome {
        keep: reasons.is_empty(),
        reasons,
        record: scored,
        dropped_regions,
    })
}

/// Published dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub scene: String,
    pub global_image: String,
    pub slices: Vec<DatasetSlice>,
    pub fused_source: String,
    pub fused_translation: String,
    pub qc: DatasetQc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSlice {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub src_text: String,
    pub translation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetQc {
    pub embed_sim: f64,
    pub roundtrip_sim: f64,
}

impl DatasetRecord {
    pub fn from_curated(r: &CurationRecord) -> Result<Self, CurationError> {
        let qc = r.qc.as_ref().ok_or(CurationError::MissingTranslation)?;
        Ok(Self {
            image_id: r.image_id.clone(),
            scene: r.scene.clone(),
            global_image: r.global_image.clone(),
            slices: r
                .slices
                .iter()
                .map(|s| DatasetSlice {
                    bbox: s.bbox,
                    src_text: s.src_text.clone(),
                    translation: s.translation.clone(),
                })
                .collect(),
            fused_source: r.fused_source.clone(),
            fused_translation: r.fused_translation.clone().ok_or(CurationError::MissingTranslation)?,
            qc: DatasetQc {
                embed_sim: qc.embed_sim,
                roundtrip_sim: qc.roundtrip_sim,
            },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: usize,
    pub per_scene: BTreeMap<String, usize>,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CurationError {
    CurationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Write `dataset.jsonl` (sorted by image id) and `manifest.json` into
/// `out_dir`. Returns the number of records written.
pub fn emit_dataset(records: &[CurationRecord], out_dir: &Path) -> Result<usize, CurationError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut rows: Vec<DatasetRecord> = records.iter().map(DatasetRecord::from_curated).collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut body = String::new();
    let mut manifest = Manifest::default();
    for row in &rows {
        body.push_str(&serde_json::to_string(row).map_err(|e| io_err(out_dir, e))?);
        body.push('\n');
        *manifest.per_scene.entry(row.scene.clone()).or_insert(0) += 1;
    }
    manifest.records = rows.len();
    let data_path = out_dir.join(DATASET_FILE);
    std::fs::write(&data_path, body).map_err(|e| io_err(&data_path, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    std::fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;
    Ok(rows.len())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, CurationError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CurationError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CurationError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CurationError::Parse {
        line: 0,
        message: e.to_string(),
    })
}

/// Reviewable CSV for manual verification of kept records.
pub fn export_audit(records: &[CurationRecord], path: &Path) -> Result<(), CurationError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["image_id", "scene", "slice", "src_text", "translation", "region_sim"])
        .map_err(|e| io_err(path, e))?;
    for r in records {
        for (k, s) in r.slices.iter().enumerate() {
            w.write_record([
                r.image_id.as_str(),
                r.scene.as_str(),
                &k.to_string(),
                s.src_text.as_str(),
                s.translation.as_str(),
                &s.region_sim.map(|v| format!("{v:.4}")).unwrap_or_default(),
            ])
            .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// External services used by the curation pipeline.
pub struct CurationContext<'a> {
    pub detector_a: &'a dyn Detector,
    pub detector_b: &'a dyn Detector,
    /// Fine-grained per-slice recogniser; may leave `∅` gaps.
    pub local_recognizer: &'a dyn Recognizer,
    /// Whole-image context recogniser used to fill gaps.
    pub context_recognizer: &'a dyn Recognizer,
    pub translators: Vec<&'a dyn Translator>,
    pub embedder: Option<&'a dyn Embedder>,
    pub thresholds: QcThresholds,
    pub grouping: GroupingParams,
    pub langs: (Language, Language),
}

/// One raw input with its decoded image.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub raw: RawSample,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum SampleFate {
    Rejected { reasons: Vec<RejectReason> },
    Failed { error: String },
    Dropped { reasons: Vec<QcDropReason>, dropped_regions: usize },
    Kept { dropped_regions: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub image_id: String,
    pub scene: String,
    pub fate: SampleFate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub samples: usize,
    pub kept: usize,
    pub rejected: usize,
    pub qc_dropped: usize,
    pub failed: usize,
    pub dropped_regions: usize,
    pub kept_per_scene: BTreeMap<String, usize>,
    pub reject_reasons: BTreeMap<RejectReason, usize>,
    pub qc_reasons: BTreeMap<QcDropReason, usize>,
}

#[derive(Debug, Clone)]
pub struct CurationOutcome {
    pub records: Vec<CurationRecord>,
    pub reports: Vec<SampleReport>,
    pub summary: CurationSummary,
}

fn is_linguistic(text: &str) -> bool {
    text.chars().any(char::is_alphanumeric)
}

/// Run every stage on one sample.
pub fn curate_sample(sample: &SampleInput, ctx: &CurationContext<'_>) -> (SampleReport, Option<CurationRecord>) {
    let report = |fate| SampleReport {
        image_id: sample.raw.image_id.clone(),
        scene: sample.raw.scene.clone(),
        fate,
    };
    let failed = |e: String| (report(SampleFate::Failed { error: e }), None);
    let t = &ctx.thresholds;
    let img = &sample.image;

    let det_a = match regions::detect_regions(img, ctx.detector_a) {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let verdict = prefilter(&sample.raw, img, &det_a, t);
    if !verdict.accepted {
        return (report(SampleFate::Rejected { reasons: verdict.reasons }), None);
    }
    let det_b = match regions::detect_regions(img, ctx.detector_b) {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let fused = fuse_detections(&det_a, &det_b, t.iou_min, t.tau_ocr);
    let groups = regions::merge_regions(&regions::order_regions(&fused), &ctx.grouping);

    let mut slices = Vec::new();
    for g in &groups {
        let local = ctx.local_recognizer.recognize(img, &g.union_box);
        let context = ctx.context_recognizer.recognize(img, &g.union_box);
        let (local, context) = match (local, context) {
            (Ok(l), Ok(c)) => (l, c),
            (Err(e), _) | (_, Err(e)) => return failed(e.to_string()),
        };
        let src_text = fuse_recognition(&local, &context);
        if !is_linguistic(&src_text) || src_text.contains(GAP_MARKER) {
            continue;
        }
        let translation = match fuse_translation(&src_text, &ctx.translators, ctx.langs, t.rounds) {
            Ok(f) => f.fused,
            Err(e) => return failed(e.to_string()),
        };
        if translation.trim().is_empty() {
            continue;
        }
        slices.push(CuratedSlice {
            bbox: g.union_box,
            recognized_local: local,
            recognized_context: context,
            src_text,
            translation,
            region_sim: None,
        });
    }

    let fused_source = slices.iter().map(|s| s.src_text.as_str()).collect::<Vec<_>>().join("\n");
    let (fused_translation, candidates) = if slices.is_empty() {
        (None, Vec::new())
    } else {
        match fuse_translation(&fused_source, &ctx.translators, ctx.langs, t.rounds) {
            Ok(f) => (Some(f.fused), f.candidates),
            Err(e) => return failed(e.to_string()),
        }
    };
    let record = CurationRecord {
        image_id: sample.raw.image_id.clone(),
        scene: sample.raw.scene.clone(),
        global_image: format!("images/{}.png", sample.raw.image_id),
        slices,
        fused_source,
        candidate_translations: candidates,
        fused_translation,
        qc: None,
    };
    if record.fused_translation.is_none() {
        return (
            report(SampleFate::Dropped {
                reasons: vec![QcDropReason::NoRegionsLeft],
                dropped_regions: 0,
            }),
            None,
        );
    }
    match quality_control(&record, ctx.embedder, &ctx.translators, ctx.langs, t) {
        Ok(out) if out.keep => (
            report(SampleFate::Kept {
                dropped_regions: out.dropped_regions.len(),
            }),
            Some(out.record),
        ),
        Ok(out) => (
            report(SampleFate::Dropped {
                reasons: out.reasons,
                dropped_regions: out.dropped_regions.len(),
            }),
            None,
        ),
        Err(e) => failed(e.to_string()),
    }
}

/// Curate samples on a bounded worker pool. Output is sorted by image id.
pub fn curate(samples: &[SampleInput], ctx: &CurationContext<'_>, workers: usize) -> CurationOutcome {
    let run = || -> Vec<(SampleReport, Option<CurationRecord>)> {
        samples.par_iter().map(|s| curate_sample(s, ctx)).collect()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };

    let mut records = Vec::new();
    let mut reports = Vec::new();
    let mut summary = CurationSummary {
        samples: samples.len(),
        ..CurationSummary::default()
    };
    for (report, record) in results {
        match &report.fate {
            SampleFate::Kept { dropped_regions } => {
                summary.kept += 1;
                summary.dropped_regions += dropped_regions;
                *summary.kept_per_scene.entry(report.scene.clone()).or_insert(0) += 1;
            }
            SampleFate::Rejected { reasons } => {
                summary.rejected += 1;
                for r in reasons {
                    *summary.reject_reasons.entry(*r).or_insert(0) += 1;
                }
            }
            SampleFate::Dropped { reasons, .. } => {
                summary.qc_dropped += 1;
                for r in reasons {
                    *summary.qc_reasons.entry(*r).or_insert(0) += 1;
                }
            }
            SampleFate::Failed { .. } => summary.failed += 1,
        }
        if let Some(r) = record {
            records.push(r);
        }
        reports.push(report);
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    reports.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    CurationOutcome {
        records,
        reports,
        summary,
    }
}

/// Translator returning its input unchanged.
#[derive(Debug, Clone, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn name(&self) -> &str {
        "identity"
    }

    fn translate(&self, text: &str, _: Language, _: Language) -> Result<String, ContractError> {
        Ok(text.to_string())
    }
}

/// Translator answering from a fixed table keyed on `(input, tgt)`.
#[derive(Debug, Clone, Default)]
pub struct TableTranslator {
    pub name: String,
    pub table: HashMap<(String, Language), String>,
}

impl TableTranslator {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            table: HashMap::new(),
        }
    }

    pub fn with(mut self, input: &str, tgt: Language, output: &str) -> Self {
        self.table.insert((input.to_string(), tgt), output.to_string());
        self
    }
}

impl Translator for TableTranslator {
    fn name(&self) -> &str {
        &self.name
    }

    fn translate(&self, text: &str, _: Language, tgt: Language) -> Result<String, ContractError> {
        self.table
            .get(&(text.to_string(), tgt))
            .cloned()
            .ok_or_else(|| ContractError::Failed(format!("{}: no entry for `{text}`", self.name)))
    }
}

/// Embedder that is never reachable.
#[derive(Debug, Clone, Default)]
pub struct UnreachableEmbedder;

impl Embedder for UnreachableEmbedder {
    fn name(&self) -> &str {
        "unreachable"
    }

    fn embed(&self, _: &str) -> Result<Vec<f64>, ContractError> {
        Err(ContractError::Unavailable("connection refused".into()))
    }
}

/// Directory layout helpers for curated output.
pub fn dataset_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join(DATASET_FILE), out_dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EN: Language = Language::En;
    const ZH: Language = Language::Zh;

    fn sample(permissive: bool) -> RawSample {
        RawSample {
            image_id: "s".into(),
            image_path: "s.png".into(),
            scene: "poster".into(),
            license_permissive: permissive,
        }
    }

    fn checker(w: u32, h: u32) -> Image {
        let mut img = Image::filled(w, h, [255, 255, 255]);
        for y in 0..h {
            for x in 0..w {
                if (x / 4 + y / 4) % 2 == 0 {
                    img.put_pixel(x, y, [0, 0, 0]);
                }
            }
        }
        img
    }

    fn regions(n: usize, conf: f64) -> RegionSet {
        let boxes = (0..n)
            .map(|i| BoundingBox::with_confidence(10.0, 10.0 + 40.0 * i as f64, 200.0, 40.0 + 40.0 * i as f64, conf))
            .collect();
        RegionSet::new(boxes, (512, 512))
    }

    #[test]
    fn prefilter_low_resolution() {
        let v = prefilter(&sample(true), &checker(100, 80), &regions(4, 0.9), &QcThresholds::default());
        assert_eq!(v.reasons, vec![RejectReason::LowResolution]);
        assert!(!v.accepted);
    }

    #[test]
    fn prefilter_constant_is_blur() {
        let v = prefilter(
            &sample(true),
            &Image::filled(512, 512, [90, 90, 90]),
            &regions(4, 0.9),
            &QcThresholds::default(),
        );
        assert_eq!(v.reasons, vec![RejectReason::Blur]);
    }

    #[test]
    fn prefilter_accepts_sharp_rich() {
        let v = prefilter(&sample(true), &checker(512, 512), &regions(4, 0.9), &QcThresholds::default());
        assert!(v.accepted && v.reasons.is_empty());
        let v = prefilter(&sample(false), &checker(512, 512), &regions(2, 0.5), &QcThresholds::default());
        assert_eq!(
            v.reasons,
            vec![RejectReason::LowOcrConfidence, RejectReason::LowTextRichness, RejectReason::License]
        );
    }

    #[test]
    fn fuse_identical_sets() {
        let a = regions(3, 0.4);
        assert_eq!(fuse_detections(&a, &a, 0.5, 0.7), a);
    }

    #[test]
    fn fuse_disjoint_sets() {
        let a = RegionSet::new(vec![BoundingBox::with_confidence(0.0, 0.0, 10.0, 10.0, 0.9)], (100, 100));
        let b = RegionSet::new(vec![BoundingBox::with_confidence(50.0, 50.0, 60.0, 60.0, 0.8)], (100, 100));
        let f = fuse_detections(&a, &b, 0.5, 0.7);
        assert_eq!(f.boxes, vec![a.boxes[0], b.boxes[0]]);
        let low = RegionSet::new(vec![BoundingBox::with_confidence(50.0, 50.0, 60.0, 60.0, 0.2)], (100, 100));
        assert_eq!(fuse_detections(&a, &low, 0.5, 0.7).boxes, vec![a.boxes[0]]);
    }

    #[test]
    fn fuse_pair_at_iou_06() {
        // [0,10]x[0,10] and [0,10]x[2.5,12.5]: inter 75, union 125 -> 0.6
        let a = RegionSet::new(vec![BoundingBox::with_confidence(0.0, 0.0, 10.0, 10.0, 0.6)], (20, 20));
        let b = RegionSet::new(vec![BoundingBox::with_confidence(0.0, 2.5, 10.0, 12.5, 0.9)], (20, 20));
        assert!((a.boxes[0].iou(&b.boxes[0]) - 0.6).abs() < 1e-12);
        let f = fuse_detections(&a, &b, 0.5, 0.7);
        assert_eq!(f.boxes, vec![BoundingBox::with_confidence(0.0, 0.0, 10.0, 12.5, 0.9)]);
    }

    #[test]
    fn recognition_fusion_cases() {
        assert_eq!(fuse_recognition("The issue of May", "The issue of May"), "The issue of May");
        assert_eq!(fuse_recognition("The ∅ of May", "The issue of May"), "The issue of May");
        assert_eq!(fuse_recognition("∅ a", "a a"), "a a");
        // disagreeing non-gap tokens are kept from the local text
        assert_eq!(fuse_recognition("The ∅ of Mya", "The issue of May"), "The issue of Mya");
        // unresolvable gap is left in place
        assert_eq!(fuse_recognition("x ∅", "x"), "x ∅");
    }

    #[test]
    fn ngram_similarity_bounds() {
        assert_eq!(ngram_similarity("hello world", "hello world"), 1.0);
        assert_eq!(ngram_similarity("abc", "xyz"), 0.0);
        assert_eq!(ngram_similarity("", "abc"), 0.0);
        assert_eq!(ngram_similarity("ab", "ab"), 1.0);
    }

    #[test]
    fn single_identity_translator() {
        let id = IdentityTranslator;
        let f = fuse_translation("some text here", &[&id], (EN, ZH), 2).unwrap();
        assert_eq!(f.fused, "some text here");
        assert_eq!(f.score, 1.0);
    }

    #[test]
    fn faithful_translator_wins() {
        let a = TableTranslator::new("a")
            .with("hello there", ZH, "你好")
            .with("你好", EN, "hello there")
            .with("喂", EN, "hey you");
        let b = TableTranslator::new("b")
            .with("hello there", ZH, "喂")
            .with("喂", EN, "hey you")
            .with("你好", EN, "hello there");
        let f = fuse_translation("hello there", &[&a, &b], (EN, ZH), 1).unwrap();
        assert_eq!(f.fused, "你好");
        assert_eq!(f.candidates.len(), 2);
    }

    #[test]
    fn all_translators_failing() {
        let t = TableTranslator::new("empty");
        assert!(matches!(
            fuse_translation("x", &[&t], (EN, ZH), 1),
            Err(CurationError::AllTranslatorsFailed(_))
        ));
    }

    fn record(src: &str, tr: &str) -> CurationRecord {
        CurationRecord {
            image_id: "r".into(),
            scene: "menu".into(),
            global_image: "images/r.png".into(),
            slices: vec![CuratedSlice {
                bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
                recognized_local: src.into(),
                recognized_context: src.into(),
                src_text: src.into(),
                translation: tr.into(),
                region_sim: None,
            }],
            fused_source: src.into(),
            candidate_translations: vec![],
            fused_translation: Some(tr.into()),
            qc: None,
        }
    }

    #[test]
    fn qc_identity_kept() {
        let id = IdentityTranslator;
        let out = quality_control(&record("fresh bread", "fresh bread"), None, &[&id], (EN, ZH), &QcThresholds::default()).unwrap();
        assert!(out.keep);
        let qc = out.record.qc.unwrap();
        assert_eq!(qc.roundtrip_sim, 1.0);
        assert_eq!(qc.embedder, BUILTIN_EMBEDDER);
    }

    #[test]
    fn qc_disjoint_dropped_and_fallback_noted() {
        let id = IdentityTranslator;
        let down = UnreachableEmbedder;
        let out = quality_control(&record("abcdef", "uvwxyz"), Some(&down), &[&id], (EN, ZH), &QcThresholds::default()).unwrap();
        assert!(!out.keep);
        let qc = out.record.qc.unwrap();
        assert_eq!(qc.embed_sim, 0.0);
        assert!(qc.embedder.contains("fallback"));
        assert!(out.reasons.contains(&QcDropReason::LowEmbedSimilarity));
    }

    #[test]
    fn emit_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(emit_dataset(&[], dir.path()).unwrap(), 0);
        let (data, manifest) = dataset_paths(dir.path());
        assert_eq!(std::fs::read_to_string(data).unwrap(), "");
        assert_eq!(read_manifest(&manifest).unwrap(), Manifest::default());
    }

    #[test]
    fn emit_requires_qc() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_dataset(&[record("a", "b")], dir.path()).is_err());
    }
}
