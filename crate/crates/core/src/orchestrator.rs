//! Regressive per-slice translation loop.
//!
//! For each image: detect, order and merge regions, crop the slices, build
//! the global view once, then translate the slices strictly in reading
//! order. Only successful translations enter the replay window, so a failed
//! slice never feeds error text into later prompts.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, downsample_global, GlobalView, Image, ImagingError, SliceCrop};
use crate::metrics::{self, EfficiencyReport, TimingEvent, TimingKind};
use crate::prompt::{
    build_prompt, render_message_sequence, Language, MessageSequence, PromptError, ReplayWindow, TemplateSet,
};
use crate::regions::{self, BoundingBox, DetectionError, Detector, GroupingParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Seconds before the second attempt.
    pub base_backoff: f64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff: 0.5,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_backoff: 0.0,
            multiplier: 1.0,
        }
    }

    /// Delay before attempt `attempt` (1-based; the first attempt has none).
    pub fn backoff(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let secs = self.base_backoff * self.multiplier.powi(attempt as i32 - 2);
        Duration::from_secs_f64(secs.max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub global_resolution: u32,
    pub slice_cap: u32,
    pub replay: usize,
    pub grouping: GroupingParams,
    pub retry: RetryPolicy,
    pub src_lang: Language,
    pub tgt_lang: Language,
    pub generation: GenerationParams,
    /// Patch size used for visual-token accounting.
    pub patch_size: u32,
    /// Text emitted for failed slices in the assembled document.
    pub failed_placeholder: Option<String>,
    pub templates: TemplateSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            global_resolution: 224,
            slice_cap: imaging::DEFAULT_SLICE_CAP,
            replay: crate::prompt::DEFAULT_REPLAY,
            grouping: GroupingParams::default(),
            retry: RetryPolicy::default(),
            src_lang: Language::En,
            tgt_lang: Language::Zh,
            generation: GenerationParams::default(),
            patch_size: 16,
            failed_placeholder: None,
            templates: TemplateSet::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("global resolution must be at least {min}, got {0}", min = imaging::MIN_GLOBAL_RESOLUTION)]
    Resolution(u32),
    #[error("slice cap must be positive")]
    SliceCap,
    #[error("replay window must be at most {max}, got {0}", max = crate::prompt::MAX_REPLAY)]
    Replay(usize),
    #[error("retry policy needs at least one attempt")]
    Attempts,
    #[error("grouping thresholds must be finite and non-negative")]
    Grouping,
    #[error("patch size must be positive")]
    Patch,
    #[error(transparent)]
    Template(#[from] PromptError),
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.global_resolution < imaging::MIN_GLOBAL_RESOLUTION {
            return Err(ConfigError::Resolution(self.global_resolution));
        }
        if self.slice_cap == 0 {
            return Err(ConfigError::SliceCap);
        }
        if self.replay > crate::prompt::MAX_REPLAY {
            return Err(ConfigError::Replay(self.replay));
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::Attempts);
        }
        if !self.grouping.is_valid() {
            return Err(ConfigError::Grouping);
        }
        if self.patch_size == 0 {
            return Err(ConfigError::Patch);
        }
        self.templates.validate()?;
        Ok(())
    }
}

/// Which slice a request belongs to. Adapters that talk to real models
/// ignore it; deterministic mocks key on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub image_id: String,
    pub order_index: usize,
    pub source_box: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct BackendRequest<'a> {
    pub messages: &'a MessageSequence,
    pub params: &'a GenerationParams,
    pub slice: &'a SliceMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    /// When the first response byte arrived, if the adapter can tell.
    pub first_byte: Option<Instant>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            first_byte: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend produced no translation: {0}")]
    Empty(String),
}

/// Multimodal translation model behind a request/response contract.
/// Implementations must tolerate concurrent calls from different images.
pub trait TranslationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn translate(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError>;
}

impl<T: TranslationBackend + ?Sized> TranslationBackend for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn translate(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        (**self).translate(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub order_index: usize,
    pub source_box: BoundingBox,
    pub translation: String,
    pub status: SliceStatus,
    pub attempts: u32,
    /// Wall-clock seconds spent on this slice, retries included.
    pub latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Seconds from request start to first response byte of the
    /// successful attempt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_latency: Option<f64>,
}

impl SliceResult {
    pub fn is_ok(&self) -> bool {
        self.status == SliceStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentStats {
    pub n_b: usize,
    pub n_s: usize,
    pub ok: usize,
    pub failed: usize,
    /// Set when at least one slice failed.
    #[serde(default)]
    pub partial: bool,
    pub visual_tokens: u64,
    pub total_latency: f64,
    pub first_token_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentResult {
    pub image_id: String,
    pub slices: Vec<SliceResult>,
    pub document: String,
    pub stats: DocumentStats,
    #[serde(skip)]
    pub timeline: Vec<TimingEvent>,
}

impl DocumentResult {
    /// Copy with every timing field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> DocumentResult {
        let mut out = self.clone();
        out.timeline.clear();
        out.stats.total_latency = 0.0;
        out.stats.first_token_latency = 0.0;
        for s in &mut out.slices {
            s.latency = 0.0;
            s.first_token_latency = None;
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

static EPOCH: OnceLock<Instant> = OnceLock::new();

/// Seconds since a process-wide epoch; the time base of timing events.
pub fn clock_seconds(at: Instant) -> f64 {
    let epoch = *EPOCH.get_or_init(Instant::now);
    at.saturating_duration_since(epoch).as_secs_f64()
}

/// Translate one slice with retries.
#[allow(clippy::too_many_arguments)]
pub fn translate_slice(
    i: usize,
    global: &GlobalView,
    slice: &SliceCrop,
    window: &ReplayWindow,
    cfg: &PipelineConfig,
    backend: &dyn TranslationBackend,
    meta: &SliceMeta,
    timeline: &mut Vec<TimingEvent>,
) -> Result<SliceResult, PromptError> {
    let bundle = build_prompt(i, window, (cfg.src_lang, cfg.tgt_lang), &cfg.templates)?;
    let messages = render_message_sequence(&bundle, global, slice);
    let request = BackendRequest {
        messages: &messages,
        params: &cfg.generation,
        slice: meta,
    };

    let started = Instant::now();
    let mut attempts = 0;
    let mut last_error = None;
    while attempts < cfg.retry.max_attempts.max(1) {
        attempts += 1;
        let wait = cfg.retry.backoff(attempts);
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        let attempt_start = Instant::now();
        timeline.push(TimingEvent::new(&meta.image_id, TimingKind::RequestStart, clock_seconds(attempt_start)));
        let outcome = backend.translate(&request).and_then(|reply| {
            if reply.text.trim().is_empty() {
                Err(BackendError::Empty("blank reply".into()))
            } else {
                Ok(reply)
            }
        });
        match outcome {
            Ok(reply) => {
                let first = reply.first_byte.unwrap_or_else(Instant::now).max(attempt_start);
                timeline.push(TimingEvent::new(&meta.image_id, TimingKind::FirstByte, clock_seconds(first)));
                return Ok(SliceResult {
                    order_index: meta.order_index,
                    source_box: meta.source_box,
                    translation: reply.text.trim().to_string(),
                    status: SliceStatus::Ok,
                    attempts,
                    latency: started.elapsed().as_secs_f64(),
                    error: None,
                    first_token_latency: Some(first.duration_since(attempt_start).as_secs_f64()),
                });
            }
            Err(e) => {
                log::debug!(
                    "{} slice {} attempt {attempts} failed: {e}",
                    meta.image_id,
                    meta.order_index
                );
                last_error = Some(e);
            }
        }
    }
    Ok(SliceResult {
        order_index: meta.order_index,
        source_box: meta.source_box,
        translation: String::new(),
        status: SliceStatus::Failed,
        attempts,
        latency: started.elapsed().as_secs_f64(),
        error: last_error.map(|e| e.to_string()),
        first_token_latency: None,
    })
}

/// Join successful translations in reading order, one per line.
pub fn assemble_document(slices: &[SliceResult], failed_placeholder: Option<&str>) -> String {
    let mut ordered: Vec<&SliceResult> = slices.iter().collect();
    ordered.sort_by_key(|s| s.order_index);
    ordered
        .into_iter()
        .filter_map(|s| match s.status {
            SliceStatus::Ok => Some(s.translation.as_str()),
            SliceStatus::Failed => failed_placeholder,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Full pipeline for one image.
pub fn translate_image(
    image_id: &str,
    image: &Image,
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    backend: &dyn TranslationBackend,
) -> Result<DocumentResult, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut timeline = vec![TimingEvent::new(image_id, TimingKind::ImageStart, clock_seconds(started))];

    let detected = regions::detect_regions(image, detector)?;
    let slices = regions::build_slices(image, &detected, &cfg.grouping, cfg.slice_cap)?;
    let global = downsample_global(image, cfg.global_resolution)?;
    let groups: Vec<_> = slices.iter().map(|(g, _)| g.clone()).collect();
    let visual_tokens = metrics::count_visual_tokens(cfg.global_resolution, &groups, cfg.slice_cap, cfg.patch_size);

    let mut window = ReplayWindow::new(cfg.replay);
    let mut results = Vec::with_capacity(slices.len());
    for (group, crop) in &slices {
        let meta = SliceMeta {
            image_id: image_id.to_string(),
            order_index: group.order_index,
            source_box: group.union_box,
        };
        let i = group.order_index + 1;
        let result = translate_slice(i, &global, crop, &window, cfg, backend, &meta, &mut timeline)?;
        if result.is_ok() {
            window.push(i, result.translation.clone())?;
        }
        results.push(result);
    }

    let ftls: Vec<f64> = results.iter().filter_map(|s| s.first_token_latency).collect();
    let first_token_latency = if ftls.is_empty() {
        0.0
    } else {
        ftls.iter().sum::<f64>() / ftls.len() as f64
    };
    let ok = results.iter().filter(|s| s.is_ok()).count();
    let finished = Instant::now();
    timeline.push(TimingEvent::new(image_id, TimingKind::ImageEnd, clock_seconds(finished)));

    Ok(DocumentResult {
        image_id: image_id.to_string(),
        document: assemble_document(&results, cfg.failed_placeholder.as_deref()),
        stats: DocumentStats {
            n_b: detected.len(),
            n_s: results.len(),
            ok,
            failed: results.len() - ok,
            partial: ok < results.len(),
            visual_tokens,
            total_latency: finished.duration_since(started).as_secs_f64(),
            first_token_latency,
        },
        slices: results,
        timeline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub records: usize,
    pub skipped: Vec<SkipEntry>,
    pub total_slices: usize,
    pub ok_slices: usize,
    pub coverage: f64,
    pub efficiency: EfficiencyReport,
    /// Corpus BLEU against `<stem>.ref.txt` sidecars, when every record has one.
    pub bleu: Option<f64>,
}

/// Image files in a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let io = |e: std::io::Error| PipelineError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false);
        if is_image && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn image_id_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

/// Translate every image in `input_dir`, writing one JSON line per image to
/// `out_path`. Unreadable images and detector failures are skipped.
pub fn run_batch(
    input_dir: &Path,
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    backend: &dyn TranslationBackend,
    out_path: &Path,
    workers: usize,
) -> Result<(BatchReport, Vec<DocumentResult>), PipelineError> {
    cfg.validate()?;
    let paths = list_images(input_dir)?;
    run_images(&paths, cfg, detector, backend, out_path, workers)
}

/// [`run_batch`] over an explicit list of image files. Records are written
/// in the order of `paths`; references are looked up next to each image.
pub fn run_images(
    paths: &[PathBuf],
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    backend: &dyn TranslationBackend,
    out_path: &Path,
    workers: usize,
) -> Result<(BatchReport, Vec<DocumentResult>), PipelineError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Io {
            path: "<thread pool>".into(),
            message: e.to_string(),
        })?;

    let wall_start = Instant::now();
    let outcomes: Vec<Result<DocumentResult, SkipEntry>> = pool.install(|| {
        paths
            .par_iter()
            .map(|path| {
                let skip = |reason: String| SkipEntry {
                    path: path.display().to_string(),
                    reason,
                };
                let image = imaging::load_image(path).map_err(|e| skip(e.to_string()))?;
                translate_image(&image_id_of(path), &image, cfg, detector, backend).map_err(|e| skip(e.to_string()))
            })
            .collect()
    });
    let wall = wall_start.elapsed().as_secs_f64();

    let mut file = std::fs::File::create(out_path).map_err(|e| PipelineError::Io {
        path: out_path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut results = Vec::new();
    let mut dirs = Vec::new();
    let mut skipped = Vec::new();
    for (outcome, path) in outcomes.into_iter().zip(paths) {
        match outcome {
            Ok(doc) => {
                let line = serde_json::to_string(&doc).expect("document records serialize");
                writeln!(file, "{line}").map_err(|e| PipelineError::Io {
                    path: out_path.display().to_string(),
                    message: e.to_string(),
                })?;
                results.push(doc);
                dirs.push(path.parent().map(Path::to_path_buf).unwrap_or_default());
            }
            Err(skip) => {
                log::warn!("skipped {}: {}", skip.path, skip.reason);
                skipped.push(skip);
            }
        }
    }

    let total_slices: usize = results.iter().map(|d| d.slices.len()).sum();
    let ok_slices: usize = results.iter().map(|d| d.stats.ok).sum();
    let events: Vec<TimingEvent> = results.iter().flat_map(|d| d.timeline.iter().cloned()).collect();
    let mut efficiency = metrics::measure_run(&events).unwrap_or_default();
    if !results.is_empty() {
        efficiency.mean_visual_tokens =
            results.iter().map(|d| d.stats.visual_tokens as f64).sum::<f64>() / results.len() as f64;
    }
    if efficiency.wall_time == 0.0 && !results.is_empty() {
        efficiency.wall_time = wall;
        efficiency.fps = results.len() as f64 / wall;
    }

    let bleu = reference_bleu(&dirs, &results, cfg.tgt_lang);
    Ok((
        BatchReport {
            records: results.len(),
            skipped,
            total_slices,
            ok_slices,
            coverage: if total_slices == 0 {
                1.0
            } else {
                ok_slices as f64 / total_slices as f64
            },
            efficiency,
            bleu,
        },
        results,
    ))
}

fn reference_bleu(dirs: &[PathBuf], results: &[DocumentResult], tgt: Language) -> Option<f64> {
    if results.is_empty() {
        return None;
    }
    let mut refs = Vec::new();
    for (doc, dir) in results.iter().zip(dirs) {
        let path = dir.join(format!("{}.ref.txt", doc.image_id));
        refs.push(std::fs::read_to_string(path).ok()?.trim_end().to_string());
    }
    let hyps: Vec<String> = results.iter().map(|d| d.document.clone()).collect();
    metrics::bleu(&hyps, &refs, &metrics::BleuConfig::for_language(tgt)).ok()
}

/// Deterministic mock keyed on the slice's source box: returns the text
/// registered for the box with the highest IoU (at least 0.5).
#[derive(Debug, Default, Clone)]
pub struct LookupBackend {
    table: HashMap<String, Vec<(BoundingBox, String)>>,
}

impl LookupBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, bbox: BoundingBox, translation: impl Into<String>) {
        self.table
            .entry(image_id.into())
            .or_default()
            .push((bbox, translation.into()));
    }
}

/// One registered translation in a lookup sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
}

/// Sidecar file `<stem>.lookup.json` feeding [`LookupBackend::from_dir`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupSidecar {
    pub entries: Vec<LookupEntry>,
}

pub const LOOKUP_SUFFIX: &str = "lookup.json";

impl LookupBackend {
    /// Load every `<stem>.lookup.json` in `dir`, keyed by `<stem>`.
    pub fn from_dir(dir: &Path) -> Result<Self, PipelineError> {
        let io = |path: &Path, message: String| PipelineError::Io {
            path: path.display().to_string(),
            message,
        };
        let mut backend = Self::new();
        for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e.to_string()))? {
            let path = entry.map_err(|e| io(dir, e.to_string()))?.path();
            let Some(stem) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(&format!(".{LOOKUP_SUFFIX}")))
                .map(String::from)
            else {
                continue;
            };
            let bytes = std::fs::read(&path).map_err(|e| io(&path, e.to_string()))?;
            let sidecar: LookupSidecar = serde_json::from_slice(&bytes).map_err(|e| io(&path, e.to_string()))?;
            for e in sidecar.entries {
                backend.insert(stem.clone(), e.bbox, e.text);
            }
        }
        Ok(backend)
    }

    pub fn extend(&mut self, other: LookupBackend) {
        for (id, entries) in other.table {
            self.table.entry(id).or_default().extend(entries);
        }
    }

    pub fn len(&self) -> usize {
        self.table.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TranslationBackend for LookupBackend {
    fn name(&self) -> &str {
        "lookup"
    }

    fn translate(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        let entries = self
            .table
            .get(&request.slice.image_id)
            .ok_or_else(|| BackendError::Empty(format!("unknown image {}", request.slice.image_id)))?;
        entries
            .iter()
            .map(|(b, t)| (b.iou(&request.slice.source_box), t))
            .filter(|(iou, _)| *iou >= 0.5)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, t)| BackendReply::text(t.clone()))
            .ok_or_else(|| BackendError::Empty(format!("no entry for slice {}", request.slice.order_index)))
    }
}

/// One backend call as seen by [`RecordingBackend`].
#[derive(Debug, Clone)]
pub struct RecordedCall {
    pub image_id: String,
    pub order_index: usize,
    pub prompt: String,
    pub started: Instant,
    pub finished: Instant,
    pub ok: bool,
}

/// Wrapper that logs every request passing through to the inner backend.
pub struct RecordingBackend<B> {
    pub inner: B,
    calls: Mutex<Vec<RecordedCall>>,
}

impl<B: TranslationBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().expect("call log poisoned").clone()
    }
}

impl<B: TranslationBackend> TranslationBackend for RecordingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn translate(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        let started = Instant::now();
        let out = self.inner.translate(request);
        let finished = Instant::now();
        self.calls.lock().expect("call log poisoned").push(RecordedCall {
            image_id: request.slice.image_id.clone(),
            order_index: request.slice.order_index,
            prompt: request.messages.text().unwrap_or_default().to_string(),
            started,
            finished,
            ok: out.is_ok(),
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::StaticDetector;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn meta() -> SliceMeta {
        SliceMeta {
            image_id: "img".into(),
            order_index: 0,
            source_box: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
        }
    }

    fn views() -> (GlobalView, SliceCrop) {
        let img = Image::filled(32, 32, [200, 200, 200]);
        let g = downsample_global(&img, 16).unwrap();
        let s = imaging::crop_region(&img, &BoundingBox::new(0.0, 0.0, 10.0, 10.0), 448).unwrap();
        (g, s)
    }

    struct FailTimes {
        remaining: AtomicU32,
    }

    impl TranslationBackend for FailTimes {
        fn name(&self) -> &str {
            "flaky"
        }
        fn translate(&self, _: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
            if self.remaining.load(Ordering::SeqCst) > 0 {
                self.remaining.fetch_sub(1, Ordering::SeqCst);
                Err(BackendError::Timeout("slow".into()))
            } else {
                Ok(BackendReply::text("好"))
            }
        }
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            retry: RetryPolicy::immediate(3),
            global_resolution: 16,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn lookup_hit_single_attempt() {
        let (g, s) = views();
        let mut lb = LookupBackend::new();
        lb.insert("img", BoundingBox::new(0.0, 0.0, 10.0, 10.0), "你好");
        let r = translate_slice(1, &g, &s, &ReplayWindow::new(4), &cfg(), &lb, &meta(), &mut vec![]).unwrap();
        assert_eq!((r.translation.as_str(), r.attempts, r.status), ("你好", 1, SliceStatus::Ok));
    }

    #[test]
    fn retries_then_succeeds() {
        let (g, s) = views();
        let b = FailTimes {
            remaining: AtomicU32::new(2),
        };
        let r = translate_slice(1, &g, &s, &ReplayWindow::new(4), &cfg(), &b, &meta(), &mut vec![]).unwrap();
        assert_eq!((r.status, r.attempts), (SliceStatus::Ok, 3));
    }

    #[test]
    fn exhausted_retries_fail() {
        let (g, s) = views();
        let b = FailTimes {
            remaining: AtomicU32::new(10),
        };
        let r = translate_slice(1, &g, &s, &ReplayWindow::new(4), &cfg(), &b, &meta(), &mut vec![]).unwrap();
        assert_eq!((r.status, r.attempts), (SliceStatus::Failed, 3));
        assert!(r.error.unwrap().contains("timed out"));
        assert!(r.translation.is_empty());
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::ZERO);
        assert_eq!(p.backoff(2), Duration::from_millis(500));
        assert_eq!(p.backoff(3), Duration::from_secs(1));
    }

    fn res(i: usize, text: &str, ok: bool) -> SliceResult {
        SliceResult {
            order_index: i,
            source_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            translation: text.into(),
            status: if ok { SliceStatus::Ok } else { SliceStatus::Failed },
            attempts: 1,
            latency: 0.0,
            error: None,
            first_token_latency: None,
        }
    }

    #[test]
    fn assemble() {
        assert_eq!(assemble_document(&[res(0, "A", true), res(1, "B", true)], None), "A\nB");
        assert_eq!(
            assemble_document(&[res(0, "A", true), res(1, "", false), res(2, "C", true)], None),
            "A\nC"
        );
        assert_eq!(
            assemble_document(&[res(2, "C", true), res(1, "", false), res(0, "A", true)], Some("[?]")),
            "A\n[?]\nC"
        );
        assert_eq!(assemble_document(&[], None), "");
    }

    #[test]
    fn blank_image_yields_empty_document() {
        let img = Image::filled(64, 64, [255, 255, 255]);
        let det = StaticDetector { boxes: vec![] };
        let doc = translate_image("blank", &img, &cfg(), &det, &LookupBackend::new()).unwrap();
        assert!(doc.slices.is_empty());
        assert_eq!(doc.document, "");
        assert_eq!(doc.stats.n_s, 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let img = Image::filled(64, 64, [255, 255, 255]);
        let bad = PipelineConfig {
            global_resolution: 8,
            ..cfg()
        };
        let err = translate_image("x", &img, &bad, &StaticDetector { boxes: vec![] }, &LookupBackend::new());
        assert!(matches!(err, Err(PipelineError::Config(ConfigError::Resolution(8)))));
    }
}
