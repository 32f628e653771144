//! Translation quality and efficiency accounting.
//!
//! BLEU is computed at corpus level with clipped n-gram counts and a brevity
//! penalty. Neural metrics live behind [`ExternalScorer`]. Efficiency is
//! reported as mean visual tokens per image, mean first-token latency and
//! images per second.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{capped_dims, patch_token_count};
use crate::prompt::Language;
use crate::regions::{BoundingBox, SliceGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    None,
    /// Replace a zero match count `0/t` by `1/(t+1)`.
    AddOneOnZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    Whitespace,
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub tokenization: Tokenization,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::AddOneOnZero,
            tokenization: Tokenization::Whitespace,
        }
    }
}

impl BleuConfig {
    /// Character tokens for CJK targets, whitespace otherwise.
    pub fn for_language(lang: Language) -> Self {
        Self {
            tokenization: if lang.is_cjk() {
                Tokenization::Character
            } else {
                Tokenization::Whitespace
            },
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("max_n must be at least 1")]
    InvalidOrder,
    #[error("malformed timing events: {0}")]
    MalformedEvents(String),
}

pub fn tokenize(text: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Whitespace => text.split_whitespace().map(str::to_string).collect(),
        Tokenization::Character => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order clipped matches and totals, plus corpus lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub fn bleu_stats(hypotheses: &[String], references: &[String], cfg: &BleuConfig) -> Result<BleuStats, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if cfg.max_n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let mut stats = BleuStats {
        matches: vec![0; cfg.max_n],
        totals: vec![0; cfg.max_n],
        hyp_len: 0,
        ref_len: 0,
    };
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let h = tokenize(hyp, cfg.tokenization);
        let r = tokenize(reference, cfg.tokenization);
        stats.hyp_len += h.len();
        stats.ref_len += r.len();
        for n in 1..=cfg.max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            stats.totals[n - 1] += h.len().saturating_sub(n - 1);
            stats.matches[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    Ok(stats)
}

impl BleuStats {
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            let p = if m > 0 {
                m as f64 / t as f64
            } else {
                match smoothing {
                    Smoothing::None => return 0.0,
                    Smoothing::AddOneOnZero => 1.0 / (t as f64 + 1.0),
                }
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        (100.0 * bp * (log_sum / self.matches.len() as f64).exp()).clamp(0.0, 100.0)
    }
}

/// Corpus BLEU in percent.
pub fn bleu(hypotheses: &[String], references: &[String], cfg: &BleuConfig) -> Result<f64, MetricError> {
    Ok(bleu_stats(hypotheses, references, cfg)?.score(cfg.smoothing))
}

/// Pixel dimensions a box covers when cropped.
pub fn crop_dims(bbox: &BoundingBox) -> (u32, u32) {
    let w = (bbox.x_max.ceil() - bbox.x_min.floor()).max(1.0) as u32;
    let h = (bbox.y_max.ceil() - bbox.y_min.floor()).max(1.0) as u32;
    (w, h)
}

/// Visual tokens per image: the global grid plus every capped slice grid.
pub fn count_visual_tokens(resolution: u32, groups: &[SliceGroup], cap: u32, patch: u32) -> u64 {
    let global = patch_token_count(resolution, resolution, patch);
    global + slice_tokens(groups, cap, patch)
}

pub fn slice_tokens(groups: &[SliceGroup], cap: u32, patch: u32) -> u64 {
    groups
        .iter()
        .map(|g| {
            let (w, h) = crop_dims(&g.union_box);
            let (cw, ch, _) = capped_dims(w, h, cap);
            patch_token_count(cw, ch, patch)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingKind {
    ImageStart,
    RequestStart,
    FirstByte,
    ImageEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEvent {
    pub image_id: String,
    pub kind: TimingKind,
    /// Seconds on a shared clock.
    pub t: f64,
}

impl TimingEvent {
    pub fn new(image_id: &str, kind: TimingKind, t: f64) -> Self {
        Self {
            image_id: image_id.to_string(),
            kind,
            t,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub images: usize,
    pub mean_visual_tokens: f64,
    /// Mean seconds from request start to first response byte.
    pub first_token_latency: f64,
    /// Images per second over the run's wall time.
    pub fps: f64,
    pub wall_time: f64,
}

/// Reduce a timing log into latency and throughput figures.
pub fn measure_run(events: &[TimingEvent]) -> Result<EfficiencyReport, MetricError> {
    let mut per_image: BTreeMap<&str, Vec<&TimingEvent>> = BTreeMap::new();
    for e in events {
        if !e.t.is_finite() || e.t < 0.0 {
            return Err(MetricError::MalformedEvents(format!("bad timestamp {} for {}", e.t, e.image_id)));
        }
        per_image.entry(&e.image_id).or_default().push(e);
    }

    let mut latencies = Vec::new();
    let mut first_start = f64::INFINITY;
    let mut last_end = f64::NEG_INFINITY;
    let mut finished = 0usize;
    for (image, evs) in &per_image {
        let mut prev = f64::NEG_INFINITY;
        let mut open_request: Option<f64> = None;
        let mut started = false;
        for e in evs {
            if e.t < prev {
                return Err(MetricError::MalformedEvents(format!("non-monotone events for {image}")));
            }
            prev = e.t;
            match e.kind {
                TimingKind::ImageStart => {
                    started = true;
                    first_start = first_start.min(e.t);
                }
                TimingKind::RequestStart => open_request = Some(e.t),
                TimingKind::FirstByte => {
                    let start = open_request
                        .take()
                        .ok_or_else(|| MetricError::MalformedEvents(format!("first byte without request for {image}")))?;
                    latencies.push(e.t - start);
                }
                TimingKind::ImageEnd => {
                    if !started {
                        return Err(MetricError::MalformedEvents(format!("end before start for {image}")));
                    }
                    finished += 1;
                    last_end = last_end.max(e.t);
                }
            }
        }
    }

    let wall_time = if finished > 0 { last_end - first_start } else { 0.0 };
    Ok(EfficiencyReport {
        images: finished,
        mean_visual_tokens: 0.0,
        first_token_latency: if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        },
        fps: if wall_time > 0.0 {
            finished as f64 / wall_time
        } else {
            0.0
        },
        wall_time,
    })
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScorerError {
    #[error("metric `{metric}` unavailable: {reason}")]
    Unsupported { metric: String, reason: String },
}

/// Neural or otherwise external quality metric (COMET, METEOR, ...).
pub trait ExternalScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, hyps: &[String], refs: &[String], srcs: &[String]) -> Result<f64, ScorerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scorer: String,
    pub score: f64,
}

pub fn external_score(
    scorer: &dyn ExternalScorer,
    hyps: &[String],
    refs: &[String],
    srcs: &[String],
) -> Result<ScoreRecord, ScorerError> {
    let score = scorer.score(hyps, refs, srcs)?;
    Ok(ScoreRecord {
        scorer: scorer.name().to_string(),
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalOutcome {
    pub scorer: String,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub segments: usize,
    pub bleu: f64,
    pub external: Vec<ExternalOutcome>,
}

/// BLEU plus whichever external scorers respond; failures are recorded and
/// do not abort the evaluation.
pub fn evaluate(
    hyps: &[String],
    refs: &[String],
    srcs: &[String],
    cfg: &BleuConfig,
    scorers: &[&dyn ExternalScorer],
) -> Result<EvaluationReport, MetricError> {
    let bleu = bleu(hyps, refs, cfg)?;
    let external = scorers
        .iter()
        .map(|s| match external_score(*s, hyps, refs, srcs) {
            Ok(r) => ExternalOutcome {
                scorer: r.scorer,
                score: Some(r.score),
                error: None,
            },
            Err(e) => {
                log::warn!("{e}; continuing with BLEU only");
                ExternalOutcome {
                    scorer: s.name().to_string(),
                    score: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(EvaluationReport {
        segments: hyps.len(),
        bleu,
        external,
    })
}

/// Scorer returning a fixed value.
#[derive(Debug, Clone)]
pub struct ConstantScorer {
    pub name: String,
    pub value: f64,
}

impl ExternalScorer for ConstantScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _: &[String], _: &[String], _: &[String]) -> Result<f64, ScorerError> {
        Ok(self.value)
    }
}

/// Mean character-trigram cosine between hypothesis and reference.
#[derive(Debug, Clone, Default)]
pub struct SimilarityScorer;

impl ExternalScorer for SimilarityScorer {
    fn name(&self) -> &str {
        "ngram-similarity"
    }

    fn score(&self, hyps: &[String], refs: &[String], _: &[String]) -> Result<f64, ScorerError> {
        if hyps.is_empty() || hyps.len() != refs.len() {
            return Err(ScorerError::Unsupported {
                metric: self.name().into(),
                reason: "hypothesis/reference count mismatch".into(),
            });
        }
        let total: f64 = hyps
            .iter()
            .zip(refs)
            .map(|(h, r)| crate::glod::ngram_similarity(h, r))
            .sum();
        Ok(total / hyps.len() as f64)
    }
}

/// Scorer that is never reachable.
#[derive(Debug, Clone)]
pub struct UnavailableScorer {
    pub name: String,
}

impl ExternalScorer for UnavailableScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _: &[String], _: &[String], _: &[String]) -> Result<f64, ScorerError> {
        Err(ScorerError::Unsupported {
            metric: self.name.clone(),
            reason: "scorer unreachable".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identity_and_empty() {
        let c = s(&["the quick brown fox", "jumps over"]);
        assert_eq!(bleu(&c, &c, &BleuConfig::default()).unwrap(), 100.0);
        assert_eq!(bleu(&s(&["", ""]), &c, &BleuConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn cat_sat_fixture() {
        // unigram 3/3, bigram 2/2, trigram 1/1, 4-gram 0/0 -> (0+1)/(0+1)
        // brevity penalty exp(1 - 4/3)
        let expected = 100.0 * (1.0_f64 - 4.0 / 3.0).exp();
        let got = bleu(&s(&["the cat sat"]), &s(&["the cat sat down"]), &BleuConfig::default()).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        let st = bleu_stats(&s(&["the cat sat"]), &s(&["the cat sat down"]), &BleuConfig::default()).unwrap();
        assert_eq!(st.matches, vec![3, 2, 1, 0]);
        assert_eq!(st.totals, vec![3, 2, 1, 0]);
    }

    #[test]
    fn no_smoothing_zero_order_is_zero() {
        let cfg = BleuConfig {
            smoothing: Smoothing::None,
            ..BleuConfig::default()
        };
        assert_eq!(bleu(&s(&["the cat sat"]), &s(&["the cat sat down"]), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn clipping() {
        let st = bleu_stats(&s(&["the the the"]), &s(&["the cat"]), &BleuConfig::default()).unwrap();
        assert_eq!(st.matches[0], 1);
    }

    #[test]
    fn character_tokens_for_cjk() {
        let cfg = BleuConfig::for_language(Language::Zh);
        assert_eq!(cfg.tokenization, Tokenization::Character);
        assert_eq!(tokenize("你 好吗", Tokenization::Character), s(&["你", "好", "吗"]));
        assert_eq!(BleuConfig::for_language(Language::En).tokenization, Tokenization::Whitespace);
    }

    #[test]
    fn errors() {
        assert_eq!(
            bleu(&s(&["a"]), &s(&[]), &BleuConfig::default()),
            Err(MetricError::LengthMismatch { hyps: 1, refs: 0 })
        );
        assert_eq!(bleu(&[], &[], &BleuConfig::default()), Err(MetricError::EmptyCorpus));
    }

    #[test]
    fn measure_basic() {
        let mut ev = Vec::new();
        for i in 0..10 {
            let id = format!("img{i}");
            ev.push(TimingEvent::new(&id, TimingKind::ImageStart, 0.2 * i as f64));
            ev.push(TimingEvent::new(&id, TimingKind::ImageEnd, 0.2 * (i + 1) as f64));
        }
        let r = measure_run(&ev).unwrap();
        assert!((r.fps - 5.0).abs() < 1e-12);
        assert!((r.fps * r.wall_time - 10.0).abs() < 1e-12);

        let pair = [
            TimingEvent::new("a", TimingKind::RequestStart, 1.0),
            TimingEvent::new("a", TimingKind::FirstByte, 1.1),
        ];
        assert!((measure_run(&pair).unwrap().first_token_latency - 0.1).abs() < 1e-12);
    }

    #[test]
    fn malformed_events() {
        let bad = [
            TimingEvent::new("a", TimingKind::RequestStart, 2.0),
            TimingEvent::new("a", TimingKind::FirstByte, 1.0),
        ];
        assert!(matches!(measure_run(&bad), Err(MetricError::MalformedEvents(_))));
        let orphan = [TimingEvent::new("a", TimingKind::FirstByte, 1.0)];
        assert!(matches!(measure_run(&orphan), Err(MetricError::MalformedEvents(_))));
    }

    #[test]
    fn external_scorers() {
        let c = s(&["a b c"]);
        let k = ConstantScorer {
            name: "comet".into(),
            value: 0.5,
        };
        assert_eq!(external_score(&k, &c, &c, &c).unwrap().score, 0.5);
        assert_eq!(external_score(&SimilarityScorer, &c, &c, &c).unwrap().score, 1.0);
        let down = UnavailableScorer { name: "meteor".into() };
        let report = evaluate(&c, &c, &c, &BleuConfig::default(), &[&k, &down]).unwrap();
        assert_eq!(report.bleu, 100.0);
        assert_eq!(report.external[0].score, Some(0.5));
        assert!(report.external[1].error.as_ref().unwrap().contains("unavailable"));
    }

    #[test]
    fn visual_token_fixture() {
        assert_eq!(count_visual_tokens(224, &[], 448, 16), 196);
    }
}
