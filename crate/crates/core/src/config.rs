//! Layered `key = value` configuration.
//!
//! Sources, lowest to highest precedence: built-in defaults, the config
//! file, command-line flags, then `GLOTRAN_<KEY>` environment variables
//! (dots in keys become underscores, letters upper-case). Every key is
//! parsed and validated before any command does work. Unknown keys are
//! errors in every layer.
//!
//! ```text
//! # pipeline
//! global_res = 448
//! replay = 4
//! qc.tau_embed = 0.8
//! ref.cross_attn_layers = 0,2
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::glod::QcThresholds;
use crate::orchestrator::PipelineConfig;
use crate::prompt::{Language, TemplateSet};
use crate::refmodel::RefModelConfig;
use crate::regions::AlignTolerance;

pub const ENV_PREFIX: &str = "GLOTRAN_";

/// Environment variables under the prefix that are not config keys.
const RESERVED_ENV: &[&str] = &["GLOTRAN_API_TOKEN", "GLOTRAN_LOG"];

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "global_res",
    "slice_cap",
    "replay",
    "src_lang",
    "tgt_lang",
    "patch_size",
    "alpha",
    "beta",
    "gamma",
    "align_tol",
    "retry_attempts",
    "retry_backoff",
    "retry_multiplier",
    "max_tokens",
    "temperature",
    "failed_placeholder",
    "templates",
    "backend_url",
    "detector_url",
    "detector_b_url",
    "recognizer_url",
    "scorer_url",
    "translator_urls",
    "embedder_url",
    "model",
    "timeout",
    "workers",
    "seed",
    "out",
    "qc.tau_ocr",
    "qc.min_regions",
    "qc.min_side",
    "qc.blur_floor",
    "qc.tau_embed",
    "qc.tau_roundtrip",
    "qc.iou_min",
    "qc.rounds",
    "ref.d_v",
    "ref.d_t",
    "ref.patch",
    "ref.enc_layers",
    "ref.dec_layers",
    "ref.cross_attn_layers",
    "ref.heads",
    "ref.vocab_size",
    "ref.buckets",
    "ref.replay",
    "ref.seed",
    "ref.lr",
    "ref.mlp_ratio",
    "ref.max_decode_len",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Default,
    File,
    Flag,
    Env,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Default => "default",
            Layer::File => "file",
            Layer::Flag => "flag",
            Layer::Env => "env",
        })
    }
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}` ({layer})")]
    UnknownKey { key: String, layer: Layer },
    #[error("`{key}` is a secret; set it through the environment only")]
    Secret { key: String },
    #[error("invalid value `{value}` for `{key}` ({layer}): {reason}")]
    Value {
        key: String,
        value: String,
        layer: Layer,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Service endpoints. `None` selects the in-process mock.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Endpoints {
    pub backend_url: Option<String>,
    pub detector_url: Option<String>,
    pub detector_b_url: Option<String>,
    pub recognizer_url: Option<String>,
    pub scorer_url: Option<String>,
    pub translator_urls: Vec<String>,
    pub embedder_url: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub qc: QcThresholds,
    pub refmodel: RefModelConfig,
    pub endpoints: Endpoints,
    pub workers: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    sources: BTreeMap<String, (String, Layer)>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            qc: QcThresholds::default(),
            refmodel: RefModelConfig::default(),
            endpoints: Endpoints {
                model: "glotran".into(),
                timeout: Duration::from_secs(60),
                ..Endpoints::default()
            },
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            seed: 0,
            out: None,
            sources: BTreeMap::new(),
        }
    }
}

/// Env var name for a key: `qc.tau_ocr` → `GLOTRAN_QC_TAU_OCR`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase())
}

fn is_secret(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    k.contains("token") || k.contains("secret") || k.contains("password")
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigFileError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigFileError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigFileError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl CliConfig {
    /// Merge all four layers. `env` is passed in so callers (and tests)
    /// control which variables are visible.
    pub fn resolve<I>(file: Option<&Path>, flags: &[(String, String)], env: I) -> Result<Self, ConfigFileError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut layered: BTreeMap<String, (String, Layer)> = BTreeMap::new();
        let mut put = |key: &str, value: String, layer: Layer| -> Result<(), ConfigFileError> {
            if is_secret(key) {
                return Err(ConfigFileError::Secret { key: key.to_string() });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigFileError::UnknownKey {
                    key: key.to_string(),
                    layer,
                });
            }
            layered.insert(key.to_string(), (value, layer));
            Ok(())
        };

        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigFileError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            for (k, v) in parse_kv(&text)? {
                put(&k, v, Layer::File)?;
            }
        }
        for (k, v) in flags {
            put(k, v.clone(), Layer::Flag)?;
        }
        let by_env: BTreeMap<String, &str> = KEYS.iter().map(|k| (env_name(k), *k)).collect();
        for (name, value) in env {
            if !name.starts_with(ENV_PREFIX) || RESERVED_ENV.contains(&name.as_str()) {
                continue;
            }
            match by_env.get(&name) {
                Some(key) => put(key, value, Layer::Env)?,
                None => {
                    return Err(ConfigFileError::UnknownKey {
                        key: name,
                        layer: Layer::Env,
                    })
                }
            }
        }

        let mut cfg = CliConfig::default();
        for (key, (value, layer)) in &layered {
            cfg.apply(key, value).map_err(|reason| ConfigFileError::Value {
                key: key.clone(),
                value: value.clone(),
                layer: *layer,
                reason,
            })?;
        }
        cfg.sources = layered;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Which layer supplied `key`.
    pub fn source(&self, key: &str) -> Layer {
        self.sources.get(key).map(|(_, l)| *l).unwrap_or(Layer::Default)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        fn opt(v: &str) -> Option<String> {
            (!v.is_empty()).then(|| v.to_string())
        }
        let p = &mut self.pipeline;
        let q = &mut self.qc;
        let r = &mut self.refmodel;
        let e = &mut self.endpoints;
        match key {
            "global_res" => p.global_resolution = num(value)?,
            "slice_cap" => p.slice_cap = num(value)?,
            "replay" => p.replay = num(value)?,
            "src_lang" => p.src_lang = value.parse::<Language>().map_err(|e| e.to_string())?,
            "tgt_lang" => p.tgt_lang = value.parse::<Language>().map_err(|e| e.to_string())?,
            "patch_size" => p.patch_size = num(value)?,
            "alpha" => p.grouping.alpha = num(value)?,
            "beta" => p.grouping.beta = num(value)?,
            "gamma" => p.grouping.gamma = num(value)?,
            "align_tol" => {
                p.grouping.align_tol = match value.strip_suffix("px") {
                    Some(px) => AlignTolerance::Pixels(num(px.trim())?),
                    None => AlignTolerance::LineHeights(num(value)?),
                }
            }
            "retry_attempts" => p.retry.max_attempts = num(value)?,
            "retry_backoff" => p.retry.base_backoff = num(value)?,
            "retry_multiplier" => p.retry.multiplier = num(value)?,
            "max_tokens" => p.generation.max_tokens = num(value)?,
            "temperature" => p.generation.temperature = num(value)?,
            "failed_placeholder" => p.failed_placeholder = opt(value),
            "templates" => {
                if !value.is_empty() {
                    p.templates = TemplateSet::load_dir(value).map_err(|e| e.to_string())?;
                }
            }
            "backend_url" => e.backend_url = opt(value),
            "detector_url" => e.detector_url = opt(value),
            "detector_b_url" => e.detector_b_url = opt(value),
            "recognizer_url" => e.recognizer_url = opt(value),
            "scorer_url" => e.scorer_url = opt(value),
            "translator_urls" => {
                e.translator_urls = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "embedder_url" => e.embedder_url = opt(value),
            "model" => e.model = value.to_string(),
            "timeout" => {
                let secs: f64 = num(value)?;
                if !(secs.is_finite() && secs > 0.0) {
                    return Err("timeout must be a positive number of seconds".into());
                }
                e.timeout = Duration::from_secs_f64(secs);
            }
            "workers" => self.workers = num(value)?,
            "seed" => self.seed = num(value)?,
            "out" => self.out = opt(value).map(PathBuf::from),
            "qc.tau_ocr" => q.tau_ocr = num(value)?,
            "qc.min_regions" => q.min_regions = num(value)?,
            "qc.min_side" => q.min_side = num(value)?,
            "qc.blur_floor" => q.blur_floor = num(value)?,
            "qc.tau_embed" => q.tau_embed = num(value)?,
            "qc.tau_roundtrip" => q.tau_roundtrip = num(value)?,
            "qc.iou_min" => q.iou_min = num(value)?,
            "qc.rounds" => q.rounds = num(value)?,
            "ref.d_v" => r.d_v = num(value)?,
            "ref.d_t" => r.d_t = num(value)?,
            "ref.patch" => r.patch = num(value)?,
            "ref.enc_layers" => r.enc_layers = num(value)?,
            "ref.dec_layers" => r.dec_layers = num(value)?,
            "ref.cross_attn_layers" => {
                r.cross_attn_layers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(num)
                    .collect::<Result<_, _>>()?
            }
            "ref.heads" => r.heads = num(value)?,
            "ref.vocab_size" => r.vocab_size = num(value)?,
            "ref.buckets" => r.proximity_buckets = num(value)?,
            "ref.replay" => r.replay = num(value)?,
            "ref.seed" => r.seed = num(value)?,
            "ref.lr" => r.lr = num(value)?,
            "ref.mlp_ratio" => r.mlp_ratio = num(value)?,
            "ref.max_decode_len" => r.max_decode_len = num(value)?,
            other => return Err(format!("unhandled key {other}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        let invalid = |m: String| Err(ConfigFileError::Invalid(m));
        self.pipeline.validate().map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        self.refmodel.validate().map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        if self.pipeline.src_lang == self.pipeline.tgt_lang {
            return invalid(format!("source and target language are both {}", self.pipeline.src_lang));
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1".into());
        }
        let q = &self.qc;
        for (name, v) in [
            ("qc.tau_ocr", q.tau_ocr),
            ("qc.tau_embed", q.tau_embed),
            ("qc.tau_roundtrip", q.tau_roundtrip),
            ("qc.iou_min", q.iou_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(q.blur_floor.is_finite() && q.blur_floor >= 0.0) {
            return invalid(format!("qc.blur_floor must be non-negative, got {}", q.blur_floor));
        }
        if q.rounds == 0 {
            return invalid("qc.rounds must be at least 1".into());
        }
        if !(self.pipeline.retry.base_backoff.is_finite() && self.pipeline.retry.base_backoff >= 0.0) {
            return invalid("retry_backoff must be non-negative".into());
        }
        Ok(())
    }

    /// Effective settings as `key = value  # layer` lines.
    pub fn describe(&self) -> String {
        self.sources
            .iter()
            .map(|(k, (v, l))| format!("{k} = {v}  # {l}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn every_key_round_trips_through_apply() {
        let samples: BTreeMap<&str, &str> = [
            ("src_lang", "en"),
            ("tgt_lang", "ja"),
            ("align_tol", "3px"),
            ("ref.cross_attn_layers", "0,1"),
            ("templates", ""),
            ("timeout", "2.5"),
            ("out", "x.jsonl"),
            ("model", "m"),
            ("qc.tau_ocr", "0.5"),
            ("qc.tau_embed", "0.5"),
            ("qc.tau_roundtrip", "0.5"),
            ("qc.iou_min", "0.5"),
            ("failed_placeholder", "[?]"),
            ("backend_url", "http://x"),
            ("detector_url", "http://x"),
            ("detector_b_url", "http://x"),
            ("recognizer_url", "http://x"),
            ("scorer_url", "http://x"),
            ("embedder_url", "http://x"),
            ("translator_urls", "http://a, http://b"),
            ("retry_backoff", "0.1"),
            ("retry_multiplier", "2"),
            ("temperature", "0.2"),
            ("alpha", "1"),
            ("beta", "0.5"),
            ("gamma", "1"),
            ("ref.lr", "0.01"),
            ("qc.blur_floor", "10"),
        ]
        .into_iter()
        .collect();
        for key in KEYS {
            let mut cfg = CliConfig::default();
            let v = samples.get(key).copied().unwrap_or("2");
            cfg.apply(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn kv_syntax() {
        let kv = parse_kv("# c\n a = 1 \n\nb=x # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x".into())]);
        assert!(matches!(parse_kv("novalue"), Err(ConfigFileError::Syntax { line: 1, .. })));
    }

    #[test]
    fn unknown_and_secret_keys() {
        let e = CliConfig::resolve(None, &flags(&[("bogus", "1")]), vec![]);
        assert!(matches!(e, Err(ConfigFileError::UnknownKey { layer: Layer::Flag, .. })));
        let e = CliConfig::resolve(None, &flags(&[("api_token", "1")]), vec![]);
        assert!(matches!(e, Err(ConfigFileError::Secret { .. })));
        let env = vec![("GLOTRAN_NOPE".to_string(), "1".to_string())];
        assert!(matches!(
            CliConfig::resolve(None, &[], env),
            Err(ConfigFileError::UnknownKey { layer: Layer::Env, .. })
        ));
        let env = vec![("GLOTRAN_API_TOKEN".to_string(), "s".to_string()), ("HOME".into(), "/".into())];
        assert!(CliConfig::resolve(None, &[], env).is_ok());
    }

    #[test]
    fn validation_runs_before_use() {
        let e = CliConfig::resolve(None, &flags(&[("global_res", "8")]), vec![]);
        assert!(matches!(e, Err(ConfigFileError::Invalid(_))));
        let e = CliConfig::resolve(None, &flags(&[("qc.tau_embed", "1.5")]), vec![]);
        assert!(matches!(e, Err(ConfigFileError::Invalid(_))));
        let e = CliConfig::resolve(None, &flags(&[("replay", "x")]), vec![]);
        assert!(matches!(e, Err(ConfigFileError::Value { .. })));
    }

    #[test]
    fn env_names() {
        assert_eq!(env_name("qc.tau_ocr"), "GLOTRAN_QC_TAU_OCR");
        assert_eq!(env_name("global_res"), "GLOTRAN_GLOBAL_RES");
    }
}
