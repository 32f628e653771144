//! Small trainable reference model for the global-local architecture.
//!
//! A shared patch encoder embeds the global view and each local slice, an
//! affine projector maps both into the decoder width, and a causal decoder
//! reads `[E_g; V_g; E_l; V_i; replay…; BOS; Y_i; EOS]`. At the layers
//! listed in `cross_attn_layers`, local visual positions also attend to the
//! global positions with a learned additive bias looked up by key source
//! type and spatial proximity bucket.
//!
//! Everything is 64-bit and single-threaded so results are reproducible and
//! gradients can be checked against finite differences.

pub mod checkpoint;
pub mod data;
pub mod tape;

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{Image, PatchGrid};
use crate::regions::BoundingBox;

pub use data::{ToyDataset, ToyRecord, ToySlice};
use tape::{NodeId, Tape};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
/// Separator between replayed translations; shares the id of `BOS`.
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_CHAR: usize = 3;

/// Key source types indexing the first axis of the bias table.
pub const SOURCE_GLOBAL: usize = 0;
pub const SOURCE_LOCAL: usize = 1;

#[derive(Debug, Error)]
pub enum RefModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("loss mask is empty")]
    EmptyMask,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub patch: u32,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub cross_attn_layers: Vec<usize>,
    pub heads: usize,
    pub vocab_size: usize,
    pub proximity_buckets: usize,
    /// Replay window length.
    pub replay: usize,
    pub seed: u64,
    pub lr: f64,
    pub mlp_ratio: usize,
    pub max_decode_len: usize,
}

impl Default for RefModelConfig {
    fn default() -> Self {
        Self {
            d_v: 8,
            d_t: 16,
            patch: 16,
            enc_layers: 2,
            dec_layers: 4,
            cross_attn_layers: vec![0, 2],
            heads: 2,
            vocab_size: 32,
            proximity_buckets: 8,
            replay: 2,
            seed: 0,
            lr: 3e-3,
            mlp_ratio: 4,
            max_decode_len: 12,
        }
    }
}

impl RefModelConfig {
    pub fn validate(&self) -> Result<(), RefModelError> {
        let bad = |m: String| Err(RefModelError::InvalidConfig(m));
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) || !self.d_t.is_multiple_of(self.heads) {
            return bad(format!("d_v={} and d_t={} must be divisible by heads={}", self.d_v, self.d_t, self.heads));
        }
        if let Some(l) = self.cross_attn_layers.iter().find(|&&l| l >= self.dec_layers) {
            return bad(format!("cross-attention layer {l} >= dec_layers {}", self.dec_layers));
        }
        if self.proximity_buckets == 0 {
            return bad("proximity_buckets must be at least 1".into());
        }
        if self.vocab_size <= FIRST_CHAR {
            return bad(format!("vocab_size must exceed {FIRST_CHAR}"));
        }
        if self.patch == 0 || self.mlp_ratio == 0 {
            return bad("patch and mlp_ratio must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        (self.patch * self.patch * 3) as usize
    }
}

/// Named parameter groups in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn from_groups(groups: Vec<(String, Array2<f64>)>) -> Self {
        let mut names = Vec::with_capacity(groups.len());
        let mut values = Vec::with_capacity(groups.len());
        let mut index = HashMap::new();
        for (i, (n, v)) in groups.into_iter().enumerate() {
            index.insert(n.clone(), i);
            names.push(n);
            values.push(v);
        }
        Self { names, values, index }
    }

    /// Seeded initialisation: weights uniform in ±1/√fan_in, biases and
    /// the bias table zero, norm gains one.
    pub fn init(cfg: &RefModelConfig) -> Result<Self, RefModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut groups: Vec<(String, Array2<f64>)> = Vec::new();
        let weight = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let a = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
        };
        // embedding rows scale with the width they feed
        let embed = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let a = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
        };
        let zeros = |cols: usize| Array2::<f64>::zeros((1, cols));
        let ones = |cols: usize| Array2::<f64>::ones((1, cols));

        groups.push(("patch_embed.w".into(), weight(&mut rng, cfg.patch_dim(), cfg.d_v)));
        groups.push(("patch_embed.b".into(), zeros(cfg.d_v)));
        let block = |groups: &mut Vec<(String, Array2<f64>)>, rng: &mut ChaCha8Rng, prefix: String, d: usize| {
            let h = d * cfg.mlp_ratio;
            groups.push((format!("{prefix}.ln1.g"), ones(d)));
            groups.push((format!("{prefix}.ln1.b"), zeros(d)));
            for w in ["wq", "wk", "wv", "wo"] {
                groups.push((format!("{prefix}.attn.{w}"), weight(rng, d, d)));
            }
            groups.push((format!("{prefix}.ln2.g"), ones(d)));
            groups.push((format!("{prefix}.ln2.b"), zeros(d)));
            groups.push((format!("{prefix}.mlp.w1"), weight(rng, d, h)));
            groups.push((format!("{prefix}.mlp.b1"), zeros(h)));
            groups.push((format!("{prefix}.mlp.w2"), weight(rng, h, d)));
            groups.push((format!("{prefix}.mlp.b2"), zeros(d)));
        };
        for l in 0..cfg.enc_layers {
            block(&mut groups, &mut rng, format!("enc.{l}"), cfg.d_v);
        }
        groups.push(("enc.ln_f.g".into(), ones(cfg.d_v)));
        groups.push(("enc.ln_f.b".into(), zeros(cfg.d_v)));
        groups.push(("proj.w".into(), weight(&mut rng, cfg.d_v, cfg.d_t)));
        groups.push(("proj.b".into(), zeros(cfg.d_t)));
        groups.push(("ident.g".into(), embed(&mut rng, 1, cfg.d_t)));
        groups.push(("ident.l".into(), embed(&mut rng, 1, cfg.d_t)));
        groups.push(("tok_embed".into(), embed(&mut rng, cfg.vocab_size, cfg.d_t)));
        for l in 0..cfg.dec_layers {
            if cfg.cross_attn_layers.contains(&l) {
                groups.push((format!("dec.{l}.xln.g"), ones(cfg.d_t)));
                groups.push((format!("dec.{l}.xln.b"), zeros(cfg.d_t)));
                for w in ["wq", "wk", "wv", "wo"] {
                    groups.push((format!("dec.{l}.xattn.{w}"), weight(&mut rng, cfg.d_t, cfg.d_t)));
                }
            }
            block(&mut groups, &mut rng, format!("dec.{l}"), cfg.d_t);
        }
        groups.push(("bias_table".into(), Array2::zeros((2, cfg.proximity_buckets))));
        groups.push(("dec.ln_f.g".into(), ones(cfg.d_t)));
        groups.push(("dec.ln_f.b".into(), zeros(cfg.d_t)));
        groups.push(("head.w".into(), weight(&mut rng, cfg.d_t, cfg.vocab_size)));
        groups.push(("head.b".into(), zeros(cfg.vocab_size)));
        Ok(Self::from_groups(groups))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).copied().map(move |i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Parameter leaves registered on a tape; leaf `i` holds group `i`.
struct Bound<'a> {
    params: &'a Params,
}

impl Bound<'_> {
    fn bind<'a>(tape: &mut Tape, params: &'a Params) -> Bound<'a> {
        debug_assert!(tape.is_empty());
        for v in params.values() {
            tape.leaf(v.clone());
        }
        Bound { params }
    }

    fn id(&self, name: &str) -> NodeId {
        *self.params.index.get(name).unwrap_or_else(|| panic!("missing parameter group {name}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    Global,
    Local,
}

/// Pixel frame that a grid of tokens tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFrame {
    pub width: u32,
    pub height: u32,
    pub patch: u32,
}

impl TokenFrame {
    pub fn of(img: &Image, patch: u32) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            patch,
        }
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::for_dims(self.width, self.height, self.patch)
    }

    /// Token-center fractions of the frame, clamped to `[0, 1]`.
    fn center(&self, row: u32, col: u32) -> (f64, f64) {
        let p = self.patch as f64;
        let fx = ((col as f64 + 0.5) * p / self.width as f64).min(1.0);
        let fy = ((row as f64 + 0.5) * p / self.height as f64).min(1.0);
        (fx, fy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// Encoder output Ṽ, one row per patch.
    pub raw: Array2<f64>,
    /// Projected V in the decoder width.
    pub projected: Array2<f64>,
    pub grid: PatchGrid,
    pub frame: TokenFrame,
    pub source: ViewSource,
    pub slice_box: Option<BoundingBox>,
}

/// Row-major patches (zero-padded), pixels scaled to `[-0.5, 0.5]`.
pub fn patchify(img: &Image, patch: u32) -> Array2<f64> {
    let grid = PatchGrid::for_dims(img.width(), img.height(), patch);
    let p = patch as usize;
    let mut out = Array2::zeros((grid.len(), p * p * 3));
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let row = (r * grid.cols + c) as usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    let (x, y) = (c * patch + dx, r * patch + dy);
                    if x >= img.width() || y >= img.height() {
                        continue;
                    }
                    let px = img.pixel(x, y);
                    let base = ((dy * patch + dx) * 3) as usize;
                    for ch in 0..3 {
                        out[[row, base + ch]] = px[ch] as f64 / 255.0 - 0.5;
                    }
                }
            }
        }
    }
    out
}

/// Fixed 2-D sine/cosine position code: half the width encodes the row,
/// half the column.
pub fn position_code_2d(grid: PatchGrid, d: usize) -> Array2<f64> {
    let half = d / 2;
    let mut out = Array2::zeros((grid.len(), d));
    for r in 0..grid.rows as usize {
        for c in 0..grid.cols as usize {
            let row = r * grid.cols as usize + c;
            fill_sincos(&mut out, row, 0, half, r as f64);
            fill_sincos(&mut out, row, half, d - half, c as f64);
        }
    }
    out
}

pub fn position_code_1d(len: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, d));
    for t in 0..len {
        fill_sincos(&mut out, t, 0, d, t as f64);
    }
    out
}

fn fill_sincos(out: &mut Array2<f64>, row: usize, start: usize, width: usize, pos: f64) {
    for k in 0..width {
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / width.max(1) as f64);
        out[[row, start + k]] = if k % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
}

fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

struct AttnIds {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

impl AttnIds {
    fn lookup(b: &Bound<'_>, prefix: &str) -> Self {
        Self {
            wq: b.id(&format!("{prefix}.wq")),
            wk: b.id(&format!("{prefix}.wk")),
            wv: b.id(&format!("{prefix}.wv")),
            wo: b.id(&format!("{prefix}.wo")),
        }
    }
}

/// Multi-head attention of `xq` over `xkv`; returns the output and the
/// per-head attention matrices.
#[allow(clippy::too_many_arguments)]
fn attention(
    t: &mut Tape,
    xq: NodeId,
    xkv: NodeId,
    w: &AttnIds,
    heads: usize,
    scale: f64,
    mask: Option<&Array2<f64>>,
    bias: Option<(NodeId, &Array2<usize>)>,
) -> (NodeId, Vec<NodeId>) {
    let q = t.matmul(xq, w.wq);
    let k = t.matmul(xkv, w.wk);
    let v = t.matmul(xkv, w.wv);
    let d = t.value(q).ncols();
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let s = t.matmul_t(qh, kh);
        let mut s = t.scale(s, scale);
        if let Some(m) = mask {
            s = t.add_const(s, m);
        }
        if let Some((table, idx)) = bias {
            s = t.bias_gather(s, table, idx.clone());
        }
        let a = t.softmax(s);
        weights.push(a);
        outs.push(t.matmul(a, vh));
    }
    let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
    (t.matmul(cat, w.wo), weights)
}

fn block(t: &mut Tape, b: &Bound<'_>, prefix: &str, x: NodeId, heads: usize, mask: Option<&Array2<f64>>) -> NodeId {
    let d = t.value(x).ncols();
    let n1 = t.layer_norm(x, b.id(&format!("{prefix}.ln1.g")), b.id(&format!("{prefix}.ln1.b")));
    let w = AttnIds::lookup(b, &format!("{prefix}.attn"));
    let (a, _) = attention(t, n1, n1, &w, heads, 1.0 / ((d / heads) as f64).sqrt(), mask, None);
    let x = t.add(x, a);
    let n2 = t.layer_norm(x, b.id(&format!("{prefix}.ln2.g")), b.id(&format!("{prefix}.ln2.b")));
    let h = t.matmul(n2, b.id(&format!("{prefix}.mlp.w1")));
    let h = t.add_row(h, b.id(&format!("{prefix}.mlp.b1")));
    let h = t.gelu(h);
    let h = t.matmul(h, b.id(&format!("{prefix}.mlp.w2")));
    let h = t.add_row(h, b.id(&format!("{prefix}.mlp.b2")));
    t.add(x, h)
}

/// Encoder then projector on the tape; returns `(Ṽ, V)`.
fn encode_on_tape(t: &mut Tape, b: &Bound<'_>, cfg: &RefModelConfig, img: &Image) -> (NodeId, NodeId) {
    let grid = PatchGrid::for_dims(img.width(), img.height(), cfg.patch);
    let patches = t.leaf(patchify(img, cfg.patch));
    let x = t.matmul(patches, b.id("patch_embed.w"));
    let x = t.add_row(x, b.id("patch_embed.b"));
    let mut x = t.add_const(x, &position_code_2d(grid, cfg.d_v));
    for l in 0..cfg.enc_layers {
        x = block(t, b, &format!("enc.{l}"), x, cfg.heads, None);
    }
    let raw = t.layer_norm(x, b.id("enc.ln_f.g"), b.id("enc.ln_f.b"));
    let v = t.matmul(raw, b.id("proj.w"));
    let v = t.add_row(v, b.id("proj.b"));
    (raw, v)
}

/// Encode one view with the shared encoder and project it.
pub fn encode_view(
    img: &Image,
    source: ViewSource,
    slice_box: Option<BoundingBox>,
    cfg: &RefModelConfig,
    params: &Params,
) -> VisualFeatures {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let (raw, v) = encode_on_tape(&mut t, &b, cfg, img);
    let frame = TokenFrame::of(img, cfg.patch);
    VisualFeatures {
        raw: t.value(raw).clone(),
        projected: t.value(v).clone(),
        grid: frame.grid(),
        frame,
        source,
        slice_box,
    }
}

/// Row-wise affine map `Ṽ W + b`.
pub fn project(raw: &Array2<f64>, params: &Params) -> Array2<f64> {
    let w = params.get("proj.w").expect("proj.w");
    let b = params.get("proj.b").expect("proj.b");
    raw.dot(w) + b
}

/// Proximity bucket of a local token against a global token.
///
/// The local token center is mapped through `slice_box` into source-image
/// coordinates; the global grid spans the whole source. Both are
/// normalised by the source dimensions and the Euclidean distance is
/// quantised as `floor(K·d/√2)`, clamped to `K−1`.
pub fn proximity_bucket(
    local: (u32, u32),
    local_frame: TokenFrame,
    slice_box: &BoundingBox,
    global: (u32, u32),
    global_frame: TokenFrame,
    source_dims: (u32, u32),
    k: usize,
) -> usize {
    let (fx, fy) = local_frame.center(local.0, local.1);
    let lx = (slice_box.x_min + fx * slice_box.width()) / source_dims.0 as f64;
    let ly = (slice_box.y_min + fy * slice_box.height()) / source_dims.1 as f64;
    let (gx, gy) = global_frame.center(global.0, global.1);
    // d/√2 as sqrt(d²/2) stays exact on grid-aligned distances
    let scaled = (((lx - gx).powi(2) + (ly - gy).powi(2)) / 2.0).sqrt();
    ((k as f64 * scaled).floor() as usize).min(k - 1)
}

/// Bucket of every (local token, global token) pair, `n_s × n_g`.
pub fn bucket_matrix(
    local_frame: TokenFrame,
    slice_box: &BoundingBox,
    global_frame: TokenFrame,
    source_dims: (u32, u32),
    k: usize,
) -> Array2<usize> {
    let (lg, gg) = (local_frame.grid(), global_frame.grid());
    Array2::from_shape_fn((lg.len(), gg.len()), |(i, j)| {
        let li = i as u32;
        let gj = j as u32;
        proximity_bucket(
            (li / lg.cols, li % lg.cols),
            local_frame,
            slice_box,
            (gj / gg.cols, gj % gg.cols),
            global_frame,
            source_dims,
            k,
        )
    })
}

/// Flat bias-table indices for global keys.
fn bias_indices(buckets: &Array2<usize>, k: usize) -> Array2<usize> {
    buckets.mapv(|b| SOURCE_GLOBAL * k + b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub output: Array2<f64>,
    /// Per-head attention weights, `n_s × n_g` each.
    pub weights: Vec<Array2<f64>>,
}

/// Biased cross-attention of local queries over global keys, added
/// residually onto `v_local`. Logits are `q·k/√d_t + bias[src][bucket]`.
pub fn cross_attend(
    v_local: &Array2<f64>,
    v_global: &Array2<f64>,
    w: &CrossAttnWeights,
    bias_table: &Array2<f64>,
    buckets: &Array2<usize>,
    heads: usize,
) -> CrossAttention {
    let mut t = Tape::new();
    let l = t.leaf(v_local.clone());
    let g = t.leaf(v_global.clone());
    let ids = AttnIds {
        wq: t.leaf(w.wq.clone()),
        wk: t.leaf(w.wk.clone()),
        wv: t.leaf(w.wv.clone()),
        wo: t.leaf(w.wo.clone()),
    };
    let table = t.leaf(bias_table.clone());
    let idx = bias_indices(buckets, bias_table.ncols());
    let d_t = v_local.ncols() as f64;
    let (a, weights) = attention(&mut t, l, g, &ids, heads, 1.0 / d_t.sqrt(), None, Some((table, &idx)));
    let out = t.add(l, a);
    CrossAttention {
        output: t.value(out).clone(),
        weights: weights.iter().map(|&n| t.value(n).clone()).collect(),
    }
}

/// Decoder input layout `[E_g; V_g; E_l; V_i; text]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderInput {
    pub n_g: usize,
    pub n_s: usize,
    /// Replayed prior translations, oldest first.
    pub replay: Vec<Vec<usize>>,
    /// Text token ids following the visual block.
    pub text: Vec<usize>,
    /// `(row, target id)` for each supervised position.
    pub targets: Vec<(usize, usize)>,
    pub target_mask: Vec<bool>,
}

impl DecoderInput {
    /// Teacher-forced layout: replay entries separated by `SEP`, then
    /// `BOS`, the target tokens and `EOS`. Supervised rows are those that
    /// predict a target token or the closing `EOS`.
    pub fn for_training(n_g: usize, n_s: usize, replay: &[Vec<usize>], target: &[usize]) -> Self {
        let mut input = Self::prefix(n_g, n_s, replay);
        let bos_row = input.len() - 1;
        input.text.extend_from_slice(target);
        input.text.push(EOS);
        for (j, &tok) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
            input.targets.push((bos_row + j, tok));
        }
        input.target_mask = vec![false; input.len()];
        for &(r, _) in &input.targets {
            input.target_mask[r] = true;
        }
        input
    }

    /// Generation prefix ending in `BOS`; nothing supervised.
    pub fn prefix(n_g: usize, n_s: usize, replay: &[Vec<usize>]) -> Self {
        let mut text = Vec::new();
        for r in replay {
            text.extend_from_slice(r);
            text.push(SEP);
        }
        text.push(BOS);
        let len = 2 + n_g + n_s + text.len();
        Self {
            n_g,
            n_s,
            replay: replay.to_vec(),
            text,
            targets: Vec::new(),
            target_mask: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        2 + self.n_g + self.n_s + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn text_start(&self) -> usize {
        2 + self.n_g + self.n_s
    }
}

struct SliceGraph {
    logits: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn decode_on_tape(
    t: &mut Tape,
    b: &Bound<'_>,
    cfg: &RefModelConfig,
    v_g: NodeId,
    v_l: NodeId,
    buckets: &Array2<usize>,
    input: &DecoderInput,
) -> SliceGraph {
    let (n_g, n_s) = (input.n_g, input.n_s);
    let emb = t.gather(b.id("tok_embed"), &input.text);
    let seq = t.concat_rows(&[b.id("ident.g"), v_g, b.id("ident.l"), v_l, emb]);
    let len = input.len();
    let mut x = t.add_const(seq, &position_code_1d(len, cfg.d_t));
    let mask = causal_mask(len);
    let idx = bias_indices(buckets, cfg.proximity_buckets);
    let (g0, l0) = (1, 2 + n_g);
    for l in 0..cfg.dec_layers {
        if cfg.cross_attn_layers.contains(&l) {
            let head = t.slice_rows(x, 0, l0);
            let local = t.slice_rows(x, l0, n_s);
            let tail = t.slice_rows(x, l0 + n_s, len - l0 - n_s);
            let global = t.slice_rows(x, g0, n_g);
            let (lg, lb) = (b.id(&format!("dec.{l}.xln.g")), b.id(&format!("dec.{l}.xln.b")));
            let ql = t.layer_norm(local, lg, lb);
            let kg = t.layer_norm(global, lg, lb);
            let w = AttnIds::lookup(b, &format!("dec.{l}.xattn"));
            let (a, _) = attention(
                t,
                ql,
                kg,
                &w,
                cfg.heads,
                1.0 / (cfg.d_t as f64).sqrt(),
                None,
                Some((b.id("bias_table"), &idx)),
            );
            let local = t.add(local, a);
            x = t.concat_rows(&[head, local, tail]);
        }
        x = block(t, b, &format!("dec.{l}"), x, cfg.heads, Some(&mask));
    }
    let x = t.layer_norm(x, b.id("dec.ln_f.g"), b.id("dec.ln_f.b"));
    let logits = t.matmul(x, b.id("head.w"));
    let logits = t.add_row(logits, b.id("head.b"));
    SliceGraph { logits }
}

/// Full-sequence logits (`L × vocab`) for one slice.
pub fn decode_step(
    global: &Image,
    slice: &Image,
    slice_box: &BoundingBox,
    source_dims: (u32, u32),
    input: &DecoderInput,
    cfg: &RefModelConfig,
    params: &Params,
) -> Array2<f64> {
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let (_, v_g) = encode_on_tape(&mut t, &b, cfg, global);
    let (_, v_l) = encode_on_tape(&mut t, &b, cfg, slice);
    let buckets = bucket_matrix(
        TokenFrame::of(slice, cfg.patch),
        slice_box,
        TokenFrame::of(global, cfg.patch),
        source_dims,
        cfg.proximity_buckets,
    );
    let g = decode_on_tape(&mut t, &b, cfg, v_g, v_l, &buckets, input);
    t.value(g.logits).clone()
}

/// Which replayed translations feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaySource {
    /// Ground-truth `Y_<i` (training).
    GroundTruth,
    /// The model's own greedy outputs `Ŷ_<i` (inference).
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Targets,
    /// No supervised positions; every gradient is zero.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Per record, the sum over slices of the mean token cross-entropy,
    /// averaged over records.
    pub objective: f64,
    /// Cross-entropy averaged over every supervised token.
    pub mean_token: f64,
    pub tokens: usize,
}

fn window(prior: &[Vec<usize>], eta: usize) -> Vec<Vec<usize>> {
    prior[prior.len().saturating_sub(eta)..].to_vec()
}

/// Decoder inputs of the training path for one record.
pub fn training_inputs(record: &ToyRecord, cfg: &RefModelConfig) -> Vec<DecoderInput> {
    let n_g = TokenFrame::of(&record.global, cfg.patch).grid().len();
    let mut prior: Vec<Vec<usize>> = Vec::new();
    record
        .slices
        .iter()
        .map(|s| {
            let n_s = TokenFrame::of(&s.image, cfg.patch).grid().len();
            let input = DecoderInput::for_training(n_g, n_s, &window(&prior, cfg.replay), &s.target);
            prior.push(s.target.clone());
            input
        })
        .collect()
}

struct Evaluation {
    report: LossReport,
    grads: Option<Vec<Array2<f64>>>,
}

fn evaluate(
    dataset: &ToyDataset,
    params: &Params,
    cfg: &RefModelConfig,
    replay: ReplaySource,
    mask: MaskMode,
    with_grad: bool,
) -> Result<Evaluation, RefModelError> {
    if dataset.records.is_empty() {
        return Err(RefModelError::InvalidDataset("empty dataset".into()));
    }
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let n_rec = dataset.records.len() as f64;
    let mut objective_terms = Vec::new();
    let mut ce_sum = 0.0;
    let mut tokens = 0usize;
    for record in &dataset.records {
        let inputs = match replay {
            ReplaySource::GroundTruth => training_inputs(record, cfg),
            ReplaySource::Predicted => {
                let trace = infer(record, params, cfg);
                record
                    .slices
                    .iter()
                    .zip(trace.inputs.iter())
                    .map(|(s, p)| DecoderInput::for_training(p.n_g, p.n_s, &p.replay, &s.target))
                    .collect()
            }
        };
        let (_, v_g) = encode_on_tape(&mut t, &b, cfg, &record.global);
        let gframe = TokenFrame::of(&record.global, cfg.patch);
        for (s, input) in record.slices.iter().zip(&inputs) {
            let (_, v_l) = encode_on_tape(&mut t, &b, cfg, &s.image);
            let buckets = bucket_matrix(TokenFrame::of(&s.image, cfg.patch), &s.bbox, gframe, record.source_dims, cfg.proximity_buckets);
            let g = decode_on_tape(&mut t, &b, cfg, v_g, v_l, &buckets, input);
            let targets: Vec<(usize, usize, f64)> = match mask {
                MaskMode::Targets => input.targets.iter().map(|&(r, y)| (r, y, 1.0)).collect(),
                MaskMode::Empty => Vec::new(),
            };
            let n = targets.len();
            let ce = t.cross_entropy(g.logits, targets);
            ce_sum += t.scalar(ce);
            tokens += n;
            if n > 0 {
                objective_terms.push(t.scale(ce, 1.0 / (n as f64 * n_rec)));
            }
        }
    }
    let total = match objective_terms.split_first() {
        None => {
            let z = t.leaf(Array2::zeros((1, 1)));
            t.scale(z, 0.0)
        }
        Some((&first, rest)) => rest.iter().fold(first, |acc, &n| t.add(acc, n)),
    };
    let report = LossReport {
        objective: t.scalar(total),
        mean_token: if tokens > 0 { ce_sum / tokens as f64 } else { 0.0 },
        tokens,
    };
    let grads = with_grad.then(|| {
        let mut g = t.backward(total);
        (0..params.len())
            .map(|i| g[i].take().unwrap_or_else(|| Array2::zeros(params.values()[i].dim())))
            .collect()
    });
    Ok(Evaluation { report, grads })
}

/// Loss over a dataset. Teacher forcing feeds ground-truth `Y_<i` into the
/// replay window; otherwise the model's own greedy outputs are replayed.
pub fn loss(dataset: &ToyDataset, params: &Params, cfg: &RefModelConfig, teacher_forcing: bool) -> Result<LossReport, RefModelError> {
    let replay = if teacher_forcing { ReplaySource::GroundTruth } else { ReplaySource::Predicted };
    let r = evaluate(dataset, params, cfg, replay, MaskMode::Targets, false)?.report;
    if r.tokens == 0 {
        return Err(RefModelError::EmptyMask);
    }
    Ok(r)
}

/// Teacher-forced objective and its gradient per parameter group.
pub fn loss_and_grad(
    dataset: &ToyDataset,
    params: &Params,
    cfg: &RefModelConfig,
    mask: MaskMode,
) -> Result<(LossReport, Vec<Array2<f64>>), RefModelError> {
    let e = evaluate(dataset, params, cfg, ReplaySource::GroundTruth, mask, true)?;
    Ok((e.report, e.grads.unwrap_or_default()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupCheck>,
}

pub const FD_STEP: f64 = 1e-5;

/// Central-difference check of the analytic gradient. Every entry of the
/// bias table is probed plus `samples_per_group` random entries of every
/// other group.
pub fn grad_check(
    cfg: &RefModelConfig,
    params: &Params,
    probe: &ToyDataset,
    samples_per_group: usize,
) -> Result<GradCheckReport, RefModelError> {
    let (_, grads) = loss_and_grad(probe, params, cfg, MaskMode::Targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut work = params.clone();
    let mut groups = Vec::new();
    let mut overall: f64 = 0.0;
    for (gi, name) in params.names().iter().enumerate() {
        let g = &grads[gi];
        if g.iter().any(|v| !v.is_finite()) {
            return Err(RefModelError::NonFiniteGradient(name.clone()));
        }
        let n = g.len();
        let entries: Vec<usize> = if name == "bias_table" || n <= samples_per_group {
            (0..n).collect()
        } else {
            (0..samples_per_group).map(|_| rng.gen_range(0..n)).collect()
        };
        let cols = g.ncols();
        let mut worst: f64 = 0.0;
        for &e in &entries {
            let (r, c) = (e / cols, e % cols);
            let orig = work.values[gi][[r, c]];
            work.values[gi][[r, c]] = orig + FD_STEP;
            let plus = loss_and_value(probe, &work, cfg)?;
            work.values[gi][[r, c]] = orig - FD_STEP;
            let minus = loss_and_value(probe, &work, cfg)?;
            work.values[gi][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = g[[r, c]];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        groups.push(GroupCheck {
            group: name.clone(),
            entries: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: overall,
        groups,
    })
}

fn loss_and_value(probe: &ToyDataset, params: &Params, cfg: &RefModelConfig) -> Result<f64, RefModelError> {
    Ok(evaluate(probe, params, cfg, ReplaySource::GroundTruth, MaskMode::Targets, false)?
        .report
        .objective)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: Params) -> Self {
        let zeros: Vec<Array2<f64>> = params.values().iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            params,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub objective: f64,
    pub mean_token: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Loss before each update, then once more after the last one.
    pub curve: Vec<LossPoint>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> LossPoint {
        self.curve[0]
    }

    pub fn final_loss(&self) -> LossPoint {
        *self.curve.last().expect("curve has at least one point")
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Full-batch Adam on the teacher-forced objective.
pub fn train(dataset: &ToyDataset, cfg: &RefModelConfig, steps: usize) -> Result<TrainOutcome, RefModelError> {
    dataset.validate(cfg.vocab_size)?;
    train_from(TrainState::new(Params::init(cfg)?), dataset, cfg, steps)
}

pub fn train_from(mut state: TrainState, dataset: &ToyDataset, cfg: &RefModelConfig, steps: usize) -> Result<TrainOutcome, RefModelError> {
    let mut curve = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (report, grads) = loss_and_grad(dataset, &state.params, cfg, MaskMode::Targets)?;
        if !report.objective.is_finite() {
            return Err(RefModelError::Diverged(state.step));
        }
        curve.push(LossPoint {
            step: state.step,
            objective: report.objective,
            mean_token: report.mean_token,
        });
        state.step += 1;
        let bc1 = 1.0 - BETA1.powi(state.step as i32);
        let bc2 = 1.0 - BETA2.powi(state.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            ndarray::Zip::from(&mut state.params.values[i])
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                });
        }
        if !state.params.all_finite() {
            return Err(RefModelError::Diverged(state.step));
        }
    }
    let last = loss(dataset, &state.params, cfg, true)?;
    if !last.objective.is_finite() {
        return Err(RefModelError::Diverged(state.step));
    }
    curve.push(LossPoint {
        step: state.step,
        objective: last.objective,
        mean_token: last.mean_token,
    });
    Ok(TrainOutcome { state, curve })
}

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<(), RefModelError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RefModelError::Io(std::io::Error::other(e)))?;
    let wrap = |e: csv::Error| RefModelError::Io(std::io::Error::other(e));
    w.write_record(["step", "objective", "mean_token_loss"]).map_err(wrap)?;
    for p in curve {
        w.write_record([p.step.to_string(), format!("{:.10}", p.objective), format!("{:.10}", p.mean_token)])
            .map_err(wrap)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// Greedy outputs per slice, without `EOS`.
    pub predictions: Vec<Vec<usize>>,
    /// Decoder prefixes used for the first generated token of each slice.
    pub inputs: Vec<DecoderInput>,
}

/// Greedy decoding of every slice in order, replaying the model's own
/// previous outputs.
pub fn infer(record: &ToyRecord, params: &Params, cfg: &RefModelConfig) -> InferenceTrace {
    let mut predictions: Vec<Vec<usize>> = Vec::new();
    let mut inputs = Vec::new();
    let gframe = TokenFrame::of(&record.global, cfg.patch);
    let n_g = gframe.grid().len();
    for s in &record.slices {
        let n_s = TokenFrame::of(&s.image, cfg.patch).grid().len();
        let prefix = DecoderInput::prefix(n_g, n_s, &window(&predictions, cfg.replay));
        inputs.push(prefix.clone());
        let mut current = prefix;
        let mut out = Vec::new();
        for _ in 0..cfg.max_decode_len {
            let logits = decode_step(&record.global, &s.image, &s.bbox, record.source_dims, &current, cfg, params);
            let last = logits.row(logits.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            if next == EOS {
                break;
            }
            out.push(next);
            current.text.push(next);
            current.target_mask.push(false);
        }
        predictions.push(out);
    }
    InferenceTrace { predictions, inputs }
}

/// Row sums of every attention matrix computed by the decoder on one input;
/// used to check normalisation.
pub fn attention_row_sums(record: &ToyRecord, params: &Params, cfg: &RefModelConfig) -> Vec<f64> {
    let mut sums = Vec::new();
    let gframe = TokenFrame::of(&record.global, cfg.patch);
    let mut t = Tape::new();
    let b = Bound::bind(&mut t, params);
    let (_, v_g) = encode_on_tape(&mut t, &b, cfg, &record.global);
    for (s, input) in record.slices.iter().zip(training_inputs(record, cfg)) {
        let (_, v_l) = encode_on_tape(&mut t, &b, cfg, &s.image);
        let buckets = bucket_matrix(TokenFrame::of(&s.image, cfg.patch), &s.bbox, gframe, record.source_dims, cfg.proximity_buckets);
        decode_on_tape(&mut t, &b, cfg, v_g, v_l, &buckets, &input);
    }
    // every softmax on the tape is an attention matrix
    for id in 0..t.len() {
        if t.is_softmax(id) {
            sums.extend(t.value(id).sum_axis(Axis(1)).iter().copied());
        }
    }
    sums
}
