//! Synthetic text images with known ground truth, and deterministic mock
//! services built on them.
//!
//! Source text is drawn from a pseudo-lexicon whose entries map one-to-one
//! onto two-character CJK tokens, so every rendered image comes with exact
//! reference translations. Glyphs are 5×7 bitmaps derived from a hash of
//! the character.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::glod::{
    ContractError, CurationSummary, Embedder, QcDropReason, QcThresholds, RawSample, Recognizer, RejectReason, SampleFate,
    SampleInput, Translator, GAP_MARKER, SCENES,
};
use crate::imaging::Image;
use crate::orchestrator::{LookupBackend, LookupEntry, LookupSidecar, LOOKUP_SUFFIX};
use crate::prompt::Language;
use crate::regions::{pixel_digest, BoundingBox, SidecarDetector};

const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CJK_POOL: usize = 64;
const CJK_BASE: u32 = 0x4E00;
const CJK_STRIDE: u32 = 37;

/// Words reserved for planted mistranslations and drift; never drawn for
/// ordinary text.
pub const RESERVED_WORDS: usize = 40;

/// One-to-one pseudo dictionary between lowercase source words and
/// two-character CJK target tokens.
#[derive(Debug, Clone)]
pub struct Lexicon {
    source: Vec<String>,
    target: Vec<String>,
    by_source: HashMap<String, usize>,
    by_target: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source = Vec::with_capacity(size);
        let mut seen = HashSet::new();
        while source.len() < size {
            let syllables = rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        *CONSONANTS.choose(&mut rng).unwrap() as char,
                        *VOWELS.choose(&mut rng).unwrap() as char,
                    ]
                })
                .collect();
            if seen.insert(w.clone()) {
                source.push(w);
            }
        }
        let mut pairs: Vec<(usize, usize)> = (0..CJK_POOL).flat_map(|a| (0..CJK_POOL).map(move |b| (a, b))).collect();
        pairs.shuffle(&mut rng);
        let cjk = |k: usize| char::from_u32(CJK_BASE + k as u32 * CJK_STRIDE).expect("valid ideograph");
        let target: Vec<String> = pairs[..size].iter().map(|&(a, b)| [cjk(a), cjk(b)].iter().collect()).collect();
        let by_source = source.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let by_target = target.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            source,
            target,
            by_source,
            by_target,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_word(&self, id: usize) -> &str {
        &self.source[id]
    }

    pub fn target_word(&self, id: usize) -> &str {
        &self.target[id]
    }

    /// Id of an ordinary (non-reserved) word.
    pub fn random_word(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(0..self.len() - RESERVED_WORDS)
    }

    pub fn reserved_word(&self, k: usize) -> usize {
        self.len() - RESERVED_WORDS + k % RESERVED_WORDS
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id >= self.len() - RESERVED_WORDS
    }

    /// Concept ids of a text in either language, in order.
    pub fn concepts(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for token in text.split_whitespace() {
            if token.is_ascii() {
                if let Some(&id) = self.by_source.get(token) {
                    out.push(id);
                }
            } else {
                let chars: Vec<char> = token.chars().collect();
                for pair in chars.chunks(2) {
                    let s: String = pair.iter().collect();
                    if let Some(&id) = self.by_target.get(&s) {
                        out.push(id);
                    }
                }
            }
        }
        out
    }

    fn map_lines(&self, text: &str, f: impl Fn(&str) -> String) -> String {
        text.split('\n').map(f).collect::<Vec<_>>().join("\n")
    }

    /// Word-by-word translation, line structure preserved. CJK output has
    /// no spaces; source output is space-separated.
    pub fn translate(&self, text: &str, src: Language, tgt: Language) -> String {
        self.map_ids(text, src, tgt, |id| id)
    }

    fn map_ids(&self, text: &str, src: Language, tgt: Language, remap: impl Fn(usize) -> usize) -> String {
        if src == tgt {
            return text.to_string();
        }
        self.map_lines(text, |line| {
            let ids: Vec<usize> = self.concepts(line).into_iter().map(&remap).collect();
            if tgt.is_cjk() {
                ids.iter().map(|&i| self.target[i].as_str()).collect::<String>()
            } else {
                ids.iter().map(|&i| self.source[i].as_str()).collect::<Vec<_>>().join(" ")
            }
        })
    }

    /// A fluent but unrelated translation: every word replaced by a
    /// different ordinary concept.
    pub fn mistranslate(&self, text: &str, src: Language, tgt: Language) -> String {
        let n = self.len() - RESERVED_WORDS;
        self.map_ids(text, src, tgt, |id| (id % n + n / 2 + 1) % n)
    }
}

/// 5×7 bitmap of a glyph: bit `4 - x` of row `y`.
pub fn glyph(c: char) -> [u8; 7] {
    let mut h = (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    let mut rows = [0u8; 7];
    for r in rows.iter_mut() {
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        *r = ((h >> 17) & 0x1F) as u8 | 0x01;
    }
    rows[0] |= 0x10;
    rows
}

/// Glyph pixel size and spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FontStyle {
    /// Pixels per bitmap cell.
    pub scale: u32,
    /// Padding around each text box.
    pub pad: u32,
}

impl FontStyle {
    pub fn new(scale: u32) -> Self {
        Self { scale, pad: 2 }
    }

    pub fn advance(&self) -> u32 {
        6 * self.scale
    }

    /// Box height of one text line.
    pub fn line_height(&self) -> u32 {
        7 * self.scale + 2 * self.pad
    }

    pub fn text_width(&self, text: &str) -> u32 {
        let n = text.chars().count() as u32;
        n * self.advance() - self.scale
    }
}

/// One detectable unit: a line, or a word of a split line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextUnit {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
}

/// A paragraph or single line that becomes one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBlock {
    pub lines: Vec<String>,
    pub units: Vec<TextUnit>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl TextBlock {
    /// Source text as a single slice reads it.
    pub fn text(&self) -> String {
        self.lines.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub image: Image,
    /// Blocks in reading order.
    pub blocks: Vec<TextBlock>,
    pub style: FontStyle,
}

impl RenderedScene {
    pub fn units(&self) -> Vec<TextUnit> {
        self.blocks.iter().flat_map(|b| b.units.iter().cloned()).collect()
    }

    pub fn region_boxes(&self) -> Vec<BoundingBox> {
        self.units().into_iter().map(|u| u.bbox).collect()
    }

    pub fn source_text(&self) -> String {
        self.blocks.iter().map(TextBlock::text).collect::<Vec<_>>().join("\n")
    }

    /// Reference document: block translations in reading order, one per line.
    pub fn reference(&self, lex: &Lexicon, src: Language, tgt: Language) -> String {
        self.blocks
            .iter()
            .map(|b| lex.translate(&b.text(), src, tgt))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Layout request: each block is a list of lines; `split` marks lines
/// detected word by word. `row_with_next` places a single-line block on the
/// same row as the following single-line block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub lines: Vec<String>,
    pub split: Vec<bool>,
    pub row_with_next: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub min_width: u32,
    pub min_height: u32,
    pub style: FontStyle,
    pub blocks: Vec<BlockSpec>,
    pub background: [u8; 3],
    pub ink: [u8; 3],
}

fn draw_text(img: &mut Image, text: &str, x0: u32, y0: u32, style: FontStyle, ink: [u8; 3]) {
    let s = style.scale;
    for (k, c) in text.chars().enumerate() {
        if c == ' ' {
            continue;
        }
        let gx = x0 + k as u32 * style.advance();
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..5u32 {
                if bits >> (4 - col) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            let (x, y) = (gx + col * s + dx, y0 + row as u32 * s + dy);
                            if x < img.width() && y < img.height() {
                                img.put_pixel(x, y, ink);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lay out and draw the blocks. Blocks stack vertically with a gap of
/// three line heights; paragraph lines are left-aligned with a gap of half
/// a line height; blocks sharing a row are five line heights apart.
pub fn render_scene(spec: &SceneSpec) -> RenderedScene {
    let st = spec.style;
    let h = st.line_height();
    let margin = 2 * h;
    let para_gap = h / 2;
    let block_gap = 3 * h;
    let row_gap = 5 * h;

    // rows of block indices
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < spec.blocks.len() {
        let mut row = vec![i];
        while spec.blocks[i].row_with_next && i + 1 < spec.blocks.len() {
            i += 1;
            row.push(i);
        }
        rows.push(row);
        i += 1;
    }

    struct Placed {
        block: usize,
        x: u32,
        y: u32,
    }
    let mut placed = Vec::new();
    let mut y = margin;
    let mut max_x = 0;
    for row in &rows {
        let mut x = margin;
        let mut row_h = 0;
        for &b in row {
            let spec_b = &spec.blocks[b];
            let w = spec_b.lines.iter().map(|l| st.text_width(l)).max().unwrap_or(0) + 2 * st.pad;
            let bh = spec_b.lines.len() as u32 * h + (spec_b.lines.len() as u32).saturating_sub(1) * para_gap;
            placed.push(Placed { block: b, x, y });
            x += w + row_gap;
            max_x = max_x.max(x - row_gap);
            row_h = row_h.max(bh);
        }
        y += row_h + block_gap;
    }
    let width = spec.min_width.max(max_x + margin);
    let height = spec.min_height.max(y - block_gap + margin);
    let mut img = Image::filled(width, height, spec.background);

    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for p in &placed {
        let b = &spec.blocks[p.block];
        let mut units = Vec::new();
        for (li, line) in b.lines.iter().enumerate() {
            let top = p.y + li as u32 * (h + para_gap);
            let tx = p.x + st.pad;
            let ty = top + st.pad;
            draw_text(&mut img, line, tx, ty, st, spec.ink);
            let unit_box = |start_char: usize, text: &str| {
                let x0 = tx + start_char as u32 * st.advance() - st.pad;
                BoundingBox::new(x0 as f64, top as f64, (x0 + st.text_width(text) + 2 * st.pad) as f64, (top + h) as f64)
            };
            if b.split.get(li).copied().unwrap_or(false) {
                let mut offset = 0;
                for word in line.split(' ') {
                    units.push(TextUnit {
                        bbox: unit_box(offset, word),
                        text: word.to_string(),
                    });
                    offset += word.chars().count() + 1;
                }
            } else {
                units.push(TextUnit {
                    bbox: unit_box(0, line),
                    text: line.clone(),
                });
            }
        }
        let bbox = units[1..].iter().fold(units[0].bbox, |acc, u| acc.union(&u.bbox));
        blocks.push(TextBlock {
            lines: b.lines.clone(),
            units,
            bbox,
        });
    }
    RenderedScene {
        image: img,
        blocks,
        style: st,
    }
}

fn random_line(lex: &Lexicon, rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| lex.source_word(lex.random_word(rng))).collect::<Vec<_>>().join(" ")
}

/// A random layout with a region count in `regions`.
pub fn random_spec(lex: &Lexicon, rng: &mut impl Rng, regions: std::ops::RangeInclusive<usize>, min_dims: (u32, u32)) -> SceneSpec {
    let target = rng.gen_range(regions.clone());
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut count = 0;
    while count < target {
        let left = target - count;
        if left >= 2 && rng.gen_bool(0.25) {
            // two single-line blocks on one row
            for k in 0..2 {
                blocks.push(BlockSpec {
                    lines: {
                        let words = rng.gen_range(1..=3);
                        vec![random_line(lex, rng, words)]
                    },
                    split: vec![false],
                    row_with_next: k == 0,
                });
            }
            count += 2;
            continue;
        }
        let n_lines = rng.gen_range(1..=left.min(3));
        let lines: Vec<String> = (0..n_lines)
            .map(|_| {
                let words = rng.gen_range(2..=4);
                random_line(lex, rng, words)
            })
            .collect();
        let mut split = vec![false; n_lines];
        count += n_lines;
        // split one line into words when the budget allows
        let li = rng.gen_range(0..n_lines);
        let extra = lines[li].split(' ').count() - 1;
        if extra > 0 && count + extra <= *regions.end() && rng.gen_bool(0.4) {
            split[li] = true;
            count += extra;
        }
        blocks.push(BlockSpec {
            lines,
            split,
            row_with_next: false,
        });
    }
    SceneSpec {
        min_width: min_dims.0,
        min_height: min_dims.1,
        style: FontStyle::new(rng.gen_range(2..=3)),
        blocks,
        background: [rng.gen_range(220..=255), rng.gen_range(220..=255), rng.gen_range(220..=255)],
        ink: [rng.gen_range(0..=40), rng.gen_range(0..=40), rng.gen_range(0..=40)],
    }
}

/// One image of the translation corpus.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub image_id: String,
    pub scene: RenderedScene,
    pub reference: String,
}

/// Rendered translation corpus with its mock detector and backend.
pub struct TranslationCorpus {
    pub lexicon: Arc<Lexicon>,
    pub images: Vec<SyntheticImage>,
    pub detector: SidecarDetector,
    pub backend: LookupBackend,
}

pub const DEFAULT_LEXICON_SIZE: usize = 600;

/// `n` images with 3-8 regions each, references and a lookup backend that
/// answers every ground-truth slice with its reference translation.
pub fn translation_corpus(n: usize, seed: u64, langs: (Language, Language)) -> TranslationCorpus {
    let lexicon = Arc::new(Lexicon::new(DEFAULT_LEXICON_SIZE, seed ^ 0x5EED));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut detector = SidecarDetector::new();
    let mut backend = LookupBackend::new();
    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let spec = random_spec(&lexicon, &mut rng, 3..=8, (320, 240));
        let scene = render_scene(&spec);
        let image_id = format!("synth_{k:04}");
        detector.insert(&scene.image, scene.region_boxes());
        for b in &scene.blocks {
            backend.insert(&image_id, b.bbox, lexicon.translate(&b.text(), langs.0, langs.1));
        }
        let reference = scene.reference(&lexicon, langs.0, langs.1);
        images.push(SyntheticImage {
            image_id,
            scene,
            reference,
        });
    }
    TranslationCorpus {
        lexicon,
        images,
        detector,
        backend,
    }
}


/// Write `<id>.png`, `<id>.regions.json`, `<id>.ref.txt` and
/// `<id>.lookup.json` for each image.
pub fn write_translation_corpus(corpus: &TranslationCorpus, dir: &std::path::Path, langs: (Language, Language)) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for im in &corpus.images {
        im.scene
            .image
            .save_png(dir.join(format!("{}.png", im.image_id)))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let regions = crate::regions::RegionSidecar {
            boxes: im.scene.region_boxes(),
        };
        std::fs::write(
            dir.join(format!("{}.regions.json", im.image_id)),
            serde_json::to_string_pretty(&regions)?,
        )?;
        std::fs::write(dir.join(format!("{}.ref.txt", im.image_id)), format!("{}\n", im.reference))?;
        let lookup = LookupSidecar {
            entries: im
                .scene
                .blocks
                .iter()
                .map(|b| LookupEntry {
                    bbox: b.bbox,
                    text: corpus.lexicon.translate(&b.text(), langs.0, langs.1),
                })
                .collect(),
        };
        std::fs::write(
            dir.join(format!("{}.{LOOKUP_SUFFIX}", im.image_id)),
            serde_json::to_string_pretty(&lookup)?,
        )?;
    }
    Ok(())
}

/// Recogniser reading the ground-truth units whose centre lies inside the
/// queried region. The local variant drops some words as `∅`.
#[derive(Debug, Clone, Default)]
pub struct SceneRecognizer {
    name: String,
    units: HashMap<[u8; 32], Vec<TextUnit>>,
    gap_every: Option<u64>,
}

impl SceneRecognizer {
    /// Exact whole-image context recogniser.
    pub fn context() -> Self {
        Self {
            name: "context-ocr".into(),
            ..Self::default()
        }
    }

    /// Fine-grained recogniser that misses roughly one word in `every`.
    pub fn local(every: u64) -> Self {
        Self {
            name: "local-ocr".into(),
            gap_every: Some(every.max(1)),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, image: &Image, units: Vec<TextUnit>) {
        self.units.insert(pixel_digest(image), units);
    }
}

fn word_hash(word: &str, pos: usize) -> u64 {
    word.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64 ^ pos as u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Recognizer for SceneRecognizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn recognize(&self, image: &Image, region: &BoundingBox) -> Result<String, ContractError> {
        let units = self
            .units
            .get(&pixel_digest(image))
            .ok_or_else(|| ContractError::Failed("unknown image".into()))?;
        let mut inside: Vec<&TextUnit> = units
            .iter()
            .filter(|u| {
                let (cx, cy) = u.bbox.center();
                cx >= region.x_min && cx <= region.x_max && cy >= region.y_min && cy <= region.y_max
            })
            .collect();
        inside.sort_by(|a, b| a.bbox.y_min.total_cmp(&b.bbox.y_min).then(a.bbox.x_min.total_cmp(&b.bbox.x_min)));
        let words: Vec<&str> = inside.iter().flat_map(|u| u.text.split_whitespace()).collect();
        Ok(words
            .iter()
            .enumerate()
            .map(|(i, w)| match self.gap_every {
                Some(k) if word_hash(w, i).is_multiple_of(k) => GAP_MARKER,
                _ => w,
            })
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Dictionary translator with planted failure modes.
#[derive(Debug, Clone)]
pub struct LexiconTranslator {
    name: String,
    lexicon: Arc<Lexicon>,
    /// Forward translations of inputs containing a word in `poison`
    /// are unrelated text.
    pub poison: HashSet<String>,
    /// Single-line inputs containing a word in `drift` are mistranslated.
    pub drift: HashSet<String>,
    /// Drop the last word of lines with at least six words.
    pub lossy: bool,
}

impl LexiconTranslator {
    pub fn new(name: impl Into<String>, lexicon: Arc<Lexicon>) -> Self {
        Self {
            name: name.into(),
            lexicon,
            poison: HashSet::new(),
            drift: HashSet::new(),
            lossy: false,
        }
    }
}

impl Translator for LexiconTranslator {
    fn name(&self) -> &str {
        &self.name
    }

    fn translate(&self, text: &str, src: Language, tgt: Language) -> Result<String, ContractError> {
        if src.is_cjk() || !tgt.is_cjk() {
            return Ok(self.lexicon.translate(text, src, tgt));
        }
        let has = |set: &HashSet<String>| text.split_whitespace().any(|w| set.contains(w));
        if has(&self.poison) || (!text.contains('\n') && has(&self.drift)) {
            return Ok(self.lexicon.mistranslate(text, src, tgt));
        }
        let input = if self.lossy {
            text.split('\n')
                .map(|line| {
                    let words: Vec<&str> = line.split_whitespace().collect();
                    if words.len() >= 6 {
                        words[..words.len() - 1].join(" ")
                    } else {
                        line.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            text.to_string()
        };
        Ok(self.lexicon.translate(&input, src, tgt))
    }
}

/// Cross-lingual bag-of-concepts embedder over the lexicon.
#[derive(Debug, Clone)]
pub struct LexiconEmbedder {
    lexicon: Arc<Lexicon>,
}

impl LexiconEmbedder {
    pub fn new(lexicon: Arc<Lexicon>) -> Self {
        Self { lexicon }
    }
}

impl Embedder for LexiconEmbedder {
    fn name(&self) -> &str {
        "lexicon-bow"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ContractError> {
        let mut v = vec![0.0; self.lexicon.len()];
        for id in self.lexicon.concepts(text) {
            v[id] += 1.0;
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    None,
    LowResolution,
    Blank,
    Blurred,
    LowConfidence,
    Sparse,
    License,
    Mistranslated,
    Drift,
}

impl Defect {
    /// Pattern of ten: four clean samples, then one of each planted kind,
    /// with the last position rotating over the less common kinds.
    pub fn for_index(i: usize) -> Self {
        match i % 10 {
            0..=3 => Defect::None,
            4 => Defect::LowResolution,
            5 => Defect::Blank,
            6 => Defect::Blurred,
            7 => Defect::Mistranslated,
            8 => Defect::Drift,
            _ => [Defect::LowConfidence, Defect::Sparse, Defect::License][(i / 10) % 3],
        }
    }

    /// Fate the curation pipeline must assign to a sample with `slices`
    /// ground-truth slices.
    pub fn expected_fate(self, slices: usize) -> SampleFate {
        use QcDropReason as Q;
        use RejectReason as R;
        let rejected = |reasons: Vec<R>| SampleFate::Rejected { reasons };
        match self {
            Defect::None => SampleFate::Kept { dropped_regions: 0 },
            Defect::Drift => SampleFate::Kept { dropped_regions: 1 },
            Defect::LowResolution => rejected(vec![R::LowResolution]),
            Defect::Blank => rejected(vec![R::Blur, R::LowOcrConfidence, R::LowTextRichness]),
            Defect::Blurred => rejected(vec![R::Blur]),
            Defect::LowConfidence => rejected(vec![R::LowOcrConfidence]),
            Defect::Sparse => rejected(vec![R::LowTextRichness]),
            Defect::License => rejected(vec![R::License]),
            Defect::Mistranslated => SampleFate::Dropped {
                // only the poisoned slice agrees with the unrelated global text
                reasons: vec![Q::LowEmbedSimilarity, Q::LowRoundtripSimilarity],
                dropped_regions: slices - 1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSample {
    pub image_id: String,
    pub scene: String,
    pub defect: Defect,
    pub expected: SampleFate,
}

/// Planted-defect curation corpus and the mock contracts it runs against.
pub struct PlantedCorpus {
    pub lexicon: Arc<Lexicon>,
    pub samples: Vec<SampleInput>,
    pub truth: Vec<PlantedSample>,
    pub detector_a: SidecarDetector,
    pub detector_b: SidecarDetector,
    pub local_recognizer: SceneRecognizer,
    pub context_recognizer: SceneRecognizer,
    pub translators: Vec<LexiconTranslator>,
    pub embedder: LexiconEmbedder,
}

impl PlantedCorpus {
    /// Summary the pipeline must reproduce. Dropped regions are counted for
    /// kept records only; `qc_reasons` counts each reason once per record.
    pub fn expected_summary(&self) -> CurationSummary {
        let mut s = CurationSummary {
            samples: self.truth.len(),
            ..CurationSummary::default()
        };
        for t in &self.truth {
            match &t.expected {
                SampleFate::Kept { dropped_regions } => {
                    s.kept += 1;
                    s.dropped_regions += dropped_regions;
                    *s.kept_per_scene.entry(t.scene.clone()).or_insert(0) += 1;
                }
                SampleFate::Rejected { reasons } => {
                    s.rejected += 1;
                    for r in reasons {
                        *s.reject_reasons.entry(*r).or_insert(0) += 1;
                    }
                }
                SampleFate::Dropped { reasons, .. } => {
                    s.qc_dropped += 1;
                    for r in reasons {
                        *s.qc_reasons.entry(*r).or_insert(0) += 1;
                    }
                }
                SampleFate::Failed { .. } => s.failed += 1,
            }
        }
        s
    }

    pub fn expected_per_scene(&self) -> BTreeMap<String, usize> {
        self.expected_summary().kept_per_scene
    }
}

fn jitter(b: &BoundingBox, rng: &mut impl Rng, conf: f64) -> BoundingBox {
    let mut d = || rng.gen_range(-1.0..=1.0f64).round();
    BoundingBox::with_confidence(b.x_min + d(), b.y_min + d(), b.x_max + d(), b.y_max + d(), conf)
}

/// `n` curation samples with exactly one planted defect each (or none).
pub fn planted_corpus(n: usize, seed: u64) -> PlantedCorpus {
    let lexicon = Arc::new(Lexicon::new(DEFAULT_LEXICON_SIZE, seed ^ 0x1E71));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut detector_a = SidecarDetector::new();
    let mut detector_b = SidecarDetector::new();
    let mut local = SceneRecognizer::local(7);
    let mut context = SceneRecognizer::context();
    let mut poison = HashSet::new();
    let mut drift = HashSet::new();
    let mut samples = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);

    for i in 0..n {
        let defect = Defect::for_index(i);
        let image_id = format!("glod_{i:04}");
        let scene_tag = SCENES[i % SCENES.len()].to_string();
        let (regions, dims) = match defect {
            Defect::Sparse => (1..=2, (512, 512)),
            Defect::LowResolution => (3..=6, (320, 240)),
            Defect::Mistranslated | Defect::Drift => (4..=8, (512, 512)),
            _ => (3..=8, (512, 512)),
        };
        let mut spec = random_spec(&lexicon, &mut rng, regions.clone(), dims);
        if defect == Defect::Drift {
            // need at least two slices so one survives
            while spec.blocks.len() < 2 {
                spec = random_spec(&lexicon, &mut rng, 4..=8, dims);
            }
        }
        match defect {
            Defect::Mistranslated => {
                let w = lexicon.source_word(lexicon.reserved_word(i / 10 * 2)).to_string();
                let b = rng.gen_range(0..spec.blocks.len());
                spec.blocks[b].lines[0].push_str(&format!(" {w}"));
                poison.insert(w);
            }
            Defect::Drift => {
                let w = lexicon.source_word(lexicon.reserved_word(i / 10 * 2 + 1)).to_string();
                let b = rng.gen_range(0..spec.blocks.len());
                spec.blocks[b].lines[0].push_str(&format!(" {w}"));
                drift.insert(w);
            }
            _ => {}
        }
        let mut scene = render_scene(&spec);
        // long text grows the canvas; resample until it stays under the floor
        let floor = QcThresholds::default().min_side;
        while defect == Defect::LowResolution && scene.image.width().min(scene.image.height()) >= floor {
            spec = random_spec(&lexicon, &mut rng, regions.clone(), dims);
            scene = render_scene(&spec);
        }
        let mut boxes_a: Vec<BoundingBox> = scene
            .region_boxes()
            .into_iter()
            .map(|b| {
                let conf = if defect == Defect::LowConfidence {
                    rng.gen_range(0.3..0.6)
                } else {
                    rng.gen_range(0.85..0.99)
                };
                BoundingBox::with_confidence(b.x_min, b.y_min, b.x_max, b.y_max, conf)
            })
            .collect();
        match defect {
            Defect::Blank => {
                let shade = rng.gen_range(180..=250);
                scene.image = Image::filled(scene.image.width(), scene.image.height(), [shade, shade, shade]);
                boxes_a.clear();
                scene.blocks.clear();
            }
            Defect::Blurred => scene.image = scene.image.gaussian_blur(6.0),
            _ => {}
        }
        let mut boxes_b: Vec<BoundingBox> = boxes_a
            .iter()
            .map(|b| {
                let conf = rng.gen_range(0.8..0.95);
                jitter(b, &mut rng, conf)
            })
            .collect();
        if boxes_b.len() > 3 && rng.gen_bool(0.25) {
            let k = rng.gen_range(0..boxes_b.len());
            boxes_b.remove(k);
        }
        detector_a.insert(&scene.image, boxes_a);
        detector_b.insert(&scene.image, boxes_b);
        let units = scene.units();
        let slices = scene.blocks.len();
        local.insert(&scene.image, units.clone());
        context.insert(&scene.image, units);

        samples.push(SampleInput {
            raw: RawSample {
                image_id: image_id.clone(),
                image_path: format!("{image_id}.png"),
                scene: scene_tag.clone(),
                license_permissive: defect != Defect::License,
            },
            image: scene.image,
        });
        truth.push(PlantedSample {
            image_id,
            scene: scene_tag,
            defect,
            expected: defect.expected_fate(slices),
        });
    }

    let mut primary = LexiconTranslator::new("dict-a", lexicon.clone());
    primary.poison = poison.clone();
    primary.drift = drift.clone();
    let mut secondary = LexiconTranslator::new("dict-b", lexicon.clone());
    secondary.poison = poison;
    secondary.drift = drift;
    secondary.lossy = true;
    PlantedCorpus {
        embedder: LexiconEmbedder::new(lexicon.clone()),
        lexicon,
        samples,
        truth,
        detector_a,
        detector_b,
        local_recognizer: local,
        context_recognizer: context,
        translators: vec![primary, secondary],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::laplacian_variance;
    use crate::regions::{merge_regions, order_regions, GroupingParams, RegionSet};

    #[test]
    fn lexicon_round_trip() {
        let lex = Lexicon::new(100, 1);
        let text = format!("{} {}\n{}", lex.source_word(3), lex.source_word(7), lex.source_word(9));
        let zh = lex.translate(&text, Language::En, Language::Zh);
        assert_eq!(zh.lines().count(), 2);
        assert_eq!(zh.lines().next().unwrap().chars().count(), 4);
        assert_eq!(lex.translate(&zh, Language::Zh, Language::En), text);
        let bad = lex.mistranslate(&text, Language::En, Language::Zh);
        assert_ne!(bad, zh);
    }

    #[test]
    fn rendered_blocks_merge_into_ground_truth_slices() {
        let lex = Lexicon::new(DEFAULT_LEXICON_SIZE, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let scene = render_scene(&random_spec(&lex, &mut rng, 3..=8, (320, 240)));
            let n = scene.region_boxes().len();
            assert!((3..=8).contains(&n), "{n} regions");
            let rs = RegionSet::new(scene.region_boxes(), (scene.image.width(), scene.image.height()));
            let groups = merge_regions(&order_regions(&rs), &GroupingParams::default());
            let got: Vec<BoundingBox> = groups.iter().map(|g| g.union_box).collect();
            let want: Vec<BoundingBox> = scene.blocks.iter().map(|b| b.bbox).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn low_resolution_samples_stay_under_the_floor() {
        let floor = QcThresholds::default().min_side;
        for seed in 0..4 {
            let c = planted_corpus(100, seed);
            for (t, s) in c.truth.iter().zip(&c.samples) {
                let side = s.image.width().min(s.image.height());
                assert_eq!(t.defect == Defect::LowResolution, side < floor, "{} side {side}", t.image_id);
            }
        }
    }

    #[test]
    fn sharp_and_blurred_renders() {
        let lex = Lexicon::new(DEFAULT_LEXICON_SIZE, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = render_scene(&random_spec(&lex, &mut rng, 4..=4, (512, 512)));
        assert!(laplacian_variance(&scene.image) > 50.0);
        assert!(laplacian_variance(&scene.image.gaussian_blur(6.0)) < 50.0);
    }

    #[test]
    fn context_recognizer_reads_blocks() {
        let lex = Lexicon::new(DEFAULT_LEXICON_SIZE, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = render_scene(&random_spec(&lex, &mut rng, 5..=5, (320, 240)));
        let mut rec = SceneRecognizer::context();
        rec.insert(&scene.image, scene.units());
        for b in &scene.blocks {
            assert_eq!(rec.recognize(&scene.image, &b.bbox).unwrap(), b.text());
        }
    }
}
