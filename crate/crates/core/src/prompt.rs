//! Structured four-part prompt and the replay window of prior translations.
//!
//! Each slice request carries a global-understanding instruction, a
//! local-focus instruction, a global/local consistency rule and a
//! translation instruction. Translations of the preceding slices (at most
//! `capacity` of them) are replayed verbatim between the rule and the
//! translation instruction.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{GlobalView, Image, SliceCrop};

pub const DEFAULT_REPLAY: usize = 4;
pub const MAX_REPLAY: usize = 16;

pub const GLOBAL_IDENTIFIER: &str = "<image_g>";
pub const LOCAL_IDENTIFIER: &str = "<image_l>";

const HEADER_GLOBAL: &str = "[GLOBAL UNDERSTANDING]";
const HEADER_LOCAL: &str = "[LOCAL FOCUS]";
const HEADER_RULE: &str = "[CONSISTENCY RULE]";
const HEADER_REPLAY: &str = "[PRIOR TRANSLATIONS]";
const HEADER_TRANSLATE: &str = "[TRANSLATION]";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("replay index {index} is not after the last stored index {last}")]
    OutOfOrder { index: usize, last: usize },
    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),
    #[error("slice index must start at 1")]
    ZeroSliceIndex,
    #[error("template `{0}` is empty")]
    EmptyTemplate(&'static str),
    #[error("failed to read template {path}: {message}")]
    TemplateIo { path: String, message: String },
    #[error("malformed prompt text: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
    Jp,
    Ko,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
            Language::Jp => "jp",
            Language::Ko => "ko",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Language::En => "English",
            Language::Zh => "Chinese",
            Language::Jp => "Japanese",
            Language::Ko => "Korean",
        }
    }

    /// Scripts written without spaces between words.
    pub fn is_cjk(self) -> bool {
        !matches!(self, Language::En)
    }
}

impl FromStr for Language {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" | "eng" | "english" => Ok(Language::En),
            "zh" | "zho" | "chinese" => Ok(Language::Zh),
            "jp" | "ja" | "jpn" | "japanese" => Ok(Language::Jp),
            "ko" | "kor" | "korean" => Ok(Language::Ko),
            _ => Err(PromptError::UnknownLanguage(s.to_string())),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub slice_index: usize,
    pub translation: String,
}

/// FIFO of the most recent successful slice translations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayWindow {
    capacity: usize,
    entries: VecDeque<ReplayEntry>,
    last_index: Option<usize>,
}

impl ReplayWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            last_index: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    pub fn translations(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.translation.clone()).collect()
    }

    /// Append a translation, evicting the oldest entry when full.
    pub fn push(&mut self, slice_index: usize, translation: impl Into<String>) -> Result<(), PromptError> {
        if let Some(last) = self.last_index {
            if slice_index <= last {
                return Err(PromptError::OutOfOrder {
                    index: slice_index,
                    last,
                });
            }
        }
        self.last_index = Some(slice_index);
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayEntry {
            slice_index,
            translation: translation.into(),
        });
        Ok(())
    }
}

/// Instruction templates with `{SRC_LANG}`, `{TGT_LANG}` and `{REPLAY}`
/// placeholders. In the translation template, every line containing
/// `{REPLAY}` is the prior-translation clause and is dropped when nothing
/// is replayed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub global_instruction: String,
    pub local_instruction: String,
    pub consistency_rule: String,
    pub translation_instruction: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            global_instruction: "The first image is a low-resolution view of the whole picture. \
Work out the scene, its layout and what the {SRC_LANG} text on it is about, so that every \
region can be read in that context."
                .into(),
            local_instruction: "The second image is a high-resolution slice cut out of that picture. \
Concentrate on the {SRC_LANG} text inside this slice and read every character of it, \
keeping in mind where the slice sits in the overall layout."
                .into(),
            consistency_rule: "Before answering, check that the translation of this slice agrees \
with what the whole picture shows. Do not add anything that is not in the slice and do not \
leave any of its text out."
                .into(),
            translation_instruction: "Translate the {SRC_LANG} text in this slice into {TGT_LANG}, \
using the whole picture as context. Reply with the translation only.\n\
Keep wording and terminology consistent with the translations of the previous slices:{REPLAY}"
                .into(),
        }
    }
}

impl TemplateSet {
    pub const FILES: [&'static str; 4] = [
        "global_instruction.txt",
        "local_instruction.txt",
        "consistency_rule.txt",
        "translation_instruction.txt",
    ];

    /// Load the four template files from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| PromptError::TemplateIo {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        let set = Self {
            global_instruction: read(Self::FILES[0])?,
            local_instruction: read(Self::FILES[1])?,
            consistency_rule: read(Self::FILES[2])?,
            translation_instruction: read(Self::FILES[3])?,
        };
        set.validate()?;
        Ok(set)
    }

    /// Templates for a language pair: `<root>/<src>-<tgt>/` if present,
    /// otherwise `<root>/`.
    pub fn load_for_pair(root: impl AsRef<Path>, src: Language, tgt: Language) -> Result<Self, PromptError> {
        let root = root.as_ref();
        let pair = root.join(format!("{}-{}", src.code(), tgt.code()));
        if pair.is_dir() {
            Self::load_dir(pair)
        } else {
            Self::load_dir(root)
        }
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let parts = [
            &self.global_instruction,
            &self.local_instruction,
            &self.consistency_rule,
            &self.translation_instruction,
        ];
        for (name, text) in Self::FILES.iter().zip(parts) {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let parts = [
            ("global_instruction", &self.global_instruction),
            ("local_instruction", &self.local_instruction),
            ("consistency_rule", &self.consistency_rule),
            ("translation_instruction", &self.translation_instruction),
        ];
        for (name, text) in parts {
            if text.trim().is_empty() {
                return Err(PromptError::EmptyTemplate(name));
            }
        }
        Ok(())
    }
}

/// Instantiated prompt for one slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub global_instruction: String,
    pub local_instruction: String,
    pub consistency_rule: String,
    pub translation_instruction: String,
    pub replay_block: Vec<String>,
    pub src_lang: Language,
    pub tgt_lang: Language,
}

fn substitute(template: &str, src: Language, tgt: Language, replay: &str) -> String {
    template
        .replace("{SRC_LANG}", src.name())
        .replace("{TGT_LANG}", tgt.name())
        .replace("{REPLAY}", replay)
}

/// Build the prompt for slice `i` (1-based) from the current window.
pub fn build_prompt(
    i: usize,
    window: &ReplayWindow,
    langs: (Language, Language),
    templates: &TemplateSet,
) -> Result<PromptBundle, PromptError> {
    if i == 0 {
        return Err(PromptError::ZeroSliceIndex);
    }
    templates.validate()?;
    let (src, tgt) = langs;
    let replay_block = window.translations();
    let replay_inline: String = replay_block
        .iter()
        .map(|t| format!("{{{t}}}"))
        .collect::<Vec<_>>()
        .join(" ");

    let translation_template = if replay_block.is_empty() {
        templates
            .translation_instruction
            .lines()
            .filter(|l| !l.contains("{REPLAY}"))
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        templates.translation_instruction.clone()
    };

    Ok(PromptBundle {
        global_instruction: substitute(&templates.global_instruction, src, tgt, ""),
        local_instruction: substitute(&templates.local_instruction, src, tgt, ""),
        consistency_rule: substitute(&templates.consistency_rule, src, tgt, ""),
        translation_instruction: substitute(&translation_template, src, tgt, &replay_inline),
        replay_block,
        src_lang: src,
        tgt_lang: tgt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Global,
    Local,
}

impl ViewKind {
    pub fn identifier(self) -> &'static str {
        match self {
            ViewKind::Global => GLOBAL_IDENTIFIER,
            ViewKind::Local => LOCAL_IDENTIFIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageItem {
    Identifier(ViewKind),
    Image { view: ViewKind, image: Image },
    Text(String),
}

/// Ordered multimodal request content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageSequence {
    pub items: Vec<MessageItem>,
}

impl MessageSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn text(&self) -> Option<&str> {
        self.items.iter().find_map(|item| match item {
            MessageItem::Text(t) => Some(t.as_str()),
            _ => None,
        })
    }

    pub fn image(&self, view: ViewKind) -> Option<&Image> {
        self.items.iter().find_map(|item| match item {
            MessageItem::Image { view: v, image } if *v == view => Some(image),
            _ => None,
        })
    }

    /// Exactly one identifier per view, each directly before its image.
    pub fn identifiers_well_placed(&self) -> bool {
        [ViewKind::Global, ViewKind::Local].iter().all(|&view| {
            let positions: Vec<usize> = self
                .items
                .iter()
                .enumerate()
                .filter(|(_, it)| matches!(it, MessageItem::Identifier(v) if *v == view))
                .map(|(i, _)| i)
                .collect();
            positions.len() == 1
                && matches!(
                    self.items.get(positions[0] + 1),
                    Some(MessageItem::Image { view: v, .. }) if *v == view
                )
        })
    }
}

/// Lay out `[<image_g>, global, <image_l>, slice, text]`.
pub fn render_message_sequence(bundle: &PromptBundle, global: &GlobalView, slice: &SliceCrop) -> MessageSequence {
    MessageSequence {
        items: vec![
            MessageItem::Identifier(ViewKind::Global),
            MessageItem::Image {
                view: ViewKind::Global,
                image: global.image.clone(),
            },
            MessageItem::Identifier(ViewKind::Local),
            MessageItem::Image {
                view: ViewKind::Local,
                image: slice.image.clone(),
            },
            MessageItem::Text(render_prompt_text(bundle)),
        ],
    }
}

/// Concatenate the prompt parts under fixed section headers.
pub fn render_prompt_text(bundle: &PromptBundle) -> String {
    let mut out = String::new();
    let mut section = |header: &str, body: &str| {
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(header);
        out.push('\n');
        out.push_str(body);
    };
    section(HEADER_GLOBAL, &bundle.global_instruction);
    section(HEADER_LOCAL, &bundle.local_instruction);
    section(HEADER_RULE, &bundle.consistency_rule);
    if !bundle.replay_block.is_empty() {
        let body = bundle
            .replay_block
            .iter()
            .map(|t| format!("- {}", t.replace('\n', "\n  ")))
            .collect::<Vec<_>>()
            .join("\n");
        section(HEADER_REPLAY, &body);
    }
    section(HEADER_TRANSLATE, &bundle.translation_instruction);
    out
}

/// Sections recovered from rendered prompt text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedPrompt {
    pub global_instruction: String,
    pub local_instruction: String,
    pub consistency_rule: String,
    pub replay: Vec<String>,
    pub translation_instruction: String,
    pub paragraphs: usize,
}

/// Inverse of [`render_prompt_text`].
pub fn parse_prompt_text(text: &str) -> Result<ParsedPrompt, PromptError> {
    let headers = [HEADER_GLOBAL, HEADER_LOCAL, HEADER_RULE, HEADER_REPLAY, HEADER_TRANSLATE];
    let mut sections: Vec<(&str, Vec<&str>)> = Vec::new();
    for line in text.split('\n') {
        if let Some(h) = headers.iter().find(|h| **h == line) {
            sections.push((h, Vec::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push(line);
        } else {
            return Err(PromptError::Malformed("text before first section".into()));
        }
    }
    let mut parsed = ParsedPrompt::default();
    let count = sections.len();
    for (idx, (header, mut body)) in sections.into_iter().enumerate() {
        // sections are separated by one blank line
        if idx + 1 < count && body.last() == Some(&"") {
            body.pop();
        }
        let joined = body.join("\n");
        match header {
            HEADER_GLOBAL => parsed.global_instruction = joined,
            HEADER_LOCAL => parsed.local_instruction = joined,
            HEADER_RULE => parsed.consistency_rule = joined,
            HEADER_TRANSLATE => parsed.translation_instruction = joined,
            HEADER_REPLAY => {
                for line in body {
                    if let Some(rest) = line.strip_prefix("- ") {
                        parsed.replay.push(rest.to_string());
                    } else if let Some(cont) = line.strip_prefix("  ") {
                        let last = parsed
                            .replay
                            .last_mut()
                            .ok_or_else(|| PromptError::Malformed("continuation without entry".into()))?;
                        last.push('\n');
                        last.push_str(cont);
                    } else {
                        return Err(PromptError::Malformed(format!("bad replay line `{line}`")));
                    }
                }
                continue;
            }
            _ => unreachable!(),
        }
        parsed.paragraphs += 1;
    }
    if parsed.paragraphs != 4 {
        return Err(PromptError::Malformed(format!(
            "expected 4 instruction sections, found {}",
            parsed.paragraphs
        )));
    }
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::BoundingBox;

    fn langs() -> (Language, Language) {
        (Language::En, Language::Zh)
    }

    fn views() -> (GlobalView, SliceCrop) {
        let g = GlobalView {
            image: Image::filled(16, 16, [1, 1, 1]),
            source_width: 64,
            source_height: 64,
            resolution: 16,
        };
        let s = SliceCrop {
            image: Image::filled(8, 4, [9, 9, 9]),
            source_box: BoundingBox::new(0.0, 0.0, 8.0, 4.0),
            scale: 1.0,
        };
        (g, s)
    }

    #[test]
    fn push_and_evict() {
        let mut w = ReplayWindow::new(2);
        w.push(1, "a").unwrap();
        assert_eq!(w.translations(), vec!["a"]);
        w.push(2, "b").unwrap();
        w.push(3, "c").unwrap();
        let got: Vec<_> = w.entries().map(|e| (e.slice_index, e.translation.as_str())).collect();
        assert_eq!(got, vec![(2, "b"), (3, "c")]);
        assert_eq!(w.push(3, "d"), Err(PromptError::OutOfOrder { index: 3, last: 3 }));
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut w = ReplayWindow::new(0);
        w.push(1, "x").unwrap();
        w.push(2, "y").unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn first_slice_has_no_replay_clause() {
        let b = build_prompt(1, &ReplayWindow::new(4), langs(), &TemplateSet::default()).unwrap();
        assert!(b.replay_block.is_empty());
        assert!(!b.translation_instruction.contains("previous slices"));
        assert!(b.translation_instruction.contains("English text"));
        assert!(b.translation_instruction.contains("into Chinese"));
    }

    #[test]
    fn second_slice_embeds_prior_translation() {
        let mut w = ReplayWindow::new(4);
        w.push(1, "斯克里布纳五月刊").unwrap();
        let b = build_prompt(2, &w, langs(), &TemplateSet::default()).unwrap();
        assert_eq!(b.replay_block, vec!["斯克里布纳五月刊"]);
        assert!(b
            .translation_instruction
            .ends_with("translations of the previous slices:{斯克里布纳五月刊}"));
    }

    #[test]
    fn tenth_slice_sees_last_four() {
        let mut w = ReplayWindow::new(4);
        for k in 1..=9 {
            w.push(k, format!("t{k}")).unwrap();
        }
        let b = build_prompt(10, &w, langs(), &TemplateSet::default()).unwrap();
        let expected: Vec<String> = (6..=9).map(|k| format!("t{k}")).collect();
        assert_eq!(b.replay_block, expected);
    }

    #[test]
    fn language_codes() {
        assert_eq!("ja".parse::<Language>().unwrap(), Language::Jp);
        assert_eq!(
            "xx".parse::<Language>(),
            Err(PromptError::UnknownLanguage("xx".into()))
        );
        assert_eq!(build_prompt(0, &ReplayWindow::new(1), langs(), &TemplateSet::default()), Err(PromptError::ZeroSliceIndex));
    }

    #[test]
    fn message_layout() {
        let (g, s) = views();
        let b = build_prompt(1, &ReplayWindow::new(4), langs(), &TemplateSet::default()).unwrap();
        let seq = render_message_sequence(&b, &g, &s);
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.items[0], MessageItem::Identifier(ViewKind::Global));
        assert_eq!(seq.items[2], MessageItem::Identifier(ViewKind::Local));
        assert!(seq.identifiers_well_placed());
        let parsed = parse_prompt_text(seq.text().unwrap()).unwrap();
        assert_eq!(parsed.paragraphs, 4);
        assert!(parsed.replay.is_empty());
        assert_eq!(seq, render_message_sequence(&b, &g, &s));
    }

    #[test]
    fn prompt_text_roundtrip() {
        let mut w = ReplayWindow::new(3);
        w.push(1, "第一行\n第二行").unwrap();
        w.push(2, "  leading spaces").unwrap();
        let b = build_prompt(3, &w, langs(), &TemplateSet::default()).unwrap();
        let parsed = parse_prompt_text(&render_prompt_text(&b)).unwrap();
        assert_eq!(parsed.global_instruction, b.global_instruction);
        assert_eq!(parsed.local_instruction, b.local_instruction);
        assert_eq!(parsed.consistency_rule, b.consistency_rule);
        assert_eq!(parsed.translation_instruction, b.translation_instruction);
        assert_eq!(parsed.replay, b.replay_block);
    }

    #[test]
    fn templates_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let custom = TemplateSet {
            global_instruction: "G {SRC_LANG}".into(),
            local_instruction: "L".into(),
            consistency_rule: "C".into(),
            translation_instruction: "T {SRC_LANG}->{TGT_LANG}\nPrior:{REPLAY}".into(),
        };
        custom.write_dir(dir.path().join("en-ko")).unwrap();
        TemplateSet::default().write_dir(dir.path()).unwrap();
        let loaded = TemplateSet::load_for_pair(dir.path(), Language::En, Language::Ko).unwrap();
        assert_eq!(loaded, custom);
        let fallback = TemplateSet::load_for_pair(dir.path(), Language::En, Language::Zh).unwrap();
        assert_eq!(fallback, TemplateSet::default());
        let b = build_prompt(1, &ReplayWindow::new(2), (Language::En, Language::Ko), &loaded).unwrap();
        assert_eq!(b.global_instruction, "G English");
        assert_eq!(b.translation_instruction, "T English->Korean");
    }

    #[test]
    fn empty_template_rejected() {
        let t = TemplateSet {
            consistency_rule: "  ".into(),
            ..TemplateSet::default()
        };
        assert_eq!(
            build_prompt(1, &ReplayWindow::new(1), langs(), &t),
            Err(PromptError::EmptyTemplate("consistency_rule"))
        );
    }
}
