use std::collections::HashSet;
use std::sync::Mutex;

use glotran::metrics::{bleu, BleuConfig};
use glotran::orchestrator::{
    run_batch, translate_image, BackendError, BackendReply, BackendRequest, LookupBackend, PipelineConfig,
    RecordingBackend, RetryPolicy, SliceStatus, TranslationBackend,
};
use glotran::prompt::{build_prompt, parse_prompt_text, render_prompt_text, Language, ReplayWindow, TemplateSet};
use glotran::regions::{SidecarDetector, StaticDetector};
use glotran::synth::{translation_corpus, write_translation_corpus};

fn langs() -> (Language, Language) {
    (Language::En, Language::Zh)
}

#[test]
fn prompt_replay_is_the_last_eta_entries_verbatim() {
    let templates = TemplateSet::default();
    for eta in 0..=8 {
        let mut window = ReplayWindow::new(eta);
        let mut pushed: Vec<String> = Vec::new();
        for i in 1..=50 {
            let bundle = build_prompt(i, &window, langs(), &templates).unwrap();
            let want: Vec<String> = pushed[pushed.len().saturating_sub(eta)..].to_vec();
            assert_eq!(bundle.replay_block, want, "eta {eta} slice {i}");
            let parsed = parse_prompt_text(&render_prompt_text(&bundle)).unwrap();
            assert_eq!(parsed.replay, want);
            for t in &want {
                assert!(bundle.translation_instruction.contains(&format!("{{{t}}}")));
            }
            // every third slice fails and is never pushed
            if i % 3 != 0 {
                let text = format!("译文 {i}\n第二行");
                window.push(i, text.clone()).unwrap();
                pushed.push(text);
            }
        }
    }
}

#[test]
fn window_rejects_out_of_order_pushes() {
    let mut w = ReplayWindow::new(2);
    w.push(3, "a").unwrap();
    assert!(w.push(3, "b").is_err());
    assert!(w.push(2, "b").is_err());
    w.push(5, "c").unwrap();
    assert_eq!(w.translations(), vec!["a", "c"]);
}

/// Answers through the lookup table but fails every slice whose order
/// index is in `fail`.
struct Flaky {
    inner: LookupBackend,
    fail: HashSet<usize>,
    seen: Mutex<Vec<usize>>,
}

impl TranslationBackend for Flaky {
    fn name(&self) -> &str {
        "flaky"
    }

    fn translate(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        self.seen.lock().unwrap().push(request.slice.order_index);
        if self.fail.contains(&request.slice.order_index) {
            return Err(BackendError::Transport("refused".into()));
        }
        self.inner.translate(request)
    }
}

#[test]
fn failed_slices_never_enter_the_replay() {
    let corpus = translation_corpus(6, 41, langs());
    let cfg = PipelineConfig {
        replay: 2,
        retry: RetryPolicy::immediate(2),
        ..PipelineConfig::default()
    };
    for img in &corpus.images {
        let backend = RecordingBackend::new(Flaky {
            inner: corpus.backend.clone(),
            fail: [1, 2].into_iter().collect(),
            seen: Mutex::new(Vec::new()),
        });
        let doc = translate_image(&img.image_id, &img.scene.image, &cfg, &corpus.detector, &backend).unwrap();
        let ok: Vec<&str> = doc.slices.iter().filter(|s| s.is_ok()).map(|s| s.translation.as_str()).collect();
        let planted = (0..doc.stats.n_s).filter(|k| [1, 2].contains(k)).count();
        assert_eq!(doc.stats.failed, planted);
        assert_eq!(doc.stats.partial, planted > 0);
        assert!(doc.slices.iter().filter(|s| !s.is_ok()).all(|s| s.attempts == 2 && s.error.is_some()));
        let calls = backend.calls();
        assert_eq!(calls.len(), doc.stats.ok + 2 * doc.stats.failed);
        // reading order holds across calls, retries included
        assert!(calls.windows(2).all(|w| w[0].order_index <= w[1].order_index));
        let mut produced: Vec<&str> = Vec::new();
        for s in &doc.slices {
            let call = calls.iter().find(|c| c.order_index == s.order_index).unwrap();
            let replay = parse_prompt_text(&call.prompt).unwrap().replay;
            assert_eq!(replay, produced[produced.len().saturating_sub(2)..].to_vec());
            if s.is_ok() {
                produced.push(&s.translation);
            }
        }
        assert_eq!(doc.document, ok.join("\n"));
    }
}

#[test]
fn full_coverage_and_exact_bleu_on_rendered_corpus() {
    let corpus = translation_corpus(20, 7, langs());
    let cfg = PipelineConfig::default();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for img in &corpus.images {
        let doc = translate_image(&img.image_id, &img.scene.image, &cfg, &corpus.detector, &corpus.backend).unwrap();
        assert!(doc.slices.iter().all(|s| s.status == SliceStatus::Ok));
        assert!((3..=8).contains(&doc.stats.n_b));
        hyps.push(doc.document);
        refs.push(img.reference.clone());
    }
    let score = bleu(&hyps, &refs, &BleuConfig::for_language(Language::Zh)).unwrap();
    assert!((score - 100.0).abs() < 1e-6);
}

#[test]
fn repeat_runs_match_apart_from_timing() {
    let corpus = translation_corpus(3, 9, langs());
    let cfg = PipelineConfig::default();
    for img in &corpus.images {
        let a = translate_image(&img.image_id, &img.scene.image, &cfg, &corpus.detector, &corpus.backend).unwrap();
        let b = translate_image(&img.image_id, &img.scene.image, &cfg, &corpus.detector, &corpus.backend).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
    }
}

#[test]
fn no_regions_gives_empty_document() {
    let corpus = translation_corpus(1, 2, langs());
    let img = &corpus.images[0];
    let doc = translate_image(
        &img.image_id,
        &img.scene.image,
        &PipelineConfig::default(),
        &StaticDetector { boxes: Vec::new() },
        &corpus.backend,
    )
    .unwrap();
    assert_eq!(doc.stats.n_s, 0);
    assert_eq!(doc.document, "");
    assert!(!doc.stats.partial);
}

#[test]
fn batch_from_disk_reports_bleu_and_skips_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = translation_corpus(4, 13, langs());
    write_translation_corpus(&corpus, dir.path(), langs()).unwrap();
    std::fs::write(dir.path().join("zz_broken.png"), b"not an image").unwrap();
    let detector = SidecarDetector::from_dir(dir.path()).unwrap();
    let backend = LookupBackend::from_dir(dir.path()).unwrap();
    let out = dir.path().join("out.jsonl");
    let (report, docs) = run_batch(dir.path(), &PipelineConfig::default(), &detector, &backend, &out, 2).unwrap();
    assert_eq!(report.records, 4);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.coverage, 1.0);
    assert!((report.bleu.unwrap() - 100.0).abs() < 1e-6);
    let lines = std::fs::read_to_string(&out).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let ids: Vec<&str> = docs.iter().map(|d| d.image_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}
