//! Curate the planted-defect corpus and compare against its ground truth.

use glotran::glod::{curate, emit_dataset, CurationContext, QcThresholds, Translator};
use glotran::prompt::Language;
use glotran::regions::GroupingParams;
use glotran::synth::planted_corpus;

fn main() {
    let corpus = planted_corpus(100, 42);
    let ctx = CurationContext {
        detector_a: &corpus.detector_a,
        detector_b: &corpus.detector_b,
        local_recognizer: &corpus.local_recognizer,
        context_recognizer: &corpus.context_recognizer,
        translators: corpus.translators.iter().map(|t| t as &dyn Translator).collect(),
        embedder: Some(&corpus.embedder),
        thresholds: QcThresholds::default(),
        grouping: GroupingParams::default(),
        langs: (Language::En, Language::Zh),
    };
    let outcome = curate(&corpus.samples, &ctx, 4);
    let s = &outcome.summary;
    println!("kept {} rejected {} qc-dropped {} failed {}", s.kept, s.rejected, s.qc_dropped, s.failed);
    println!("reject reasons {:?}", s.reject_reasons);
    println!("qc reasons {:?}", s.qc_reasons);
    println!("matches planted truth: {}", *s == corpus.expected_summary());

    let dir = std::env::temp_dir().join("glotran_glod");
    let n = emit_dataset(&outcome.records, &dir).expect("emit");
    println!("{n} records written to {}", dir.display());
}
