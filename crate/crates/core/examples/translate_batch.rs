//! Render a small corpus to disk and translate it with the lookup backend.
//!
//! Usage: `cargo run --example translate_batch [out_dir]`

use std::path::PathBuf;

use glotran::orchestrator::{run_batch, LookupBackend, PipelineConfig};
use glotran::prompt::Language;
use glotran::regions::SidecarDetector;
use glotran::synth::{translation_corpus, write_translation_corpus};

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("glotran_translate_batch"));
    let langs = (Language::En, Language::Zh);
    let corpus = translation_corpus(8, 3, langs);
    write_translation_corpus(&corpus, &dir, langs).expect("write corpus");

    // everything below only reads the files
    let detector = SidecarDetector::from_dir(&dir).expect("sidecars");
    let backend = LookupBackend::from_dir(&dir).expect("lookup sidecars");
    let out = dir.join("results.jsonl");
    let (report, docs) = run_batch(&dir, &PipelineConfig::default(), &detector, &backend, &out, 2).expect("batch");
    println!(
        "{} records, {}/{} slices ok, BLEU {:?}, {:.1} visual tokens/image -> {}",
        report.records,
        report.ok_slices,
        report.total_slices,
        report.bleu,
        report.efficiency.mean_visual_tokens,
        out.display()
    );
    println!("{}:\n{}", docs[0].image_id, docs[0].document);
}
