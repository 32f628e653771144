//! Corpus BLEU with whitespace and character tokenization.

use glotran::metrics::{bleu, bleu_stats, BleuConfig, Smoothing};
use glotran::prompt::Language;

fn main() {
    let en = BleuConfig::for_language(Language::En);
    let hyp = vec!["the cat sat on the mat".to_string()];
    let refs = vec!["the cat sat on a mat".to_string()];
    let stats = bleu_stats(&hyp, &refs, &en).expect("aligned");
    println!("matches {:?} / totals {:?}", stats.matches, stats.totals);
    println!("smoothed {:.4}, raw {:.4}", stats.score(Smoothing::AddOneOnZero), stats.score(Smoothing::None));

    let zh = BleuConfig::for_language(Language::Zh);
    let hyp = vec!["今天天气很好".to_string()];
    let refs = vec!["今天天气真好".to_string()];
    println!("zh (chars) {:.4}", bleu(&hyp, &refs, &zh).expect("aligned"));
}
