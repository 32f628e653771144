//! Prompts for consecutive slices with a replay window of two.

use glotran::prompt::{build_prompt, render_prompt_text, Language, ReplayWindow, TemplateSet};

fn main() {
    let templates = TemplateSet::default();
    let mut window = ReplayWindow::new(2);
    let outputs = ["第一行", "第二行", "第三行"];
    for (k, out) in outputs.iter().enumerate() {
        let i = k + 1;
        let bundle = build_prompt(i, &window, (Language::En, Language::Zh), &templates).expect("valid templates");
        println!("--- slice {i} (replay {:?})\n{}\n", bundle.replay_block, render_prompt_text(&bundle));
        window.push(i, *out).expect("in order");
    }
}
