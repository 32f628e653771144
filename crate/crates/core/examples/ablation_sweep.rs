//! Replay-window × global-resolution sweep over rendered images, as run by
//! `glotran sweep`.

use glotran::cli::{cmd_sweep, SWEEP_REFERENCE_NOTE};
use glotran::config::CliConfig;

fn main() {
    let mut cfg = CliConfig::resolve(None, &[], Vec::new()).expect("defaults");
    cfg.out = Some(std::env::temp_dir().join("glotran_sweep.csv"));
    let report = cmd_sweep(&cfg, &[], Some(4), &[1, 2, 4, 8], &[224, 448, 896]).expect("sweep");
    println!("{} cells, Token^V monotone in R: {}", report.cells.len(), report.tokens_monotone);
    println!("{SWEEP_REFERENCE_NOTE}");
}
