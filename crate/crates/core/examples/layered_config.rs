//! Defaults < file < flags < environment.

use glotran::config::CliConfig;

fn main() {
    let path = std::env::temp_dir().join("glotran_example.conf");
    std::fs::write(&path, "# example\nglobal_res = 448\nreplay = 2\nqc.tau_embed = 0.8\n").expect("write");
    let flags = vec![("replay".to_string(), "6".to_string())];
    let env = vec![("GLOTRAN_QC_TAU_EMBED".to_string(), "0.9".to_string())];
    let cfg = CliConfig::resolve(Some(&path), &flags, env).expect("valid");
    println!("global_res {} ({})", cfg.pipeline.global_resolution, cfg.source("global_res"));
    println!("replay {} ({})", cfg.pipeline.replay, cfg.source("replay"));
    println!("qc.tau_embed {} ({})", cfg.qc.tau_embed, cfg.source("qc.tau_embed"));
    println!("slice_cap {} ({})", cfg.pipeline.slice_cap, cfg.source("slice_cap"));
    print!("{}", cfg.describe());
}
