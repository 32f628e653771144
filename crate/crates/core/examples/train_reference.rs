//! Gradient-check, overfit and checkpoint the reference model.
//!
//! Usage: `cargo run --release --example train_reference [steps]`

use glotran::refmodel::{checkpoint, grad_check, infer, train, Params, RefModelConfig, ToyDataset};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = RefModelConfig::default();

    let probe = ToyDataset::generate(1, &cfg, 3);
    let report = grad_check(&cfg, &Params::init(&cfg).expect("config"), &probe, 4).expect("grad check");
    println!("gradient check: max relative error {:.2e} over {} groups", report.max_rel_error, report.groups.len());

    let data = ToyDataset::generate(16, &cfg, 11);
    let out = train(&data, &cfg, steps).expect("train");
    for p in out.curve.iter().step_by((steps / 10).max(1)) {
        println!("step {:4}  mean token loss {:.4}", p.step, p.mean_token);
    }
    println!("final {:.4}", out.final_loss().mean_token);

    let path = std::env::temp_dir().join("glotran_ref.ckpt");
    checkpoint::save(&path, &cfg, &out.state.params).expect("save");
    let (_, params) = checkpoint::load(&path).expect("load");
    let trace = infer(&data.records[0], &params, &cfg);
    for (k, (pred, slice)) in trace.predictions.iter().zip(&data.records[0].slices).enumerate() {
        println!("slice {k}: predicted {pred:?}, target {:?}", slice.target);
    }
}
