//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use glotran::cli::{cmd_sweep, SWEEP_REFERENCE_NOTE};
use glotran::config::CliConfig;
use glotran::glod::{curate, CurationContext, SampleFate, Translator};
use glotran::metrics::{bleu, bleu_stats, count_visual_tokens, BleuConfig};
use glotran::orchestrator::{translate_image, PipelineConfig, SliceStatus};
use glotran::prompt::{build_prompt, parse_prompt_text, render_prompt_text, Language, ReplayWindow, TemplateSet};
use glotran::refmodel::{
    attention_row_sums, cross_attend, grad_check, infer, train, training_inputs, CrossAttnWeights, Params,
    RefModelConfig, ToyDataset,
};
use glotran::regions::{merge_regions, order_regions, reading_order, GroupingParams, RegionSet};
use glotran::synth::{planted_corpus, translation_corpus};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GEOMETRY_SETS: usize = 1000;
const GEOMETRY_MAX_BOXES: usize = 20;
const GEOMETRY_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const OVERFIT_RECORDS: usize = 16;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_INITIAL_TOL: f64 = 0.2;
const OVERFIT_FINAL: f64 = 0.05;
const ATTN_CASES: usize = 100;
const ATTN_TOL: f64 = 1e-12;
const REPLAY_SLICES: usize = 50;
const REPLAY_MAX_ETA: usize = 8;
const E2E_IMAGES: usize = 50;
const BLEU_TOL: f64 = 1e-6;
const BLEU_FUZZ_CORPORA: usize = 500;
const SWEEP_IMAGES: usize = 4;
const PLANTED_SAMPLES: usize = 200;
const PLANTED_BUDGET: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn geometry_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = GroupingParams::default();
    let mut boxes_seen = 0;
    for k in 0..GEOMETRY_SETS {
        let boxes = common::random_boxes(&mut rng, GEOMETRY_MAX_BOXES);
        boxes_seen += boxes.len();
        check(reading_order(&boxes) == common::order_oracle(&boxes), || format!("order differs on set {k}"))?;
        let ordered = order_regions(&RegionSet::new(boxes, (512, 256)));
        let got: Vec<Vec<usize>> = merge_regions(&ordered, &params).into_iter().map(|g| g.member_indices).collect();
        check(got == common::merge_oracle(&ordered.boxes, &params), || format!("merge differs on set {k}"))?;
    }
    let t = start.elapsed();
    check(t < GEOMETRY_BUDGET, || format!("took {t:?}"))?;
    Ok(format!("{GEOMETRY_SETS} sets, {boxes_seen} boxes, {:.2}s", t.as_secs_f64()))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = RefModelConfig::default();
    let probe = ToyDataset::generate(1, &cfg, 3);
    let init = Params::init(&cfg).map_err(|e| e.to_string())?;
    // a non-zero bias table and biases exercise paths the zero init hides
    let mut shaken = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in shaken.values_mut() {
        v.mapv_inplace(|x| x + rng.gen_range(-0.1..0.1));
    }
    let mut worst = 0.0f64;
    let mut groups = 0;
    for params in [&init, &shaken] {
        let r = grad_check(&cfg, params, &probe, 6).map_err(|e| e.to_string())?;
        check(r.groups.len() == params.len(), || format!("{} of {} groups checked", r.groups.len(), params.len()))?;
        check(r.groups.iter().any(|g| g.group == "bias_table"), || "bias table not checked".into())?;
        if let Some(g) = r.groups.iter().find(|g| g.max_rel_error.is_nan() || g.max_rel_error >= GRAD_TOL) {
            return Err(format!("{} rel error {:.3e}", g.group, g.max_rel_error));
        }
        worst = worst.max(r.max_rel_error);
        groups = r.groups.len();
    }
    let t = start.elapsed();
    check(t < GRAD_BUDGET, || format!("took {t:?}"))?;
    Ok(format!("max rel error {worst:.2e} over {groups} groups, {:.1}s", t.as_secs_f64()))
}

fn overfit() -> Outcome {
    let cfg = RefModelConfig::default();
    let data = ToyDataset::generate(OVERFIT_RECORDS, &cfg, 11);
    let out = train(&data, &cfg, OVERFIT_STEPS).map_err(|e| e.to_string())?;
    let uniform = (cfg.vocab_size as f64).ln();
    let (a, b) = (out.initial_loss().mean_token, out.final_loss().mean_token);
    check((a - uniform).abs() <= OVERFIT_INITIAL_TOL, || format!("initial {a:.4} vs ln V {uniform:.4}"))?;
    check(b < OVERFIT_FINAL, || format!("final {b:.4}"))?;
    Ok(format!("{a:.4} -> {b:.4} after {OVERFIT_STEPS} steps"))
}

fn unbiased_attention(l: &Array2<f64>, g: &Array2<f64>, w: &CrossAttnWeights, heads: usize) -> Array2<f64> {
    let (q, k, v) = (l.dot(&w.wq), g.dot(&w.wk), g.dot(&w.wv));
    let d = l.ncols();
    let dh = d / heads;
    let mut cat = Array2::zeros((l.nrows(), d));
    for h in 0..heads {
        for i in 0..l.nrows() {
            let s: Vec<f64> = (0..g.nrows())
                .map(|j| (0..dh).map(|c| q[[i, h * dh + c]] * k[[j, h * dh + c]]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[[i, h * dh + c]] = (0..g.nrows()).map(|j| e[j] / z * v[[j, h * dh + c]]).sum();
            }
        }
    }
    l + &cat.dot(&w.wo)
}

fn bias_ablation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut worst_row = 0.0f64;
    for _ in 0..ATTN_CASES {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..5);
        let (n_l, n_g) = (rng.gen_range(1..10), rng.gen_range(1..12));
        let k = rng.gen_range(1..9);
        let mut m = |r, c| Array2::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0));
        let (l, g) = (m(n_l, d), m(n_g, d));
        let w = CrossAttnWeights {
            wq: m(d, d),
            wk: m(d, d),
            wv: m(d, d),
            wo: m(d, d),
        };
        let buckets = Array2::from_shape_fn((n_l, n_g), |_| rng.gen_range(0..k));
        let got = cross_attend(&l, &g, &w, &Array2::zeros((2, k)), &buckets, heads);
        let want = unbiased_attention(&l, &g, &w, heads);
        worst = worst.max((&got.output - &want).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        for a in &got.weights {
            for row in a.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
        }
    }
    // and inside the full model, trained-from-init or not
    let cfg = RefModelConfig::default();
    let data = ToyDataset::generate(4, &cfg, 5);
    let mut params = Params::init(&cfg).map_err(|e| e.to_string())?;
    if let Some(b) = params.get_mut("bias_table") {
        b.mapv_inplace(|_| rng.gen_range(-3.0..3.0));
    }
    let mut rows = 0;
    for rec in &data.records {
        for s in attention_row_sums(rec, &params, &cfg) {
            worst_row = worst_row.max((s - 1.0).abs());
            rows += 1;
        }
    }
    check(rows > 0, || "no attention rows in the model".into())?;
    check(worst <= ATTN_TOL, || format!("output diff {worst:.3e}"))?;
    check(worst_row <= ATTN_TOL, || format!("row sum diff {worst_row:.3e}"))?;
    Ok(format!("{ATTN_CASES} cases, max diff {worst:.1e}, {rows} model rows, row-sum diff {worst_row:.1e}"))
}

fn replay_properties() -> Outcome {
    let langs = (Language::En, Language::Zh);
    let templates = TemplateSet::default();
    let mut prompts = 0;
    for eta in 0..=REPLAY_MAX_ETA {
        let mut window = ReplayWindow::new(eta);
        let mut ok: Vec<String> = Vec::new();
        for i in 1..=REPLAY_SLICES {
            let bundle = build_prompt(i, &window, langs, &templates).map_err(|e| e.to_string())?;
            let want = &ok[ok.len().saturating_sub(eta)..];
            check(bundle.replay_block.len() == ok.len().min(eta), || format!("eta {eta} slice {i}: count"))?;
            check(bundle.replay_block == want, || format!("eta {eta} slice {i}: entries"))?;
            let parsed = parse_prompt_text(&render_prompt_text(&bundle)).map_err(|e| e.to_string())?;
            check(parsed.replay == want, || format!("eta {eta} slice {i}: rendered prompt"))?;
            prompts += 1;
            // slices 5, 10, ... fail and never enter the window
            if i % 5 != 0 {
                let text = format!("{{段落 {i}}}\n  第二行 ");
                window.push(i, text.clone()).map_err(|e| e.to_string())?;
                ok.push(text);
            }
        }
    }

    let cfg = RefModelConfig::default();
    let params = Params::init(&cfg).map_err(|e| e.to_string())?;
    let data = ToyDataset::generate(4, &cfg, 21);
    let mut inputs = 0;
    for rec in &data.records {
        let truth: Vec<Vec<usize>> = rec.slices.iter().map(|s| s.target.clone()).collect();
        for (i, input) in training_inputs(rec, &cfg).iter().enumerate() {
            check(input.replay == truth[i.saturating_sub(cfg.replay)..i], || format!("training input {i}"))?;
            inputs += 1;
        }
        let trace = infer(rec, &params, &cfg);
        for (i, input) in trace.inputs.iter().enumerate() {
            let produced = &trace.predictions[i.saturating_sub(cfg.replay)..i];
            check(input.replay == produced, || format!("inference input {i}"))?;
            inputs += 1;
        }
    }
    Ok(format!("{prompts} prompts, {inputs} model inputs"))
}

fn end_to_end() -> Outcome {
    let langs = (Language::En, Language::Zh);
    let corpus = translation_corpus(E2E_IMAGES, 1234, langs);
    let cfg = PipelineConfig::default();
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    let (mut slices, mut ok) = (0, 0);
    for img in &corpus.images {
        let doc = translate_image(&img.image_id, &img.scene.image, &cfg, &corpus.detector, &corpus.backend)
            .map_err(|e| e.to_string())?;
        check((3..=8).contains(&doc.stats.n_b), || format!("{} has {} regions", img.image_id, doc.stats.n_b))?;
        slices += doc.slices.len();
        ok += doc.slices.iter().filter(|s| s.status == SliceStatus::Ok).count();
        hyps.push(doc.document);
        refs.push(img.reference.clone());
    }
    check(ok == slices, || format!("coverage {ok}/{slices}"))?;
    let score = bleu(&hyps, &refs, &BleuConfig::for_language(langs.1)).map_err(|e| e.to_string())?;
    check((score - 100.0).abs() <= BLEU_TOL, || format!("BLEU {score}"))?;
    Ok(format!("{E2E_IMAGES} images, {slices} slices, coverage 100%, BLEU {score:.6}"))
}

fn bleu_fixture() -> Outcome {
    let s = |v: &str| vec![v.to_string()];
    let cfg = BleuConfig::default();
    let got = bleu(&s("the cat sat"), &s("the cat sat down"), &cfg).map_err(|e| e.to_string())?;
    // unigram..trigram all match, 4-gram 0/0 counts as 1, brevity e^(1 - 4/3)
    let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
    check((got - want).abs() <= BLEU_TOL, || format!("fixture {got} vs {want}"))?;
    let st = bleu_stats(&s("the cat sat"), &s("the cat sat down"), &cfg).map_err(|e| e.to_string())?;
    check(st.matches == [3, 2, 1, 0] && st.totals == [3, 2, 1, 0], || format!("stats {st:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let words = ["a", "b", "the", "of", "cat", "猫", "x1"];
    for k in 0..BLEU_FUZZ_CORPORA {
        let n = rng.gen_range(1..6);
        let x: Vec<String> = (0..n)
            .map(|_| (0..rng.gen_range(1..15)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" "))
            .collect();
        let same = bleu(&x, &x, &cfg).map_err(|e| e.to_string())?;
        check((same - 100.0).abs() <= BLEU_TOL, || format!("bleu(x,x)={same} on corpus {k}"))?;
        let empty = bleu(&vec![String::new(); n], &x, &cfg).map_err(|e| e.to_string())?;
        check(empty == 0.0, || format!("empty hypothesis {empty} on corpus {k}"))?;
    }
    Ok(format!("fixture {got:.6}, {BLEU_FUZZ_CORPORA} fuzz corpora"))
}

fn token_accounting() -> Outcome {
    let base = count_visual_tokens(224, &[], 448, 16);
    check(base == 196, || format!("global-only R=224 gives {base}"))?;
    let resolutions = [16, 32, 224, 448, 896, 1792];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..200 {
        let boxes = common::random_boxes(&mut rng, GEOMETRY_MAX_BOXES);
        let ordered = order_regions(&RegionSet::new(boxes, (512, 256)));
        let groups = merge_regions(&ordered, &GroupingParams::default());
        let t: Vec<u64> = resolutions.iter().map(|&r| count_visual_tokens(r, &groups, 448, 16)).collect();
        check(t.windows(2).all(|w| w[0] < w[1]), || format!("not increasing on set {k}: {t:?}"))?;
    }
    let corpus = translation_corpus(1, 3, (Language::En, Language::Zh));
    let img = &corpus.images[0];
    let mut t = Vec::new();
    for r in [224, 448] {
        let cfg = PipelineConfig {
            global_resolution: r,
            ..PipelineConfig::default()
        };
        let doc = translate_image(&img.image_id, &img.scene.image, &cfg, &corpus.detector, &corpus.backend)
            .map_err(|e| e.to_string())?;
        t.push(doc.stats.visual_tokens);
    }
    check(t[0] < t[1], || format!("pipeline Token^V {t:?}"))?;
    Ok(format!("R=224 global-only 196; 200 slice sets increasing; pipeline 224 -> {}, 448 -> {}", t[0], t[1]))
}

fn ablation_sweep() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let flags = vec![
        ("out".to_string(), dir.path().join("sweep.csv").display().to_string()),
        ("workers".to_string(), "1".to_string()),
    ];
    let cfg = CliConfig::resolve(None, &flags, Vec::new()).map_err(|e| e.to_string())?;
    let etas: Vec<usize> = (1..=8).collect();
    let resolutions = [224, 448, 896, 1792];
    let report = cmd_sweep(&cfg, &[], Some(SWEEP_IMAGES), &etas, &resolutions).map_err(|e| e.to_string())?;
    check(report.cells.len() == etas.len() * resolutions.len(), || format!("{} cells", report.cells.len()))?;
    check(report.cells.iter().all(|c| c.bleu.is_some()), || "cell without BLEU".into())?;
    check(report.tokens_monotone, || "Token^V not monotone in R".into())?;
    check(
        SWEEP_REFERENCE_NOTE.contains("eta=4") && SWEEP_REFERENCE_NOTE.contains("43.54"),
        || "reference note missing".into(),
    )?;
    Ok(format!("{}x{} grid; {SWEEP_REFERENCE_NOTE}", etas.len(), resolutions.len()))
}

fn planted_audit() -> Outcome {
    let start = Instant::now();
    let corpus = planted_corpus(PLANTED_SAMPLES, 0);
    let ctx = CurationContext {
        detector_a: &corpus.detector_a,
        detector_b: &corpus.detector_b,
        local_recognizer: &corpus.local_recognizer,
        context_recognizer: &corpus.context_recognizer,
        translators: corpus.translators.iter().map(|t| t as &dyn Translator).collect(),
        embedder: Some(&corpus.embedder),
        thresholds: Default::default(),
        grouping: GroupingParams::default(),
        langs: (Language::En, Language::Zh),
    };
    let out = curate(&corpus.samples, &ctx, 1);
    let mut missed = 0;
    let mut false_rejects = 0;
    for (t, r) in corpus.truth.iter().zip(&out.reports) {
        if t.expected != r.fate {
            if matches!(t.expected, SampleFate::Kept { .. }) {
                false_rejects += 1;
            } else {
                missed += 1;
            }
        }
    }
    check(missed == 0 && false_rejects == 0, || format!("{missed} missed, {false_rejects} false rejections"))?;
    let expected = corpus.expected_summary();
    check(out.summary == expected, || format!("summary {:?} vs {expected:?}", out.summary))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    glotran::glod::emit_dataset(&out.records, dir.path()).map_err(|e| e.to_string())?;
    let manifest = glotran::glod::read_manifest(&glotran::glod::dataset_paths(dir.path()).1).map_err(|e| e.to_string())?;
    check(
        manifest.records == expected.kept && manifest.per_scene == expected.kept_per_scene,
        || "manifest counts differ".into(),
    )?;
    let t = start.elapsed();
    check(t < PLANTED_BUDGET, || format!("took {t:?}"))?;
    let s = &out.summary;
    Ok(format!(
        "{} samples: kept {}, rejected {}, qc dropped {}, regions dropped {}, {:.1}s",
        s.samples,
        s.kept,
        s.rejected,
        s.qc_dropped,
        s.dropped_regions,
        t.as_secs_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("geometry oracles", geometry_oracles),
        ("reference-model gradient check", gradient_check),
        ("overfit", overfit),
        ("bias ablation identity", bias_ablation),
        ("replay and prompt properties", replay_properties),
        ("end-to-end completeness", end_to_end),
        ("BLEU fixture", bleu_fixture),
        ("token accounting", token_accounting),
        ("ablation sweep", ablation_sweep),
        ("planted-defect audit", planted_audit),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {why}", k + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
