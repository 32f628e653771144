use glotran::metrics::{
    bleu, bleu_stats, count_visual_tokens, evaluate, measure_run, BleuConfig, ConstantScorer, ExternalScorer,
    MetricError, SimilarityScorer, Smoothing, TimingEvent, TimingKind, Tokenization, UnavailableScorer,
};
use glotran::prompt::Language;
use proptest::prelude::*;

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Brute-force corpus BLEU: clipped counts by scanning every window, no maps.
fn bleu_oracle(hyps: &[String], refs: &[String], max_n: usize) -> f64 {
    let (mut hl, mut rl) = (0usize, 0usize);
    let mut m = vec![0usize; max_n];
    let mut t = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hl += h.len();
        rl += r.len();
        for n in 1..=max_n {
            if h.len() < n {
                continue;
            }
            t[n - 1] += h.len() - n + 1;
            let hw: Vec<&[&str]> = h.windows(n).collect();
            let rw: Vec<&[&str]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
            let mut distinct: Vec<&[&str]> = Vec::new();
            for g in &hw {
                if !distinct.contains(g) {
                    distinct.push(g);
                }
            }
            for g in distinct {
                let ch = hw.iter().filter(|x| **x == g).count();
                let cr = rw.iter().filter(|x| **x == g).count();
                m[n - 1] += ch.min(cr);
            }
        }
    }
    if hl == 0 {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 0..max_n {
        prod *= if m[n] == 0 { 1.0 / (t[n] + 1) as f64 } else { m[n] as f64 / t[n] as f64 };
    }
    let bp = if hl > rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    100.0 * bp * prod.powf(1.0 / max_n as f64)
}

#[test]
fn cat_sat_fixture() {
    let cfg = BleuConfig::default();
    let st = bleu_stats(&s(&["the cat sat"]), &s(&["the cat sat down"]), &cfg).unwrap();
    assert_eq!(st.matches, vec![3, 2, 1, 0]);
    assert_eq!(st.totals, vec![3, 2, 1, 0]);
    // precisions 1, 1, 1, and 0/0 smoothed to 1/1; brevity penalty e^(1 - 4/3)
    let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
    let got = bleu(&s(&["the cat sat"]), &s(&["the cat sat down"]), &cfg).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!((got - 71.653131).abs() < 1e-6);
    assert_eq!(st.score(Smoothing::None), 0.0);
}

#[test]
fn character_tokens_for_cjk() {
    let cfg = BleuConfig::for_language(Language::Zh);
    assert_eq!(cfg.tokenization, Tokenization::Character);
    let got = bleu(&s(&["今天 天气 很好"]), &s(&["今天天气很好"]), &cfg).unwrap();
    assert!((got - 100.0).abs() < 1e-9);
    assert_eq!(BleuConfig::for_language(Language::En).tokenization, Tokenization::Whitespace);
}

#[test]
fn corpus_errors() {
    let cfg = BleuConfig::default();
    assert_eq!(bleu(&[], &[], &cfg), Err(MetricError::EmptyCorpus));
    assert!(matches!(bleu(&s(&["a"]), &s(&["a", "b"]), &cfg), Err(MetricError::LengthMismatch { .. })));
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "the", "of"]), 1..12).prop_map(|w| w.join(" "))
}

fn corpus() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(sentence(), 1..6)
}

proptest! {
    #[test]
    fn identity_scores_100(x in corpus()) {
        let got = bleu(&x, &x, &BleuConfig::default()).unwrap();
        prop_assert!((got - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_0(refs in corpus()) {
        let hyps = vec![String::new(); refs.len()];
        prop_assert_eq!(bleu(&hyps, &refs, &BleuConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let got = bleu(&h, &r, &BleuConfig::default()).unwrap();
        prop_assert!((got - bleu_oracle(&h, &r, 4)).abs() < 1e-9);
    }

    #[test]
    fn segment_order_does_not_matter(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let (hr, rr): (Vec<String>, Vec<String>) = pairs.into_iter().rev().unzip();
        let cfg = BleuConfig::default();
        prop_assert!((bleu(&h, &r, &cfg).unwrap() - bleu(&hr, &rr, &cfg).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn global_only_token_count() {
    assert_eq!(count_visual_tokens(224, &[], 448, 16), 196);
    assert_eq!(count_visual_tokens(448, &[], 448, 16), 784);
    assert_eq!(count_visual_tokens(16, &[], 448, 16), 1);
}

#[test]
fn timing_reduction() {
    let ev = |id: &str, k, t| TimingEvent::new(id, k, t);
    let events = vec![
        ev("a", TimingKind::ImageStart, 1.0),
        ev("a", TimingKind::RequestStart, 1.5),
        ev("b", TimingKind::ImageStart, 2.0),
        ev("a", TimingKind::FirstByte, 2.0),
        ev("b", TimingKind::RequestStart, 2.0),
        ev("b", TimingKind::FirstByte, 3.5),
        ev("a", TimingKind::ImageEnd, 4.0),
        ev("b", TimingKind::ImageEnd, 5.0),
    ];
    let r = measure_run(&events).unwrap();
    assert_eq!(r.images, 2);
    // latencies 0.5 and 1.5, wall 1.0..5.0
    assert!((r.first_token_latency - 1.0).abs() < 1e-12);
    assert!((r.wall_time - 4.0).abs() < 1e-12);
    assert!((r.fps - 0.5).abs() < 1e-12);

    let bad = vec![ev("a", TimingKind::FirstByte, 1.0)];
    assert!(measure_run(&bad).is_err());
    let backwards = vec![ev("a", TimingKind::ImageStart, 2.0), ev("a", TimingKind::ImageEnd, 1.0)];
    assert!(measure_run(&backwards).is_err());
    assert_eq!(measure_run(&[]).unwrap().images, 0);
}

#[test]
fn evaluation_survives_missing_scorers() {
    let hyps = s(&["a b c d", "e f"]);
    let refs = s(&["a b c d", "e f"]);
    let srcs = s(&["x", "y"]);
    let constant = ConstantScorer {
        name: "comet".into(),
        value: 0.8,
    };
    let gone = UnavailableScorer { name: "meteor".into() };
    let sim = SimilarityScorer;
    let scorers: Vec<&dyn ExternalScorer> = vec![&constant, &gone, &sim];
    let r = evaluate(&hyps, &refs, &srcs, &BleuConfig::default(), &scorers).unwrap();
    assert!((r.bleu - 100.0).abs() < 1e-9);
    assert_eq!(r.external[0].score, Some(0.8));
    assert_eq!(r.external[1].score, None);
    assert!(r.external[1].error.as_deref().unwrap().contains("unreachable"));
    assert!((r.external[2].score.unwrap() - 1.0).abs() < 1e-12);
}
