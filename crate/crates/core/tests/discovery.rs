mod common;

use common::{linear_model, random_model, random_tokens, rng};
use proptest::prelude::*;
use rand::Rng;
use sheaf_core::analysis::cumulative_overlap;
use sheaf_core::discovery::{
    acdc_prune, discover, discover_with_trace, eap_attribute, eap_topk, edge_patch_effects, loss_completeness,
    loss_fidelity, loss_overlap, loss_sparsity, oasr_sequence, relaxed_mask, sample_mask, straight_through,
    DiscoveryConfig, LossType, MaskLogits,
};
use sheaf_core::graph::{build_graph, EdgeMask};
use sheaf_core::tape::{finite_diff_check, Tape};
use sheaf_core::tasks::{Split, TaskExample, Variant};
use sheaf_core::{Array, Parameters};

const VOCAB: usize = 11;

fn examples(n: usize, seed: u64) -> Vec<TaskExample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let correct = r.random_range(0..VOCAB);
            let incorrect = (correct + r.random_range(1..VOCAB)) % VOCAB;
            TaskExample {
                tokens: random_tokens(&mut r, VOCAB, 8),
                correct,
                incorrect,
                template_id: 0,
                variant: Variant::Abba,
                split: Split::Eval,
            }
        })
        .collect()
}

/// Same-length prompts with the answer pair swapped in the corrupted copy.
fn aligned(n: usize, seed: u64) -> (Vec<TaskExample>, Vec<TaskExample>) {
    let clean = examples(n, seed);
    let mut r = rng(seed + 1);
    let corrupted = clean
        .iter()
        .map(|e| {
            let tokens = e.tokens.iter().map(|_| r.random_range(0..VOCAB)).collect();
            TaskExample { tokens, correct: e.incorrect, incorrect: e.correct, ..e.clone() }
        })
        .collect();
    (clean, corrupted)
}

fn quick(seed: u64) -> DiscoveryConfig {
    DiscoveryConfig { steps: 30, batch_size: 8, seed, ..DiscoveryConfig::default() }
}

fn model(seed: u64) -> Parameters {
    random_model(2, 2, 8, VOCAB, seed, 6.0)
}

#[test]
fn mask_sampling_examples() {
    let (s, m) = relaxed_mask(&[2.0], &[0.0], 1.0);
    assert!((s[0] - 0.8808).abs() < 1e-4);
    assert_eq!(m, [1.0]);
    let (s, m) = relaxed_mask(&[0.0], &[0.0], 1.0);
    assert_eq!((s[0], m[0]), (0.5, 0.0));

    let ml = MaskLogits { logits: vec![0.3; 50], temperature: 0.7 };
    let (s, m) = sample_mask(&ml, &mut rng(1)).unwrap();
    for (s, m) in s.iter().zip(&m) {
        assert!(*m == 0.0 || *m == 1.0);
        assert_eq!(*m == 1.0, *s > 0.5);
    }
    assert!(sample_mask(&MaskLogits { logits: vec![0.0], temperature: 0.0 }, &mut rng(1)).is_err());
}

/// Forward mask values are binary; the mask's gradient equals the score's,
/// and the score's gradient matches finite differences.
#[test]
fn straight_through_contract() {
    let mut r = rng(3);
    for _ in 0..50 {
        let n = r.random_range(1..10);
        let logits = Array::vector((0..n).map(|_| r.random_range(-3.0..3.0)).collect());
        let noise: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let tau = r.random_range(0.3..2.0);

        let grad_of = |use_mask: bool| {
            let mut t = Tape::new();
            let l = t.leaf(logits.clone());
            let (s, m) = straight_through(&mut t, l, &noise, tau).unwrap();
            if use_mask {
                assert!(t.value(m).data().iter().all(|&x| x == 0.0 || x == 1.0));
            }
            let wv = t.constant(Array::vector(w.clone()));
            let p = t.mul(if use_mask { m } else { s }, wv).unwrap();
            let out = t.sum(p).unwrap();
            t.backward(out).unwrap().wrt(l).unwrap()
        };
        assert_eq!(grad_of(true).data(), grad_of(false).data());

        let err = finite_diff_check(
            |t, l| {
                let (s, _) = straight_through(t, l, &noise, tau)?;
                let wv = t.constant(Array::vector(w.clone()));
                let p = t.mul(s, wv)?;
                t.sum(p)
            },
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn fidelity_and_completeness_examples() {
    let exs = vec![
        TaskExample { tokens: vec![1], correct: 0, incorrect: 2, template_id: 0, variant: Variant::Abba, split: Split::Eval },
        TaskExample { tokens: vec![1], correct: 1, incorrect: 0, template_id: 0, variant: Variant::Baba, split: Split::Eval },
    ];
    let eval = |rows: Vec<f64>, full: &Array, kind: Option<LossType>| {
        let mut t = Tape::new();
        let l = t.constant(Array::matrix(2, 3, rows).unwrap());
        let v = match kind {
            Some(k) => loss_fidelity(&mut t, l, full, &exs, k).unwrap(),
            None => loss_completeness(&mut t, l, &exs).unwrap(),
        };
        t.value(v).data()[0]
    };
    let full = Array::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.7, 4.0]).unwrap();
    assert!(eval(full.data().to_vec(), &full, Some(LossType::FullKl)).abs() < 1e-12);
    let tied = vec![0.4, 9.0, 0.4, 3.0, 3.0, -1.0];
    assert!((eval(tied.clone(), &full, Some(LossType::PairCe)) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(eval(vec![500.0, 0.0, -500.0, 0.0, 500.0, -500.0], &full, Some(LossType::PairCe)) < 1e-12);

    assert!(eval(tied, &full, None).abs() < 1e-12);
    let confident = vec![500.0, 0.0, -500.0, 0.0, 500.0, -500.0];
    assert!((eval(confident, &full, None) - std::f64::consts::LN_2).abs() < 1e-12);
    let a = eval(vec![1.0, 0.0, 3.0, -2.0, 0.5, 0.0], &full, None);
    let b = eval(vec![3.0, 0.0, 1.0, 0.5, -2.0, 0.0], &full, None);
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn zero_weighted_repulsion_matches_empty_repelled_set() {
    let p = model(0);
    let g = build_graph(&p.config);
    let exs = examples(40, 0);
    let base = DiscoveryConfig { lambda_overlap: 0.0, ..quick(5) };
    let with_r = DiscoveryConfig { repelled: vec![0, 3, 7, 19], ..base.clone() };
    let (a, ta) = discover_with_trace(&p, &g, &exs, &base).unwrap();
    let (b, tb) = discover_with_trace(&p, &g, &exs, &with_r).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.logits, b.logits);
    assert_eq!(ta, tb);
}

#[test]
fn excluding_every_edge_is_rejected() {
    let p = model(0);
    let g = build_graph(&p.config);
    let cfg = DiscoveryConfig { excluded: (0..g.n_edges()).collect(), ..quick(0) };
    assert!(discover(&p, &g, &examples(10, 0), &cfg).is_err());
    // Cutting every edge into the output leaves no path either.
    let cfg = DiscoveryConfig { excluded: g.incoming[g.output()].clone(), ..quick(0) };
    assert!(discover(&p, &g, &examples(10, 0), &cfg).is_err());
}

#[test]
fn excluded_edges_never_selected_and_runs_repeat() {
    let exs = examples(40, 1);
    let mut r = rng(9);
    for seed in 0..6 {
        let p = model(seed);
        let g = build_graph(&p.config);
        let excluded: Vec<usize> = (0..g.n_edges()).filter(|_| r.random_bool(0.3)).collect();
        let cfg = DiscoveryConfig { excluded: excluded.clone(), init_logit: 3.0, ..quick(seed) };
        let a = discover(&p, &g, &exs, &cfg).unwrap();
        for e in &excluded {
            assert!(!a.mask.get(*e));
        }
        let b = discover(&p, &g, &exs, &cfg).unwrap();
        assert_eq!(a, b);
    }
}

/// With only the KL fidelity term, all edges on is a global minimum and an
/// optimiser started deep inside it stays there.
#[test]
fn full_kl_stays_at_zero_from_strong_init() {
    let p = model(2);
    let g = build_graph(&p.config);
    let cfg = DiscoveryConfig {
        lambda_sparsity: 0.0,
        lambda_complete: 0.0,
        lambda_overlap: 0.0,
        loss_type: LossType::FullKl,
        init_logit: 20.0,
        steps: 60,
        ..quick(4)
    };
    let (sheaf, trace) = discover_with_trace(&p, &g, &examples(40, 2), &cfg).unwrap();
    assert!(trace.iter().all(|&v| v <= 1e-6), "{:?}", trace.iter().cloned().fold(0.0, f64::max));
    assert_eq!(sheaf.mask, g.full_mask());
}

#[test]
fn oasr_single_run_and_cumulative_monotonicity() {
    let p = model(1);
    let g = build_graph(&p.config);
    let exs = examples(40, 3);
    let cfg = DiscoveryConfig { init_logit: 2.0, ..quick(0) };
    let mut seeds = rng(17);
    let one = oasr_sequence(&p, &g, &exs, &cfg, 1, &mut seeds).unwrap();
    let first_seed = rand::RngCore::next_u64(&mut rng(17));
    assert_eq!(one[0], discover(&p, &g, &exs, &DiscoveryConfig { seed: first_seed, ..cfg.clone() }).unwrap());
    assert!(oasr_sequence(&p, &g, &exs, &cfg, 0, &mut rng(0)).is_err());

    let seq = oasr_sequence(&p, &g, &exs, &cfg, 4, &mut rng(18)).unwrap();
    let masks: Vec<EdgeMask> = seq.iter().map(|s| s.mask.clone()).collect();
    let report = cumulative_overlap(&masks, Vec::new()).unwrap();
    for w in report.rows.windows(2) {
        assert!(w[1].e_cap <= w[0].e_cap);
        assert!(w[1].e_cup >= w[0].e_cup);
    }
}

#[test]
fn acdc_threshold_extremes() {
    let p = model(3);
    let g = build_graph(&p.config);
    let exs = examples(30, 4);
    assert_eq!(acdc_prune(&p, &g, &exs, f64::INFINITY, 0).unwrap(), g.empty_mask());
    // Random weights: every edge has a strictly positive effect somewhere.
    assert_eq!(acdc_prune(&p, &g, &exs, 0.0, 0).unwrap(), g.full_mask());
    assert!(acdc_prune(&p, &g, &exs, -1.0, 0).is_err());
    let a = acdc_prune(&p, &g, &exs, 1e-3, 7).unwrap();
    assert_eq!(a, acdc_prune(&p, &g, &exs, 1e-3, 7).unwrap());
}

#[test]
fn acdc_prunes_silent_head() {
    let exs = examples(30, 5);
    for (layer, head) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut p = model(4);
        let i = layer * 2 + head;
        p.heads[i].w_o = p.heads[i].w_o.map(|_| 0.0);
        let g = build_graph(&p.config);
        for tau in [0.0, 1e-9, 1e-2] {
            let kept = acdc_prune(&p, &g, &exs, tau, 0).unwrap();
            for &e in &g.outgoing[g.head_node(layer, head)] {
                assert!(!kept.get(e), "edge {e} kept at τ = {tau}");
            }
        }
    }
}

#[test]
fn attribution_zero_without_corruption() {
    let p = model(5);
    let g = build_graph(&p.config);
    let exs = examples(10, 6);
    let scores = eap_attribute(&p, &g, &exs, &exs).unwrap();
    assert!(scores.iter().all(|&s| s == 0.0));
    assert_eq!(eap_topk(&scores, g.n_edges()).unwrap(), g.full_mask());
    assert!(eap_topk(&scores, g.n_edges() + 1).is_err());
}

#[test]
fn attribution_is_exact_on_linear_model() {
    for seed in 0..5 {
        let p = linear_model(2, 2, 8, VOCAB, seed);
        let g = build_graph(&p.config);
        let (clean, corrupted) = aligned(12, seed);
        let approx = eap_attribute(&p, &g, &clean, &corrupted).unwrap();
        let exact = edge_patch_effects(&p, &g, &clean, &corrupted).unwrap();
        for (a, e) in approx.iter().zip(&exact) {
            assert!((a - e).abs() <= 1e-9 * e.abs().max(1.0), "seed {seed}: {a} vs {e}");
        }
    }
}

#[test]
fn attribution_is_only_approximate_with_relu() {
    let p = model(6);
    let g = build_graph(&p.config);
    let (clean, corrupted) = aligned(12, 6);
    let approx = eap_attribute(&p, &g, &clean, &corrupted).unwrap();
    let exact = edge_patch_effects(&p, &g, &clean, &corrupted).unwrap();
    let worst = approx.iter().zip(&exact).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
    assert!(worst > 1e-6);
}

proptest! {
    #[test]
    fn overlap_bounded_by_sparsity(
        logits in prop::collection::vec(-30.0f64..30.0, 1..40),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 0..40),
    ) {
        let mut r: Vec<usize> = picks.iter().map(|i| i.index(logits.len())).collect();
        r.sort_unstable();
        r.dedup();
        prop_assert!(loss_overlap(&logits, &r) <= loss_sparsity(&logits));
        let all: Vec<usize> = (0..logits.len()).collect();
        prop_assert_eq!(loss_overlap(&logits, &all), loss_sparsity(&logits));
    }
}
