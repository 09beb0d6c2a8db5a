use brainspeech::autograd::Graph;
use brainspeech::brain::{BrainBatch, BrainNet, BrainNetConfig, Layout};
use brainspeech::evaluation::stats::{mann_whitney_u, wilcoxon_signed_rank};
use brainspeech::evaluation::{restricted_candidates, topk_accuracy, EvalReport};
use brainspeech::objective::{clip_loss, probabilities};
use brainspeech::ops::Mode;
use brainspeech::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits_and_target() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-50.0f64..50.0, 2..64).prop_flat_map(|l| {
        let n = l.len();
        (Just(l), 0..n)
    })
}

fn report_strategy() -> impl Strategy<Value = EvalReport> {
    (2usize..30, 1usize..20, any::<u64>()).prop_map(|(n, trials, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..trials).map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let truth = (0..trials).map(|_| rng.random_range(0..n)).collect();
        let words = (0..n).map(|j| format!("w{}", j % 4)).collect();
        EvalReport::from_logits(logits, truth, words, vec![0; trials]).unwrap()
    })
}

proptest! {
    #[test]
    fn clip_probabilities_sum_to_one((l, _) in logits_and_target()) {
        let p = probabilities(&l);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_is_shift_invariant((l, t) in logits_and_target(), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let (p, q) = (probabilities(&l), probabilities(&shifted));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let loss = clip_loss(&l, t).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - clip_loss(&shifted, t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn topk_is_monotone(r in report_strategy()) {
        let acc: Vec<f64> = (1..=r.candidates()).map(|k| topk_accuracy(&r.probs, &r.truth, k).accuracy).collect();
        prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*acc.last().unwrap(), 100.0);
    }

    #[test]
    fn restriction_never_hurts(r in report_strategy(), seed in any::<u64>(), frac in 0.0f64..1.0) {
        let n = 2 + ((r.candidates() - 2) as f64 * frac) as usize;
        let sub = restricted_candidates(&r.probs, &r.truth, n, seed, &[1, 5]).unwrap();
        for t in &sub.topk {
            prop_assert!(t.accuracy >= topk_accuracy(&r.probs, &r.truth, t.k).accuracy);
        }
        // seeded, so repeatable
        prop_assert_eq!(sub, restricted_candidates(&r.probs, &r.truth, n, seed, &[1, 5]).unwrap());
    }

    #[test]
    fn rank_tests_are_symmetric(a in prop::collection::vec(-10.0f64..10.0, 1..20), b in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let ab = mann_whitney_u(&a, &b).unwrap();
        let ba = mann_whitney_u(&b, &a).unwrap();
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((ab.statistic + ba.statistic - (a.len() * b.len()) as f64).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));

        let n = a.len().min(b.len());
        let w = wilcoxon_signed_rank(&a[..n], &b[..n]).unwrap();
        let v = wilcoxon_signed_rank(&b[..n], &a[..n]).unwrap();
        prop_assert!((w.p_value - v.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&w.p_value));
    }
}

/// Delaying the input delays the output, away from the zero-padded edges.
#[test]
fn brain_is_time_equivariant() {
    let cfg = BrainNetConfig {
        in_channels: 3,
        subjects: 1,
        d1: 6,
        d2: 6,
        out_features: 4,
        harmonics: 3,
        ..Default::default()
    };
    let radius = cfg.receptive_radius();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net: BrainNet<f64> = BrainNet::new(cfg, "brain.", &mut rng).unwrap();
    let (t_len, delta) = (260, 9);
    let x: Vec<f64> = (0..3 * t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut shifted = vec![0.0; 3 * t_len];
    for c in 0..3 {
        for t in delta..t_len {
            shifted[c * t_len + t] = x[c * t_len + t - delta];
        }
    }
    let layouts = vec![Layout::new(vec![[0.2, 0.3], [0.7, 0.4], [0.5, 0.9]]).unwrap()];
    let mut run = |x: Vec<f64>, mode: Mode| {
        let b = x.len() / (3 * t_len);
        let x = Tensor::from_vec(&[b, 3, t_len], x).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let zeros = vec![0; b];
        let batch = BrainBatch {
            x: &x,
            subjects: &zeros,
            layout_of: &zeros,
            layouts: &layouts,
        };
        let z = net.forward(&mut g, &vars, &batch, mode, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        g.value(z).clone()
    };
    // batch statistics need a train step before evaluation
    run([x.clone(), shifted.clone()].concat(), Mode::Train);
    let a = run(x, Mode::Eval);
    let b = run(shifted, Mode::Eval);
    let f = a.shape()[1];
    for j in 0..f {
        for t in (delta + 2 * radius)..(t_len - radius) {
            let (u, v) = (a.data()[j * t_len + t - delta], b.data()[j * t_len + t]);
            assert!((u - v).abs() < 1e-4, "feature {j} time {t}: {u} vs {v}");
        }
    }
}
