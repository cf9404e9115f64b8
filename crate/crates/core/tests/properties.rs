use proptest::prelude::*;

use scaleup::growth::{
    depth_sources, expand_in_axis, expand_out_axis, fpi_expand, verify_preservation, DepthMode,
    WidthMap,
};
use scaleup::model::random_init_with;
use scaleup::moe::{load_balance_loss, route_logits, RoutingStats};
use scaleup::savings::{time_savings_factor, PhaseSpec};
use scaleup::{Checkpoint, ModelConfig, Tensor};

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|i| vals[i % vals.len()] + i as f64 * 1e-3)
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn width_map_laws(old in 1usize..20, extra in 0usize..40) {
        let new = old + extra;
        let m = WidthMap::circular(old, new).unwrap();
        prop_assert_eq!(m.new_dim(), new);
        prop_assert_eq!(m.multiplicity().iter().sum::<usize>(), new);
        prop_assert!(m.multiplicity().iter().all(|&c| c >= 1));
        let fresh = m.fresh_positions();
        prop_assert_eq!(fresh.iter().filter(|&&f| f).count(), extra);
        prop_assert!(fresh.iter().enumerate().all(|(i, &f)| f == (i >= old)));
    }

    #[test]
    fn split_then_duplicate_preserves_products(
        old in 1usize..8,
        extra in 0usize..12,
        cols in 1usize..6,
        vals in prop::collection::vec(-2.0f64..2.0, 1..32),
        x in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let m = WidthMap::circular(old, old + extra).unwrap();
        let w = matrix(old, cols, &vals);
        let e = expand_in_axis(&w, &m).unwrap();
        let x = &x[..old];
        let xd = m.duplicate(x);
        for c in 0..cols {
            let y: f64 = (0..old).map(|i| x[i] * w.get(i, c)).sum();
            let yd: f64 = (0..xd.len()).map(|i| xd[i] * e.get(i, c)).sum();
            prop_assert!((y - yd).abs() < 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn output_duplication_matches_map(
        old in 1usize..8,
        extra in 0usize..12,
        vals in prop::collection::vec(-2.0f64..2.0, 1..32),
    ) {
        let m = WidthMap::circular(old, old + extra).unwrap();
        let w = matrix(3, old, &vals);
        let e = expand_out_axis(&w, &m, None).unwrap();
        for (i, &s) in m.src_index().iter().enumerate() {
            prop_assert_eq!(e.column(i), w.column(s));
        }
    }

    #[test]
    fn depth_map_laws(l1 in 1usize..10, extra in 0usize..20) {
        let l2 = l1 + extra;
        let interp = depth_sources(l1, l2, DepthMode::Interpolate).unwrap();
        let stack = depth_sources(l1, l2, DepthMode::Stack).unwrap();
        prop_assert!(interp.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(stack.iter().enumerate().all(|(l, &s)| s == stack[l % l1]));
        for src in [&interp, &stack] {
            prop_assert_eq!(src.len(), l2);
            for j in 0..l1 {
                prop_assert!(src.contains(&j));
            }
        }
    }

    #[test]
    fn gates_sum_to_one(
        logits in prop::collection::vec(-20.0f64..20.0, 2..12),
        k_frac in 0.0f64..1.0,
    ) {
        let n = logits.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let r = route_logits(&logits, k, true).unwrap();
        prop_assert!((r.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut sorted = r.experts.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        let kth = r.probs[*r.experts.last().unwrap()];
        for e in 0..n {
            if !r.experts.contains(&e) {
                prop_assert!(r.probs[e] <= kth);
            }
        }
    }

    #[test]
    fn balance_loss_at_least_one_for_single_expert_rows(
        picks in prop::collection::vec(0usize..6, 1..30),
    ) {
        // one-hot routing: f equals P, so N·Σ f² ≥ 1 by Cauchy–Schwarz
        let routings: Vec<_> = picks
            .iter()
            .map(|&e| {
                let mut l = vec![-60.0; 6];
                l[e] = 0.0;
                route_logits(&l, 1, true).unwrap()
            })
            .collect();
        let lb = load_balance_loss(&RoutingStats::from_routings(&routings, 6), 6);
        prop_assert!(lb >= 1.0 - 1e-9);
    }

    #[test]
    fn time_factor_split_invariance(tokens in 1.0f64..1e4, rate in 1.0f64..500.0, frac in 0.05f64..0.95) {
        let phase = |t: f64| PhaseSpec {
            name: "p".into(),
            devices: 8,
            gflops_per_device: 100.0,
            model_size_b: 1.0,
            trained_tokens_b: t,
            tokens_per_day_b: rate,
        };
        let base = PhaseSpec { tokens_per_day_b: 25.0, ..phase(1.0) };
        let whole = time_savings_factor(&[phase(tokens)], &base).unwrap();
        let split = time_savings_factor(&[phase(tokens * frac), phase(tokens * (1.0 - frac))], &base).unwrap();
        prop_assert!((whole - split).abs() < 1e-9 * whole);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fpi_integer_multiple_preserves_logits(
        layers in 1usize..3,
        heads in 1usize..3,
        mha in any::<bool>(),
        bias in any::<bool>(),
        factor in 2usize..4,
        inter_mult in 1usize..4,
        seed in 0u64..1000,
    ) {
        let kv = if mha { heads } else { 1 };
        let src_cfg = ModelConfig {
            n_layers: layers,
            hidden_dim: heads * 4,
            n_heads: heads,
            head_dim: 4,
            kv_groups: kv,
            intermediate_dim: 8,
            vocab_size: 16,
            qkv_bias: bias,
            context_length: 8,
        };
        let target = ModelConfig {
            hidden_dim: heads * 4 * factor,
            n_heads: heads * factor,
            kv_groups: if mha { heads * factor } else { 1 },
            intermediate_dim: 8 * inter_mult + 3,
            ..src_cfg.clone()
        };
        let src: Checkpoint<f32> = random_init_with(&src_cfg, None, seed, 0.3).unwrap();
        let dst = fpi_expand(&src, &target).unwrap();
        let rep = verify_preservation(&src, &dst, 4, seed, 1e-5).unwrap();
        prop_assert!(rep.pass, "max diff {}", rep.max_abs_logit_diff);
    }
}
