use minent::data::{parse_idx, serialize_idx, split_indices, IdxTensor};
use minent::loss::{
    self, cross_entropy, entropy, kl_divergence, loss_backward, loss_value_and_grad, min_ent_loss,
    mix_ent_loss, softmax, swapped_cross_entropy, BaseMode, LossKind, LossParams, ProbVector,
    Regularizer, RegularizerMode, SmoothedTarget, WeightMode,
};
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Distribution strictly inside the simplex.
fn interior(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, k).prop_map(|z| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    })
}

fn pair(max_k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_k).prop_flat_map(|k| (interior(k), interior(k)))
}

fn pv(v: &[f64]) -> ProbVector {
    ProbVector::new(v.to_vec()).unwrap()
}

fn learnable(t: [f64; 3]) -> LossParams {
    LossParams {
        theta_beta1: t[0],
        theta_beta2: t[1],
        theta_base: t[2],
        beta1_mode: WeightMode::Learnable,
        beta2_mode: RegularizerMode::Learnable,
        base_mode: BaseMode::Learnable,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ce_decomposes_into_kl_plus_entropy((p, q) in pair(30)) {
        let (p, q) = (pv(&p), pv(&q));
        let ce = cross_entropy(&p, &q, 1.0).unwrap();
        let rhs = kl_divergence(&p, &q, 1.0).unwrap() + entropy(&p, 1.0).unwrap();
        prop_assert!(rel_close(ce, rhs, 1e-9), "{ce} vs {rhs}");
    }

    #[test]
    fn swapped_ce_decomposes(q in (2usize..30).prop_flat_map(interior), class in 0usize..30,
                             eps in prop::sample::select(vec![0.001, 0.01, 0.1])) {
        let k = q.len();
        let t = SmoothedTarget::new(class % k, eps, k).unwrap();
        let q = pv(&q);
        let lhs = swapped_cross_entropy(&t, &q, 1.0).unwrap();
        let rhs = kl_divergence(&q, &t.materialize(), 1.0).unwrap() + entropy(&q, 1.0).unwrap();
        prop_assert!(rel_close(lhs, rhs, 1e-9), "{lhs} vs {rhs}");
    }

    #[test]
    fn gibbs_and_kl_nonnegative((p, q) in pair(30)) {
        let (p, q) = (pv(&p), pv(&q));
        prop_assert!(cross_entropy(&p, &q, 1.0).unwrap() >= entropy(&p, 1.0).unwrap() - 1e-9);
        prop_assert!(kl_divergence(&p, &q, 1.0).unwrap() >= -1e-9);
        prop_assert!(kl_divergence(&q, &p, 1.0).unwrap() >= -1e-9);
        prop_assert!(kl_divergence(&p, &p, 1.0).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn entropy_is_bounded(p in (2usize..40).prop_flat_map(interior)) {
        let h = entropy(&pv(&p), 1.0).unwrap();
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn base_scaling((p, q) in pair(12), s in 0.05f64..20.0, logits in prop::collection::vec(-5.0f64..5.0, 2..12),
                    class in 0usize..12, eps in 0.001f64..0.3) {
        let (p, q) = (pv(&p), pv(&q));
        prop_assert!(rel_close(cross_entropy(&p, &q, s).unwrap(), cross_entropy(&p, &q, 1.0).unwrap() / s, 1e-12));
        prop_assert!(rel_close(entropy(&p, s).unwrap(), entropy(&p, 1.0).unwrap() / s, 1e-12));
        prop_assert!(rel_close(kl_divergence(&p, &q, s).unwrap(), kl_divergence(&p, &q, 1.0).unwrap() / s, 1e-12));

        let k = logits.len();
        let t = SmoothedTarget::new(class % k, eps, k).unwrap();
        let at = |ln_base: f64| {
            LossParams::with_initial_values(WeightMode::Fixed(1.0), 1.0, RegularizerMode::Fixed(0.7), 0.7,
                                            BaseMode::Fixed(ln_base), ln_base).unwrap()
        };
        for kind in [LossKind::Mix, LossKind::Min] {
            let scaled = loss::loss_value(kind, &logits, &t, &at(s)).unwrap().total;
            let unit = loss::loss_value(kind, &logits, &t, &at(1.0)).unwrap().total;
            prop_assert!(rel_close(scaled, unit / s, 1e-12), "{kind}: {scaled} vs {}", unit / s);
        }
    }

    #[test]
    fn ce_recovery_is_exact(logits in prop::collection::vec(-8.0f64..8.0, 2..30), class in 0usize..30,
                            eps in 0.0f64..0.3, theta in prop::array::uniform3(-3.0f64..3.0)) {
        let k = logits.len();
        let t = SmoothedTarget::new(class % k, eps, k).unwrap();
        let (ce, ce_grad) = loss_value_and_grad(LossKind::Ce, &logits, &t, &LossParams::cross_entropy()).unwrap();
        let disabled = LossParams {
            beta2_mode: RegularizerMode::Disabled,
            base_mode: BaseMode::Fixed(1.0),
            beta1_mode: WeightMode::Fixed(1.0),
            ..learnable(theta)
        };
        for which in [Regularizer::Min, Regularizer::Mix] {
            let v = match which {
                Regularizer::Min => min_ent_loss(&logits, &t, &disabled),
                Regularizer::Mix => mix_ent_loss(&logits, &t, &disabled),
            };
            // MIX evaluates log p, which needs smoothing.
            if which == Regularizer::Mix && eps == 0.0 {
                continue;
            }
            let v = v.unwrap();
            prop_assert!(rel_close(v.total, ce.total, 1e-15));
            let g = loss_backward(&logits, &t, &disabled, which).unwrap();
            for (a, b) in g.logits.iter().zip(&ce_grad.logits) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(b.abs()).max(1e-300));
            }
        }
    }

    #[test]
    fn totals_are_weighted_components(logits in prop::collection::vec(-6.0f64..6.0, 2..20), class in 0usize..20,
                                      eps in 0.001f64..0.3, theta in prop::array::uniform3(-3.0f64..3.0)) {
        let k = logits.len();
        let t = SmoothedTarget::new(class % k, eps, k).unwrap();
        let p = learnable(theta);
        let mix = mix_ent_loss(&logits, &t, &p).unwrap();
        prop_assert_eq!(mix.total, p.beta1() * mix.components.ce1 + p.beta2() * mix.components.ce2.unwrap());
        let min = min_ent_loss(&logits, &t, &p).unwrap();
        prop_assert_eq!(min.total, p.beta1() * min.components.ce1 + p.beta2() * min.components.entropy_hat);
    }

    #[test]
    fn softmax_is_a_distribution_preserving_argmax(logits in prop::collection::vec(-1e4f64..1e4, 2..40)) {
        let p = softmax(&logits).unwrap();
        let sum: f64 = p.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(p.argmax(), loss::argmax(&logits));
    }

    #[test]
    fn idx_round_trip(dims in prop::collection::vec(1usize..6, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let t = IdxTensor::new(dims, data).unwrap();
        let bytes = serialize_idx(&t);
        let back = parse_idx(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(serialize_idx(&back), bytes);
    }

    #[test]
    fn split_is_a_partition(n in 2usize..500, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let (train, val) = split_indices(n, frac, seed);
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(!val.is_empty() && !train.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, frac, seed), (train, val));
    }
}
