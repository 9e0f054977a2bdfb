// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property tests for the numeric, data and metric invariants.

use ndarray::{Array1, Array2};
use nspu::anonymizer::{anonymize, anonymize_text, leaked_entities};
use nspu::audit::{audit_projected, Grouping};
use nspu::corpus::{default_forget_slots, generate_corpus, make_split, EntityCategory, OVERLAP_VARIANTS};
use nspu::drift::{centroid_distance, mmd2_biased, Bandwidth};
use nspu::flops::{method_flops, nspu_flops, Arithmetic, FlopsSpec, Method};
use nspu::forget::{apply_filter, build_from_matrix, decompose, make_filter, ForgetSubspace};
use nspu::lm::ActivationMatrix;
use nspu::metrics::{cnll, harmonic, hps, perplexity, report, rouge_l, sqs, MetricInputs};
use nspu::numeric::{orthonormality_error, pca_adaptive, rbf_kernel, stats, svd};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn subspace(d: usize, k: usize, seed: u64) -> ForgetSubspace {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = Array2::from_shape_fn((k + 1, d), |_| rng.random_range(-1.0..1.0));
    let sub = build_from_matrix(&h, 0.999_999).unwrap();
    assert!(sub.k() >= 1);
    sub
}

// ----------------------------------------------------------------------------
// Numeric core
// ----------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_factors_orthonormal_and_reconstruct(m in matrix(1..12, 1..12)) {
        let s = svd(&m).unwrap();
        prop_assert!(orthonormality_error(&s.left) < 1e-8);
        prop_assert!(orthonormality_error(&s.right_t.t().to_owned()) < 1e-8);
        let rec = (&s.left * &s.singulars).dot(&s.right_t);
        let err = (&rec - &m).mapv(|v| v * v).sum().sqrt();
        prop_assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn pca_rank_monotone_in_tau(m in matrix(3..20, 2..8), t1 in 0.05f64..0.99, t2 in 0.05f64..0.99) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if let (Ok(a), Ok(b)) = (pca_adaptive(&m, lo), pca_adaptive(&m, hi)) {
            prop_assert!(a.k <= b.k);
        }
    }

    #[test]
    fn rbf_is_symmetric(x in prop::collection::vec(-5.0f64..5.0, 4), y in prop::collection::vec(-5.0f64..5.0, 4), s in 0.1f64..10.0) {
        let (x, y) = (Array1::from(x), Array1::from(y));
        prop_assert_eq!(rbf_kernel(x.view(), y.view(), s).unwrap(), rbf_kernel(y.view(), x.view(), s).unwrap());
    }

    #[test]
    fn r2_at_most_one(truth in matrix(3..10, 2..5), noise in -1.0f64..1.0) {
        let pred = truth.mapv(|v| v + noise * v.sin());
        if let Ok(st) = stats(&pred, &truth) {
            prop_assert!(st.r2 <= 1.0 + 1e-12);
        }
        if let Ok(st) = stats(&truth, &truth) {
            prop_assert_eq!(st.r2, 1.0);
        }
    }
}

// ----------------------------------------------------------------------------
// Corpus and anonymizer
// ----------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn split_is_disjoint_for_every_variant(seed in 0u64..1000, ppd in 2usize..5, v in 0usize..4, split_seed in 0u64..1000) {
        let corpus = generate_corpus(seed, ppd);
        let f = OVERLAP_VARIANTS[v];
        let slots = default_forget_slots(&corpus, f);
        let s = make_split(&corpus, f, slots, split_seed).unwrap();
        prop_assert!(s.forget.is_disjoint(&s.retain));
        prop_assert!(s.forget.is_disjoint(&s.non_member));
        prop_assert!(s.retain.is_disjoint(&s.non_member));
        prop_assert_eq!(s.forget.len() + s.retain.len() + s.non_member.len(), corpus.len());
        prop_assert_eq!(generate_corpus(seed, ppd), corpus.clone());
        for r in &corpus {
            prop_assert!(r.entities.iter().any(|e| e.category == EntityCategory::Person));
        }
    }

    #[test]
    fn anonymization_is_idempotent_and_leak_free(seed in 0u64..1000) {
        for r in generate_corpus(seed, 2) {
            let a = anonymize(&r);
            prop_assert_eq!(&anonymize(&r), &a);
            prop_assert_eq!(anonymize_text(&a.anon_question), a.anon_question.clone());
            prop_assert_eq!(anonymize_text(&a.anon_answer), a.anon_answer.clone());
            let (text, _) = a.split();
            prop_assert!(leaked_entities(&text.full_text()).is_empty());
        }
    }
}

// ----------------------------------------------------------------------------
// Filter
// ----------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_is_linear(d in 2usize..16, k in 1usize..4, seed in 0u64..10_000, alpha in 0.0f64..1.0,
                        a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let sub = subspace(d, k.min(d - 1), seed);
        let f = make_filter(&sub, alpha).unwrap();
        let x = Array1::from_shape_fn(d, |i| (i as f64 * 0.7 + seed as f64).sin());
        let y = Array1::from_shape_fn(d, |i| (i as f64 * 1.3 - seed as f64).cos());
        let lhs = apply_filter(&f, (&x * a + &y * b).view()).unwrap();
        let rhs = apply_filter(&f, x.view()).unwrap() * a + apply_filter(&f, y.view()).unwrap() * b;
        prop_assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn full_strength_filter_is_a_projection(d in 2usize..16, seed in 0u64..10_000) {
        let sub = subspace(d, 1.max(d / 3), seed);
        let f = make_filter(&sub, 1.0).unwrap();
        let v = Array1::from_shape_fn(d, |i| (i as f64 + seed as f64).tan().clamp(-5.0, 5.0));
        let once = apply_filter(&f, v.view()).unwrap();
        let twice = apply_filter(&f, once.view()).unwrap();
        prop_assert!((&once - &twice).iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn filter_spectrum(d in 3usize..16, seed in 0u64..10_000, alpha in 0.0f64..1.0) {
        let sub = subspace(d, 2, seed);
        let f = make_filter(&sub, alpha).unwrap();
        for j in 0..sub.k() {
            let u = sub.basis.column(j);
            let out = apply_filter(&f, u).unwrap();
            prop_assert!((&out - &(&u * (1.0 - alpha))).iter().all(|x| x.abs() < 1e-10));
        }
        let v = Array1::from_shape_fn(d, |i| ((i * 7 + seed as usize) % 11) as f64 - 5.0);
        let (_, safe) = decompose(&sub, v.view()).unwrap();
        let out = apply_filter(&f, safe.view()).unwrap();
        prop_assert!((&out - &safe).iter().all(|x| x.abs() < 1e-10));
        // raw coordinates: no centering or rescaling
        let zero = apply_filter(&f, Array1::zeros(d).view()).unwrap();
        prop_assert!(zero.iter().all(|&x| x == 0.0));
    }
}

// ----------------------------------------------------------------------------
// Metrics
// ----------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn report_is_pure(v in prop::collection::vec(0.05f64..5.0, 16), m in prop::collection::vec(0.0f64..5.0, 3)) {
        let inputs = MetricInputs {
            ppl_ori_forget: v[0], ppl_unl_forget: v[1], ppl_ori_retain: v[2], ppl_unl_retain: v[3],
            tr_orig_forget: v[4], tr_unl_forget: v[5], tr_orig_retain: v[6], tr_unl_retain: v[7],
            rouge_orig_forget: v[8].min(1.0), rouge_unl_forget: v[9].min(1.0),
            rouge_orig_retain: v[10].min(1.0), rouge_unl_retain: v[11].min(1.0),
            cnll_target_forget: v[12], cnll_unl_forget: v[13], cnll_target_retain: v[14], cnll_unl_retain: v[15],
            clm_loss_retain: m[0], clm_loss_forget: m[1], clm_loss_nonmember: m[2],
            epsilon: 1e-5,
        };
        if let Ok(a) = report(&inputs) {
            let b = report(&inputs).unwrap();
            prop_assert_eq!(a.aggregate.to_bits(), b.aggregate.to_bits());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn hps_monotone_in_gain(c in 0.0f64..2.0, g1 in 0.0f64..2.0, g2 in 0.0f64..2.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        if hi * c < 1.0 {
            prop_assert!(harmonic(lo, c) <= harmonic(hi, c));
        }
        let (g, _, h) = hps(1.0, 1.0 + lo, 1.0, 1.0, 0.0).unwrap();
        prop_assert!(h >= 0.0 && g >= 0.0);
    }

    #[test]
    fn sqs_in_unit_interval(r in -10.0f64..10.0, f in -10.0f64..10.0, n in -10.0f64..10.0) {
        if let Ok(s) = sqs(r, f, n) {
            prop_assert!((0.0..=1.0).contains(&s));
            if (r - f).abs() == (n - f).abs() {
                prop_assert_eq!(s, sqs(n, f, r).unwrap());
            }
        }
    }

    #[test]
    fn rouge_l_symmetric(x in prop::collection::vec(0u8..6, 0..12), y in prop::collection::vec(0u8..6, 0..12)) {
        prop_assert_eq!(rouge_l(&x, &y), rouge_l(&y, &x));
    }

    #[test]
    fn perplexity_is_exp_cnll_for_equal_lengths(rows in prop::collection::vec(prop::collection::vec(-8.0f64..0.0, 5), 1..8)) {
        let p = perplexity(&rows).unwrap();
        let c = cnll(&rows).unwrap();
        prop_assert!((p - c.exp()).abs() <= 1e-12 * p.max(1.0));
    }
}

// ----------------------------------------------------------------------------
// Drift
// ----------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_zero_on_self_and_symmetric(ab in (2usize..10).prop_flat_map(|n| (matrix(n..n + 1, 3..4), matrix(n..n + 1, 3..4)))) {
        let (a, b) = ab;
        prop_assert!(mmd2_biased(&a, &a, Bandwidth::MedianHeuristic).unwrap().abs() < 1e-10);
        let ab = mmd2_biased(&a, &b, Bandwidth::Fixed(2.0)).unwrap();
        let ba = mmd2_biased(&b, &a, Bandwidth::Fixed(2.0)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn centroid_triangle_inequality(a in matrix(1..6, 4..5), b in matrix(1..6, 4..5), c in matrix(1..6, 4..5)) {
        let ab = centroid_distance(&a, &b).unwrap();
        let bc = centroid_distance(&b, &c).unwrap();
        let ac = centroid_distance(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }
}

// ----------------------------------------------------------------------------
// FLOPs and audit
// ----------------------------------------------------------------------------

proptest! {
    #[test]
    fn flops_scale_with_params(factor in 0.1f64..10.0) {
        let base = FlopsSpec::llama_7b();
        let scaled = base.scaled_params(factor);
        for m in [Method::Retrain, Method::GA, Method::GD, Method::KLM, Method::DPO, Method::NPO] {
            let a = method_flops(m, &base, Arithmetic::Exact).unwrap();
            let b = method_flops(m, &scaled, Arithmetic::Exact).unwrap();
            prop_assert!((b / a - factor).abs() < 1e-9 * factor);
        }
        let a = nspu_flops(&base, Arithmetic::Exact).unwrap();
        let b = nspu_flops(&scaled, Arithmetic::Exact).unwrap();
        prop_assert_eq!(a.stage1, b.stage1);
        prop_assert!((b.stage2 / a.stage2 - factor).abs() < 1e-9 * factor);
        prop_assert_eq!(b.total, b.stage1 + b.stage2);
        let ga = method_flops(Method::GA, &scaled, Arithmetic::Exact).unwrap();
        prop_assert_eq!(method_flops(Method::KLM, &scaled, Arithmetic::Exact).unwrap(), ga);
        let gd = method_flops(Method::GD, &scaled, Arithmetic::Exact).unwrap();
        prop_assert_eq!(method_flops(Method::DPO, &scaled, Arithmetic::Exact).unwrap(), gd);
        prop_assert_eq!(method_flops(Method::NPO, &scaled, Arithmetic::Exact).unwrap(), gd);
    }

    #[test]
    fn audit_rows_partition_samples(seed in 0u64..500, drop in 0usize..5) {
        let corpus = generate_corpus(seed, 2);
        let mut ids: Vec<String> = corpus.iter().map(|r| r.id.clone()).collect();
        for i in 0..drop {
            ids[i] = format!("unknown-{i}");
        }
        let n = ids.len();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| 1.0 + ((i + j) % 4) as f64);
        let m = ActivationMatrix::new(0, x, ids).unwrap();
        let by_domain = audit_projected(&m, &m, &corpus, Grouping::ByDomain, None).unwrap();
        prop_assert_eq!(by_domain.total(), n - drop);
        prop_assert_eq!(by_domain.skipped, drop);
        let by_entity = audit_projected(&m, &m, &corpus, Grouping::ByEntitySingle, None).unwrap();
        prop_assert_eq!(by_entity.total() + by_entity.skipped, n);
        prop_assert!(by_entity.total() <= by_domain.total());
    }
}
