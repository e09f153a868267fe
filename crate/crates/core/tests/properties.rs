use std::f64::consts::PI;

use ndarray::Array2;
use proptest::prelude::*;

use latse::config::ExperimentConfig;
use latse::generator::{ssim, SsimConfig};
use latse::margin::{
    check_principles, cosine_probability, dloss, margin_probability, target_logit, AngleBatch,
    MarginSpec,
};
use latse::net::EmbeddingBatch;
use latse::trainer::batch_indices;

fn batch() -> impl Strategy<Value = AngleBatch> {
    (1usize..6, 2usize..9).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(0.0..=PI, n * k),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(a, t)| AngleBatch::new(Array2::from_shape_vec((n, k), a).unwrap(), t).unwrap())
    })
}

fn spec() -> impl Strategy<Value = MarginSpec> {
    prop_oneof![
        (1.0..30.0).prop_map(MarginSpec::softmax),
        (1.0f64..1.5, 0.0f64..0.5, 0.0f64..0.4, 1.0f64..30.0)
            .prop_map(|(m1, m2, m3, s)| MarginSpec::combined(m1, m2, m3, s)),
        (0.1f64..1.5, -0.5f64..1.0, 1.0f64..30.0).prop_map(|(a, b, s)| MarginSpec::linear(a, b, s)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn probability_rows_sum_to_one(spec in spec(), b in batch()) {
        let dist = margin_probability(&spec, &b);
        for row in dist.probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let plain = cosine_probability(spec.s, &b.angles().mapv(f64::cos));
        for row in plain.probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_logit_is_affine_and_decreasing(a in 0.01f64..2.0, b in -1.0f64..1.0, t in 0.0..PI) {
        let spec = MarginSpec::linear(a, b, 8.0);
        let f = target_logit(&spec, t).unwrap();
        prop_assert!((f - (b - a * t)).abs() < 1e-15);
        let later = target_logit(&spec, (t + 1e-3).min(PI)).unwrap();
        prop_assert!(later <= f);
    }

    #[test]
    fn penalty_lowers_target_probability(b in batch(), a in 0.3f64..1.2, s in 1.0f64..30.0) {
        // b = a with a <= 1 keeps the line under the cosine on [0, pi].
        let spec = MarginSpec::linear(a, a.min(0.9), s);
        prop_assume!(check_principles(&spec, 0.0, PI, 1e-2).unwrap().p1_ok);
        let margin = margin_probability(&spec, &b);
        let plain = margin_probability(&MarginSpec::softmax(s), &b);
        for (i, &t) in b.targets().iter().enumerate() {
            prop_assert!(margin.probs[[i, t]] <= plain.probs[[i, t]] + 1e-15);
        }
    }

    #[test]
    fn dloss_is_nonnegative_and_finite(spec in spec(), b in batch()) {
        let d = dloss(&spec, &b);
        prop_assert!(d.loss >= 0.0 && d.loss.is_finite());
        prop_assert!(d.per_sample.iter().all(|l| *l >= 0.0));
        prop_assert!(d.grad_theta.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn normalized_embeddings_have_unit_length(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6)
    ) {
        let n = rows.len();
        let raw = Array2::from_shape_vec((n, 4), rows.concat()).unwrap();
        prop_assume!(raw.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let e = EmbeddingBatch::normalize(&raw).unwrap();
        for r in e.vectors.rows() {
            prop_assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(
        px in prop::collection::vec(0.0f64..1.0, 144),
        qx in prop::collection::vec(0.0f64..1.0, 144),
    ) {
        let a = Array2::from_shape_vec((12, 12), px).unwrap();
        let b = Array2::from_shape_vec((12, 12), qx).unwrap();
        let cfg = SsimConfig::default();
        prop_assert!((ssim(a.view(), a.view(), &cfg).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(a.view(), b.view(), &cfg).unwrap();
        let ba = ssim(b.view(), a.view(), &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn each_epoch_visits_every_sample_once(seed in any::<u64>(), n in 1usize..50, batch in 1usize..12) {
        let batch = batch.min(n);
        let per_epoch = n / batch;
        prop_assume!(per_epoch > 0);
        let mut seen = vec![0usize; n];
        for it in 0..per_epoch {
            for i in batch_indices(seed, n, batch, it) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c <= 1));
        prop_assert_eq!(seen.iter().sum::<usize>(), per_epoch * batch);
    }

    #[test]
    fn overrides_change_the_hash(a in 0.1f64..1.5) {
        let base = ExperimentConfig::default();
        let mut cfg = base.clone();
        cfg.apply_override(&format!("loss.a={a}")).unwrap();
        prop_assert_eq!(cfg.loss.a, a);
        prop_assert_eq!(cfg.hash() == base.hash(), a == base.loss.a);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn out_dir_is_not_hashed() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.out_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
}
