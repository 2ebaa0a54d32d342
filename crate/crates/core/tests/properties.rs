use longalign::eval::{auc_at_horizon, c_index, EvalRecord};
use longalign::grid::{
    affine_to_field, compose_fields, resize_field, warp_bilinear, AffineTransform2D, DeformationField2D, Image2D,
};
use longalign::harness::labels::{split_cohort, split_sizes};
use longalign::metrics::{jacobian_map, jacobian_std, jd_penalty, ncc, njd_percent, smoothness_energy};
use longalign::pipelines::StrategyKind;
use longalign::risk::{censor_mask, cumulative_probability, masked_bce, HazardHead, RiskOutput, SurvivalLabel, T_MAX};
use proptest::collection::vec;
use proptest::prelude::*;

fn image(max: usize) -> impl Strategy<Value = Image2D> {
    (2..max, 2..max).prop_flat_map(|(h, w)| vec(0.0..1.0f64, h * w).prop_map(move |d| Image2D::new(h, w, d).unwrap()))
}

fn image_pair(max: usize) -> impl Strategy<Value = (Image2D, Image2D)> {
    (2..max, 2..max).prop_flat_map(|(h, w)| {
        (vec(0.0..1.0f64, h * w), vec(0.0..1.0f64, h * w))
            .prop_map(move |(a, b)| (Image2D::new(h, w, a).unwrap(), Image2D::new(h, w, b).unwrap()))
    })
}

fn field_like(h: usize, w: usize, amp: f64) -> impl Strategy<Value = DeformationField2D> {
    (vec(-amp..amp, h * w), vec(-amp..amp, h * w)).prop_map(move |(u, v)| DeformationField2D::new(h, w, u, v).unwrap())
}

fn image_and_field(max: usize) -> impl Strategy<Value = (Image2D, DeformationField2D)> {
    image(max).prop_flat_map(|img| {
        let (h, w) = img.shape();
        (Just(img), field_like(h, w, 3.0))
    })
}

fn non_constant(img: &Image2D) -> bool {
    img.data().iter().any(|&v| v != img.data()[0])
}

proptest! {
    #[test]
    fn zero_field_warp_is_exact(img in image(12)) {
        let (h, w) = img.shape();
        prop_assert_eq!(warp_bilinear(&img, &DeformationField2D::zeros(h, w)).unwrap(), img);
    }

    #[test]
    fn warp_is_linear_in_the_image((a, f) in image_and_field(10), seed in 0u64..1000, s in -2.0..2.0f64, t in -2.0..2.0f64) {
        let (h, w) = a.shape();
        let b = Image2D::from_fn(h, w, |x, y| ((x * 7 + y * 13) as f64 + seed as f64).sin()).unwrap();
        let mix = Image2D::new(h, w, a.data().iter().zip(b.data()).map(|(p, q)| s * p + t * q).collect()).unwrap();
        let lhs = warp_bilinear(&mix, &f).unwrap();
        let (wa, wb) = (warp_bilinear(&a, &f).unwrap(), warp_bilinear(&b, &f).unwrap());
        for i in 0..h * w {
            let rhs = s * wa.data()[i] + t * wb.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn translations_compose_by_addition(h in 2usize..10, w in 2usize..10, a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, d in -2.0..2.0f64) {
        let out = compose_fields(&DeformationField2D::uniform(h, w, a, b), &DeformationField2D::uniform(h, w, c, d)).unwrap();
        for i in 0..h * w {
            prop_assert!((out.u()[i] - (a + c)).abs() < 1e-12 && (out.v()[i] - (b + d)).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_round_trip_keeps_smooth_fields(h in 8usize..20, w in 8usize..20, ax in 0.5..3.0f64, fy in 0.1..0.5f64) {
        let f = DeformationField2D::from_fn(h, w, |x, y| {
            (ax * (fy * x as f64 / w as f64 * 6.0).sin(), ax * (fy * y as f64 / h as f64 * 6.0).cos())
        }).unwrap();
        let back = resize_field(&resize_field(&f, 2 * h, 2 * w).unwrap(), h, w).unwrap();
        let mae = f.u().iter().zip(back.u()).chain(f.v().iter().zip(back.v())).map(|(p, q)| (p - q).abs()).sum::<f64>()
            / (2 * h * w) as f64;
        prop_assert!(mae < 0.1, "mean abs error {mae}");
    }

    #[test]
    fn ncc_is_symmetric(a in image(9), seed in 0u64..100) {
        let (h, w) = a.shape();
        let b = Image2D::from_fn(h, w, |x, y| ((x * 3 + y * 5 + seed as usize) as f64).cos()).unwrap();
        prop_assume!(non_constant(&a) && non_constant(&b));
        prop_assert!((ncc(&a, &b).unwrap() - ncc(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn ncc_ignores_positive_gain_and_offset((a, b) in image_pair(9), gain in 0.01..50.0f64, offset in -10.0..10.0f64) {
        prop_assume!(non_constant(&a) && non_constant(&b));
        let scaled = b.map(|v| gain * v + offset).unwrap();
        prop_assert!((ncc(&a, &scaled).unwrap() - ncc(&a, &b).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn translation_jacobian_is_one(h in 2usize..12, w in 2usize..12, du in -5.0..5.0f64, dv in -5.0..5.0f64) {
        prop_assert!(jacobian_map(&DeformationField2D::uniform(h, w, du, dv)).det.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn fold_free_fields_have_no_penalty(f in (2usize..10, 2usize..10).prop_flat_map(|(h, w)| field_like(h, w, 1.0))) {
        let j = jacobian_map(&f);
        let njd = njd_percent(&j);
        prop_assert!((0.0..=100.0).contains(&njd));
        if njd == 0.0 {
            prop_assert_eq!(jd_penalty(&j), 0.0);
        }
    }

    #[test]
    fn smoothness_vanishes_only_for_constant_fields(f in (2usize..10, 2usize..10).prop_flat_map(|(h, w)| field_like(h, w, 2.0))) {
        let e = smoothness_energy(&f);
        prop_assert!(e >= 0.0);
        let constant = f.u().iter().all(|&u| u == f.u()[0]) && f.v().iter().all(|&v| v == f.v()[0]);
        prop_assert_eq!(e == 0.0, constant);
    }

    #[test]
    fn affine_fields_have_uniform_determinant(p in vec(-0.2..0.2f64, 6), h in 2usize..16, w in 2usize..16) {
        let a = AffineTransform2D::from_params(&[1.0 + p[0], p[1], p[2], 1.0 + p[3], p[4], p[5]]);
        let j = jacobian_map(&affine_to_field(&a, h, w).unwrap());
        prop_assert!(jacobian_std(&j) < 1e-9);
    }

    #[test]
    fn cumulative_probability_is_monotone(seed in 0u64..10_000, input in 1usize..10) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let head = HazardHead::random(input, T_MAX, &mut r);
        let f: Vec<f64> = (0..input).map(|i| ((seed as f64 + i as f64) * 0.37).sin() * 3.0).collect();
        let out = cumulative_probability(&head, &f).unwrap();
        prop_assert!(out.prob.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn censor_mask_invariants(followup in 0u32..9, ttc in proptest::option::of(0u32..9)) {
        let label = SurvivalLabel::new(followup, ttc, T_MAX);
        for t in 0..T_MAX {
            prop_assert!(label.y[t] == 0.0 || label.delta[t] == 1.0);
        }
        if ttc.is_none() {
            prop_assert!(label.delta.windows(2).all(|d| d[1] <= d[0]));
        }
        prop_assert_eq!(censor_mask(followup, ttc, T_MAX), label.delta);
    }

    #[test]
    fn masked_bce_is_nonnegative_and_decreasing(probs in vec(0.001..0.999f64, T_MAX), followup in 0u32..7, ttc in proptest::option::of(0u32..7)) {
        let mut sorted = probs.clone();
        sorted.sort_by(f64::total_cmp);
        let label = SurvivalLabel::new(followup, ttc, T_MAX);
        let pred = RiskOutput { cum_score: vec![0.0; T_MAX], prob: sorted.clone() };
        let loss = masked_bce(&pred, &label).unwrap();
        prop_assert!(loss >= 0.0);
        if let Some(t) = (0..T_MAX).find(|&t| label.y[t] == 1.0 && label.delta[t] == 1.0) {
            let mut higher = sorted.clone();
            higher[t] = (higher[t] + 1.0) / 2.0;
            let pred2 = RiskOutput { cum_score: vec![0.0; T_MAX], prob: higher };
            prop_assert!(masked_bce(&pred2, &label).unwrap() < loss);
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(rows in vec((vec(0.01..0.99f64, T_MAX), 0u32..7, proptest::option::of(0u32..7)), 2..30), t in 1usize..=T_MAX) {
        let rec = |p: Vec<f64>, f: u32, c: Option<u32>| EvalRecord {
            risk: RiskOutput { cum_score: vec![0.0; T_MAX], prob: p },
            label: SurvivalLabel::new(f, c, T_MAX),
            density: None,
            strategy: StrategyKind::NoAlign,
        };
        let base: Vec<EvalRecord> = rows.iter().map(|(p, f, c)| rec(p.clone(), *f, *c)).collect();
        let warped: Vec<EvalRecord> = rows.iter().map(|(p, f, c)| rec(p.iter().map(|v| v.powf(0.3) * 0.5).collect(), *f, *c)).collect();
        match (auc_at_horizon(&base, t), auc_at_horizon(&warped, t)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "definedness changed: {:?}", other),
        }
        if let Ok(c) = c_index(&base) {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn splits_partition_patients(n in 10usize..200, seed in any::<u64>(), ratios in (1u32..6, 1u32..6, 1u32..6)) {
        let ratios = [ratios.0, ratios.1, ratios.2];
        let ids: Vec<u32> = (0..n as u32).rev().collect();
        let s = split_cohort(&ids, ratios, seed).unwrap();
        prop_assert_eq!([s.train.len(), s.val.len(), s.test.len()], split_sizes(n, ratios).unwrap());
        let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
    }
}

#[test]
fn random_scores_give_chance_c_index() {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let recs: Vec<EvalRecord> = (0..500)
        .map(|_| {
            let ttc = r.gen_bool(0.3).then(|| r.gen_range(0..6));
            let mut acc = 0.0;
            let prob = (0..T_MAX)
                .map(|_| {
                    acc += r.gen_range(0.0..0.2);
                    acc
                })
                .collect();
            EvalRecord {
                risk: RiskOutput { cum_score: vec![0.0; T_MAX], prob },
                label: SurvivalLabel::new(r.gen_range(0..7), ttc, T_MAX),
                density: None,
                strategy: StrategyKind::NoAlign,
            }
        })
        .collect();
    let c = c_index(&recs).unwrap();
    assert!((c - 0.5).abs() <= 0.05, "c-index {c}");
}
