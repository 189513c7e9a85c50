use faceswap::calibration::{compute_eer, IfsrMargins};
use faceswap::eval::{frechet_distance, gaussian_stats};
use faceswap::generator::layers::{adain, affa_blend};
use faceswap::objectives::{hinge_d_loss, identity_loss, reconstruction_loss};
use faceswap::pipeline::{estimate_similarity_transform, LandmarkSet, Similarity};
use faceswap::{Tensor, Var};
use proptest::collection::vec;
use proptest::prelude::*;

fn var(shape: &[usize], data: &[f64]) -> Var<f64> {
    Var::constant(Tensor::from_f64(shape, data))
}

proptest! {
    #[test]
    fn blend_stays_between_its_inputs(
        hz in vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..=1.0f64), 1..64),
    ) {
        let n = hz.len();
        let h: Vec<f64> = hz.iter().map(|t| t.0).collect();
        let z: Vec<f64> = hz.iter().map(|t| t.1).collect();
        let m: Vec<f64> = hz.iter().map(|t| t.2).collect();
        let out = affa_blend(&var(&[1, n, 1, 1], &h), &var(&[1, n, 1, 1], &z), &var(&[1, n, 1, 1], &m));
        for (i, o) in out.value().data().iter().enumerate() {
            prop_assert!(*o >= h[i].min(z[i]) - 1e-12 && *o <= h[i].max(z[i]) + 1e-12);
        }
    }

    #[test]
    fn adain_sets_channel_mean_and_spread(
        x in vec(-3.0..3.0f64, 16),
        gamma in 0.1..3.0f64,
        beta in -2.0..2.0f64,
    ) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
        let out = adain(&var(&[1, 1, 4, 4], &x), &var(&[1, 1], &[gamma]), &var(&[1, 1], &[beta]));
        let o = out.value().data();
        let mean = o.iter().sum::<f64>() / 16.0;
        let var_x = {
            let mx = x.iter().sum::<f64>() / 16.0;
            x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 16.0
        };
        let var_o = o.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assert!((mean - beta).abs() < 1e-9);
        // Biased variance with the 1e-5 stabilizer under the square root.
        let want = gamma * gamma * var_x / (var_x + 1e-5);
        prop_assert!((var_o - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn identity_loss_is_bounded_and_scale_free(
        pair in vec((-1.0..1.0f64, -1.0..1.0f64), 2..32),
        k in 0.01..100.0f64,
    ) {
        let a: Vec<f64> = pair.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pair.iter().map(|p| p.1).collect();
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let d = a.len();
        let l = identity_loss(&var(&[1, d], &a), &var(&[1, d], &b)).unwrap().item();
        let scaled: Vec<f64> = b.iter().map(|v| v * k).collect();
        let ls = identity_loss(&var(&[1, d], &a), &var(&[1, d], &scaled)).unwrap().item();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        prop_assert!((l - ls).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_ignores_different_pairs(
        x in vec(-1.0..1.0f64, 24),
        y in vec(-1.0..1.0f64, 24),
    ) {
        let t = var(&[2, 3, 2, 2], &x);
        let c = var(&[2, 3, 2, 2], &y);
        let none = reconstruction_loss(&t, &c, &Tensor::from_f64(&[2], &[0.0, 0.0])).unwrap().item();
        let first = reconstruction_loss(&t, &c, &Tensor::from_f64(&[2], &[1.0, 0.0])).unwrap().item();
        let want = x[..12].iter().zip(&y[..12]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0 / 2.0;
        prop_assert_eq!(none, 0.0);
        prop_assert!((first - want).abs() < 1e-12);
    }

    #[test]
    fn critic_hinge_is_nonnegative_and_zero_beyond_the_margin(
        real in vec(-4.0..4.0f64, 1..16),
        fake in vec(-4.0..4.0f64, 1..16),
    ) {
        let l = hinge_d_loss(&var(&[real.len()], &real), &var(&[fake.len()], &fake)).item();
        prop_assert!(l >= 0.0);
        let sure_real: Vec<f64> = real.iter().map(|v| v.abs() + 1.0).collect();
        let sure_fake: Vec<f64> = fake.iter().map(|v| -v.abs() - 1.0).collect();
        let zero = hinge_d_loss(&var(&[real.len()], &sure_real), &var(&[fake.len()], &sure_fake)).item();
        prop_assert_eq!(zero, 0.0);
    }

    #[test]
    fn eer_is_a_rate_and_shifting_impostors_up_never_raises_it(
        g in vec(0.0..2.0f64, 1..40),
        i in vec(0.0..2.0f64, 1..40),
        shift in 0.0..1.0f64,
    ) {
        let e = compute_eer(&g, &i).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let moved: Vec<f64> = i.iter().map(|v| v + shift).collect();
        prop_assert!(compute_eer(&g, &moved).unwrap() <= e + 1e-12);
    }

    #[test]
    fn frechet_distance_is_a_nonnegative_symmetric_divergence(
        a in vec(vec(-2.0..2.0f64, 3), 4..12),
        b in vec(vec(-2.0..2.0f64, 3), 4..12),
    ) {
        let (p, q) = (gaussian_stats(&a).unwrap(), gaussian_stats(&b).unwrap());
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() < 1e-6 * pq.max(1.0));
        prop_assert!(frechet_distance(&p, &p).unwrap() < 1e-6);
    }

    #[test]
    fn margins_survive_a_tsv_round_trip(m in vec(0.0..=2.0f64, 1..16), first in 1usize..4) {
        let table = IfsrMargins::new(
            m.iter().enumerate().map(|(k, v)| (first + k, *v)).collect(),
            7,
            "swap",
            "stub",
        )
        .unwrap();
        prop_assert_eq!(IfsrMargins::parse_tsv(&table.to_tsv()).unwrap(), table);
    }

    #[test]
    fn similarity_fit_recovers_a_known_placement(
        scale in 0.3..3.0f64,
        angle in -3.0..3.0f64,
        tx in -50.0..50.0f64,
        ty in -50.0..50.0f64,
    ) {
        let template = LandmarkSet::new(faceswap::pipeline::ARCFACE_112).unwrap();
        let placement = Similarity::from_parts(scale, angle, tx, ty);
        let detected = template.map(|p| placement.apply(p)).unwrap();
        let fit = estimate_similarity_transform(&detected, &template).unwrap();
        for (d, t) in detected.points().iter().zip(template.points()) {
            let back = fit.apply(*d);
            prop_assert!((back[0] - t[0]).abs() < 1e-8 && (back[1] - t[1]).abs() < 1e-8);
        }
        prop_assert!((fit.scale() * scale - 1.0).abs() < 1e-9);
    }
}
