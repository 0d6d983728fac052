use proptest::prelude::*;

use immunity::attacks::{jpeg_round_trip, Norm, PerturbationBudget};
use immunity::data::RasterImage;
use immunity::eval::{fsim, psnr, psnr_mean, ssim};

fn image(h: usize, w: usize, seed: u64) -> RasterImage {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    RasterImage::from_fn(h, w, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
    .unwrap()
}

fn shifted(a: &RasterImage, by: f64) -> RasterImage {
    RasterImage::from_clamped(a.pixels().mapv(|v| v + by)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(h in 16usize..40, w in 16usize..40, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (image(h, w, s1), image(h, w, s2));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((fsim(&a, &b).unwrap() - fsim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_is_maximal(h in 16usize..40, w in 16usize..40, s in any::<u64>()) {
        let a = image(h, w, s);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((fsim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_uniform_error_grows(e1 in 0.001f64..0.2, e2 in 0.001f64..0.2) {
        prop_assume!((e1 - e2).abs() > 1e-6);
        let base = RasterImage::filled(16, 16, 0.3).unwrap();
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let p_lo = psnr(&base, &shifted(&base, lo)).unwrap();
        let p_hi = psnr(&base, &shifted(&base, hi)).unwrap();
        prop_assert!(p_lo > p_hi);
        prop_assert!((p_lo - (-20.0 * lo.log10())).abs() < 1e-9);
    }

    #[test]
    fn psnr_mean_separates_infinite_entries(
        vals in proptest::collection::vec(prop_oneof![Just(None), Just(Some(f64::INFINITY)), (0.0f64..80.0).prop_map(Some)], 0..12)
    ) {
        let (mean, inf) = psnr_mean(vals.iter().copied());
        let finite: Vec<f64> = vals.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let n_inf = vals.iter().flatten().filter(|v| v.is_infinite()).count();
        prop_assert_eq!(inf, n_inf);
        match mean {
            None => prop_assert!(finite.is_empty() && n_inf == 0),
            Some(m) if m.is_infinite() => prop_assert!(finite.is_empty() && n_inf > 0),
            Some(m) => {
                let expect = finite.iter().sum::<f64>() / finite.len() as f64;
                prop_assert!((m - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_lands_in_the_ball(
        delta in proptest::collection::vec(-1.0f64..1.0, 1..64),
        kappa in 0.0f64..0.5,
        l2 in any::<bool>(),
    ) {
        let b = PerturbationBudget { kappa, norm: if l2 { Norm::L2 } else { Norm::LInf } };
        let mut d = delta.clone();
        b.project(&mut d);
        prop_assert!(b.norm_of(&d) <= kappa + 1e-12);
        let mut again = d.clone();
        b.project(&mut again);
        prop_assert!(d.iter().zip(&again).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn jpeg_round_trip_keeps_shape_and_range(h in 16usize..33, w in 16usize..33, q in 1u8..=100, s in any::<u64>()) {
        let a = image(h, w, s);
        let j = jpeg_round_trip(&a, q).unwrap();
        prop_assert_eq!(j.shape(), a.shape());
        prop_assert!(j.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
