use proptest::prelude::*;
use stenograph::augment::{
    amplitude_scale, augment_signal, gaussian_noise, intensity, occlude, temporal_shift, AugConfig,
};
use stenograph::rng::keyed;

const LEADS: usize = 12;

/// Nonzero everywhere so zeroed samples can only come from occlusion.
fn signal(n: usize, seed: u64) -> Vec<f64> {
    (0..LEADS * n)
        .map(|k| 1.5 + ((k as f64 * 0.37 + seed as f64).sin()))
        .collect()
}

proptest! {
    #[test]
    fn zero_intensity_is_identity(n in 8usize..300, seed in any::<u64>()) {
        let x = signal(n, seed);
        let mut rng = keyed(seed, &[1]);
        let mut y = x.clone();
        temporal_shift(&mut y, n, 0.0, 0.1, &mut rng);
        amplitude_scale(&mut y, 0.0, 0.1, &mut rng);
        gaussian_noise(&mut y, n, 0.0, 0.05, &mut rng);
        occlude(&mut y, n, 0.0, 0.02, 0.1, &mut rng);
        prop_assert_eq!(&y, &x);
        let mut z = x.clone();
        augment_signal(&mut z, n, 0.0, &AugConfig::default(), &mut rng);
        prop_assert_eq!(z, x);
    }

    #[test]
    fn occlusion_zeroes_one_window_of_the_drawn_length(
        n in 50usize..600,
        alpha in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (lo, hi) = (0.02, 0.10);
        let mut y = signal(n, seed);
        let (start, len) = occlude(&mut y, n, alpha, lo, hi, &mut keyed(seed, &[2]));
        let min_len = (lo * alpha * n as f64).round() as usize;
        let max_len = (hi * alpha * n as f64).round() as usize;
        prop_assert!((min_len..=max_len).contains(&len));
        for lead in y.chunks(n) {
            for (k, &v) in lead.iter().enumerate() {
                prop_assert_eq!(v == 0.0, (start..start + len).contains(&k));
            }
        }
    }

    #[test]
    fn fixed_fraction_gives_exact_length(n in 50usize..600, alpha in 0.05f64..=1.0, seed in any::<u64>()) {
        let mut y = signal(n, seed);
        let (_, len) = occlude(&mut y, n, alpha, 0.08, 0.08, &mut keyed(seed, &[3]));
        prop_assert_eq!(len, (0.08 * alpha * n as f64).round() as usize);
        prop_assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), LEADS * len);
    }

    #[test]
    fn intensity_is_monotone(total in 1usize..200) {
        let a: Vec<f64> = (0..=total).map(|e| intensity(e, total).unwrap()).collect();
        prop_assert_eq!(a[0], 1.0);
        prop_assert!(a[total].abs() <= 1e-12);
        prop_assert!(a.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn noise_std_matches_lead_scaled_target() {
    let n = 10_000;
    let (alpha, base) = (0.8, 0.05);
    // lead std of a two-level square wave is exactly 1
    let x: Vec<f64> = (0..LEADS * n)
        .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut y = x.clone();
    gaussian_noise(&mut y, n, alpha, base, &mut keyed(5, &[4]));
    let target = alpha * base;
    for lead in 0..LEADS {
        let d: Vec<f64> = (0..n).map(|k| y[lead * n + k] - x[lead * n + k]).collect();
        let m = d.iter().sum::<f64>() / n as f64;
        let s = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(
            (s / target - 1.0).abs() < 0.05,
            "lead {lead}: std {s} vs {target}"
        );
    }
}
