use proptest::prelude::*;
use stenograph::cohort::FollowUp;
use stenograph::metrics::{auc, brier, calibration, spearman};
use stenograph::survival::{cumulative_incidence, logrank};

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Rank = number strictly below + half of the ties, counting itself.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Scores on a 1/16 grid so ties are common and transforms stay exact.
fn scored_labels(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..=16, any::<bool>()), 2..=max)
        .prop_filter("both classes", |v| {
            v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)
        })
        .prop_map(|v| v.into_iter().map(|(s, l)| (s as f64 / 16.0, l)).unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auc_equals_pairwise_count((s, l) in scored_labels(200)) {
        prop_assert_eq!(auc(&s, &l).unwrap(), pairwise_auc(&s, &l));
    }

    #[test]
    fn auc_of_complement_is_complement((s, l) in scored_labels(120)) {
        let flipped: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let a = auc(&s, &l).unwrap();
        prop_assert!((auc(&flipped, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_increasing_transforms((s, l) in scored_labels(120)) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + v * v * v).collect();
        prop_assert_eq!(auc(&t, &l).unwrap(), auc(&s, &l).unwrap());
    }

    #[test]
    fn spearman_equals_rank_then_pearson(
        pairs in prop::collection::vec((0u8..4, 0u8..20), 11..80)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 20.0).collect();
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let r = spearman(&x, &y, 1).unwrap();
        let oracle = brute_pearson(&brute_ranks(&x), &brute_ranks(&y));
        prop_assert!((r.rho - oracle).abs() < 1e-12, "{} vs {}", r.rho, oracle);
        prop_assert!((-1.0..=1.0).contains(&r.rho));
    }

    #[test]
    fn brier_of_constant_forecast(p in 0.0f64..=1.0, labels in prop::collection::vec(any::<bool>(), 1..300)) {
        let q = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        let b = brier(&vec![p; labels.len()], &labels).unwrap();
        prop_assert!((b - (p * p - 2.0 * p * q + q)).abs() < 1e-12);
    }

    #[test]
    fn calibration_counts_cover_every_sample(
        probs in prop::collection::vec(0.0f64..=1.0, 1..300),
        bins in 1usize..20,
    ) {
        let labels: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
        let c = calibration(&probs, &labels, bins).unwrap();
        prop_assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), probs.len());
    }

    #[test]
    fn uncensored_incidence_is_the_ecdf(days in prop::collection::vec(1u32..=365, 1..150)) {
        let group: Vec<FollowUp> = days.iter().map(|&d| FollowUp { event: true, days: d }).collect();
        let curve = cumulative_incidence(&group, "g").unwrap();
        let n = days.len() as f64;
        for d in 0..=365u32 {
            let ecdf = days.iter().filter(|&&x| x <= d).count() as f64 / n;
            prop_assert_eq!(curve.incidence_at(d), ecdf);
        }
    }

    #[test]
    fn logrank_is_symmetric_and_ignores_day_zero_censoring(
        a in prop::collection::vec((1u32..=365, any::<bool>()), 2..60),
        b in prop::collection::vec((1u32..=365, any::<bool>()), 2..60),
    ) {
        let f = |v: &[(u32, bool)]| v.iter().map(|&(days, event)| FollowUp { event, days }).collect::<Vec<_>>();
        let (fa, fb) = (f(&a), f(&b));
        prop_assume!(fa.iter().chain(&fb).any(|x| x.event));
        let ab = logrank(&fa, &fb).unwrap();
        let ba = logrank(&fb, &fa).unwrap();
        prop_assert!((ab.chi_square - ba.chi_square).abs() <= 1e-12 * ab.chi_square.max(1.0));
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);

        let mut padded = fa.clone();
        padded.push(FollowUp { event: false, days: 0 });
        let p = logrank(&padded, &fb).unwrap();
        prop_assert!((p.chi_square - ab.chi_square).abs() <= 1e-12 * ab.chi_square.max(1.0));
    }
}

#[test]
fn logrank_of_identical_groups_is_null() {
    let g: Vec<FollowUp> = [(12, true), (40, false), (90, true), (365, false)]
        .iter()
        .map(|&(days, event)| FollowUp { event, days })
        .collect();
    let r = logrank(&g, &g).unwrap();
    assert_eq!(r.chi_square, 0.0);
    assert_eq!(r.p_value, 1.0);
}
