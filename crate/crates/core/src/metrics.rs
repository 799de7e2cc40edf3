//! ROC/AUC with bootstrap intervals, Brier score, calibration, Spearman
//! trend tests and per-grade box summaries.

use std::cmp::Ordering;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cohort::{StenosisGrade, Vessel};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores contain NaN or infinity".into()));
    }
    Ok(())
}

/// Mid-ranks (1-based, ties share their average rank).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC undefined with {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie), via rank sums.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC vertices from the highest threshold down, starting at (0, 0).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_pairs(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Percentile of sorted data with linear interpolation between order
/// statistics at positions `p (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const DEFAULT_N_BOOT: usize = 2000;

/// 95% stratified percentile-bootstrap interval for the AUC.
///
/// Positives and negatives are resampled separately, so every replicate
/// keeps both classes; replicate `r` draws from its own keyed stream.
pub fn auc_ci(scores: &[f64], labels: &[bool], n_boot: usize, seed: u64) -> Result<(f64, f64)> {
    check_pairs(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be positive".into()));
    }
    // Dense tie-group ids let each replicate be scored by counting.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut group = vec![0usize; scores.len()];
    let mut g = 0;
    for w in 0..order.len() {
        if w > 0 && scores[order[w]] != scores[order[w - 1]] {
            g += 1;
        }
        group[order[w]] = g;
    }
    let n_groups = g + 1;
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i])
        .map(|i| group[i])
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| !labels[i])
        .map(|i| group[i])
        .collect();

    let mut stats: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::keyed(seed, &[stream::BOOTSTRAP, r as u64]);
            let mut neg_hist = vec![0u64; n_groups];
            for _ in 0..n_neg {
                neg_hist[neg[rng.random_range(0..n_neg)]] += 1;
            }
            let mut below = vec![0u64; n_groups];
            let mut acc = 0;
            for (b, &c) in below.iter_mut().zip(&neg_hist) {
                *b = acc;
                acc += c;
            }
            // twice the Mann-Whitney count keeps the sum integral
            let mut twice_u = 0u64;
            for _ in 0..n_pos {
                let gp = pos[rng.random_range(0..n_pos)];
                twice_u += 2 * below[gp] + neg_hist[gp];
            }
            twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok((
        percentile_sorted(&stats, 0.025),
        percentile_sorted(&stats, 0.975),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub ci: (f64, f64),
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_boot: usize,
    pub seed: u64,
}

pub fn roc(scores: &[f64], labels: &[bool], n_boot: usize, seed: u64) -> Result<RocResult> {
    let (n_pos, n_neg) = class_counts(labels)?;
    Ok(RocResult {
        points: roc_points(scores, labels)?,
        auc: auc(scores, labels)?,
        ci: auc_ci(scores, labels, n_boot, seed)?,
        n_pos,
        n_neg,
        n_boot,
        seed,
    })
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

pub fn brier(probs: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(probs.len(), labels.len())?;
    check_probs(probs)?;
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "brier score of an empty sample".into(),
        ));
    }
    let sse: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - if l { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(sse / probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_predicted: Option<f64>,
    pub observed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub bins: Vec<CalibrationBin>,
    pub brier: f64,
}

impl CalibrationResult {
    /// (mean predicted, observed) for populated bins.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.bins
            .iter()
            .filter_map(|b| Some((b.mean_predicted?, b.observed?)))
            .collect()
    }
}

pub const DEFAULT_BINS: usize = 10;

/// Equal-width reliability bins on [0, 1]; p = 1 lands in the last bin.
pub fn calibration(probs: &[f64], labels: &[bool], bins: usize) -> Result<CalibrationResult> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let brier = brier(probs, labels)?;
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&p, &l) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        sum_p[b] += p;
        sum_y[b] += l as usize;
        count[b] += 1;
    }
    let bins = (0..bins)
        .map(|b| {
            let c = count[b];
            CalibrationBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: c,
                mean_predicted: (c > 0).then(|| sum_p[b] / c as f64),
                observed: (c > 0).then(|| sum_y[b] as f64 / c as f64),
            }
        })
        .collect();
    Ok(CalibrationResult { bins, brier })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    TApproximation,
    ExactPermutation,
    MonteCarloPermutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub ties: bool,
    pub method: PValueMethod,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "correlation undefined for a constant input".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

const MC_PERMUTATIONS: usize = 10_000;

/// Spearman correlation with a two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64], seed: u64) -> Result<SpearmanResult> {
    check_pairs(x.len(), y.len())?;
    check_scores(x)?;
    check_scores(y)?;
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs n >= 3, got {n}"
        )));
    }
    let rx = midranks(x);
    let ry = midranks(y);
    let rho = pearson(&rx, &ry)?;
    let ties = has_ties(&rx) || has_ties(&ry);
    let (p_value, method) = if n > 10 {
        (t_test_p(rho, n), PValueMethod::TApproximation)
    } else if n <= 7 {
        (
            exact_permutation_p(&rx, &ry, rho),
            PValueMethod::ExactPermutation,
        )
    } else {
        (
            monte_carlo_p(&rx, &ry, rho, seed),
            PValueMethod::MonteCarloPermutation,
        )
    };
    Ok(SpearmanResult {
        rho,
        p_value,
        n,
        ties,
        method,
    })
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut s = ranks.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    }
}

fn t_test_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

fn at_least_as_extreme(r: f64, observed: f64) -> bool {
    r.abs() >= observed.abs() - 1e-12
}

fn exact_permutation_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let mut perm = ry.to_vec();
    let n = perm.len();
    let mut c = vec![0usize; n];
    let (mut hits, mut total) = (0u64, 0u64);
    let mut visit = |p: &[f64]| {
        total += 1;
        if pearson(rx, p).is_ok_and(|r| at_least_as_extreme(r, rho)) {
            hits += 1;
        }
    };
    // Heap's algorithm
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

fn monte_carlo_p(rx: &[f64], ry: &[f64], rho: f64, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut rng = rng::keyed(seed, &[stream::PERMUTATION]);
    let mut perm = ry.to_vec();
    let mut hits = 0usize;
    for _ in 0..MC_PERMUTATIONS {
        perm.shuffle(&mut rng);
        if pearson(rx, &perm).is_ok_and(|r| at_least_as_extreme(r, rho)) {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (MC_PERMUTATIONS + 1) as f64
}

/// Quantile with linear interpolation between the plotting positions
/// `(k - 0.5) / n`, clamped to the extremes.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = n as f64 * p + 0.5;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor();
    let k = lo as usize;
    sorted[k - 1] + (h - lo) * (sorted[k] - sorted[k - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme observations inside the 1.5 IQR fences.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: usize,
}

pub fn box_summary(values: &[f64]) -> Option<BoxSummary> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile(&s, 0.25);
    let median = quantile(&s, 0.5);
    let q3 = quantile(&s, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s
        .iter()
        .copied()
        .filter(|v| (lo_fence..=hi_fence).contains(v))
        .collect();
    Some(BoxSummary {
        n: s.len(),
        q1,
        median,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: s.len() - inside.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeBox {
    pub vessel: Vessel,
    pub grade: u8,
    pub n: usize,
    pub summary: Option<BoxSummary>,
}

/// Box summaries of predicted probability per (vessel, grade); grades with
/// no records are kept with `n = 0`.
pub fn grade_probability_summary(
    grades: &[[StenosisGrade; 4]],
    probs: &[[f64; 4]],
) -> Result<Vec<GradeBox>> {
    check_pairs(grades.len(), probs.len())?;
    let mut out = Vec::new();
    for v in Vessel::ALL {
        for g in 0..=StenosisGrade::MAX {
            let values: Vec<f64> = grades
                .iter()
                .zip(probs)
                .filter(|(gr, _)| gr[v.index()].code() == g)
                .map(|(_, p)| p[v.index()])
                .collect();
            out.push(GradeBox {
                vessel: v,
                grade: g,
                n: values.len(),
                summary: box_summary(&values),
            });
        }
    }
    Ok(out)
}

/// True when the medians of the populated grades strictly increase.
pub fn medians_increasing(boxes: &[GradeBox], vessel: Vessel) -> bool {
    let medians: Vec<f64> = boxes
        .iter()
        .filter(|b| b.vessel == vessel)
        .filter_map(|b| b.summary.as_ref().map(|s| s.median))
        .collect();
    medians
        .windows(2)
        .all(|w| w[1].partial_cmp(&w[0]) == Some(Ordering::Greater))
}

/// Mean of the defined AUCs, or `None` if none is defined.
pub fn macro_auc(aucs: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aucs.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&s, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&s, &[true; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn roc_points_end_at_one() {
        let p = roc_points(&[0.9, 0.5, 0.5, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(p, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn ci_separable_and_deterministic() {
        let scores: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        let (lo, hi) = auc_ci(&scores, &labels, 500, 1).unwrap();
        assert!(lo >= 0.99 && hi <= 1.0);
        assert_eq!(auc_ci(&scores, &labels, 500, 1).unwrap(), (lo, hi));
    }

    #[test]
    fn ci_of_ties_is_half() {
        let (lo, hi) = auc_ci(&[0.3; 6], &[true, false, true, false, true, false], 50, 0).unwrap();
        assert_eq!((lo, hi), (0.5, 0.5));
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[0.5; 4], &[true, false, true, true]).unwrap(), 0.25);
        assert_eq!(brier(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            brier(&[0.8, 0.4], &[true, false]).unwrap(),
            0.10,
            epsilon = 1e-15
        );
        assert!(brier(&[1.2], &[true]).is_err());
    }

    #[test]
    fn calibration_bins() {
        let c = calibration(&[0.05, 0.07, 1.0, 0.95], &[false, true, true, true], 10).unwrap();
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(c.bins[0].count, 2);
        assert_eq!(c.bins[9].count, 2);
        assert_eq!(c.curve().len(), 2);
        let one = calibration(&[0.31, 0.32], &[true, false], 10).unwrap();
        assert_eq!(one.bins.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn spearman_examples() {
        let g = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(spearman(&g, &[0.1, 0.2, 0.3, 0.4], 0).unwrap().rho, 1.0);
        assert_eq!(spearman(&g, &[0.4, 0.3, 0.2, 0.1], 0).unwrap().rho, -1.0);
        assert_abs_diff_eq!(
            spearman(&g, &[0.1, 0.3, 0.2, 0.4], 0).unwrap().rho,
            0.8,
            epsilon = 1e-12
        );
        assert!(matches!(
            spearman(&g, &[0.2; 4], 0),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn spearman_exact_p_for_perfect_n4() {
        // 2 of 24 orderings reach |rho| = 1
        let r = spearman(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(r.method, PValueMethod::ExactPermutation);
        assert_abs_diff_eq!(r.p_value, 2.0 / 24.0, epsilon = 1e-15);
    }

    #[test]
    fn spearman_methods_by_n() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let y: Vec<f64> = (0..9).map(|i| f64::from(i * i % 7)).collect();
        let r = spearman(&x, &y, 3).unwrap();
        assert_eq!(r.method, PValueMethod::MonteCarloPermutation);
        assert_eq!(r, spearman(&x, &y, 3).unwrap());
        let x: Vec<f64> = (0..30).map(f64::from).collect();
        let r = spearman(&x, &x, 0).unwrap();
        assert_eq!(r.method, PValueMethod::TApproximation);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn quantile_convention() {
        let b = box_summary(&[4.0, 2.0, 1.0, 3.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (1.5, 2.5, 3.5));
        let b = box_summary(&[0.7]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (0.7, 0.7, 0.7));
        assert!(box_summary(&[]).is_none());
    }

    #[test]
    fn whiskers_exclude_outliers() {
        let b = box_summary(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.whisker_hi, 4.0);
        assert_eq!(b.outliers, 1);
    }

    #[test]
    fn grade_boxes_keep_absent_grades() {
        let g = |c| StenosisGrade::new(c).unwrap();
        let grades = [[g(0), g(0), g(1), g(3)], [g(0), g(0), g(1), g(3)]];
        let probs = [[0.1, 0.2, 0.3, 0.4], [0.2, 0.2, 0.3, 0.6]];
        let boxes = grade_probability_summary(&grades, &probs).unwrap();
        assert_eq!(boxes.len(), 16);
        let rca2 = boxes
            .iter()
            .find(|b| b.vessel == Vessel::Rca && b.grade == 2)
            .unwrap();
        assert_eq!((rca2.n, rca2.summary.is_none()), (0, true));
        assert!(medians_increasing(&boxes, Vessel::Lcx));
    }

    #[test]
    fn macro_auc_skips_undefined() {
        assert_abs_diff_eq!(
            macro_auc(&[Some(0.8), None, Some(0.6)]).unwrap(),
            0.7,
            epsilon = 1e-15
        );
        assert_eq!(macro_auc(&[None]), None);
    }
}
