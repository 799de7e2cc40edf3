//! Risk stratification by per-vessel probability cutoffs, cumulative
//! incidence (1 - Kaplan-Meier) over a one-year window, and the log-rank test.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::cohort::{Cohort, FollowUp, Vessel};
use crate::error::{Error, Result};
use crate::model::N_TASKS;

pub const HORIZON_DAYS: u32 = 365;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn key(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

impl fmt::Display for RiskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Inclusive high-risk cutoffs per vessel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskThresholds {
    pub rca: f64,
    pub lm: f64,
    pub lad: f64,
    pub lcx: f64,
}

impl Default for RiskThresholds {
    fn default() -> Self {
        Self {
            rca: 0.15,
            lm: 0.01,
            lad: 0.15,
            lcx: 0.15,
        }
    }
}

impl RiskThresholds {
    pub fn cutoff(&self, vessel: Vessel) -> f64 {
        match vessel {
            Vessel::Rca => self.rca,
            Vessel::Lm => self.lm,
            Vessel::Lad => self.lad,
            Vessel::Lcx => self.lcx,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rca, self.lm, self.lad, self.lcx];
        if all.iter().any(|c| !(c > &0.0 && c < &1.0)) {
            return Err(Error::Config(format!(
                "risk cutoffs must lie in (0, 1), got {all:?}"
            )));
        }
        if [self.rca, self.lad, self.lcx].iter().any(|&c| self.lm >= c) {
            return Err(Error::Config(
                "the LM cutoff must be below the others".into(),
            ));
        }
        Ok(())
    }

    pub fn stratify(&self, prob: f64, vessel: Vessel) -> RiskGroup {
        if prob >= self.cutoff(vessel) {
            RiskGroup::High
        } else {
            RiskGroup::Low
        }
    }
}

/// Stratifies with the default cutoffs.
pub fn stratify(prob: f64, vessel: Vessel) -> RiskGroup {
    RiskThresholds::default().stratify(prob, vessel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub day: u32,
    pub incidence: f64,
    /// Subjects still under observation at the start of `day`.
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Right-continuous step function starting at day 0 with incidence 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub group: String,
    pub n: usize,
    pub points: Vec<CurvePoint>,
}

impl SurvivalCurve {
    pub fn incidence_at(&self, day: u32) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.day <= day)
            .last()
            .map_or(0.0, |p| p.incidence)
    }

    pub fn final_incidence(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.incidence)
    }
}

/// Follow-up clipped to the horizon: events after it become censored there.
fn clip(f: &FollowUp) -> FollowUp {
    if f.days > HORIZON_DAYS {
        FollowUp {
            event: false,
            days: HORIZON_DAYS,
        }
    } else {
        *f
    }
}

/// 1 - Kaplan-Meier survival. On a shared day, events are counted before
/// censorings.
///
/// Incidence is accumulated as `F_a + S_a * events / n_a` within each run
/// of days free of censoring, which equals the product-limit estimate and
/// reduces to `events / n` exactly when nothing is censored.
pub fn cumulative_incidence(group: &[FollowUp], label: &str) -> Result<SurvivalCurve> {
    if group.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "survival group '{label}' is empty"
        )));
    }
    let mut by_day: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for f in group.iter().map(clip) {
        let e = by_day.entry(f.days).or_default();
        if f.event {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let mut points = vec![CurvePoint {
        day: 0,
        incidence: 0.0,
        at_risk: group.len(),
        events: 0,
        censored: 0,
    }];
    let mut at_risk = group.len();
    let (mut f_anchor, mut s_anchor, mut n_anchor) = (0.0, 1.0, group.len());
    let mut seg_events = 0usize;
    let mut incidence = 0.0;
    for (&day, &(events, censored)) in &by_day {
        if events > 0 {
            seg_events += events;
            incidence = f_anchor + s_anchor * (seg_events as f64 / n_anchor as f64);
        }
        let point = CurvePoint {
            day,
            incidence,
            at_risk,
            events,
            censored,
        };
        if day == 0 {
            points[0] = point;
        } else {
            points.push(point);
        }
        at_risk -= events + censored;
        if censored > 0 {
            s_anchor *= (n_anchor - seg_events) as f64 / n_anchor as f64;
            f_anchor = incidence;
            n_anchor = at_risk;
            seg_events = 0;
        }
    }
    Ok(SurvivalCurve {
        group: label.to_string(),
        n: group.len(),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with the hypergeometric variance.
pub fn logrank(a: &[FollowUp], b: &[FollowUp]) -> Result<LogRankResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "log-rank needs two non-empty groups".into(),
        ));
    }
    let a: Vec<FollowUp> = a.iter().map(clip).collect();
    let b: Vec<FollowUp> = b.iter().map(clip).collect();
    let mut days: Vec<u32> = a
        .iter()
        .chain(&b)
        .filter(|f| f.event)
        .map(|f| f.days)
        .collect();
    days.sort_unstable();
    days.dedup();
    if days.is_empty() {
        return Err(Error::Undefined("log-rank undefined without events".into()));
    }
    let count = |g: &[FollowUp], t: u32| -> (f64, f64) {
        let at_risk = g.iter().filter(|f| f.days >= t).count() as f64;
        let events = g.iter().filter(|f| f.event && f.days == t).count() as f64;
        (at_risk, events)
    };
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for t in days {
        let (na, da) = count(&a, t);
        let (nb, db) = count(&b, t);
        let n = na + nb;
        let d = da + db;
        observed += da;
        expected += d * na / n;
        if n > 1.0 {
            variance += d * na * nb * (n - d) / (n * n * (n - 1.0));
        }
    }
    if variance <= 0.0 {
        return Err(Error::Undefined("log-rank variance is zero".into()));
    }
    let chi_square = (observed - expected).powi(2) / variance;
    let p_value = ChiSquared::new(1.0).expect("1 dof").sf(chi_square);
    Ok(LogRankResult {
        chi_square,
        p_value,
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselRisk {
    pub vessel: Vessel,
    pub cutoff: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub high: Option<SurvivalCurve>,
    pub low: Option<SurvivalCurve>,
    pub logrank: Option<LogRankResult>,
    pub undefined: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub n_patients: usize,
    pub thresholds: RiskThresholds,
    pub vessels: Vec<VesselRisk>,
}

/// One row per patient: mean probability over that patient's records and
/// the patient's follow-up.
pub fn patient_risk_inputs(
    cohort: &Cohort,
    probs: &[[f64; N_TASKS]],
) -> Result<Vec<(String, [f64; N_TASKS], FollowUp)>> {
    if probs.len() != cohort.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} records",
            probs.len(),
            cohort.len()
        )));
    }
    let mut acc: Vec<(String, [f64; N_TASKS], usize, FollowUp)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (r, p) in cohort.records().iter().zip(probs) {
        let follow_up = r.follow_up.ok_or_else(|| Error::MissingMetadata {
            field: "follow_up".into(),
            ecg_ids: vec![r.ecg.ecg_id.clone()],
        })?;
        let i = *index.entry(&r.ecg.patient_id).or_insert_with(|| {
            acc.push((r.ecg.patient_id.clone(), [0.0; N_TASKS], 0, follow_up));
            acc.len() - 1
        });
        for t in 0..N_TASKS {
            acc[i].1[t] += p[t];
        }
        acc[i].2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(pid, sum, n, f)| (pid, sum.map(|s| s / n as f64), f))
        .collect())
}

pub fn risk_report(
    cohort: &Cohort,
    probs: &[[f64; N_TASKS]],
    thresholds: &RiskThresholds,
) -> Result<RiskReport> {
    thresholds.validate()?;
    if !cohort.has_follow_up() {
        return Err(Error::MissingMetadata {
            field: "follow_up".into(),
            ecg_ids: cohort
                .records()
                .iter()
                .filter(|r| r.follow_up.is_none())
                .map(|r| r.ecg.ecg_id.clone())
                .collect(),
        });
    }
    let patients = patient_risk_inputs(cohort, probs)?;
    let vessels = Vessel::ALL
        .iter()
        .map(|&v| vessel_risk(&patients, v, thresholds))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskReport {
        n_patients: patients.len(),
        thresholds: *thresholds,
        vessels,
    })
}

fn vessel_risk(
    patients: &[(String, [f64; N_TASKS], FollowUp)],
    v: Vessel,
    thresholds: &RiskThresholds,
) -> Result<VesselRisk> {
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (_, p, f) in patients {
        match thresholds.stratify(p[v.index()], v) {
            RiskGroup::High => high.push(*f),
            RiskGroup::Low => low.push(*f),
        }
    }
    let mut out = VesselRisk {
        vessel: v,
        cutoff: thresholds.cutoff(v),
        n_high: high.len(),
        n_low: low.len(),
        high: None,
        low: None,
        logrank: None,
        undefined: None,
    };
    if high.is_empty() || low.is_empty() {
        out.undefined = Some(format!(
            "{} risk group is empty",
            if high.is_empty() { "high" } else { "low" }
        ));
        return Ok(out);
    }
    out.high = Some(cumulative_incidence(&high, "high")?);
    out.low = Some(cumulative_incidence(&low, "low")?);
    match logrank(&high, &low) {
        Ok(r) => out.logrank = Some(r),
        Err(Error::Undefined(m)) => out.undefined = Some(m),
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// `vessel,group,day,incidence,at_risk,events,censored`.
pub fn curves_csv(report: &RiskReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("survival csv: {e}"));
    w.write_record([
        "vessel",
        "group",
        "day",
        "incidence",
        "at_risk",
        "events",
        "censored",
    ])
    .map_err(err)?;
    for vr in &report.vessels {
        for curve in [&vr.high, &vr.low].into_iter().flatten() {
            for p in &curve.points {
                w.write_record([
                    vr.vessel.name().to_string(),
                    curve.group.clone(),
                    p.day.to_string(),
                    p.incidence.to_string(),
                    p.at_risk.to_string(),
                    p.events.to_string(),
                    p.censored.to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ev(days: u32) -> FollowUp {
        FollowUp { event: true, days }
    }

    fn cens(days: u32) -> FollowUp {
        FollowUp { event: false, days }
    }

    #[test]
    fn cutoffs_are_inclusive() {
        assert_eq!(stratify(0.20, Vessel::Lad), RiskGroup::High);
        assert_eq!(stratify(0.005, Vessel::Lm), RiskGroup::Low);
        assert_eq!(stratify(0.012, Vessel::Lm), RiskGroup::High);
        assert_eq!(stratify(0.15, Vessel::Rca), RiskGroup::High);
        assert_eq!(stratify(0.01, Vessel::Lm), RiskGroup::High);
        assert_eq!(stratify(0.1499, Vessel::Lcx), RiskGroup::Low);
        assert!(RiskGroup::Low < RiskGroup::High);
    }

    #[test]
    fn threshold_validation() {
        assert!(RiskThresholds::default().validate().is_ok());
        let bad = RiskThresholds {
            lm: 0.2,
            ..RiskThresholds::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn km_without_censoring_is_ecdf() {
        let c = cumulative_incidence(&[ev(10), ev(20)], "g").unwrap();
        assert_eq!(c.incidence_at(9), 0.0);
        assert_eq!(c.incidence_at(10), 0.5);
        assert_eq!(c.incidence_at(20), 1.0);
    }

    #[test]
    fn all_censored_is_flat() {
        let c = cumulative_incidence(&[cens(100), cens(365)], "g").unwrap();
        assert!(c.points.iter().all(|p| p.incidence == 0.0));
    }

    #[test]
    fn product_limit_with_censoring() {
        // the censored subject leaves the risk set before day 20
        let c = cumulative_incidence(&[ev(10), cens(15), ev(20)], "g").unwrap();
        assert_abs_diff_eq!(c.incidence_at(10), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.incidence_at(15), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.incidence_at(20), 1.0, epsilon = 1e-15);

        let c = cumulative_incidence(&[ev(10), cens(25), ev(20)], "g").unwrap();
        assert_abs_diff_eq!(
            c.incidence_at(20),
            1.0 / 3.0 + (2.0 / 3.0) * 0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn events_precede_censoring_on_ties() {
        let c = cumulative_incidence(&[ev(5), cens(5), ev(9), cens(9)], "g").unwrap();
        assert_abs_diff_eq!(c.incidence_at(5), 0.25, epsilon = 1e-15);
        // two at risk on day 9, one event
        assert_abs_diff_eq!(c.incidence_at(9), 0.25 + 0.75 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn events_past_horizon_are_censored() {
        let c = cumulative_incidence(&[ev(400), ev(10)], "g").unwrap();
        assert_eq!(c.final_incidence(), 0.5);
    }

    #[test]
    fn empty_group_errors() {
        assert!(cumulative_incidence(&[], "g").is_err());
    }

    #[test]
    fn logrank_hand_case() {
        let r = logrank(&[ev(1), ev(2)], &[ev(3), ev(4)]).unwrap();
        assert_abs_diff_eq!(r.chi_square, 49.0 / 17.0, epsilon = 1e-12);
        let swapped = logrank(&[ev(3), ev(4)], &[ev(1), ev(2)]).unwrap();
        assert_abs_diff_eq!(swapped.chi_square, r.chi_square, epsilon = 1e-12);
        assert!(r.p_value > 0.05 && r.p_value < 0.1);
    }

    #[test]
    fn logrank_identical_groups() {
        let g = [ev(3), cens(10), ev(40), cens(365), ev(200)];
        let r = logrank(&g, &g).unwrap();
        assert_eq!(r.chi_square, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn logrank_without_events_is_undefined() {
        assert!(matches!(
            logrank(&[cens(5)], &[cens(7)]),
            Err(Error::Undefined(_))
        ));
    }
}
