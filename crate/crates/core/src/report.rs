//! Evaluation report: per-vessel discrimination, calibration, rank
//! correlation and grade-wise box summaries, for the full cohort and for
//! requested subgroups.

use serde::{Deserialize, Serialize};

use crate::cohort::{subgroup_indices, Cohort, StenosisGrade, Subgroup, Vessel};
use crate::error::{Error, Result};
use crate::metrics::{
    calibration, grade_probability_summary, macro_auc, medians_increasing, roc, spearman,
    CalibrationResult, GradeBox, RocResult, SpearmanResult, DEFAULT_BINS, DEFAULT_N_BOOT,
};
use crate::model::{predict_cohort, ModelParams, N_TASKS};
use crate::rng::{self, stream};

/// A metric value, or the reason it cannot be computed on this group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Cell<T> {
    Defined { value: T },
    Undefined { reason: String },
}

impl<T> Cell<T> {
    fn from_result(r: Result<T>) -> Result<Self> {
        match r {
            Ok(value) => Ok(Cell::Defined { value }),
            Err(Error::Undefined(reason)) => Ok(Cell::Undefined { reason }),
            Err(e) => Err(e),
        }
    }

    pub fn value(&self) -> Option<&T> {
        match self {
            Cell::Defined { value } => Some(value),
            Cell::Undefined { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub n_boot: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_boot: DEFAULT_N_BOOT,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselEval {
    pub vessel: Vessel,
    pub n: usize,
    pub n_pos: usize,
    pub roc: Cell<RocResult>,
    pub calibration: Cell<CalibrationResult>,
    pub spearman: Cell<SpearmanResult>,
    pub medians_increasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    /// `all` or a subgroup key.
    pub key: String,
    pub label: String,
    pub n_records: usize,
    pub vessels: Vec<VesselEval>,
    pub grade_boxes: Vec<GradeBox>,
    /// Mean over vessels with a defined AUC.
    pub macro_auc: Option<f64>,
}

impl GroupEval {
    pub fn vessel(&self, v: Vessel) -> &VesselEval {
        &self.vessels[v.index()]
    }

    pub fn auc(&self, v: Vessel) -> Option<f64> {
        self.vessel(v).roc.value().map(|r| r.auc)
    }

    pub fn macro_auc_over(&self, vessels: &[Vessel]) -> Option<f64> {
        let aucs: Vec<Option<f64>> = vessels.iter().map(|&v| self.auc(v)).collect();
        if aucs.iter().any(Option::is_none) {
            return None;
        }
        macro_auc(&aucs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub groups: Vec<GroupEval>,
}

impl EvalReport {
    pub fn group(&self, key: &str) -> Option<&GroupEval> {
        self.groups.iter().find(|g| g.key == key)
    }

    pub fn overall(&self) -> &GroupEval {
        &self.groups[0]
    }
}

fn evaluate_group(
    key: &str,
    label: &str,
    group_idx: usize,
    grades: &[[StenosisGrade; 4]],
    probs: &[[f64; N_TASKS]],
    opts: &EvalOptions,
) -> Result<GroupEval> {
    let boxes = grade_probability_summary(grades, probs)?;
    let mut vessels = Vec::with_capacity(4);
    for v in Vessel::ALL {
        let i = v.index();
        let scores: Vec<f64> = probs.iter().map(|p| p[i]).collect();
        let labels: Vec<bool> = grades.iter().map(|g| g[i].is_severe()).collect();
        let codes: Vec<f64> = grades.iter().map(|g| g[i].code() as f64).collect();
        let seed = rng::derive_seed(opts.seed, &[stream::BOOTSTRAP, group_idx as u64, i as u64]);
        let calib = if scores.is_empty() {
            Cell::Undefined {
                reason: "no records".into(),
            }
        } else {
            Cell::from_result(calibration(&scores, &labels, opts.bins))?
        };
        let sp = if scores.len() < 3 {
            Cell::Undefined {
                reason: format!("{} records, need at least 3", scores.len()),
            }
        } else {
            Cell::from_result(spearman(&codes, &scores, seed))?
        };
        vessels.push(VesselEval {
            vessel: v,
            n: scores.len(),
            n_pos: labels.iter().filter(|&&l| l).count(),
            roc: Cell::from_result(roc(&scores, &labels, opts.n_boot, seed))?,
            calibration: calib,
            spearman: sp,
            medians_increasing: medians_increasing(&boxes, v),
        });
    }
    let aucs: Vec<Option<f64>> = vessels
        .iter()
        .map(|e| e.roc.value().map(|r| r.auc))
        .collect();
    Ok(GroupEval {
        key: key.to_string(),
        label: label.to_string(),
        n_records: probs.len(),
        vessels,
        grade_boxes: boxes,
        macro_auc: macro_auc(&aucs),
    })
}

/// Report from precomputed probabilities aligned with `cohort` records.
pub fn evaluate_predictions(
    cohort: &Cohort,
    probs: &[[f64; N_TASKS]],
    subgroups: &[Subgroup],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if cohort.is_empty() {
        return Err(Error::Data("cannot evaluate an empty cohort".into()));
    }
    if probs.len() != cohort.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} records",
            probs.len(),
            cohort.len()
        )));
    }
    let grades: Vec<[StenosisGrade; 4]> =
        cohort.records().iter().map(|r| r.labels.grades()).collect();
    let mut groups = vec![evaluate_group(
        "all",
        "all records",
        0,
        &grades,
        probs,
        opts,
    )?];
    for (k, &sg) in subgroups.iter().enumerate() {
        let idx = subgroup_indices(cohort, sg)?;
        let g: Vec<_> = idx.iter().map(|&i| grades[i]).collect();
        let p: Vec<_> = idx.iter().map(|&i| probs[i]).collect();
        groups.push(evaluate_group(sg.key(), sg.label(), k + 1, &g, &p, opts)?);
    }
    Ok(EvalReport {
        options: *opts,
        groups,
    })
}

pub fn evaluate(
    params: &ModelParams,
    cohort: &Cohort,
    subgroups: &[Subgroup],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if cohort.is_empty() {
        return Err(Error::Data("cannot evaluate an empty cohort".into()));
    }
    let probs = predict_cohort(params, cohort)?;
    evaluate_predictions(cohort, &probs, subgroups, opts)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `group,vessel,fpr,tpr`.
pub fn roc_points_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("roc csv: {e}"));
    w.write_record(["group", "vessel", "fpr", "tpr"])
        .map_err(err)?;
    for g in &report.groups {
        for ve in &g.vessels {
            let Some(r) = ve.roc.value() else { continue };
            for (fpr, tpr) in &r.points {
                w.write_record([
                    g.key.clone(),
                    ve.vessel.name().into(),
                    fpr.to_string(),
                    tpr.to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    finish(w)
}

/// `group,vessel,lo,hi,count,mean_predicted,observed`; empty bins leave the
/// last two fields blank.
pub fn calibration_bins_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("calibration csv: {e}"));
    w.write_record([
        "group",
        "vessel",
        "lo",
        "hi",
        "count",
        "mean_predicted",
        "observed",
    ])
    .map_err(err)?;
    for g in &report.groups {
        for ve in &g.vessels {
            let Some(c) = ve.calibration.value() else {
                continue;
            };
            for b in &c.bins {
                w.write_record([
                    g.key.clone(),
                    ve.vessel.name().into(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.count.to_string(),
                    opt(b.mean_predicted),
                    opt(b.observed),
                ])
                .map_err(err)?;
            }
        }
    }
    finish(w)
}

/// `group,vessel,grade,n,q1,median,q3,whisker_lo,whisker_hi,outliers`.
pub fn grade_boxes_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("grade box csv: {e}"));
    w.write_record([
        "group",
        "vessel",
        "grade",
        "n",
        "q1",
        "median",
        "q3",
        "whisker_lo",
        "whisker_hi",
        "outliers",
    ])
    .map_err(err)?;
    for g in &report.groups {
        for b in &g.grade_boxes {
            let s = b.summary.as_ref();
            w.write_record([
                g.key.clone(),
                b.vessel.name().into(),
                b.grade.to_string(),
                b.n.to_string(),
                opt(s.map(|s| s.q1)),
                opt(s.map(|s| s.median)),
                opt(s.map(|s| s.q3)),
                opt(s.map(|s| s.whisker_lo)),
                opt(s.map(|s| s.whisker_hi)),
                s.map(|s| s.outliers.to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
    }
    finish(w)
}

/// One row per (group, vessel): the table behind the subgroup forest plot.
pub fn subgroup_table_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("subgroup csv: {e}"));
    w.write_record([
        "group", "vessel", "n", "n_pos", "auc", "ci_lo", "ci_hi", "brier", "note",
    ])
    .map_err(err)?;
    for g in &report.groups {
        for ve in &g.vessels {
            let r = ve.roc.value();
            let note = match &ve.roc {
                Cell::Undefined { reason } => reason.clone(),
                Cell::Defined { .. } => String::new(),
            };
            w.write_record([
                g.key.clone(),
                ve.vessel.name().into(),
                ve.n.to_string(),
                ve.n_pos.to_string(),
                opt(r.map(|r| r.auc)),
                opt(r.map(|r| r.ci.0)),
                opt(r.map(|r| r.ci.1)),
                opt(ve.calibration.value().map(|c| c.brier)),
                note,
            ])
            .map_err(err)?;
        }
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_cohort, CohortParams};

    fn cohort() -> Cohort {
        let p = CohortParams {
            n_patients: 60,
            fs: 100.0,
            duration_s: 2.0,
            prevalence: [0.3, 0.0, 0.3, 0.3],
            ..Default::default()
        };
        synth_cohort(&p, 9).unwrap()
    }

    /// Probabilities that rise with grade plus a deterministic wobble.
    fn probs(c: &Cohort) -> Vec<[f64; 4]> {
        c.records()
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let g = r.labels.grades();
                std::array::from_fn(|i| {
                    (0.1 + 0.2 * g[i].code() as f64 + 0.05 * ((k * 7 + i) % 5) as f64).min(1.0)
                })
            })
            .collect()
    }

    fn opts() -> EvalOptions {
        EvalOptions {
            n_boot: 50,
            bins: 10,
            seed: 3,
        }
    }

    #[test]
    fn full_report_has_every_block() {
        let c = cohort();
        let r = evaluate_predictions(&c, &probs(&c), &[Subgroup::NormalEcg], &opts()).unwrap();
        assert_eq!(r.groups.len(), 2);
        let all = r.overall();
        assert_eq!(all.vessels.len(), 4);
        assert_eq!(all.grade_boxes.len(), 16);
        // no LM positives: only that vessel is undefined
        assert!(matches!(all.vessel(Vessel::Lm).roc, Cell::Undefined { .. }));
        for v in [Vessel::Rca, Vessel::Lad, Vessel::Lcx] {
            assert!(all.auc(v).unwrap() > 0.9);
            assert!(all.vessel(v).calibration.value().is_some());
            assert!(all.vessel(v).medians_increasing);
        }
        assert!(all.macro_auc.is_some());
        assert!(all.macro_auc_over(&Vessel::ALL).is_none());
        assert_eq!(r.group("normal_ecg").unwrap().label, "normal ECG");
    }

    #[test]
    fn duplicating_the_cohort_keeps_rank_and_mean_metrics() {
        let c = cohort();
        let p = probs(&c);
        let dup_records: Vec<_> = c
            .records()
            .iter()
            .cloned()
            .chain(c.records().iter().cloned().map(|mut r| {
                r.ecg.ecg_id.push_str("-dup");
                r
            }))
            .collect();
        let dup = Cohort::new(dup_records).unwrap();
        let p2: Vec<_> = p.iter().chain(p.iter()).copied().collect();
        let a = evaluate_predictions(&c, &p, &[], &opts()).unwrap();
        let b = evaluate_predictions(&dup, &p2, &[], &opts()).unwrap();
        for v in [Vessel::Rca, Vessel::Lad, Vessel::Lcx] {
            let (x, y) = (a.overall().vessel(v), b.overall().vessel(v));
            assert_eq!(x.roc.value().unwrap().auc, y.roc.value().unwrap().auc);
            approx::assert_abs_diff_eq!(
                x.calibration.value().unwrap().brier,
                y.calibration.value().unwrap().brier,
                epsilon = 1e-15
            );
            approx::assert_abs_diff_eq!(
                x.spearman.value().unwrap().rho,
                y.spearman.value().unwrap().rho,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn empty_cohort_and_misaligned_predictions_error() {
        let c = cohort();
        assert!(evaluate_predictions(&Cohort::default(), &[], &[], &opts()).is_err());
        assert!(matches!(
            evaluate_predictions(&c, &probs(&c)[1..], &[], &opts()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn csv_exports_have_expected_rows() {
        let c = cohort();
        let r = evaluate_predictions(&c, &probs(&c), &[], &opts()).unwrap();
        let boxes = grade_boxes_csv(&r).unwrap();
        assert_eq!(boxes.lines().count(), 1 + 16);
        let calib = calibration_bins_csv(&r).unwrap();
        assert_eq!(calib.lines().count(), 1 + 3 * 10 + 10);
        let table = subgroup_table_csv(&r).unwrap();
        assert_eq!(table.lines().count(), 1 + 4);
        assert!(table
            .lines()
            .any(|l| l.starts_with("all,LM") && l.ends_with(|c: char| c.is_alphabetic())));
        let roc = roc_points_csv(&r).unwrap();
        assert!(roc.lines().nth(1).unwrap().starts_with("all,RCA,0,0"));
    }

    #[test]
    fn report_json_marks_undefined_cells() {
        let c = cohort();
        let r = evaluate_predictions(&c, &probs(&c), &[], &opts()).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"status\":\"undefined\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
