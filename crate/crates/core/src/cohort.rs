//! ECG records, per-vessel stenosis labels and cohort containers.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const N_LEADS: usize = 12;

/// Fixed lead order of every signal matrix.
pub const LEAD_NAMES: [&str; N_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lead {
    I,
    II,
    III,
    #[serde(rename = "aVR")]
    AVR,
    #[serde(rename = "aVL")]
    AVL,
    #[serde(rename = "aVF")]
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Lead {
    pub const ALL: [Lead; N_LEADS] = [
        Lead::I,
        Lead::II,
        Lead::III,
        Lead::AVR,
        Lead::AVL,
        Lead::AVF,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        LEAD_NAMES[self.index()]
    }
}

/// Prediction targets, in model head order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vessel {
    Rca,
    Lm,
    Lad,
    Lcx,
}

impl Vessel {
    pub const ALL: [Vessel; 4] = [Vessel::Rca, Vessel::Lm, Vessel::Lad, Vessel::Lcx];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Vessel::Rca => "RCA",
            Vessel::Lm => "LM",
            Vessel::Lad => "LAD",
            Vessel::Lcx => "LCX",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Vessel::Rca => "rca",
            Vessel::Lm => "lm",
            Vessel::Lad => "lad",
            Vessel::Lcx => "lcx",
        }
    }
}

impl fmt::Display for Vessel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Vessel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Vessel::ALL
            .into_iter()
            .find(|v| v.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown vessel `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// Raw CCTA severity as reported per vessel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Normal,
    Mild,
    Moderate,
    Severe,
    Occluded,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::Normal,
        Severity::Mild,
        Severity::Moderate,
        Severity::Severe,
        Severity::Occluded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Normal => "normal",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
            Severity::Occluded => "occluded",
        }
    }

    /// Severe stenosis and complete occlusion share the top grade.
    pub fn grade(self) -> StenosisGrade {
        StenosisGrade(match self {
            Severity::Normal => 0,
            Severity::Mild => 1,
            Severity::Moderate => 2,
            Severity::Severe | Severity::Occluded => 3,
        })
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Severity::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownSeverity(s.to_string()))
    }
}

/// Ordinal stenosis code: 0 none, 1 mild, 2 moderate, 3 severe or occluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StenosisGrade(u8);

impl StenosisGrade {
    pub const MAX: u8 = 3;

    pub fn new(code: u8) -> Result<Self> {
        if code > Self::MAX {
            return Err(Error::InvalidArgument(format!(
                "stenosis grade {code} outside 0..=3"
            )));
        }
        Ok(Self(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn is_severe(self) -> bool {
        self.0 == Self::MAX
    }
}

impl TryFrom<u8> for StenosisGrade {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StenosisGrade> for u8 {
    fn from(g: StenosisGrade) -> u8 {
        g.0
    }
}

/// Maps a raw severity token to its ordinal grade.
pub fn encode_labels(token: &str) -> Result<StenosisGrade> {
    Ok(token.parse::<Severity>()?.grade())
}

/// One 12-lead ECG with exam metadata. The signal is stored lead-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub ecg_id: String,
    pub patient_id: String,
    pub fs: f64,
    pub ecg_time: DateTime<Utc>,
    pub normal_ecg: Option<bool>,
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    n_samples: usize,
    signal: Vec<f64>,
}

impl EcgRecord {
    pub fn new(
        ecg_id: impl Into<String>,
        patient_id: impl Into<String>,
        fs: f64,
        ecg_time: DateTime<Utc>,
        signal: Vec<f64>,
    ) -> Result<Self> {
        let ecg_id = ecg_id.into();
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Data(format!("{ecg_id}: invalid sampling rate {fs}")));
        }
        if !signal.len().is_multiple_of(N_LEADS) {
            return Err(Error::Shape(format!(
                "{ecg_id}: {} samples is not a whole number of 12-lead frames",
                signal.len()
            )));
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{ecg_id}: non-finite sample")));
        }
        Ok(Self {
            ecg_id,
            patient_id: patient_id.into(),
            fs,
            ecg_time,
            normal_ecg: None,
            age: None,
            sex: None,
            n_samples: signal.len() / N_LEADS,
            signal,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.fs
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn lead(&self, lead: usize) -> &[f64] {
        &self.signal[lead * self.n_samples..(lead + 1) * self.n_samples]
    }

    pub fn lead_mut(&mut self, lead: usize) -> &mut [f64] {
        let n = self.n_samples;
        &mut self.signal[lead * n..(lead + 1) * n]
    }

    pub fn leads(&self) -> impl Iterator<Item = &[f64]> {
        self.signal.chunks(self.n_samples.max(1))
    }

    /// Replaces the signal; the length must stay the same.
    pub fn with_signal(mut self, signal: Vec<f64>) -> Result<Self> {
        if signal.len() != self.signal.len() {
            return Err(Error::Shape(format!(
                "{}: replacement signal has {} values, expected {}",
                self.ecg_id,
                signal.len(),
                self.signal.len()
            )));
        }
        self.signal = signal;
        Ok(self)
    }

    pub fn signal_mut(&mut self) -> &mut [f64] {
        &mut self.signal
    }
}

/// Population z-score of one lead in place; near-constant leads become zeros.
pub fn zscore_lead(lead: &mut [f64]) {
    let n = lead.len() as f64;
    let mean = lead.iter().sum::<f64>() / n;
    let var = lead.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        lead.iter_mut().for_each(|v| *v = 0.0);
    } else {
        lead.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Lead-by-lead z-score standardization.
pub fn zscore_normalize(record: &EcgRecord) -> Result<EcgRecord> {
    if record.n_samples < 2 {
        return Err(Error::Data(format!(
            "{}: need at least 2 samples to normalize, got {}",
            record.ecg_id, record.n_samples
        )));
    }
    let mut out = record.clone();
    let n = out.n_samples;
    for lead in out.signal.chunks_mut(n) {
        zscore_lead(lead);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselLabels {
    pub severity: [Severity; 4],
    pub ccta_time: DateTime<Utc>,
}

impl VesselLabels {
    pub fn grade(&self, v: Vessel) -> StenosisGrade {
        self.severity[v.index()].grade()
    }

    pub fn grades(&self) -> [StenosisGrade; 4] {
        self.severity.map(Severity::grade)
    }

    pub fn severe(&self, v: Vessel) -> bool {
        self.grade(v).is_severe()
    }

    pub fn severe_flags(&self) -> [bool; 4] {
        self.grades().map(StenosisGrade::is_severe)
    }
}

/// One-year follow-up outcome, counted from the ECG time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowUp {
    pub event: bool,
    pub days: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortRecord {
    pub ecg: EcgRecord,
    pub labels: VesselLabels,
    pub follow_up: Option<FollowUp>,
}

impl CohortRecord {
    /// Time from ECG to CCTA in seconds.
    pub fn interval_s(&self) -> i64 {
        (self.labels.ccta_time - self.ecg.ecg_time).num_seconds()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    AgeUnder65,
    Age65Plus,
    Male,
    Female,
    IntervalWithin3h,
    IntervalOver3h,
    NormalEcg,
}

impl Subgroup {
    pub const ALL: [Subgroup; 7] = [
        Subgroup::AgeUnder65,
        Subgroup::Age65Plus,
        Subgroup::Male,
        Subgroup::Female,
        Subgroup::IntervalWithin3h,
        Subgroup::IntervalOver3h,
        Subgroup::NormalEcg,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Subgroup::AgeUnder65 => "age_under_65",
            Subgroup::Age65Plus => "age_65_plus",
            Subgroup::Male => "male",
            Subgroup::Female => "female",
            Subgroup::IntervalWithin3h => "interval_within_3h",
            Subgroup::IntervalOver3h => "interval_over_3h",
            Subgroup::NormalEcg => "normal_ecg",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Subgroup::AgeUnder65 => "age < 65",
            Subgroup::Age65Plus => "age >= 65",
            Subgroup::Male => "male",
            Subgroup::Female => "female",
            Subgroup::IntervalWithin3h => "ECG-CCTA <= 3 h",
            Subgroup::IntervalOver3h => "ECG-CCTA > 3 h",
            Subgroup::NormalEcg => "normal ECG",
        }
    }

    /// `Ok(None)` when the record lacks the metadata this criterion needs.
    fn matches(self, r: &CohortRecord) -> Option<bool> {
        const THREE_HOURS: i64 = 3 * 3600;
        match self {
            Subgroup::AgeUnder65 => r.ecg.age.map(|a| a < 65.0),
            Subgroup::Age65Plus => r.ecg.age.map(|a| a >= 65.0),
            Subgroup::Male => r.ecg.sex.map(|s| s == Sex::Male),
            Subgroup::Female => r.ecg.sex.map(|s| s == Sex::Female),
            Subgroup::IntervalWithin3h => Some(r.interval_s() <= THREE_HOURS),
            Subgroup::IntervalOver3h => Some(r.interval_s() > THREE_HOURS),
            Subgroup::NormalEcg => r.ecg.normal_ecg,
        }
    }

    fn field(self) -> &'static str {
        match self {
            Subgroup::AgeUnder65 | Subgroup::Age65Plus => "age",
            Subgroup::Male | Subgroup::Female => "sex",
            Subgroup::IntervalWithin3h | Subgroup::IntervalOver3h => "ecg_time",
            Subgroup::NormalEcg => "normal_ecg",
        }
    }
}

impl FromStr for Subgroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subgroup::ALL
            .into_iter()
            .find(|g| g.key() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subgroup `{s}`")))
    }
}

/// Paired ECG/CCTA records. Immutable once built.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    records: Vec<CohortRecord>,
}

impl Cohort {
    /// Validates unique ids and the ECG-before-CCTA pairing rule.
    pub fn new(records: Vec<CohortRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.ecg.ecg_id.as_str()) {
                return Err(Error::Data(format!("duplicate ecg_id {}", r.ecg.ecg_id)));
            }
            if r.ecg.ecg_time >= r.labels.ccta_time {
                return Err(Error::Data(format!(
                    "{}: ECG time {} is not earlier than CCTA time {}",
                    r.ecg.ecg_id, r.ecg.ecg_time, r.labels.ccta_time
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[CohortRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct patient ids in order of first appearance.
    pub fn patients(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.ecg.patient_id.as_str())
            .filter(|p| seen.insert(*p))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn has_follow_up(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.follow_up.is_some())
    }

    /// Keeps, per patient and CCTA exam, only the ECG closest before the exam.
    pub fn closest_only(&self) -> Cohort {
        let mut best: HashMap<(&str, DateTime<Utc>), usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let key = (r.ecg.patient_id.as_str(), r.labels.ccta_time);
            match best.get(&key) {
                Some(&j) if self.records[j].ecg.ecg_time >= r.ecg.ecg_time => {}
                _ => {
                    best.insert(key, i);
                }
            }
        }
        let mut keep: Vec<usize> = best.into_values().collect();
        keep.sort_unstable();
        self.subset(&keep)
    }

    /// SHA-256 over record metadata and signal bytes, in record order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            let e = &r.ecg;
            let meta = format!(
                "{}|{}|{}|{}|{:?}|{:?}|{:?}|{:?}|{}|{:?}|{}\n",
                e.ecg_id,
                e.patient_id,
                e.fs,
                e.ecg_time.to_rfc3339(),
                e.normal_ecg,
                e.age,
                e.sex,
                r.labels.severity,
                r.labels.ccta_time.to_rfc3339(),
                r.follow_up,
                e.n_samples
            );
            h.update(meta.as_bytes());
            for v in &e.signal {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Indices of records satisfying `criterion`; errors if any record lacks the field.
pub fn subgroup_indices(cohort: &Cohort, criterion: Subgroup) -> Result<Vec<usize>> {
    let mut missing = Vec::new();
    let mut keep = Vec::new();
    for (i, r) in cohort.records.iter().enumerate() {
        match criterion.matches(r) {
            Some(true) => keep.push(i),
            Some(false) => {}
            None => missing.push(r.ecg.ecg_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingMetadata {
            field: criterion.field().to_string(),
            ecg_ids: missing,
        });
    }
    Ok(keep)
}

/// Records satisfying `criterion`; errors if any record lacks the field.
pub fn subgroup_filter(cohort: &Cohort, criterion: Subgroup) -> Result<Cohort> {
    Ok(cohort.subset(&subgroup_indices(cohort, criterion)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn time(h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 3, 1, h, 0, 0).unwrap()
    }

    fn record_with_lead(lead: &[f64]) -> EcgRecord {
        let mut sig = Vec::new();
        for _ in 0..N_LEADS {
            sig.extend_from_slice(lead);
        }
        EcgRecord::new("e", "p", 500.0, time(0), sig).unwrap()
    }

    fn cohort_record(id: &str, patient: &str, ecg_h: u32, ccta_h: u32) -> CohortRecord {
        let mut ecg = record_with_lead(&[0.0, 1.0]);
        ecg.ecg_id = id.into();
        ecg.patient_id = patient.into();
        ecg.ecg_time = time(ecg_h);
        CohortRecord {
            ecg,
            labels: VesselLabels {
                severity: [Severity::Normal; 4],
                ccta_time: time(ccta_h),
            },
            follow_up: None,
        }
    }

    #[test]
    fn zscore_hand_values() {
        let out = zscore_normalize(&record_with_lead(&[1.0, 2.0, 3.0])).unwrap();
        let expected = 1.5f64.sqrt();
        let lead = out.lead(0);
        assert!((lead[0] + expected).abs() < 1e-12);
        assert!(lead[1].abs() < 1e-12);
        assert!((lead[2] - expected).abs() < 1e-12);
    }

    #[test]
    fn zscore_constant_lead_is_zero() {
        let out = zscore_normalize(&record_with_lead(&[5.0, 5.0, 5.0])).unwrap();
        assert!(out.signal().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_too_short() {
        let r = record_with_lead(&[1.0]);
        assert!(zscore_normalize(&r).is_err());
    }

    #[test]
    fn encode_label_table() {
        assert_eq!(encode_labels("occluded").unwrap().code(), 3);
        assert_eq!(encode_labels("severe").unwrap().code(), 3);
        assert_eq!(encode_labels("moderate").unwrap().code(), 2);
        assert_eq!(encode_labels("mild").unwrap().code(), 1);
        assert_eq!(encode_labels("normal").unwrap().code(), 0);
        match encode_labels("blocked") {
            Err(Error::UnknownSeverity(t)) => assert_eq!(t, "blocked"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_labels_is_surjective() {
        let codes: HashSet<u8> = Severity::ALL.iter().map(|s| s.grade().code()).collect();
        assert_eq!(codes, HashSet::from([0, 1, 2, 3]));
    }

    #[test]
    fn pairing_rule_enforced() {
        assert!(Cohort::new(vec![cohort_record("a", "p", 5, 5)]).is_err());
        assert!(Cohort::new(vec![cohort_record("a", "p", 6, 5)]).is_err());
        assert!(Cohort::new(vec![cohort_record("a", "p", 4, 5)]).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![cohort_record("a", "p", 1, 5), cohort_record("a", "q", 1, 5)];
        assert!(Cohort::new(recs).is_err());
    }

    #[test]
    fn interval_boundary_is_inclusive() {
        let c = Cohort::new(vec![
            cohort_record("exact", "p", 2, 5),
            cohort_record("over", "q", 1, 5),
        ])
        .unwrap();
        let within = subgroup_filter(&c, Subgroup::IntervalWithin3h).unwrap();
        assert_eq!(within.records()[0].ecg.ecg_id, "exact");
        assert_eq!(within.len(), 1);
        let over = subgroup_filter(&c, Subgroup::IntervalOver3h).unwrap();
        assert_eq!(over.records()[0].ecg.ecg_id, "over");
    }

    #[test]
    fn age_boundary_and_missing_metadata() {
        let mut a = cohort_record("a", "p", 1, 5);
        a.ecg.age = Some(65.0);
        let mut b = cohort_record("b", "q", 1, 5);
        b.ecg.age = Some(64.0);
        let c = Cohort::new(vec![a.clone(), b]).unwrap();
        let old = subgroup_filter(&c, Subgroup::Age65Plus).unwrap();
        assert_eq!(old.len(), 1);
        assert_eq!(old.records()[0].ecg.ecg_id, "a");

        let c2 = Cohort::new(vec![a, cohort_record("nometa", "r", 1, 5)]).unwrap();
        match subgroup_filter(&c2, Subgroup::Age65Plus) {
            Err(Error::MissingMetadata { field, ecg_ids }) => {
                assert_eq!(field, "age");
                assert_eq!(ecg_ids, vec!["nometa".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normal_ecg_filter() {
        let mut a = cohort_record("a", "p", 1, 5);
        a.ecg.normal_ecg = Some(true);
        let mut b = cohort_record("b", "q", 1, 5);
        b.ecg.normal_ecg = Some(false);
        let c = Cohort::new(vec![a, b]).unwrap();
        let n = subgroup_filter(&c, Subgroup::NormalEcg).unwrap();
        assert_eq!(n.len(), 1);
        assert_eq!(n.records()[0].ecg.normal_ecg, Some(true));
    }

    #[test]
    fn closest_only_keeps_latest_preceding_ecg() {
        let c = Cohort::new(vec![
            cohort_record("early", "p", 1, 9),
            cohort_record("late", "p", 7, 9),
            cohort_record("other", "q", 2, 9),
        ])
        .unwrap();
        let ids: Vec<_> = c
            .closest_only()
            .records()
            .iter()
            .map(|r| r.ecg.ecg_id.clone())
            .collect();
        assert_eq!(ids, vec!["late", "other"]);
    }
}
