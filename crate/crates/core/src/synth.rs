//! Deterministic synthetic 12-lead ECGs and cohorts.
//!
//! Beats are sums of five Gaussian bumps (P, Q, R, S, T) projected onto the
//! twelve leads with per-lead weights. Lesions are planted as an ST-segment
//! offset over R+60..R+140 ms plus T-wave scaling, confined to the
//! vessel's territory leads. Follow-up events are drawn from an exponential
//! hazard that grows with the planted grades.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    Cohort, CohortRecord, EcgRecord, FollowUp, Lead, Severity, Sex, StenosisGrade, Vessel,
    VesselLabels, N_LEADS,
};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// ST window start after the R peak, seconds.
pub const ST_WINDOW_START_S: f64 = 0.060;
/// ST window end after the R peak, seconds.
pub const ST_WINDOW_END_S: f64 = 0.140;
const ST_TAPER_S: f64 = 0.020;

/// ST offset (mV) per grade.
pub const ST_OFFSET_MV: [f64; 4] = [0.0, 0.03, 0.06, 0.18];
/// T-wave multiplier per grade; negative means inverted.
pub const T_FACTOR: [f64; 4] = [1.0, 0.85, 0.6, -0.4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude_mv: f64,
    /// Offset from the R peak in seconds.
    pub center_s: f64,
    pub width_s: f64,
}

/// P, Q, R, S, T bumps and their per-lead projection weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatTemplate {
    pub waves: [Wave; 5],
    pub lead_weights: [[f64; 5]; N_LEADS],
}

const P: usize = 0;
const Q: usize = 1;
const R: usize = 2;
const S: usize = 3;
const T: usize = 4;

impl Default for BeatTemplate {
    fn default() -> Self {
        let w = |amplitude_mv, center_s, width_s| Wave {
            amplitude_mv,
            center_s,
            width_s,
        };
        Self {
            waves: [
                w(0.15, -0.18, 0.025),
                w(-0.12, -0.030, 0.010),
                w(1.2, 0.0, 0.012),
                w(-0.30, 0.032, 0.011),
                w(0.30, 0.28, 0.050),
            ],
            lead_weights: [
                [0.6, 0.5, 0.6, 0.4, 0.6],
                [1.0, 1.0, 1.0, 1.0, 1.0],
                [0.4, 0.5, 0.5, 0.6, 0.4],
                [-0.8, -0.6, -0.8, -0.5, -0.8],
                [0.1, 0.3, 0.25, 0.4, 0.2],
                [0.7, 0.7, 0.75, 0.8, 0.7],
                [0.3, 0.0, 0.25, 3.0, 0.2],
                [0.4, 0.0, 0.6, 3.0, 1.0],
                [0.4, 0.2, 1.0, 2.0, 1.1],
                [0.4, 0.4, 1.3, 1.2, 1.0],
                [0.4, 0.6, 1.2, 0.6, 0.8],
                [0.4, 0.6, 1.0, 0.3, 0.7],
            ],
        }
    }
}

impl BeatTemplate {
    pub fn validate(&self) -> Result<()> {
        let r = self.waves[R].amplitude_mv;
        if r <= self.waves[Q].amplitude_mv.abs() || r <= self.waves[S].amplitude_mv.abs() {
            return Err(Error::InvalidArgument(
                "R amplitude must exceed |Q| and |S|".into(),
            ));
        }
        if !self.waves.windows(2).all(|p| p[0].center_s < p[1].center_s) {
            return Err(Error::InvalidArgument(
                "wave centers must be ordered P<Q<R<S<T".into(),
            ));
        }
        if self.waves.iter().any(|w| w.width_s <= 0.0) {
            return Err(Error::InvalidArgument(
                "wave widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Center of wave `i` for a beat with the given RR interval. P and T
    /// stretch with sqrt(RR).
    fn center(&self, i: usize, rr: f64) -> f64 {
        match i {
            P | T => self.waves[i].center_s * rr.sqrt(),
            _ => self.waves[i].center_s,
        }
    }

    fn wave_value(&self, i: usize, lead: usize, dt: f64, rr: f64) -> f64 {
        let w = &self.waves[i];
        let x = (dt - self.center(i, rr)) / w.width_s;
        if x.abs() > 8.0 {
            return 0.0;
        }
        self.lead_weights[lead][i] * w.amplitude_mv * (-0.5 * x * x).exp()
    }

    /// Largest distance from R at which any wave is non-negligible.
    fn support_s(&self, rr: f64) -> f64 {
        (0..5)
            .map(|i| self.center(i, rr).abs() + 8.0 * self.waves[i].width_s)
            .fold(0.0, f64::max)
    }
}

/// Territory of a vessel: (lead, ST sign, relative weight).
#[derive(Clone, Debug, PartialEq)]
pub struct LesionSignature {
    pub vessel: Vessel,
    pub territory: Vec<(Lead, f64, f64)>,
}

impl LesionSignature {
    pub fn for_vessel(vessel: Vessel) -> Self {
        use Lead::*;
        let territory = match vessel {
            Vessel::Rca => vec![(II, 1.0, 1.0), (III, 1.0, 1.0), (AVF, 1.0, 1.0)],
            Vessel::Lad => vec![
                (V1, 1.0, 1.0),
                (V2, 1.0, 1.0),
                (V3, 1.0, 1.0),
                (V4, 1.0, 1.0),
            ],
            Vessel::Lcx => vec![
                (I, -1.0, 1.0),
                (AVL, -1.0, 1.0),
                (V5, -1.0, 1.0),
                (V6, -1.0, 1.0),
            ],
            Vessel::Lm => vec![
                (AVR, 1.0, 1.0),
                (I, -1.0, 0.5),
                (II, -1.0, 0.5),
                (AVL, -1.0, 0.5),
                (V4, -1.0, 0.5),
                (V5, -1.0, 0.5),
                (V6, -1.0, 0.5),
            ],
        };
        Self { vessel, territory }
    }

    pub fn leads(&self) -> impl Iterator<Item = Lead> + '_ {
        self.territory.iter().map(|t| t.0)
    }

    pub fn st_offset_mv(grade: StenosisGrade) -> f64 {
        ST_OFFSET_MV[grade.code() as usize]
    }

    pub fn t_factor(grade: StenosisGrade) -> f64 {
        T_FACTOR[grade.code() as usize]
    }
}

/// Flat-topped ST window with cosine tapers; `dt` is time after R.
pub fn st_window(dt: f64) -> f64 {
    let (a, b) = (ST_WINDOW_START_S, ST_WINDOW_END_S);
    if dt < a - ST_TAPER_S || dt > b + ST_TAPER_S {
        0.0
    } else if dt < a {
        0.5 - 0.5 * (std::f64::consts::PI * (dt - a + ST_TAPER_S) / ST_TAPER_S).cos()
    } else if dt <= b {
        1.0
    } else {
        0.5 + 0.5 * (std::f64::consts::PI * (dt - b) / ST_TAPER_S).cos()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEcgParams {
    pub heart_rate_bpm: f64,
    pub duration_s: f64,
    pub fs: f64,
    pub noise_mv: f64,
    /// Relative RR jitter, at most 0.05.
    pub rr_jitter: f64,
    pub template: BeatTemplate,
}

impl Default for SynthEcgParams {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 60.0,
            duration_s: 10.0,
            fs: 500.0,
            noise_mv: 0.0,
            rr_jitter: 0.03,
            template: BeatTemplate::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Beat {
    pub r_index: usize,
    pub rr_s: f64,
}

/// A generated record plus the ground truth needed to modify it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEcg {
    pub record: EcgRecord,
    pub beats: Vec<Beat>,
    pub template: BeatTemplate,
}

impl SyntheticEcg {
    pub fn r_peaks(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.r_index).collect()
    }
}

fn synth_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

pub fn synth_ecg(params: &SynthEcgParams, seed: u64) -> Result<SyntheticEcg> {
    let bpm = params.heart_rate_bpm;
    if !(30.0..=200.0).contains(&bpm) {
        return Err(Error::InvalidArgument(format!(
            "heart rate {bpm} outside 30..=200 bpm"
        )));
    }
    if params.fs < 100.0 {
        return Err(Error::InvalidArgument(format!(
            "fs {} below 100 Hz",
            params.fs
        )));
    }
    if !(params.duration_s > 0.0) || !(0.0..=0.05).contains(&params.rr_jitter) {
        return Err(Error::InvalidArgument(
            "invalid duration or RR jitter".into(),
        ));
    }
    if !(params.noise_mv >= 0.0) {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    params.template.validate()?;

    let fs = params.fs;
    let n = (params.duration_s * fs).round() as usize;
    let rr_mean = 60.0 / bpm;
    let mut rng = rng::keyed(seed, &[stream::SYNTH_ECG]);
    let mut beats = Vec::new();
    let mut t = rr_mean * rng.random_range(0.3..0.8);
    while (t * fs).round() < n as f64 {
        let rr = rr_mean * (1.0 + params.rr_jitter * rng.random_range(-1.0..=1.0));
        beats.push(Beat {
            r_index: (t * fs).round() as usize,
            rr_s: rr,
        });
        t += rr;
    }

    let mut signal = vec![0.0; N_LEADS * n];
    for beat in &beats {
        add_beat(
            &mut signal,
            n,
            fs,
            beat,
            |lead, dt| {
                (0..5)
                    .map(|i| params.template.wave_value(i, lead, dt, beat.rr_s))
                    .sum()
            },
            params.template.support_s(beat.rr_s),
        );
    }
    if params.noise_mv > 0.0 {
        let normal =
            Normal::new(0.0, params.noise_mv).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in signal.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let record = EcgRecord::new(
        format!("synth-{seed}"),
        format!("synth-{seed}"),
        fs,
        synth_time(),
        signal,
    )?;
    Ok(SyntheticEcg {
        record,
        beats,
        template: params.template.clone(),
    })
}

/// Adds `f(lead, dt)` around one beat, for samples within `support` seconds of R.
fn add_beat(
    signal: &mut [f64],
    n: usize,
    fs: f64,
    beat: &Beat,
    f: impl Fn(usize, f64) -> f64,
    support: f64,
) {
    let r_t = beat.r_index as f64 / fs;
    let lo = ((r_t - support) * fs).floor().max(0.0) as usize;
    let hi = (((r_t + support) * fs).ceil() as usize).min(n.saturating_sub(1));
    for lead in 0..N_LEADS {
        let row = &mut signal[lead * n..(lead + 1) * n];
        for (i, slot) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *slot += f(lead, i as f64 / fs - r_t);
        }
    }
}

/// Applies the vessel's ST offset and T scaling to its territory leads.
/// Grade 0 returns the input unchanged.
pub fn plant_lesion(
    ecg: &SyntheticEcg,
    vessel: Vessel,
    grade: StenosisGrade,
    seed: u64,
) -> SyntheticEcg {
    plant_lesion_scaled(ecg, vessel, grade, 1.0, seed)
}

/// As [`plant_lesion`], with the ST offset and T change multiplied by
/// `expression` (0 leaves the ECG silent).
pub fn plant_lesion_scaled(
    ecg: &SyntheticEcg,
    vessel: Vessel,
    grade: StenosisGrade,
    expression: f64,
    seed: u64,
) -> SyntheticEcg {
    let mut out = ecg.clone();
    if grade.code() == 0 {
        return out;
    }
    let mut rng = rng::keyed(seed, &[stream::LESION, vessel.index() as u64]);
    let jitter = 1.0 + 0.15 * rng.random_range(-1.0..=1.0);
    let st = LesionSignature::st_offset_mv(grade) * jitter * expression;
    let tf = 1.0 + (LesionSignature::t_factor(grade) - 1.0) * expression;
    let sig = LesionSignature::for_vessel(vessel);
    let n = out.record.n_samples();
    let fs = out.record.fs;
    let template = &ecg.template;
    let signal = out.record.signal_mut();
    for beat in &ecg.beats {
        let support = template
            .support_s(beat.rr_s)
            .max(ST_WINDOW_END_S + ST_TAPER_S);
        let r_t = beat.r_index as f64 / fs;
        let lo = ((r_t - support) * fs).floor().max(0.0) as usize;
        let hi = (((r_t + support) * fs).ceil() as usize).min(n.saturating_sub(1));
        for &(lead, sign, weight) in &sig.territory {
            let li = lead.index();
            let row = &mut signal[li * n..(li + 1) * n];
            let t_scale = weight * (tf - 1.0);
            for (i, slot) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let dt = i as f64 / fs - r_t;
                *slot += sign * weight * st * st_window(dt)
                    + t_scale * template.wave_value(T, li, dt, beat.rr_s);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortParams {
    pub n_patients: usize,
    /// Per-vessel prevalence of the severe grade, in head order RCA, LM, LAD, LCX.
    pub prevalence: [f64; 4],
    pub followup_days: u32,
    pub fs: f64,
    pub duration_s: f64,
    pub noise_mv: f64,
    /// Fraction of patients with a second ECG before the same CCTA.
    pub second_ecg_fraction: f64,
    /// Range of the per-patient, per-vessel factor on lesion signatures.
    pub lesion_expression: [f64; 2],
}

impl Default for CohortParams {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            prevalence: [0.20, 0.02, 0.20, 0.20],
            followup_days: 365,
            fs: 500.0,
            duration_s: 10.0,
            noise_mv: 0.04,
            second_ecg_fraction: 0.3,
            lesion_expression: [0.2, 1.0],
        }
    }
}

/// Yearly event probability with no severe vessel.
const BASELINE_YEAR_RISK: f64 = 0.04;
const HAZARD_LOG_RATIO: f64 = 1.6;

fn draw_severity(rng: &mut rng::Rng, prevalence: f64) -> Severity {
    if rng.random::<f64>() < prevalence {
        if rng.random::<f64>() < 0.3 {
            Severity::Occluded
        } else {
            Severity::Severe
        }
    } else {
        let u: f64 = rng.random();
        if u < 0.55 {
            Severity::Normal
        } else if u < 0.85 {
            Severity::Mild
        } else {
            Severity::Moderate
        }
    }
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn synth_cohort(params: &CohortParams, seed: u64) -> Result<Cohort> {
    if params.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!(
            "prevalences must lie in [0, 1], got {:?}",
            params.prevalence
        )));
    }
    let [e_lo, e_hi] = params.lesion_expression;
    if !(0.0 <= e_lo && e_lo <= e_hi && e_hi.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lesion_expression must be an ordered non-negative range, got {:?}",
            params.lesion_expression
        )));
    }
    if params.followup_days == 0 {
        return Err(Error::InvalidArgument(
            "followup_days must be positive".into(),
        ));
    }
    let start = synth_time();
    let mut records = Vec::new();
    for p in 0..params.n_patients {
        let mut rng = rng::keyed(seed, &[stream::SYNTH_PATIENT, p as u64]);
        let patient_id = format!("P{p:05}");
        let age = rng.random_range(35..=85) as f64;
        let sex = if rng.random::<bool>() {
            Sex::Male
        } else {
            Sex::Female
        };
        let severity = params.prevalence.map(|prev| draw_severity(&mut rng, prev));
        let grades = severity.map(Severity::grade);
        let any_severe = grades.iter().any(|g| g.is_severe());
        let ccta_time = start + Duration::seconds(rng.random_range(0..730 * 86_400));
        let n_ecgs = if rng.random::<f64>() < params.second_ecg_fraction {
            2
        } else {
            1
        };

        let score = grades.iter().filter(|g| g.is_severe()).count() as f64
            + 0.35 * grades.iter().filter(|g| g.code() == 2).count() as f64;
        let base_rate = -(1.0 - BASELINE_YEAR_RISK).ln() / 365.0;
        let rate = base_rate * (HAZARD_LOG_RATIO * score).exp();
        let event_day = Exp::new(rate)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(&mut rng);
        let window = params.followup_days as f64;
        let censor_day = if rng.random::<f64>() < 0.1 {
            rng.random_range(30.0..window)
        } else {
            window
        };
        let follow_up = if event_day <= censor_day {
            FollowUp {
                event: true,
                days: (event_day.ceil() as u32).max(1),
            }
        } else {
            FollowUp {
                event: false,
                days: censor_day.floor() as u32,
            }
        };

        let normal_p = if any_severe { 0.35 } else { 0.6 };
        let mut template = BeatTemplate::default();
        for lead in template.lead_weights.iter_mut() {
            for w in lead.iter_mut() {
                *w *= 1.0 + 0.15 * rng.random_range(-1.0..=1.0);
            }
        }
        let amp = rng.random_range(0.8..1.25);
        for w in template.waves.iter_mut() {
            w.amplitude_mv *= amp;
        }
        let lesion_seed = rng.random::<u64>();
        let [e_lo, e_hi] = params.lesion_expression;
        let expression: [f64; 4] =
            std::array::from_fn(|_| e_lo + (e_hi - e_lo) * rng.random::<f64>());

        for j in 0..n_ecgs {
            let within_3h = rng.random::<bool>();
            let interval_s = if within_3h {
                rng.random_range(600..=3 * 3600)
            } else {
                rng.random_range(3 * 3600 + 1..=30 * 86_400)
            };
            let ecg_params = SynthEcgParams {
                heart_rate_bpm: rng.random_range(55.0..95.0),
                duration_s: params.duration_s,
                fs: params.fs,
                noise_mv: params.noise_mv,
                rr_jitter: 0.03,
                template: template.clone(),
            };
            let ecg_seed = rng::derive_seed(seed, &[stream::SYNTH_ECG, p as u64, j as u64]);
            let mut ecg = synth_ecg(&ecg_params, ecg_seed)?;
            for v in Vessel::ALL {
                ecg = plant_lesion_scaled(
                    &ecg,
                    v,
                    grades[v.index()],
                    expression[v.index()],
                    lesion_seed,
                );
            }
            let mut record = ecg.record;
            record
                .signal_mut()
                .iter_mut()
                .for_each(|v| *v = quantize_f32(*v));
            record.ecg_id = format!("{patient_id}-E{j}");
            record.patient_id = patient_id.clone();
            record.ecg_time = ccta_time - Duration::seconds(interval_s);
            record.normal_ecg = Some(rng.random::<f64>() < normal_p);
            record.age = Some(age);
            record.sex = Some(sex);
            records.push(CohortRecord {
                ecg: record,
                labels: VesselLabels {
                    severity,
                    ccta_time,
                },
                follow_up: Some(follow_up),
            });
        }
    }
    Cohort::new(records)
}
