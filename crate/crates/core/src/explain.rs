//! Waveform-level interpretability: R-peak detection, beat segmentation,
//! per-group mean/std beat morphology and ST-window separation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cohort::{EcgRecord, Lead, N_LEADS};
use crate::error::{Error, Result};
use crate::survival::RiskGroup;
use crate::synth::{ST_WINDOW_END_S, ST_WINDOW_START_S};

pub const BEAT_PRE_S: f64 = 0.250;
pub const BEAT_POST_S: f64 = 0.400;
pub const BEAT_SAMPLES: usize = 256;

const DETECT_LEAD: Lead = Lead::II;
const REFRACTORY_S: f64 = 0.200;
const INTEGRATION_S: f64 = 0.150;
const REFINE_S: f64 = 0.050;

/// Second-order section `b0 b1 b2 / 1 a1 a2`.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Butterworth (Q = 1/sqrt 2) sections from the bilinear transform.
    fn butterworth(cutoff_hz: f64, fs: f64, high_pass: bool) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        let b = if high_pass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: b.map(|v| v / a0),
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y =
                self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }

    /// Forward then backward pass: zero phase, squared magnitude response.
    fn filtfilt(&self, x: &mut [f64]) {
        self.run(x);
        x.reverse();
        self.run(x);
        x.reverse();
    }
}

/// Mirror image about each end sample, `pad` samples per side.
fn reflect_pad(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    (1..=pad)
        .rev()
        .map(|k| signal[k])
        .chain(signal.iter().copied())
        .chain((1..=pad).map(|k| signal[n - 1 - k]))
        .collect()
}

fn edge_pad(n: usize, fs: f64) -> usize {
    ((0.5 * fs).round() as usize).min(n.saturating_sub(1))
}

fn bandpass_in_place(x: &mut [f64], fs: f64) {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    Biquad::butterworth(5.0, fs, true).filtfilt(x);
    Biquad::butterworth(15.0, fs, false).filtfilt(x);
}

/// 5-15 Hz zero-phase band-pass. The record is mirrored at both ends so a
/// QRS at the edge survives the filter start-up transient.
pub fn bandpass(signal: &[f64], fs: f64) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = edge_pad(n, fs);
    let mut x = reflect_pad(signal, pad);
    bandpass_in_place(&mut x, fs);
    x[pad..pad + n].to_vec()
}

/// Band-pass, five-point derivative, squaring and a centred moving-window
/// integration, all computed on the reflected record and then cropped.
pub fn qrs_energy(signal: &[f64], fs: f64) -> Vec<f64> {
    let len = signal.len();
    if len == 0 {
        return Vec::new();
    }
    let pad = edge_pad(len, fs);
    let mut bp = reflect_pad(signal, pad);
    bandpass_in_place(&mut bp, fs);
    let n = bp.len();
    let at = |i: isize| bp[i.clamp(0, n as isize - 1) as usize];
    let sq: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) * fs / 8.0;
            d * d
        })
        .collect();
    let w = ((INTEGRATION_S * fs).round() as usize).max(1);
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sq[i];
    }
    (pad..pad + len)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(n);
            (prefix[hi] - prefix[lo]) / w as f64
        })
        .collect()
}

/// Interior peaks plus either end when the signal climbs toward it, so a
/// beat cut off by the record edge still yields a candidate.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let n = x.len();
    if n < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    if x[0] > x[1] {
        out.push(0);
    }
    out.extend((1..n - 1).filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1]));
    if x[n - 1] > x[n - 2] {
        out.push(n - 1);
    }
    out
}

/// R-peak sample indices on lead II, sorted.
pub fn detect_r_peaks(record: &EcgRecord) -> Result<Vec<usize>> {
    let fs = record.fs;
    if fs < 100.0 {
        return Err(Error::InvalidArgument(format!(
            "R-peak detection needs fs >= 100 Hz, got {fs}"
        )));
    }
    if record.duration_s() < 2.0 {
        return Err(Error::InvalidArgument(format!(
            "record {} lasts {:.2} s; at least 2 s are needed",
            record.ecg_id,
            record.duration_s()
        )));
    }
    let raw = record.lead(DETECT_LEAD.index());
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi - lo < 1e-9 {
        return Ok(Vec::new());
    }
    let energy = qrs_energy(raw, fs);
    let candidates = local_maxima(&energy);
    if candidates.is_empty() {
        return Ok(Vec::new());
    }

    let learn = ((2.0 * fs) as usize).min(energy.len());
    let learn_max = energy[..learn].iter().cloned().fold(0.0, f64::max);
    let learn_mean = energy[..learn].iter().sum::<f64>() / learn as f64;
    let mut spki = 0.25 * learn_max;
    let mut npki = 0.5 * learn_mean;
    let refractory = (REFRACTORY_S * fs).round() as usize;

    let mut qrs: Vec<usize> = Vec::new();
    let mut rr_mean: Option<f64> = None;
    let mut last_search = 0usize;
    let mut ci = 0;
    while ci < candidates.len() {
        let c = candidates[ci];
        let threshold = npki + 0.25 * (spki - npki);

        // search back for a missed beat when the gap grows too long
        if let (Some(&last), Some(rr)) = (qrs.last(), rr_mean) {
            if (c - last) as f64 > 1.66 * rr && last >= last_search {
                last_search = c;
                let missed = candidates[..ci]
                    .iter()
                    .copied()
                    .filter(|&m| {
                        m > last + refractory && c >= m + refractory && energy[m] > 0.5 * threshold
                    })
                    .max_by(|&a, &b| energy[a].total_cmp(&energy[b]));
                if let Some(m) = missed {
                    spki = 0.25 * energy[m] + 0.75 * spki;
                    qrs.push(m);
                    continue;
                }
            }
        }

        let e = energy[c];
        if e > threshold && qrs.last().is_none_or(|&l| c >= l + refractory) {
            spki = 0.125 * e + 0.875 * spki;
            if let Some(&l) = qrs.last() {
                let rr = (c - l) as f64;
                rr_mean = Some(rr_mean.map_or(rr, |m| 0.875 * m + 0.125 * rr));
            }
            qrs.push(c);
        } else if e > threshold {
            // inside the refractory period: keep the stronger of the two
            let l = qrs.last_mut().expect("checked above");
            if e > energy[*l] {
                *l = c;
            }
        } else {
            npki = 0.125 * e + 0.875 * npki;
        }
        ci += 1;
    }

    let radius = (REFINE_S * fs).round() as usize;
    let mut peaks: Vec<usize> = qrs
        .iter()
        .map(|&c| {
            // slide the window inward at the record edges so it keeps its width
            let last = raw.len() - 1;
            let lo = c
                .saturating_sub(radius)
                .min(last.saturating_sub(2 * radius));
            let hi = (lo + 2 * radius).min(last);
            (lo..=hi)
                .max_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(b.cmp(&a)))
                .expect("non-empty")
        })
        .collect();
    peaks.sort_unstable();
    let mut out: Vec<usize> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match out.last_mut() {
            Some(l) if p < *l + refractory => {
                if raw[p] > raw[*l] {
                    *l = p;
                }
            }
            _ => out.push(p),
        }
    }
    Ok(out)
}

/// Aligned, resampled and per-lead z-scored beats of one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatMatrix {
    pub ecg_id: String,
    /// R peaks whose windows fit inside the record.
    pub peaks: Vec<usize>,
    /// `[beat][lead][sample]`, flattened.
    pub data: Vec<f64>,
}

impl BeatMatrix {
    pub fn n_beats(&self) -> usize {
        self.peaks.len()
    }

    pub fn beat(&self, b: usize, lead: usize) -> &[f64] {
        let off = (b * N_LEADS + lead) * BEAT_SAMPLES;
        &self.data[off..off + BEAT_SAMPLES]
    }
}

/// Offset of resampled point `k` from the R peak, in seconds.
pub fn beat_time_s(k: usize) -> f64 {
    -BEAT_PRE_S + k as f64 * (BEAT_PRE_S + BEAT_POST_S) / (BEAT_SAMPLES - 1) as f64
}

/// Resampled indices whose time falls in the ST window.
pub fn st_window_indices() -> std::ops::RangeInclusive<usize> {
    let eps = 1e-12;
    let first = (0..BEAT_SAMPLES)
        .find(|&k| beat_time_s(k) >= ST_WINDOW_START_S - eps)
        .expect("inside window");
    let last = (0..BEAT_SAMPLES)
        .rev()
        .find(|&k| beat_time_s(k) <= ST_WINDOW_END_S + eps)
        .expect("inside window");
    first..=last
}

fn zscore_in_place(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        x.iter_mut().for_each(|v| *v = 0.0);
    } else {
        x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

pub fn segment_beats(record: &EcgRecord, r_peaks: &[usize]) -> BeatMatrix {
    let fs = record.fs;
    let n = record.n_samples();
    let pre = BEAT_PRE_S * fs;
    let span = (BEAT_PRE_S + BEAT_POST_S) * fs;
    let mut peaks = Vec::new();
    let mut data = Vec::new();
    for &r in r_peaks {
        let start = r as f64 - pre;
        if start < 0.0 || start + span > (n - 1) as f64 {
            continue;
        }
        peaks.push(r);
        for lead in record.leads() {
            let mut row: Vec<f64> = (0..BEAT_SAMPLES)
                .map(|k| {
                    let pos = start + k as f64 * span / (BEAT_SAMPLES - 1) as f64;
                    let i = pos.floor() as usize;
                    let frac = pos - i as f64;
                    if frac == 0.0 || i + 1 >= n {
                        lead[i.min(n - 1)]
                    } else {
                        lead[i] + frac * (lead[i + 1] - lead[i])
                    }
                })
                .collect();
            zscore_in_place(&mut row);
            data.extend(row);
        }
    }
    BeatMatrix {
        ecg_id: record.ecg_id.clone(),
        peaks,
        data,
    }
}

/// Detects peaks and segments in one call.
pub fn record_beats(record: &EcgRecord) -> Result<BeatMatrix> {
    let peaks = detect_r_peaks(record)?;
    Ok(segment_beats(record, &peaks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWaveform {
    pub group: RiskGroup,
    pub n_records: usize,
    pub n_beats: usize,
    /// `[lead][sample]`, flattened.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GroupWaveform {
    pub fn mean_lead(&self, lead: usize) -> &[f64] {
        &self.mean[lead * BEAT_SAMPLES..(lead + 1) * BEAT_SAMPLES]
    }

    pub fn std_lead(&self, lead: usize) -> &[f64] {
        &self.std[lead * BEAT_SAMPLES..(lead + 1) * BEAT_SAMPLES]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformSummary {
    pub groups: Vec<GroupWaveform>,
    pub warnings: Vec<String>,
}

impl WaveformSummary {
    pub fn group(&self, g: RiskGroup) -> Option<&GroupWaveform> {
        self.groups.iter().find(|w| w.group == g)
    }
}

/// Pointwise mean and population std over all beats of each group.
/// Records are visited in `ecg_id` order so the result does not depend on
/// input order.
pub fn group_waveforms(beats: &[BeatMatrix], groups: &[RiskGroup]) -> Result<WaveformSummary> {
    if beats.len() != groups.len() {
        return Err(Error::Shape(format!(
            "{} beat matrices for {} group labels",
            beats.len(),
            groups.len()
        )));
    }
    let mut order: Vec<usize> = (0..beats.len()).collect();
    order.sort_by(|&a, &b| beats[a].ecg_id.cmp(&beats[b].ecg_id));
    let width = N_LEADS * BEAT_SAMPLES;
    let mut out = WaveformSummary {
        groups: Vec::new(),
        warnings: Vec::new(),
    };
    for g in [RiskGroup::High, RiskGroup::Low] {
        let members: Vec<&BeatMatrix> = order
            .iter()
            .filter(|&&i| groups[i] == g)
            .map(|&i| &beats[i])
            .collect();
        let n_beats: usize = members.iter().map(|m| m.n_beats()).sum();
        if n_beats == 0 {
            out.warnings
                .push(format!("{g} risk group has no beats; omitted"));
            continue;
        }
        // deviations from the first beat keep identical beats exactly flat
        let reference = members
            .iter()
            .find(|m| m.n_beats() > 0)
            .map(|m| m.data[..width].to_vec())
            .expect("n_beats > 0");
        let mut dev_mean = vec![0.0; width];
        for m in &members {
            for beat in m.data.chunks_exact(width) {
                for ((a, v), r) in dev_mean.iter_mut().zip(beat).zip(&reference) {
                    *a += v - r;
                }
            }
        }
        dev_mean.iter_mut().for_each(|a| *a /= n_beats as f64);
        let mut var = vec![0.0; width];
        for m in &members {
            for beat in m.data.chunks_exact(width) {
                for (((a, v), r), d) in var.iter_mut().zip(beat).zip(&reference).zip(&dev_mean) {
                    let x = (v - r) - d;
                    *a += x * x;
                }
            }
        }
        let mean = reference
            .iter()
            .zip(&dev_mean)
            .map(|(r, d)| r + d)
            .collect();
        let std = var
            .into_iter()
            .map(|v| (v / n_beats as f64).sqrt())
            .collect();
        out.groups.push(GroupWaveform {
            group: g,
            n_records: members.len(),
            n_beats,
            mean,
            std,
        });
    }
    Ok(out)
}

/// ST-window contrast between risk groups in one lead, with records as
/// the sampling unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StSeparation {
    pub lead: Lead,
    pub mean_high: f64,
    pub mean_low: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub pooled_se: f64,
    /// `|mean_high - mean_low| / pooled_se`.
    pub ratio: f64,
}

pub fn st_level(m: &BeatMatrix, lead: Lead) -> Option<f64> {
    if m.n_beats() == 0 {
        return None;
    }
    let window = st_window_indices();
    let width = window.clone().count() as f64;
    let total: f64 = (0..m.n_beats())
        .map(|b| m.beat(b, lead.index())[window.clone()].iter().sum::<f64>() / width)
        .sum();
    Some(total / m.n_beats() as f64)
}

pub fn st_separation(
    beats: &[BeatMatrix],
    groups: &[RiskGroup],
    lead: Lead,
) -> Result<StSeparation> {
    if beats.len() != groups.len() {
        return Err(Error::Shape(
            "beat matrices and groups differ in length".into(),
        ));
    }
    let collect = |g: RiskGroup| -> Vec<f64> {
        let mut v: Vec<(&str, f64)> = beats
            .iter()
            .zip(groups)
            .filter(|(_, &x)| x == g)
            .filter_map(|(m, _)| Some((m.ecg_id.as_str(), st_level(m, lead)?)))
            .collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter().map(|(_, x)| x).collect()
    };
    let high = collect(RiskGroup::High);
    let low = collect(RiskGroup::Low);
    if high.len() < 2 || low.len() < 2 {
        return Err(Error::Undefined(format!(
            "ST separation needs two records per group, got {} high and {} low",
            high.len(),
            low.len()
        )));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var, n)
    };
    let (mh, vh, nh) = stats(&high);
    let (ml, vl, nl) = stats(&low);
    let pooled_var = ((nh - 1.0) * vh + (nl - 1.0) * vl) / (nh + nl - 2.0);
    let pooled_se = (pooled_var * (1.0 / nh + 1.0 / nl)).sqrt();
    Ok(StSeparation {
        lead,
        mean_high: mh,
        mean_low: ml,
        n_high: high.len(),
        n_low: low.len(),
        pooled_se,
        ratio: if pooled_se > 0.0 {
            (mh - ml).abs() / pooled_se
        } else {
            f64::INFINITY
        },
    })
}

/// `lead,group,sample,t_ms,mean,std`: one row per lead, sample and group.
pub fn waveform_csv(summary: &WaveformSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("waveform csv: {e}"));
    w.write_record(["lead", "group", "sample", "t_ms", "mean", "std"])
        .map_err(err)?;
    for lead in Lead::ALL {
        for g in &summary.groups {
            let (mean, std) = (g.mean_lead(lead.index()), g.std_lead(lead.index()));
            for k in 0..BEAT_SAMPLES {
                w.write_record([
                    lead.name().to_string(),
                    g.group.key().to_string(),
                    k.to_string(),
                    format!("{:.3}", beat_time_s(k) * 1000.0),
                    mean[k].to_string(),
                    std[k].to_string(),
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
    use crate::synth::{synth_ecg, SynthEcgParams};
    use chrono::{TimeZone, Utc};

    fn flat(seconds: f64) -> EcgRecord {
        let n = (seconds * 500.0) as usize;
        EcgRecord::new(
            "flat",
            "p",
            500.0,
            Utc.timestamp_opt(0, 0).unwrap(),
            vec![0.3; N_LEADS * n],
        )
        .unwrap()
    }

    #[test]
    fn butterworth_gains() {
        let fs = 500.0;
        let tone = |f: f64| -> Vec<f64> {
            (0..5000)
                .map(|i| (2.0 * PI * f * i as f64 / fs).sin())
                .collect()
        };
        let rms = |x: &[f64]| (x[1000..4000].iter().map(|v| v * v).sum::<f64>() / 3000.0).sqrt();
        let pass = bandpass(&tone(9.0), fs);
        let stop = bandpass(&tone(60.0), fs);
        assert!(rms(&pass) > 0.6 * rms(&tone(9.0)));
        assert!(rms(&stop) < 0.05 * rms(&tone(60.0)));
    }

    #[test]
    fn flat_line_has_no_peaks() {
        assert!(detect_r_peaks(&flat(4.0)).unwrap().is_empty());
        assert!(detect_r_peaks(&flat(1.5)).is_err());
    }

    #[test]
    fn clean_record_detection() {
        let ecg = synth_ecg(&SynthEcgParams::default(), 5).unwrap();
        let found = detect_r_peaks(&ecg.record).unwrap();
        let truth = ecg.r_peaks();
        let tol = (0.030 * ecg.record.fs) as usize;
        assert_eq!(found.len(), truth.len());
        for (f, t) in found.iter().zip(&truth) {
            assert!(f.abs_diff(*t) <= tol, "{f} vs {t}");
        }
    }

    #[test]
    fn st_window_maps_to_resampled_indices() {
        let w = st_window_indices();
        assert!(beat_time_s(*w.start()) >= ST_WINDOW_START_S - 1e-12);
        assert!(beat_time_s(*w.start() - 1) < ST_WINDOW_START_S);
        assert!(beat_time_s(*w.end()) <= ST_WINDOW_END_S + 1e-12);
        assert!(beat_time_s(*w.end() + 1) > ST_WINDOW_END_S);
    }

    #[test]
    fn boundary_beats_are_dropped() {
        let ecg = synth_ecg(&SynthEcgParams::default(), 1).unwrap();
        let mut peaks = vec![0];
        peaks.extend(ecg.r_peaks());
        peaks.push(ecg.record.n_samples() - 1);
        let m = segment_beats(&ecg.record, &peaks);
        assert!(!m.peaks.contains(&0));
        assert!(!m.peaks.contains(&(ecg.record.n_samples() - 1)));
        assert_eq!(m.data.len(), m.n_beats() * N_LEADS * BEAT_SAMPLES);
    }

    #[test]
    fn beats_are_z_scored() {
        let ecg = synth_ecg(&SynthEcgParams::default(), 2).unwrap();
        let m = segment_beats(&ecg.record, &ecg.r_peaks());
        for b in 0..m.n_beats() {
            for l in 0..N_LEADS {
                let x = m.beat(b, l);
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                let sd =
                    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
                assert!(mean.abs() <= 1e-9 && (sd - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn identical_beats_have_zero_spread() {
        let p = SynthEcgParams {
            rr_jitter: 0.0,
            ..SynthEcgParams::default()
        };
        let ecg = synth_ecg(&p, 0).unwrap();
        let m = segment_beats(&ecg.record, &ecg.r_peaks());
        assert!(m.n_beats() >= 8);
        for b in 1..m.n_beats() {
            for l in 0..N_LEADS {
                let d = m
                    .beat(b, l)
                    .iter()
                    .zip(m.beat(0, l))
                    .map(|(a, c)| (a - c).abs())
                    .fold(0.0, f64::max);
                assert!(d <= 1e-6);
            }
        }
        let s = group_waveforms(std::slice::from_ref(&m), &[RiskGroup::High]).unwrap();
        assert!(s
            .group(RiskGroup::High)
            .unwrap()
            .std
            .iter()
            .all(|&v| v <= 1e-6));
        assert_eq!(s.warnings.len(), 1);
    }
}
