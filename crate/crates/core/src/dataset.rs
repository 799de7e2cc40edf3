//! On-disk dataset directory: `cohort.json`, per-record signal files and a
//! manifest with the cohort digest.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    Cohort, CohortRecord, EcgRecord, FollowUp, Lead, Severity, Sex, Vessel, VesselLabels, N_LEADS,
};
use crate::error::{Error, Result};

pub const COHORT_FILE: &str = "cohort.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIGEST_FILE: &str = "digest.txt";
pub const SIGNAL_DIR: &str = "signals";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityEntry {
    pub rca: String,
    pub lm: String,
    pub lad: String,
    pub lcx: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub ecg_id: String,
    pub patient_id: String,
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    pub ecg_time: DateTime<Utc>,
    pub ccta_time: DateTime<Utc>,
    pub normal_ecg: Option<bool>,
    pub severity: SeverityEntry,
    #[serde(default)]
    pub follow_up: Option<FollowUp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub format_version: u32,
    pub records: Vec<RecordEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMeta {
    pub fs: f64,
    pub n_samples: usize,
    pub lead_order: Vec<Lead>,
}

/// Per-vessel fractions keyed by vessel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselFractions {
    pub rca: f64,
    pub lm: f64,
    pub lad: f64,
    pub lcx: f64,
}

impl VesselFractions {
    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            rca: a[Vessel::Rca.index()],
            lm: a[Vessel::Lm.index()],
            lad: a[Vessel::Lad.index()],
            lcx: a[Vessel::Lcx.index()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_patients: usize,
    pub n_records: usize,
    /// Generator settings, present for synthetic datasets.
    pub generator: Option<serde_json::Value>,
    pub prevalence_requested: Option<VesselFractions>,
    /// Patient-level fraction with the severe grade.
    pub prevalence_observed: VesselFractions,
    pub digest: String,
}

/// Patient-level prevalence of the severe grade per vessel.
pub fn observed_prevalence(cohort: &Cohort) -> [f64; 4] {
    let mut seen = std::collections::HashSet::new();
    let mut pos = [0usize; 4];
    for r in cohort.records() {
        if !seen.insert(r.ecg.patient_id.as_str()) {
            continue;
        }
        for v in Vessel::ALL {
            pos[v.index()] += r.labels.severe(v) as usize;
        }
    }
    let n = seen.len().max(1) as f64;
    pos.map(|p| p as f64 / n)
}

fn entry(r: &CohortRecord) -> RecordEntry {
    let s = |v: Vessel| r.labels.severity[v.index()].as_str().to_string();
    RecordEntry {
        ecg_id: r.ecg.ecg_id.clone(),
        patient_id: r.ecg.patient_id.clone(),
        age: r.ecg.age,
        sex: r.ecg.sex,
        ecg_time: r.ecg.ecg_time,
        ccta_time: r.labels.ccta_time,
        normal_ecg: r.ecg.normal_ecg,
        severity: SeverityEntry {
            rca: s(Vessel::Rca),
            lm: s(Vessel::Lm),
            lad: s(Vessel::Lad),
            lcx: s(Vessel::Lcx),
        },
        follow_up: r.follow_up,
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "ecg_id `{id}` is not usable as a file name"
        )))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T, context: &str) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Error::json(context, e))?;
    s.push(b'\n');
    Ok(s)
}

pub fn signal_paths(dir: &Path, ecg_id: &str) -> (PathBuf, PathBuf) {
    let base = dir.join(SIGNAL_DIR);
    (
        base.join(format!("{ecg_id}.bin")),
        base.join(format!("{ecg_id}.meta.json")),
    )
}

/// Writes the cohort into `dir`. Signals are stored as f32, so the returned
/// manifest carries the digest of the cohort as it will load back.
pub fn save_dataset(
    cohort: &Cohort,
    dir: &Path,
    generator: Option<serde_json::Value>,
    prevalence_requested: Option<[f64; 4]>,
) -> Result<DatasetManifest> {
    for r in cohort.records() {
        check_id(&r.ecg.ecg_id)?;
    }
    let sig_dir = dir.join(SIGNAL_DIR);
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;

    let file = CohortFile {
        format_version: DATASET_FORMAT_VERSION,
        records: cohort.records().iter().map(entry).collect(),
    };
    write(&dir.join(COHORT_FILE), &to_json(&file, COHORT_FILE)?)?;

    let mut stored = Vec::with_capacity(cohort.len());
    for r in cohort.records() {
        let (bin, meta) = signal_paths(dir, &r.ecg.ecg_id);
        let mut bytes = Vec::with_capacity(r.ecg.signal().len() * 4);
        for &v in r.ecg.signal() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write(&bin, &bytes)?;
        let m = SignalMeta {
            fs: r.ecg.fs,
            n_samples: r.ecg.n_samples(),
            lead_order: Lead::ALL.to_vec(),
        };
        write(&meta, &to_json(&m, "signal meta")?)?;

        let rounded = r.ecg.signal().iter().map(|&v| v as f32 as f64).collect();
        let mut rec = r.clone();
        rec.ecg = rec.ecg.with_signal(rounded)?;
        stored.push(rec);
    }
    let stored = Cohort::new(stored)?;

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        n_patients: stored.patients().len(),
        n_records: stored.len(),
        generator,
        prevalence_requested: prevalence_requested.map(VesselFractions::from_array),
        prevalence_observed: VesselFractions::from_array(observed_prevalence(&stored)),
        digest: stored.digest(),
    };
    write(
        &dir.join(MANIFEST_FILE),
        &to_json(&manifest, MANIFEST_FILE)?,
    )?;
    write(
        &dir.join(DIGEST_FILE),
        format!("{}\n", manifest.digest).as_bytes(),
    )?;
    Ok(manifest)
}

fn parse_severity(e: &RecordEntry) -> Result<[Severity; 4]> {
    let mut out = [Severity::Normal; 4];
    for (v, tok) in [
        (Vessel::Rca, &e.severity.rca),
        (Vessel::Lm, &e.severity.lm),
        (Vessel::Lad, &e.severity.lad),
        (Vessel::Lcx, &e.severity.lcx),
    ] {
        out[v.index()] = tok.parse()?;
    }
    Ok(out)
}

fn load_signal(dir: &Path, ecg_id: &str) -> Result<(f64, Vec<f64>)> {
    let (bin, meta_path) = signal_paths(dir, ecg_id);
    let meta: SignalMeta = serde_json::from_slice(&read(&meta_path)?)
        .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
    if meta.lead_order != Lead::ALL {
        return Err(Error::Data(format!(
            "{ecg_id}: unsupported lead order {:?}",
            meta.lead_order
        )));
    }
    let bytes = read(&bin)?;
    if bytes.len() != meta.n_samples * N_LEADS * 4 {
        return Err(Error::Data(format!(
            "{ecg_id}: signal file has {} bytes, expected {} for 12 x {}",
            bytes.len(),
            meta.n_samples * N_LEADS * 4,
            meta.n_samples
        )));
    }
    let signal = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((meta.fs, signal))
}

pub fn load_dataset(dir: &Path) -> Result<Cohort> {
    let path = dir.join(COHORT_FILE);
    let file: CohortFile = serde_json::from_slice(&read(&path)?)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    if file.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "dataset format version {} is not supported",
            file.format_version
        )));
    }
    let mut records = Vec::with_capacity(file.records.len());
    for e in file.records {
        check_id(&e.ecg_id)?;
        let severity = parse_severity(&e)?;
        let (fs, signal) = load_signal(dir, &e.ecg_id)?;
        let mut ecg = EcgRecord::new(e.ecg_id, e.patient_id, fs, e.ecg_time, signal)?;
        ecg.age = e.age;
        ecg.sex = e.sex;
        ecg.normal_ecg = e.normal_ecg;
        records.push(CohortRecord {
            ecg,
            labels: VesselLabels {
                severity,
                ccta_time: e.ccta_time,
            },
            follow_up: e.follow_up,
        });
    }
    Cohort::new(records)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_slice(&read(&path)?).map_err(|e| Error::json(path.display().to_string(), e))
}
