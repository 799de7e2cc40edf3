//! Command-line pipeline: `synth`, `split`, `train`, `eval`, `stratify` and
//! `explain`, all driven by one JSON run configuration.
//!
//! Artifacts land under `<out>/run-<stamp>/<stage>/`, where the stamp is a
//! content hash of the effective configuration, so reruns with the same
//! inputs overwrite the same files byte for byte. Each stage directory gets
//! a `manifest.json` with the config echo, dataset digest, format versions
//! and a SHA-256 of every file written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{Cohort, Lead, Subgroup, Vessel};
use crate::dataset::{self, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::explain::{
    group_waveforms, record_beats, st_separation, waveform_csv, BeatMatrix, StSeparation,
};
use crate::model::{
    load_checkpoint_for, predict_records, Net1DConfig, CHECKPOINT_VERSION, N_TASKS,
};
use crate::plots;
use crate::report::{self, EvalOptions, EvalReport};
use crate::split::{stratified_group_kfold, FoldAssignment};
use crate::survival::{
    curves_csv, patient_risk_inputs, risk_report, RiskGroup, RiskReport, RiskThresholds,
    HORIZON_DAYS,
};
use crate::synth::{synth_cohort, CohortParams};
use crate::train::{train_fold, TrainConfig};

pub const LOG_ENV: &str = "STENOGRAPH_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "stenograph",
    version,
    about = "Per-vessel stenosis prediction from 12-lead ECGs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelSource {
    #[command(flatten)]
    pub common: Common,
    /// Score every record with this checkpoint instead of the fold models.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort dataset.
    Synth(Common),
    /// Assign patients to stratified folds.
    Split(Common),
    /// Train one model per fold.
    Train(Common),
    /// ROC, calibration, grade box plots and subgroup table.
    Eval(ModelSource),
    /// Risk groups, cumulative incidence and log-rank tests.
    Stratify(ModelSource),
    /// Mean beat waveforms of the risk groups.
    Explain(ModelSource),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::Split(c) | Command::Train(c) => c,
            Command::Eval(m) | Command::Stratify(m) | Command::Explain(m) => &m.common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Stratify(_) => "stratify",
            Command::Explain(_) => "explain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSettings {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
}

impl Default for NetSettings {
    fn default() -> Self {
        let d = Net1DConfig::default();
        Self {
            stem_channels: d.stem_channels,
            stem_stride: d.stem_stride,
            n_blocks: d.n_blocks,
            kernel_size: d.kernel_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_boot: usize,
    pub bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            n_boot: d.n_boot,
            bins: d.bins,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgroupToggles {
    pub age: bool,
    pub sex: bool,
    pub interval: bool,
    pub normal_ecg: bool,
}

impl Default for SubgroupToggles {
    fn default() -> Self {
        Self {
            age: true,
            sex: true,
            interval: true,
            normal_ecg: true,
        }
    }
}

impl SubgroupToggles {
    pub fn selected(&self) -> Vec<Subgroup> {
        let mut out = Vec::new();
        if self.age {
            out.extend([Subgroup::AgeUnder65, Subgroup::Age65Plus]);
        }
        if self.sex {
            out.extend([Subgroup::Male, Subgroup::Female]);
        }
        if self.interval {
            out.extend([Subgroup::IntervalWithin3h, Subgroup::IntervalOver3h]);
        }
        if self.normal_ecg {
            out.push(Subgroup::NormalEcg);
        }
        out
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; defaults to `<out>/dataset-<hash>` keyed by the
    /// generator settings.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub synth: CohortParams,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub net: NetSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub risk: RiskThresholds,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub subgroups: SubgroupToggles,
    /// Keep only the last ECG before each CCTA exam.
    #[serde(default)]
    pub closest_only: bool,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be >= 2, got {}",
                self.folds
            )));
        }
        if self.eval.n_boot == 0 || self.eval.bins == 0 {
            return Err(Error::Config(
                "eval.n_boot and eval.bins must be positive".into(),
            ));
        }
        self.train.validate()?;
        self.risk.validate()
    }

    /// Network configuration for records of `input_len` samples.
    pub fn net_config(&self, input_len: usize) -> Net1DConfig {
        Net1DConfig {
            input_len,
            stem_channels: self.net.stem_channels,
            stem_stride: self.net.stem_stride,
            n_blocks: self.net.n_blocks,
            kernel_size: self.net.kernel_size,
            seed: self.seed,
            ..Net1DConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_boot: self.eval.n_boot,
            bins: self.eval.bins,
            seed: self.seed,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn json_bytes<T: Serialize>(value: &T, context: &str) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::json(context, e))?;
    v.push(b'\n');
    Ok(v)
}

/// Resolved configuration plus the directories derived from it.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: RunConfig,
    pub stamp: String,
    pub run_dir: PathBuf,
    pub dataset_dir: PathBuf,
}

impl RunContext {
    pub fn new(mut config: RunConfig, base: &Path) -> Result<Self> {
        config.validate()?;
        if config.out.is_relative() {
            config.out = base.join(&config.out);
        }
        if let Some(d) = config.dataset.as_mut().filter(|d| d.is_relative()) {
            *d = base.join(&*d);
        }
        let mut hashed = config.clone();
        hashed.out = PathBuf::new();
        let stamp = sha256_hex(&json_bytes(&hashed, "run config")?)[..12].to_string();
        let dataset_dir = match &config.dataset {
            Some(d) => d.clone(),
            None => {
                let key = json_bytes(&(config.seed, &config.synth), "synth config")?;
                config
                    .out
                    .join(format!("dataset-{}", &sha256_hex(&key)[..12]))
            }
        };
        Ok(Self {
            run_dir: config.out.join(format!("run-{stamp}")),
            stamp,
            dataset_dir,
            config,
        })
    }

    /// Reads the config file and applies flag overrides. Relative paths in
    /// the file resolve against its directory.
    pub fn from_args(common: &Common) -> Result<Self> {
        let path = &common.config;
        let text = fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(out) = &common.out {
            config.out = std::env::current_dir()
                .map_err(|e| Error::io(".", e))?
                .join(out);
        }
        Self::new(config, &base)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.run_dir.join(stage)
    }

    pub fn folds_path(&self) -> PathBuf {
        self.stage_dir("split").join("folds.json")
    }

    pub fn checkpoint_path(&self, fold: usize) -> PathBuf {
        self.stage_dir("train").join(format!("fold{fold}.ckpt"))
    }

    fn require_dataset(&self) -> Result<()> {
        if !self.dataset_dir.join(dataset::COHORT_FILE).is_file() {
            return Err(Error::Config(format!(
                "no dataset at {}; run `stenograph synth` first or set `dataset`",
                self.dataset_dir.display()
            )));
        }
        Ok(())
    }

    /// Loads the dataset, applying the closest-only filter when configured.
    pub fn cohort(&self) -> Result<Cohort> {
        self.require_dataset()?;
        let cohort = dataset::load_dataset(&self.dataset_dir)?;
        if cohort.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        Ok(if self.config.closest_only {
            cohort.closest_only()
        } else {
            cohort
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub crate_version: String,
    pub dataset_format: u32,
    pub checkpoint_format: u32,
}

impl Versions {
    fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format: DATASET_FORMAT_VERSION,
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub run_stamp: String,
    pub versions: Versions,
    pub config: RunConfig,
    pub dataset_digest: String,
    /// File name (relative to the stage directory) -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl StageManifest {
    /// Hash over every output digest, for whole-stage comparisons.
    pub fn outputs_digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.outputs {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct StageWriter {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
    warnings: Vec<String>,
}

impl StageWriter {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            outputs: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn record(&mut self, name: &str, digest: String) {
        self.outputs.insert(name.to_string(), digest);
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    fn finish(
        self,
        stage: &str,
        ctx: &RunContext,
        dataset_digest: String,
    ) -> Result<StageManifest> {
        let manifest = StageManifest {
            stage: stage.to_string(),
            run_stamp: ctx.stamp.clone(),
            versions: Versions::current(),
            config: ctx.config.clone(),
            dataset_digest,
            outputs: self.outputs,
            warnings: self.warnings,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, json_bytes(&manifest, "stage manifest")?)
            .map_err(|e| Error::io(&path, e))?;
        info!("{stage}: wrote {}", self.dir.display());
        Ok(manifest)
    }
}

pub fn cmd_synth(ctx: &RunContext) -> Result<StageManifest> {
    let params = &ctx.config.synth;
    let cohort = synth_cohort(params, ctx.config.seed)?;
    let generator = serde_json::to_value(params).map_err(|e| Error::json("synth params", e))?;
    let m = dataset::save_dataset(
        &cohort,
        &ctx.dataset_dir,
        Some(generator),
        Some(params.prevalence),
    )?;
    let mut w = StageWriter::new(ctx.stage_dir("synth"))?;
    w.write(
        "dataset_manifest.json",
        &json_bytes(&m, "dataset manifest")?,
    )?;
    w.record("dataset", m.digest.clone());
    w.finish("synth", ctx, m.digest)
}

pub fn load_folds(path: &Path, cohort: &Cohort) -> Result<FoldAssignment> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let folds: FoldAssignment =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    folds.validate(cohort)?;
    Ok(folds)
}

pub fn cmd_split(ctx: &RunContext) -> Result<StageManifest> {
    let cohort = ctx.cohort()?;
    let folds = stratified_group_kfold(&cohort, ctx.config.folds, ctx.config.seed)?;
    let mut w = StageWriter::new(ctx.stage_dir("split"))?;
    let path = w.write("folds.json", &json_bytes(&folds, "folds")?)?;
    load_folds(&path, &cohort)?;
    w.finish("split", ctx, cohort.digest())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub val_macro_auc: Option<f64>,
    pub checkpoint: String,
    pub checkpoint_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub folds: Vec<FoldSummary>,
    pub best_fold: Option<usize>,
    pub mean_val_macro_auc: Option<f64>,
}

pub fn cmd_train(ctx: &RunContext) -> Result<(StageManifest, TrainSummary)> {
    let cohort = ctx.cohort()?;
    let folds = load_folds(&ctx.folds_path(), &cohort)?;
    let net = ctx.config.net_config(cohort.records()[0].ecg.n_samples());
    net.validate()?;
    let cfg = ctx.config.train_config();
    let outcomes = (0..folds.k)
        .into_par_iter()
        .map(|k| train_fold(&cohort, &folds, k, &cfg, &net))
        .collect::<Result<Vec<_>>>()?;

    let mut w = StageWriter::new(ctx.stage_dir("train"))?;
    let mut summaries = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        let name = format!("fold{k}.ckpt");
        let bytes = o.checkpoint.to_bytes()?;
        w.write(&name, &bytes)?;
        w.write(&format!("fold{k}_log.csv"), o.log_csv()?.as_bytes())?;
        summaries.push(FoldSummary {
            fold: k,
            best_epoch: o.checkpoint.provenance.epoch,
            val_macro_auc: o.checkpoint.provenance.val_macro_auc,
            checkpoint: name,
            checkpoint_digest: sha256_hex(&bytes),
        });
    }
    let best_fold = summaries
        .iter()
        .filter_map(|s| s.val_macro_auc.map(|a| (s.fold, a)))
        .fold(None, |best: Option<(usize, f64)>, (k, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((k, a)),
        })
        .map(|(k, _)| k);
    let defined: Vec<f64> = summaries.iter().filter_map(|s| s.val_macro_auc).collect();
    let summary = TrainSummary {
        best_fold,
        mean_val_macro_auc: (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        folds: summaries,
    };
    w.write("summary.json", &json_bytes(&summary, "train summary")?)?;
    Ok((w.finish("train", ctx, cohort.digest())?, summary))
}

/// Probabilities for every record, with the fold that scored it (`None`
/// when a single external checkpoint is used).
pub struct Predictions {
    pub probs: Vec<[f64; N_TASKS]>,
    pub fold: Vec<Option<usize>>,
    pub stage_suffix: String,
}

pub fn predictions(
    ctx: &RunContext,
    cohort: &Cohort,
    checkpoint: Option<&Path>,
) -> Result<Predictions> {
    let n = cohort.records()[0].ecg.n_samples();
    if let Some(path) = checkpoint {
        let ckpt = load_checkpoint_for(path, n)?;
        let records: Vec<_> = cohort.records().iter().map(|r| &r.ecg).collect();
        return Ok(Predictions {
            probs: predict_records(&ckpt.params, &records)?,
            fold: vec![None; cohort.len()],
            stage_suffix: format!("-ckpt-{}", &ckpt.digest()?[..12]),
        });
    }
    let folds = load_folds(&ctx.folds_path(), cohort)?;
    let mut probs = vec![[f64::NAN; N_TASKS]; cohort.len()];
    let mut fold = vec![None; cohort.len()];
    for k in 0..folds.k {
        let path = ctx.checkpoint_path(k);
        if !path.is_file() {
            return Err(Error::Config(format!(
                "missing {}; run `stenograph train` first",
                path.display()
            )));
        }
        let ckpt = load_checkpoint_for(&path, n)?;
        let (_, val) = folds.split_indices(cohort, k)?;
        let records: Vec<_> = val.iter().map(|&i| &cohort.records()[i].ecg).collect();
        for (&i, p) in val.iter().zip(predict_records(&ckpt.params, &records)?) {
            probs[i] = p;
            fold[i] = Some(k);
        }
    }
    if let Some(i) = fold.iter().position(Option::is_none) {
        return Err(Error::Data(format!(
            "record {} has no out-of-fold prediction",
            cohort.records()[i].ecg.ecg_id
        )));
    }
    Ok(Predictions {
        probs,
        fold,
        stage_suffix: String::new(),
    })
}

fn predictions_csv(cohort: &Cohort, p: &Predictions) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("predictions csv: {e}"));
    let mut header = vec!["ecg_id".to_string(), "patient_id".into(), "fold".into()];
    header.extend(Vessel::ALL.map(|v| format!("prob_{}", v.key())));
    w.write_record(&header).map_err(err)?;
    for ((r, probs), fold) in cohort.records().iter().zip(&p.probs).zip(&p.fold) {
        let mut row = vec![
            r.ecg.ecg_id.clone(),
            r.ecg.patient_id.clone(),
            fold.map(|f| f.to_string()).unwrap_or_default(),
        ];
        row.extend(probs.iter().map(f64::to_string));
        w.write_record(&row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn cmd_eval(
    ctx: &RunContext,
    checkpoint: Option<&Path>,
) -> Result<(StageManifest, EvalReport)> {
    let cohort = ctx.cohort()?;
    let preds = predictions(ctx, &cohort, checkpoint)?;
    let subgroups = ctx.config.subgroups.selected();
    let report = report::evaluate_predictions(
        &cohort,
        &preds.probs,
        &subgroups,
        &ctx.config.eval_options(),
    )?;

    let mut w = StageWriter::new(ctx.stage_dir(&format!("eval{}", preds.stage_suffix)))?;
    w.write(
        "predictions.csv",
        predictions_csv(&cohort, &preds)?.as_bytes(),
    )?;
    w.write("report.json", &json_bytes(&report, "eval report")?)?;
    w.write(
        "roc_points.csv",
        report::roc_points_csv(&report)?.as_bytes(),
    )?;
    w.write(
        "calibration_bins.csv",
        report::calibration_bins_csv(&report)?.as_bytes(),
    )?;
    w.write(
        "grade_boxes.csv",
        report::grade_boxes_csv(&report)?.as_bytes(),
    )?;
    w.write(
        "subgroups.csv",
        report::subgroup_table_csv(&report)?.as_bytes(),
    )?;
    for g in &report.groups {
        let suffix = if g.key == "all" {
            String::new()
        } else {
            format!("_{}", g.key)
        };
        for v in Vessel::ALL {
            w.write(
                &format!("roc_{}{suffix}.svg", v.key()),
                plots::roc_svg(g, v)?.as_bytes(),
            )?;
            w.write(
                &format!("calibration_{}{suffix}.svg", v.key()),
                plots::calibration_svg(g, v)?.as_bytes(),
            )?;
        }
        w.write(
            &format!("grade_boxes{suffix}.svg"),
            plots::grade_boxes_svg(g)?.as_bytes(),
        )?;
    }
    w.write(
        "subgroups.svg",
        plots::subgroup_forest_svg(&report)?.as_bytes(),
    )?;
    Ok((w.finish("eval", ctx, cohort.digest())?, report))
}

fn risk_groups_csv(
    cohort: &Cohort,
    probs: &[[f64; N_TASKS]],
    thresholds: &RiskThresholds,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("risk groups csv: {e}"));
    w.write_record([
        "patient_id",
        "vessel",
        "mean_prob",
        "group",
        "event",
        "days",
    ])
    .map_err(err)?;
    for (pid, p, f) in patient_risk_inputs(cohort, probs)? {
        for v in Vessel::ALL {
            w.write_record([
                pid.clone(),
                v.name().to_string(),
                p[v.index()].to_string(),
                thresholds.stratify(p[v.index()], v).key().to_string(),
                f.event.to_string(),
                f.days.to_string(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn cmd_stratify(
    ctx: &RunContext,
    checkpoint: Option<&Path>,
) -> Result<(StageManifest, RiskReport)> {
    let cohort = ctx.cohort()?;
    if !cohort.has_follow_up() {
        let missing: Vec<String> = cohort
            .records()
            .iter()
            .filter(|r| r.follow_up.is_none())
            .map(|r| r.ecg.ecg_id.clone())
            .collect();
        return Err(Error::MissingMetadata {
            field: "follow_up".into(),
            ecg_ids: missing,
        });
    }
    let preds = predictions(ctx, &cohort, checkpoint)?;
    let thresholds = &ctx.config.risk;
    let report = risk_report(&cohort, &preds.probs, thresholds)?;

    let mut w = StageWriter::new(ctx.stage_dir(&format!("stratify{}", preds.stage_suffix)))?;
    w.write("risk_report.json", &json_bytes(&report, "risk report")?)?;
    w.write("incidence.csv", curves_csv(&report)?.as_bytes())?;
    w.write(
        "risk_groups.csv",
        risk_groups_csv(&cohort, &preds.probs, thresholds)?.as_bytes(),
    )?;
    for vr in &report.vessels {
        if let Some(m) = &vr.undefined {
            w.warn(format!("{}: {m}", vr.vessel));
        }
        w.write(
            &format!("incidence_{}.svg", vr.vessel.key()),
            plots::incidence_svg(vr, HORIZON_DAYS)?.as_bytes(),
        )?;
    }
    Ok((w.finish("stratify", ctx, cohort.digest())?, report))
}

/// ST-window separation of one lead, or why it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadSeparation {
    pub lead: Lead,
    pub separation: Option<StSeparation>,
    pub undefined: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselExplain {
    pub vessel: Vessel,
    pub n_high: usize,
    pub n_low: usize,
    pub leads: Vec<LeadSeparation>,
}

impl VesselExplain {
    pub fn lead(&self, lead: Lead) -> &LeadSeparation {
        &self.leads[lead.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub vessels: Vec<VesselExplain>,
    pub warnings: Vec<String>,
}

pub fn cmd_explain(
    ctx: &RunContext,
    checkpoint: Option<&Path>,
) -> Result<(StageManifest, ExplainReport)> {
    let cohort = ctx.cohort()?;
    let preds = predictions(ctx, &cohort, checkpoint)?;
    let beats: Vec<BeatMatrix> = cohort
        .records()
        .par_iter()
        .map(|r| record_beats(&r.ecg))
        .collect::<Result<_>>()?;

    let mut w = StageWriter::new(ctx.stage_dir(&format!("explain{}", preds.stage_suffix)))?;
    let mut vessels = Vec::new();
    for v in Vessel::ALL {
        let groups: Vec<RiskGroup> = preds
            .probs
            .iter()
            .map(|p| ctx.config.risk.stratify(p[v.index()], v))
            .collect();
        let n_high = groups.iter().filter(|&&g| g == RiskGroup::High).count();
        let summary = group_waveforms(&beats, &groups)?;
        for msg in &summary.warnings {
            w.warn(format!("{v}: {msg}"));
        }
        if summary.group(RiskGroup::High).is_some() {
            w.write(
                &format!("waveforms_{}.csv", v.key()),
                waveform_csv(&summary)?.as_bytes(),
            )?;
            w.write(
                &format!("waveforms_{}.svg", v.key()),
                plots::waveforms_svg(&summary, v)?.as_bytes(),
            )?;
        }
        let leads = Lead::ALL
            .into_iter()
            .map(|lead| match st_separation(&beats, &groups, lead) {
                Ok(s) => Ok(LeadSeparation {
                    lead,
                    separation: Some(s),
                    undefined: None,
                }),
                Err(Error::Undefined(m)) => Ok(LeadSeparation {
                    lead,
                    separation: None,
                    undefined: Some(m),
                }),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        vessels.push(VesselExplain {
            vessel: v,
            n_high,
            n_low: groups.len() - n_high,
            leads,
        });
    }
    let report = ExplainReport {
        vessels,
        warnings: w.warnings.clone(),
    };
    w.write(
        "st_separation.json",
        &json_bytes(&report, "explain report")?,
    )?;
    Ok((w.finish("explain", ctx, cohort.digest())?, report))
}

/// Runs one subcommand and returns its stage manifest.
pub fn run(cli: &Cli) -> Result<StageManifest> {
    let common = cli.command.common();
    let ctx = RunContext::from_args(common)?;
    let work = || -> Result<StageManifest> {
        match &cli.command {
            Command::Synth(_) => cmd_synth(&ctx),
            Command::Split(_) => cmd_split(&ctx),
            Command::Train(_) => cmd_train(&ctx).map(|r| r.0),
            Command::Eval(m) => cmd_eval(&ctx, m.checkpoint.as_deref()).map(|r| r.0),
            Command::Stratify(m) => cmd_stratify(&ctx, m.checkpoint.as_deref()).map(|r| r.0),
            Command::Explain(m) => cmd_explain(&ctx, m.checkpoint.as_deref()).map(|r| r.0),
        }
    };
    match common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Machine-readable diagnostic line for a failed command.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
    .to_string()
}
