//! Multi-task training: per-task BCE over original and augmented views,
//! homoscedastic uncertainty weighting, PCGrad on the shared trunk, AdamW
//! with warmup and cosine decay, and best-epoch selection by Macro-AUC.

use std::f64::consts::PI;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_signal, AugConfig, AugSchedule};
use crate::autodiff::{GradientVector, Tape, Var};
use crate::cohort::{zscore_normalize, Cohort, Vessel, N_LEADS};
use crate::error::{Error, Result};
use crate::metrics::{auc, macro_auc};
use crate::model::{
    predict_records, ModelCheckpoint, ModelParams, Net1DConfig, Provenance, CHECKPOINT_VERSION,
    N_TASKS,
};
use crate::rng::{self, stream, Rng};
use crate::split::FoldAssignment;
use crate::tensor::Tensor;

/// Learnable `s_t = log sigma_t^2`, one per task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskUncertainty {
    pub log_vars: [f64; N_TASKS],
}

impl Default for TaskUncertainty {
    fn default() -> Self {
        Self {
            log_vars: [0.0; N_TASKS],
        }
    }
}

impl TaskUncertainty {
    pub fn sigmas(&self) -> [f64; N_TASKS] {
        self.log_vars.map(|s| (s / 2.0).exp())
    }
}

/// `sum_t L_t / (2 sigma_t^2) + log sigma_t`, written in terms of `s_t`.
pub fn uncertainty_weighted_loss(losses: &[f64], log_vars: &[f64]) -> Result<f64> {
    if losses.len() != log_vars.len() {
        return Err(Error::Shape(format!(
            "{} losses vs {} log-variances",
            losses.len(),
            log_vars.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidArgument(
            "task losses must be finite and non-negative".into(),
        ));
    }
    Ok(losses
        .iter()
        .zip(log_vars)
        .map(|(l, s)| l * (-s).exp() / 2.0 + s / 2.0)
        .sum())
}

/// Records the weighted terms `W_t` on the tape. `log_vars` is a `[1, T]`
/// parameter; `None` freezes every sigma at 1 so `W_t = L_t / 2`.
pub fn weighted_terms(tape: &mut Tape, losses: &[Var], log_vars: Option<Var>) -> Result<Vec<Var>> {
    losses
        .iter()
        .enumerate()
        .map(|(t, &l)| match log_vars {
            None => tape.mul_scalar(l, 0.5),
            Some(s) => {
                let col = tape.column(s, t)?;
                let s_t = tape.mean(col)?;
                let neg = tape.mul_scalar(s_t, -1.0)?;
                let precision = tape.exp(neg)?;
                let scaled = tape.mul(l, precision)?;
                let data = tape.mul_scalar(scaled, 0.5)?;
                let reg = tape.mul_scalar(s_t, 0.5)?;
                tape.add(data, reg)
            }
        })
        .collect()
}

pub fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("nothing to sum".into()))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

/// Per-task mean BCE over the rows of `[R, T]` logits.
pub fn task_loss_vars(
    tape: &mut Tape,
    logits: Var,
    targets: &[[f64; N_TASKS]],
) -> Result<Vec<Var>> {
    (0..N_TASKS)
        .map(|t| {
            let col = tape.column(logits, t)?;
            let y = Tensor::from_vec(targets.iter().map(|row| row[t]).collect());
            let bce = tape.bce_with_logits(col, &y)?;
            tape.mean(bce)
        })
        .collect()
}

/// `L_t` averaged over both views; labels are per sample `[RCA, LM, LAD, LCX]`.
pub fn task_losses(
    params: &ModelParams,
    batch: &Tensor,
    aug_batch: &Tensor,
    labels: &[[f64; N_TASKS]],
) -> Result<[f64; N_TASKS]> {
    if batch.shape() != aug_batch.shape() {
        return Err(Error::Shape(format!(
            "views differ: {:?} vs {:?}",
            batch.shape(),
            aug_batch.shape()
        )));
    }
    let input = concat_views(batch, aug_batch)?;
    let mut tape = Tape::new();
    let vars = params.constants(&mut tape);
    let x = tape.constant(input);
    let logits = params.logits(&mut tape, &vars, x)?;
    let targets: Vec<[f64; N_TASKS]> = labels.iter().chain(labels).copied().collect();
    let losses = task_loss_vars(&mut tape, logits, &targets)?;
    let mut out = [0.0; N_TASKS];
    for (o, l) in out.iter_mut().zip(losses) {
        *o = tape.value(l).item()?;
    }
    Ok(out)
}

fn concat_views(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::Shape("views must be batched".into()));
    }
    shape[0] *= 2;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// One projection event: `adjusted_dot` is `g_i' . g_j` right after `g_i`
/// was projected off the original `g_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub task: usize,
    pub against: usize,
    pub adjusted_dot: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PcGradTrace {
    pub projections: Vec<Projection>,
    pub adjusted: Vec<GradientVector>,
}

pub fn pcgrad(task_grads: &[GradientVector], rng: &mut Rng) -> Result<GradientVector> {
    Ok(pcgrad_traced(task_grads, rng)?.0)
}

/// Gradient surgery: each task gradient is projected off every original
/// task gradient it conflicts with, visiting the others in random order,
/// and the adjusted gradients are summed in task order.
pub fn pcgrad_traced(
    task_grads: &[GradientVector],
    rng: &mut Rng,
) -> Result<(GradientVector, PcGradTrace)> {
    let Some(first) = task_grads.first() else {
        return Err(Error::InvalidArgument(
            "pcgrad needs at least one task".into(),
        ));
    };
    if let Some(g) = task_grads.iter().find(|g| g.len() != first.len()) {
        return Err(Error::Shape(format!(
            "task gradient lengths differ: {} vs {}",
            g.len(),
            first.len()
        )));
    }
    let norms: Vec<f64> = task_grads.iter().map(GradientVector::norm_sq).collect();
    let mut trace = PcGradTrace::default();
    for i in 0..task_grads.len() {
        let mut g = task_grads[i].clone();
        let mut others: Vec<usize> = (0..task_grads.len()).filter(|&j| j != i).collect();
        others.shuffle(rng);
        for j in others {
            if norms[j] < 1e-12 {
                continue;
            }
            let dot = g.dot(&task_grads[j]);
            if dot < 0.0 {
                g.axpy(-dot / norms[j], &task_grads[j]);
                trace.projections.push(Projection {
                    task: i,
                    against: j,
                    adjusted_dot: g.dot(&task_grads[j]),
                });
            }
        }
        trace.adjusted.push(g);
    }
    let mut total = trace.adjusted[0].clone();
    for g in &trace.adjusted[1..] {
        total.add_assign(g);
    }
    Ok((total, trace))
}

/// Gradient for one optimizer step.
///
/// With PCGrad, each term `W_t` gets its own backward pass; the first
/// `trunk_len` entries are combined by [`pcgrad`] and the rest (task heads,
/// log-variances) are summed. Without it a single pass on `total` is used.
/// `extra` is an untouched shared term added on top.
pub fn step_gradient(
    tape: &Tape,
    terms: &[Var],
    total: Var,
    extra: Option<Var>,
    trunk_len: usize,
    use_pcgrad: bool,
    rng: &mut Rng,
) -> Result<GradientVector> {
    if !use_pcgrad {
        return tape.backward(total);
    }
    let grads = terms
        .iter()
        .map(|&w| tape.backward(w))
        .collect::<Result<Vec<_>>>()?;
    let trunk: Vec<GradientVector> = grads
        .iter()
        .map(|g| GradientVector::new(g.as_slice()[..trunk_len].to_vec()))
        .collect();
    let mut combined = pcgrad(&trunk, rng)?.into_vec();
    let mut rest = grads[0].as_slice()[trunk_len..].to_vec();
    for g in &grads[1..] {
        for (r, v) in rest.iter_mut().zip(&g.as_slice()[trunk_len..]) {
            *r += v;
        }
    }
    combined.extend(rest);
    let mut combined = GradientVector::new(combined);
    if let Some(e) = extra {
        combined.add_assign(&tape.backward(e)?);
    }
    Ok(combined)
}

/// AdamW with decoupled weight decay on the entries selected by `decay_mask`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if self.decay_mask[i] && weight_decay != 0.0 {
                params[i] *= 1.0 - lr * weight_decay;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub pcgrad: bool,
    pub uncertainty_weighting: bool,
    /// Weight of the logit MSE between the two views.
    pub consistency_weight: f64,
    pub augment: AugConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            peak_lr: 3e-3,
            warmup_fraction: 0.05,
            weight_decay: 1e-4,
            pcgrad: true,
            uncertainty_weighting: true,
            consistency_weight: 0.0,
            augment: AugConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.consistency_weight >= 0.0) {
            return Err(Error::Config(
                "weight_decay and consistency_weight must be >= 0".into(),
            ));
        }
        self.augment.validate()
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    let total = total_steps as f64;
    let warm = config.warmup_fraction * total;
    let s = step.min(total_steps) as f64;
    if s < warm {
        return peak * s / warm;
    }
    let span = total - warm;
    if span <= 0.0 {
        return 0.0;
    }
    peak * 0.5 * (1.0 + (PI * (s - warm) / span).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub task_loss: [f64; N_TASKS],
    pub sigma: [f64; N_TASKS],
    pub macro_auc: Option<f64>,
    pub lr: f64,
    pub alpha: f64,
    pub excluded_vessels: Vec<Vessel>,
}

/// 1-based epoch with the highest Macro-AUC; the earliest wins ties and
/// undefined epochs never win unless all are undefined.
pub fn select_best_epoch(scores: &[Option<f64>]) -> Option<usize> {
    if scores.is_empty() {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    Some(best.map_or(1, |(i, _)| i + 1))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> Result<String> {
        training_log_csv(&self.log)
    }
}

pub fn training_log_csv(log: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string()];
    header.extend(Vessel::ALL.map(|v| format!("loss_{}", v.key())));
    header.extend(Vessel::ALL.map(|v| format!("sigma_{}", v.key())));
    header.extend(["macro_auc", "lr", "alpha"].map(String::from));
    let csv_err = |e: csv::Error| Error::Data(format!("training log: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in log {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.task_loss.iter().map(f64::to_string));
        row.extend(r.sigma.iter().map(f64::to_string));
        row.push(
            r.macro_auc
                .map_or_else(|| "undefined".into(), |a| a.to_string()),
        );
        row.push(r.lr.to_string());
        row.push(r.alpha.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn decay_mask(params: &ModelParams) -> Vec<bool> {
    let mut mask: Vec<bool> = params
        .tensors
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.rank() >= 2, t.len()))
        .collect();
    mask.extend([false; N_TASKS]);
    mask
}

fn labels_of(cohort: &Cohort, idx: usize) -> [f64; N_TASKS] {
    cohort.records()[idx]
        .labels
        .severe_flags()
        .map(|f| if f { 1.0 } else { 0.0 })
}

/// Trains on every fold except `fold_id` and returns the best-epoch weights.
pub fn train_fold(
    cohort: &Cohort,
    folds: &FoldAssignment,
    fold_id: usize,
    config: &TrainConfig,
    net: &Net1DConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    folds.validate(cohort)?;
    let (train_idx, val_idx) = folds.split_indices(cohort, fold_id)?;
    if val_idx.is_empty() {
        return Err(Error::Data(format!("validation fold {fold_id} is empty")));
    }
    if train_idx.is_empty() {
        return Err(Error::Data(format!(
            "no training records outside fold {fold_id}"
        )));
    }
    let n = cohort.records()[0].ecg.n_samples();
    if net.input_len != n {
        return Err(Error::Config(format!(
            "model input length {} does not match records of {n} samples",
            net.input_len
        )));
    }
    let normalized: Vec<Option<Vec<f64>>> = {
        let mut keep = vec![false; cohort.len()];
        train_idx.iter().for_each(|&i| keep[i] = true);
        cohort
            .records()
            .par_iter()
            .zip(keep)
            .map(|(r, k)| {
                k.then(|| zscore_normalize(&r.ecg).map(|e| e.signal().to_vec()))
                    .transpose()
            })
            .collect::<Result<_>>()?
    };
    let val_records: Vec<_> = val_idx.iter().map(|&i| &cohort.records()[i].ecg).collect();

    let mut params = ModelParams::init(net)?;
    let mut log_vars = [0.0; N_TASKS];
    let trunk_len = params.trunk_len();
    let model_len = params.parameter_count();
    let mut opt = AdamW::new(decay_mask(&params));
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let fold_key = fold_id as u64;
    let seed = config.seed;

    let mut log = Vec::with_capacity(config.epochs);
    let mut snapshots: Vec<(ModelParams, [f64; N_TASKS])> = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let alpha = AugSchedule::new(epoch, config.epochs)?.alpha(config.augment.alpha_floor);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::keyed(
            seed,
            &[stream::SHUFFLE, fold_key, epoch as u64],
        ));
        let mut loss_sum = [0.0; N_TASKS];
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let mut data = Vec::with_capacity(2 * b * N_LEADS * n);
            for &i in batch {
                data.extend_from_slice(normalized[i].as_deref().expect("train record"));
            }
            let views: Vec<Vec<f64>> = batch
                .par_iter()
                .map(|&i| {
                    let mut s = normalized[i].clone().expect("train record");
                    let mut r =
                        rng::keyed(seed, &[stream::AUGMENT, fold_key, epoch as u64, i as u64]);
                    augment_signal(&mut s, n, alpha, &config.augment, &mut r);
                    s
                })
                .collect();
            views.iter().for_each(|v| data.extend_from_slice(v));
            let input = Tensor::new(vec![2 * b, N_LEADS, n], data)?;
            let targets: Vec<[f64; N_TASKS]> = batch
                .iter()
                .chain(batch)
                .map(|&i| labels_of(cohort, i))
                .collect();

            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let s_var = tape.param(Tensor::new(vec![1, N_TASKS], log_vars.to_vec())?);
            let x = tape.constant(input);
            let logits = params.logits(&mut tape, &vars, x)?;
            let losses = task_loss_vars(&mut tape, logits, &targets)?;
            let terms = weighted_terms(
                &mut tape,
                &losses,
                config.uncertainty_weighting.then_some(s_var),
            )?;
            let mut total = sum_vars(&mut tape, &terms)?;
            let extra = if config.consistency_weight > 0.0 {
                let a = tape.slice_rows(logits, 0, b)?;
                let c = tape.slice_rows(logits, b, 2 * b)?;
                let d = tape.sub(a, c)?;
                let sq = tape.mul(d, d)?;
                let mse = tape.mean(sq)?;
                let e = tape.mul_scalar(mse, config.consistency_weight)?;
                total = tape.add(total, e)?;
                Some(e)
            } else {
                None
            };
            let mut prng = rng::keyed(seed, &[stream::PCGRAD, fold_key, step as u64]);
            let grad = step_gradient(
                &tape,
                &terms,
                total,
                extra,
                trunk_len,
                config.pcgrad,
                &mut prng,
            )?;
            if grad.as_slice().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at step {step}")));
            }

            lr = lr_at(step + 1, total_steps, config);
            let mut flat = params.flat();
            flat.extend_from_slice(&log_vars);
            opt.step(&mut flat, grad.as_slice(), lr, config.weight_decay)?;
            params.set_flat(&flat[..model_len])?;
            log_vars.copy_from_slice(&flat[model_len..]);
            for (acc, &l) in loss_sum.iter_mut().zip(&losses) {
                *acc += tape.value(l).item()? * b as f64;
            }
            step += 1;
        }

        let probs = predict_records(&params, &val_records)?;
        let mut aucs = Vec::new();
        let mut excluded = Vec::new();
        for v in Vessel::ALL {
            let scores: Vec<f64> = probs.iter().map(|p| p[v.index()]).collect();
            let labels: Vec<bool> = val_idx
                .iter()
                .map(|&i| cohort.records()[i].labels.severe(v))
                .collect();
            match auc(&scores, &labels) {
                Ok(a) => aucs.push(Some(a)),
                Err(Error::Undefined(_)) => {
                    excluded.push(v);
                    aucs.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        if !excluded.is_empty() {
            warn!(
                "fold {fold_id} epoch {}: single-class validation for {excluded:?}",
                epoch + 1
            );
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            task_loss: loss_sum.map(|s| s / train_idx.len() as f64),
            sigma: TaskUncertainty { log_vars }.sigmas(),
            macro_auc: macro_auc(&aucs),
            lr,
            alpha,
            excluded_vessels: excluded,
        };
        info!(
            "fold {fold_id} epoch {}: loss {:?} macro-AUC {:?}",
            record.epoch, record.task_loss, record.macro_auc
        );
        log.push(record);
        snapshots.push((params.clone(), log_vars));
    }

    let scores: Vec<Option<f64>> = log.iter().map(|r| r.macro_auc).collect();
    let best = select_best_epoch(&scores).expect("at least one epoch");
    let (best_params, best_log_vars) = snapshots.swap_remove(best - 1);
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            params: best_params,
            log_vars: best_log_vars,
            provenance: Provenance {
                fold: Some(fold_id),
                epoch: best,
                val_macro_auc: scores[best - 1],
                seed,
                format_version: CHECKPOINT_VERSION,
            },
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weighted_loss_examples() {
        assert_eq!(uncertainty_weighted_loss(&[1.0], &[0.0]).unwrap(), 0.5);
        let s2 = (4.0f64).ln();
        let v = uncertainty_weighted_loss(&[2.0, 8.0], &[0.0, s2]).unwrap();
        assert_abs_diff_eq!(v, 2.0 + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn frozen_sigma_is_half_sum() {
        let mut tape = Tape::new();
        let ls: Vec<Var> = [0.3, 1.7, 0.01, 2.5]
            .iter()
            .map(|&l| tape.param(Tensor::scalar(l)))
            .collect();
        let terms = weighted_terms(&mut tape, &ls, None).unwrap();
        let total = sum_vars(&mut tape, &terms).unwrap();
        assert_eq!(
            tape.value(total).item().unwrap(),
            0.3 / 2.0 + 1.7 / 2.0 + 0.01 / 2.0 + 2.5 / 2.0
        );
    }

    #[test]
    fn log_var_gradient_matches_closed_form() {
        let losses = [0.7, 1.3, 0.2, 4.0];
        let s = [0.1, -0.4, 0.9, 0.0];
        let mut tape = Tape::new();
        let s_var = tape.param(Tensor::new(vec![1, 4], s.to_vec()).unwrap());
        let ls: Vec<Var> = losses
            .iter()
            .map(|&l| tape.constant(Tensor::scalar(l)))
            .collect();
        let terms = weighted_terms(&mut tape, &ls, Some(s_var)).unwrap();
        let total = sum_vars(&mut tape, &terms).unwrap();
        let g = tape.backward(total).unwrap();
        for t in 0..4 {
            let analytic = -losses[t] * (-s[t]).exp() / 2.0 + 0.5;
            assert_abs_diff_eq!(g.as_slice()[t], analytic, epsilon = 1e-8);
        }
    }

    #[test]
    fn pcgrad_examples() {
        let mut r = rng::keyed(0, &[]);
        let v = |x: &[f64]| GradientVector::new(x.to_vec());
        let out = pcgrad(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])], &mut r).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 1.0]);

        let (_, trace) = pcgrad_traced(&[v(&[1.0, 0.0]), v(&[-1.0, 1.0])], &mut r).unwrap();
        assert_eq!(trace.adjusted[0].as_slice(), &[0.5, 0.5]);
        assert!(trace
            .projections
            .iter()
            .all(|p| p.adjusted_dot.abs() < 1e-15));

        let out = pcgrad(&[v(&[1.0, 1.0]), v(&[2.0, 2.0])], &mut r).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 3.0]);
        assert!(pcgrad(&[v(&[1.0]), v(&[1.0, 2.0])], &mut r).is_err());
    }

    #[test]
    fn pcgrad_skips_zero_gradients() {
        let mut r = rng::keyed(0, &[]);
        let v = |x: &[f64]| GradientVector::new(x.to_vec());
        let out = pcgrad(&[v(&[1.0, -2.0]), v(&[0.0, 0.0])], &mut r).unwrap();
        assert_eq!(out.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_cases() {
        let mut opt = AdamW::new(vec![true; 3]);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut opt = AdamW::new(vec![false; 3]);
        let mut p = vec![0.0; 3];
        opt.step(&mut p, &[0.3, -5.0, 1e-3], 0.01, 0.0).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert_abs_diff_eq!(*x, 0.01 * s, epsilon = 1e-7);
        }

        let mut opt = AdamW::new(vec![true; 2]);
        let mut p = vec![2.0, -4.0];
        opt.step(&mut p, &[0.0; 2], 0.1, 0.5).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 100, &cfg), 0.0);
        assert_abs_diff_eq!(lr_at(10, 100, &cfg), 1e-3, epsilon = 1e-18);
        assert!(lr_at(100, 100, &cfg).abs() <= 1e-12);
        assert!(lr_at(5, 100, &cfg) < lr_at(10, 100, &cfg));
        assert!(lr_at(60, 100, &cfg) > lr_at(90, 100, &cfg));
    }

    #[test]
    fn best_epoch_selection() {
        assert_eq!(select_best_epoch(&[Some(0.8), Some(0.7)]), Some(1));
        assert_eq!(
            select_best_epoch(&[Some(0.6), Some(0.7), Some(0.7)]),
            Some(2)
        );
        assert_eq!(select_best_epoch(&[None, Some(0.5)]), Some(2));
        assert_eq!(select_best_epoch(&[None, None]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn log_csv_header() {
        let csv = training_log_csv(&[EpochRecord {
            epoch: 1,
            task_loss: [0.1; 4],
            sigma: [1.0; 4],
            macro_auc: None,
            lr: 0.001,
            alpha: 1.0,
            excluded_vessels: vec![Vessel::Lm],
        }])
        .unwrap();
        let mut lines = csv.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("epoch,loss_rca,loss_lm,loss_lad,loss_lcx,sigma_rca"));
        assert!(lines.next().unwrap().contains("undefined"));
    }
}
