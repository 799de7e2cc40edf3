//! Net1D-lite: a residual 1-D CNN trunk shared by four per-vessel heads.
//!
//! ```text
//! x [B, 12, N]
//!  -> stem: conv(k, stride s0) + bias, relu
//!  -> n_blocks x { relu(conv(k, stride 2) + bias + conv1x1(stride 2)) }, channels doubling
//!  -> global average pool [B, C]
//!  -> dense [B, 4]   (RCA, LM, LAD, LCX)
//! ```

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::cohort::{zscore_normalize, Cohort, EcgRecord, N_LEADS};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

pub const N_TASKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Net1DConfig {
    pub input_leads: usize,
    pub input_len: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

impl Default for Net1DConfig {
    fn default() -> Self {
        Self {
            input_leads: N_LEADS,
            input_len: 5000,
            stem_channels: 16,
            stem_stride: 2,
            n_blocks: 4,
            kernel_size: 7,
            n_tasks: N_TASKS,
            seed: 0,
        }
    }
}

impl Net1DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks != N_TASKS {
            return Err(Error::Config(format!("n_tasks must be {N_TASKS}")));
        }
        if self.input_leads == 0
            || self.input_len == 0
            || self.stem_channels == 0
            || self.stem_stride == 0
            || self.kernel_size == 0
        {
            return Err(Error::Config("Net1D sizes must be positive".into()));
        }
        let mut len = crate::autodiff::conv1d_output_len(
            self.input_len,
            self.kernel_size,
            self.stem_stride,
            self.kernel_size / 2,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..self.n_blocks {
            len =
                crate::autodiff::conv1d_output_len(len, self.kernel_size, 2, self.kernel_size / 2)
                    .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.stem_channels << self.n_blocks
    }

    /// Names and shapes of every parameter tensor, in registry order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = vec![
            (
                "stem.weight".to_string(),
                vec![self.stem_channels, self.input_leads, k],
            ),
            ("stem.bias".to_string(), vec![self.stem_channels]),
        ];
        let mut c = self.stem_channels;
        for b in 0..self.n_blocks {
            let c2 = c * 2;
            out.push((format!("block{b}.conv.weight"), vec![c2, c, k]));
            out.push((format!("block{b}.conv.bias"), vec![c2]));
            out.push((format!("block{b}.skip.weight"), vec![c2, c, 1]));
            c = c2;
        }
        out.push(("head.weight".to_string(), vec![self.n_tasks, c]));
        out.push(("head.bias".to_string(), vec![self.n_tasks]));
        out
    }

    /// Number of leading parameter tensors that form the shared trunk.
    pub fn trunk_tensors(&self) -> usize {
        2 + 3 * self.n_blocks
    }
}

/// Parameter tensors of one Net1D-lite instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: Net1DConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// He-normal weights (std = sqrt(2 / fan_in)) and zero biases.
    pub fn init(config: &Net1DConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::keyed(config.seed, &[stream::INIT]);
        let tensors = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Ok(Tensor::zeros(&shape));
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros(config: &Net1DConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_layout()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Element count of the shared trunk (prefix of the flat layout).
    pub fn trunk_len(&self) -> usize {
        self.tensors[..self.config.trunk_tensors()]
            .iter()
            .map(Tensor::len)
            .sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, model has {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every tensor as a trainable parameter.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Adds every tensor as a constant (inference only).
    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, n] if *c == self.config.input_leads && *n == self.config.input_len => Ok(()),
            _ => Err(Error::Shape(format!(
                "model expects [B, {}, {}], got {shape:?}",
                self.config.input_leads, self.config.input_len
            ))),
        }
    }

    /// Records the forward pass; returns `[B, 4]` logits.
    pub fn logits(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let cfg = &self.config;
        let pad = cfg.kernel_size / 2;
        let mut h = tape.conv1d(input, vars[0], cfg.stem_stride, pad)?;
        h = tape.channel_bias(h, vars[1])?;
        h = tape.relu(h)?;
        for b in 0..cfg.n_blocks {
            let base = 2 + 3 * b;
            let y = tape.conv1d(h, vars[base], 2, pad)?;
            let y = tape.channel_bias(y, vars[base + 1])?;
            let skip = tape.conv1d(h, vars[base + 2], 2, 0)?;
            let sum = tape.add(y, skip)?;
            h = tape.relu(sum)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let n = vars.len();
        tape.dense(pooled, vars[n - 2], vars[n - 1])
    }

    /// Logits for a `[B, 12, N]` batch without recording gradients.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.logits(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.map(sigmoid))
    }
}

/// Stacks z-score normalized records into a `[B, 12, N]` batch.
pub fn normalized_batch(records: &[&EcgRecord]) -> Result<Tensor> {
    let n = records.first().map_or(0, |r| r.n_samples());
    let mut data = Vec::with_capacity(records.len() * N_LEADS * n);
    for r in records {
        if r.n_samples() != n {
            return Err(Error::Shape(format!(
                "record {} has {} samples, batch expects {n}",
                r.ecg_id,
                r.n_samples()
            )));
        }
        data.extend_from_slice(zscore_normalize(r)?.signal());
    }
    Tensor::new(vec![records.len(), N_LEADS, n], data)
}

pub const PREDICT_BATCH: usize = 64;

/// Per-record probabilities `[RCA, LM, LAD, LCX]`, in cohort order.
pub fn predict_cohort(params: &ModelParams, cohort: &Cohort) -> Result<Vec<[f64; N_TASKS]>> {
    let records: Vec<&EcgRecord> = cohort.records().iter().map(|r| &r.ecg).collect();
    predict_records(params, &records)
}

pub fn predict_records(
    params: &ModelParams,
    records: &[&EcgRecord],
) -> Result<Vec<[f64; N_TASKS]>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(PREDICT_BATCH) {
        let probs = params.predict_proba(&normalized_batch(chunk)?)?;
        out.extend(
            probs
                .data()
                .chunks_exact(N_TASKS)
                .map(|c| [c[0], c[1], c[2], c[3]]),
        );
    }
    Ok(out)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STNGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold: Option<usize>,
    /// 1-based epoch whose weights were kept.
    pub epoch: usize,
    pub val_macro_auc: Option<f64>,
    pub seed: u64,
    pub format_version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParams,
    /// Task log-variances `s_t = log sigma_t^2`.
    pub log_vars: [f64; N_TASKS],
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: Net1DConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
    payload_values: usize,
}

const LOG_VAR_NAME: &str = "task.log_var";

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let layout = self.params.config.param_layout();
        for ((name, _), t) in layout.iter().zip(&self.params.tensors) {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                len: t.len(),
            });
            payload.extend_from_slice(t.data());
        }
        entries.push(TensorEntry {
            name: LOG_VAR_NAME.into(),
            shape: vec![N_TASKS],
            offset: payload.len(),
            len: N_TASKS,
        });
        payload.extend_from_slice(&self.log_vars);
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            provenance: self.provenance.clone(),
            tensors: entries,
            payload_values: payload.len(),
        };
        let header =
            serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("header lacks format_version"))? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(raw)
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() != 8 * header.payload_values {
            return Err(corrupt(&format!(
                "payload has {} bytes, header declares {} values",
                payload.len(),
                header.payload_values
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let layout = header.config.param_layout();
        if header.tensors.len() != layout.len() + 1 {
            return Err(Error::CheckpointShape(format!(
                "{} tensors stored, config needs {}",
                header.tensors.len(),
                layout.len() + 1
            )));
        }
        let take = |e: &TensorEntry| -> Result<Vec<f64>> {
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > values.len() {
                return Err(Error::CheckpointCorrupt(format!(
                    "bad manifest entry {}",
                    e.name
                )));
            }
            Ok(values[e.offset..e.offset + e.len].to_vec())
        };
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::CheckpointShape(format!(
                    "tensor {} {:?} does not match config {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            tensors.push(Tensor::new(shape.clone(), take(entry)?)?);
        }
        let lv_entry = header.tensors.last().expect("non-empty");
        if lv_entry.name != LOG_VAR_NAME || lv_entry.shape != [N_TASKS] {
            return Err(Error::CheckpointShape("missing task log-variances".into()));
        }
        let lv = take(lv_entry)?;
        let log_vars = [lv[0], lv[1], lv[2], lv[3]];
        Ok(Self {
            params: ModelParams {
                config: header.config,
                tensors,
            },
            log_vars,
            provenance: header.provenance,
        })
    }

    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(crate::cohort::hex_string(&Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and fails fast if it cannot consume `n_samples` inputs.
pub fn load_checkpoint_for(path: &Path, n_samples: usize) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.config.input_len != n_samples {
        return Err(Error::CheckpointShape(format!(
            "checkpoint expects input length {}, data has {n_samples}",
            ckpt.params.config.input_len
        )));
    }
    Ok(ckpt)
}
