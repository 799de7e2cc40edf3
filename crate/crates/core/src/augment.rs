//! Stochastic ECG augmentations with an epoch-dependent cosine intensity.
//!
//! The intensity `alpha` scales every transform: shift range, scale
//! half-range, noise std and occlusion length. At `alpha == 0` each
//! transform returns its input untouched and consumes no randomness.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{EcgRecord, N_LEADS};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Cosine-annealed intensity `0.5 + 0.5 cos(pi e / E)`.
pub fn intensity(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::InvalidArgument("total epochs must be >= 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} beyond total {total_epochs}"
        )));
    }
    if epoch == 0 {
        return Ok(1.0);
    }
    if epoch == total_epochs {
        return Ok(0.0);
    }
    Ok(0.5 + 0.5 * (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugSchedule {
    pub total_epochs: usize,
    pub epoch: usize,
}

impl AugSchedule {
    pub fn new(epoch: usize, total_epochs: usize) -> Result<Self> {
        intensity(epoch, total_epochs)?;
        Ok(Self {
            total_epochs,
            epoch,
        })
    }

    /// Intensity rescaled onto `[floor, 1]`; a floor of 0 gives the raw curve.
    pub fn alpha(&self, floor: f64) -> f64 {
        let a = intensity(self.epoch, self.total_epochs).expect("validated at construction");
        if floor == 0.0 {
            a
        } else {
            floor + (1.0 - floor) * a
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Maximum circular shift as a fraction of signal length.
    pub max_shift_fraction: f64,
    /// Half-width of the uniform amplitude factor around 1.0.
    pub scale_half_range: f64,
    /// Noise std as a fraction of each lead's std.
    pub noise_std_fraction: f64,
    pub occlusion_min_fraction: f64,
    pub occlusion_max_fraction: f64,
    pub shift: bool,
    pub scale: bool,
    pub noise: bool,
    pub occlusion: bool,
    /// Lower bound of the rescaled intensity; 0.5 gives a 1.0 -> 0.5 ramp.
    pub alpha_floor: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            max_shift_fraction: 0.10,
            scale_half_range: 0.10,
            noise_std_fraction: 0.05,
            occlusion_min_fraction: 0.02,
            occlusion_max_fraction: 0.10,
            shift: true,
            scale: true,
            noise: true,
            occlusion: true,
            alpha_floor: 0.0,
        }
    }
}

impl AugConfig {
    pub fn disabled() -> Self {
        Self {
            shift: false,
            scale: false,
            noise: false,
            occlusion: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            self.max_shift_fraction,
            self.scale_half_range,
            self.noise_std_fraction,
            self.occlusion_min_fraction,
            self.occlusion_max_fraction,
            self.alpha_floor,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(
                "augmentation fractions must lie in [0, 1]".into(),
            ));
        }
        if self.occlusion_min_fraction > self.occlusion_max_fraction {
            return Err(Error::Config("occlusion min exceeds max".into()));
        }
        Ok(())
    }
}

/// Circular roll of every lead by `shift` samples (positive moves right).
pub fn roll(signal: &mut [f64], n: usize, shift: i64) {
    if n == 0 {
        return;
    }
    let s = shift.rem_euclid(n as i64) as usize;
    for lead in signal.chunks_mut(n) {
        lead.rotate_right(s);
    }
}

pub fn temporal_shift(signal: &mut [f64], n: usize, alpha: f64, max_fraction: f64, rng: &mut Rng) {
    if alpha == 0.0 || n == 0 {
        return;
    }
    let max_shift = (max_fraction * alpha * n as f64).round() as i64;
    let s = rng.random_range(-max_shift..=max_shift);
    roll(signal, n, s);
}

/// Multiplies all leads by one factor drawn from `[1 - h*alpha, 1 + h*alpha]`.
pub fn amplitude_scale(signal: &mut [f64], alpha: f64, half_range: f64, rng: &mut Rng) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    let c = 1.0 + half_range * alpha * rng.random_range(-1.0..=1.0);
    signal.iter_mut().for_each(|v| *v *= c);
    c
}

/// Adds independent `N(0, (base * alpha * lead_std)^2)` noise per sample.
pub fn gaussian_noise(signal: &mut [f64], n: usize, alpha: f64, base_std: f64, rng: &mut Rng) {
    if alpha == 0.0 || n == 0 {
        return;
    }
    for lead in signal.chunks_mut(n) {
        let mean = lead.iter().sum::<f64>() / n as f64;
        let std = (lead.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        let sigma = base_std * alpha * std;
        for v in lead.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
}

/// Zeroes one contiguous window of `round(f * alpha * n)` samples in all
/// leads, `f ~ U[min, max]`. Returns the window as `(start, len)`.
pub fn occlude(
    signal: &mut [f64],
    n: usize,
    alpha: f64,
    min_fraction: f64,
    max_fraction: f64,
    rng: &mut Rng,
) -> (usize, usize) {
    if alpha == 0.0 || n == 0 {
        return (0, 0);
    }
    let f = if max_fraction > min_fraction {
        rng.random_range(min_fraction..=max_fraction)
    } else {
        min_fraction
    };
    let len = ((f * alpha * n as f64).round() as usize).min(n);
    let start = rng.random_range(0..=n - len);
    for lead in signal.chunks_mut(n) {
        lead[start..start + len].iter_mut().for_each(|v| *v = 0.0);
    }
    (start, len)
}

/// Shift, scale, noise, occlusion, in that order, at intensity `alpha`.
pub fn augment_signal(signal: &mut [f64], n: usize, alpha: f64, config: &AugConfig, rng: &mut Rng) {
    debug_assert_eq!(signal.len(), N_LEADS * n);
    if config.shift {
        temporal_shift(signal, n, alpha, config.max_shift_fraction, rng);
    }
    if config.scale {
        amplitude_scale(signal, alpha, config.scale_half_range, rng);
    }
    if config.noise {
        gaussian_noise(signal, n, alpha, config.noise_std_fraction, rng);
    }
    if config.occlusion {
        occlude(
            signal,
            n,
            alpha,
            config.occlusion_min_fraction,
            config.occlusion_max_fraction,
            rng,
        );
    }
}

pub fn augment(
    record: &EcgRecord,
    epoch: usize,
    total_epochs: usize,
    config: &AugConfig,
    rng: &mut Rng,
) -> Result<EcgRecord> {
    let alpha = AugSchedule::new(epoch, total_epochs)?.alpha(config.alpha_floor);
    let mut signal = record.signal().to_vec();
    augment_signal(&mut signal, record.n_samples(), alpha, config, rng);
    record.clone().with_signal(signal)
}
