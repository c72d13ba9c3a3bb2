//! Deterministic synthetic signals: the desk-scale stand-in for real audio.
//! Identical spec + seed always produces a bit-identical waveform.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};

/// Base amplitude of every pattern before the noise floor is added.
pub const BASE_AMPLITUDE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum PatternKind {
    /// Constant-frequency sine; a frequency-discriminative class.
    SteadyTone { freq_hz: f64 },
    /// Linear sweep from `f_lo` up to `f_hi`; time-discriminative.
    UpChirp { f_lo: f64, f_hi: f64 },
    /// Linear sweep from `f_hi` down to `f_lo`; time-discriminative.
    DownChirp { f_lo: f64, f_hi: f64 },
    /// Short carrier bursts repeating `rate_hz` times per second.
    PulseTrain { rate_hz: f64, carrier_hz: f64 },
    /// Sum of seeded random sinusoids confined to `[f_lo, f_hi]`.
    BandNoise { f_lo: f64, f_hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthSpec {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub kind: PatternKind,
    pub duration_s: f64,
    /// Standard deviation of the additive white noise floor.
    pub noise_floor: f64,
    pub seed: u64,
}

/// Mono waveform with samples clipped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_freq(f: f64, nyquist: f64) -> Result<()> {
    if !(0.0..nyquist).contains(&f) {
        return Err(CoreError::Validation(format!(
            "frequency {f} Hz outside [0, {nyquist}) (Nyquist limit)"
        )));
    }
    Ok(())
}

pub fn synth_signal(spec: &SynthSpec) -> Result<WaveBuffer> {
    synth_signal_at(spec, 16_000)
}

pub fn synth_signal_at(spec: &SynthSpec, sample_rate: u32) -> Result<WaveBuffer> {
    let nyquist = sample_rate as f64 / 2.0;
    if spec.duration_s <= 0.0 {
        return Err(CoreError::Validation("duration must be positive".into()));
    }
    if spec.noise_floor < 0.0 {
        return Err(CoreError::Validation("noise floor must be nonnegative".into()));
    }
    match spec.kind {
        PatternKind::SteadyTone { freq_hz } => check_freq(freq_hz, nyquist)?,
        PatternKind::UpChirp { f_lo, f_hi } | PatternKind::DownChirp { f_lo, f_hi } => {
            check_freq(f_lo, nyquist)?;
            check_freq(f_hi, nyquist)?;
            if f_lo >= f_hi {
                return Err(CoreError::Validation(format!(
                    "chirp needs f_lo < f_hi, got {f_lo} >= {f_hi}"
                )));
            }
        }
        PatternKind::PulseTrain { rate_hz, carrier_hz } => {
            check_freq(carrier_hz, nyquist)?;
            if rate_hz <= 0.0 {
                return Err(CoreError::Validation("pulse rate must be positive".into()));
            }
        }
        PatternKind::BandNoise { f_lo, f_hi } => {
            check_freq(f_lo, nyquist)?;
            check_freq(f_hi, nyquist)?;
            if f_lo >= f_hi {
                return Err(CoreError::Validation(format!(
                    "band needs f_lo < f_hi, got {f_lo} >= {f_hi}"
                )));
            }
        }
    }

    let n = (spec.duration_s * sample_rate as f64) as usize;
    let dt = 1.0 / sample_rate as f64;
    let tau = 2.0 * core::f64::consts::PI;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let mut samples: Vec<f64> = match spec.kind {
        PatternKind::SteadyTone { freq_hz } => (0..n)
            .map(|i| BASE_AMPLITUDE * libm::sin(tau * freq_hz * i as f64 * dt))
            .collect(),
        PatternKind::UpChirp { f_lo, f_hi } | PatternKind::DownChirp { f_lo, f_hi } => {
            let (f0, f1) = match spec.kind {
                PatternKind::UpChirp { .. } => (f_lo, f_hi),
                _ => (f_hi, f_lo),
            };
            let rate = (f1 - f0) / spec.duration_s;
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    BASE_AMPLITUDE * libm::sin(tau * (f0 * t + 0.5 * rate * t * t))
                })
                .collect()
        }
        PatternKind::PulseTrain { rate_hz, carrier_hz } => {
            // 10 ms Hann-enveloped bursts (shorter if the period is tight).
            let burst_s = (0.010f64).min(0.5 / rate_hz);
            let period = 1.0 / rate_hz;
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    let phase_in_period = t - libm::floor(t / period) * period;
                    if phase_in_period < burst_s {
                        let env = 0.5
                            * (1.0 - libm::cos(tau * phase_in_period / burst_s));
                        BASE_AMPLITUDE * env * libm::sin(tau * carrier_hz * t)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        PatternKind::BandNoise { f_lo, f_hi } => {
            const K: usize = 64;
            let comps: Vec<(f64, f64)> = (0..K)
                .map(|_| {
                    let f = f_lo + (f_hi - f_lo) * rng.random::<f64>();
                    let phase = tau * rng.random::<f64>();
                    (f, phase)
                })
                .collect();
            let amp = BASE_AMPLITUDE * libm::sqrt(2.0 / K as f64);
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    comps
                        .iter()
                        .map(|&(f, p)| amp * libm::sin(tau * f * t + p))
                        .sum()
                })
                .collect()
        }
    };

    if spec.noise_floor > 0.0 {
        for s in samples.iter_mut() {
            // Box-Muller from two uniform draws; ChaCha keeps this portable.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(tau * u2);
            *s += spec.noise_floor * z;
        }
    }

    let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0) as f32).collect();
    Ok(WaveBuffer { samples, sample_rate })
}
