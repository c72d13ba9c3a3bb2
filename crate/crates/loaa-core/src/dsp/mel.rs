//! Triangular mel filterbank and log-mel spectrogram extraction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::stft::ComplexFrames;
use super::FrontendConfig;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Log floor applied before taking the logarithm of mel energies.
pub const LOG_FLOOR: f64 = 1e-10;

/// Every normalized spectrogram has mean 0 and this standard deviation.
pub const TARGET_STD: f64 = 0.5;

pub fn mel_from_hz(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// Log-mel energies as an `[n_mels, n_frames]` matrix, frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

/// Triangular filters with centers uniformly spaced on the mel scale. Each
/// triangle ramps linearly in Hz and peaks at weight 1 (no area
/// normalization), so a bin is shared by at most two adjacent filters.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Tensor<f64>> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if cfg.n_mels < 2 {
        return Err(CoreError::Validation(format!(
            "need at least 2 mel bands, got {}",
            cfg.n_mels
        )));
    }
    if cfg.f_max > nyquist {
        return Err(CoreError::Validation(format!(
            "f_max {} exceeds Nyquist {}",
            cfg.f_max, nyquist
        )));
    }
    if cfg.f_min < 0.0 || cfg.f_min >= cfg.f_max {
        return Err(CoreError::Validation(format!(
            "need 0 <= f_min < f_max, got {} and {}",
            cfg.f_min, cfg.f_max
        )));
    }
    let n_bins = cfg.n_bins();
    let n_fft = cfg.n_fft();
    let mel_lo = mel_from_hz(cfg.f_min);
    let mel_hi = mel_from_hz(cfg.f_max);
    // n_mels + 2 edge points; filter i spans edges [i, i+1, i+2].
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    let mut fb = vec![0.0f64; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * n_bins + b] = w;
        }
    }
    Tensor::new(vec![cfg.n_mels, n_bins], fb)
}

/// Applies the filterbank to frame power spectra, takes the floored log, and
/// normalizes the whole utterance to mean 0 / std [`TARGET_STD`]. Silence
/// (zero variance after the log floor) normalizes to all zeros.
pub fn log_mel(frames: &ComplexFrames, filterbank: &Tensor<f64>, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    let n_bins = frames.n_bins;
    if filterbank.shape() != [cfg.n_mels, n_bins] {
        return Err(CoreError::Dimension(format!(
            "filterbank shape {:?} does not match {} mels x {} bins",
            filterbank.shape(),
            cfg.n_mels,
            n_bins
        )));
    }
    let n_frames = frames.n_frames;
    let fb = filterbank.data();
    let mut values = vec![0.0f64; cfg.n_mels * n_frames];
    for t in 0..n_frames {
        for m in 0..cfg.n_mels {
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            let mut acc = 0.0;
            for (b, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    acc += w * frames.power(t, b);
                }
            }
            values[m * n_frames + t] = libm::log(acc.max(LOG_FLOOR));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    // A constant spectrogram (silence at the log floor) has only rounding
    // noise in its variance; treat it as zero-spread and emit zeros.
    let scale = if std > 1e-6 { TARGET_STD / std } else { 0.0 };
    let data: Vec<f32> = values.iter().map(|v| ((v - mean) * scale) as f32).collect();
    Ok(MelSpectrogram {
        values: Tensor::new(vec![cfg.n_mels, n_frames], data)?,
        n_mels: cfg.n_mels,
        n_frames,
        frame_length_ms: cfg.frame_length_ms,
        frame_shift_ms: cfg.frame_shift_ms,
    })
}

/// Raw (un-normalized) log-mel energies, kept for tests that assert
/// pre-normalization properties like homogeneity under input scaling.
pub fn log_mel_unnormalized(
    frames: &ComplexFrames,
    filterbank: &Tensor<f64>,
    cfg: &FrontendConfig,
) -> Result<Tensor<f64>> {
    let n_bins = frames.n_bins;
    let n_frames = frames.n_frames;
    let fb = filterbank.data();
    let mut values = vec![0.0f64; cfg.n_mels * n_frames];
    for t in 0..n_frames {
        for m in 0..cfg.n_mels {
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            let mut acc = 0.0;
            for (b, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    acc += w * frames.power(t, b);
                }
            }
            values[m * n_frames + t] = libm::log(acc.max(LOG_FLOOR));
        }
    }
    Tensor::new(vec![cfg.n_mels, n_frames], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::stft;
    use crate::dsp::synth::{synth_signal, PatternKind, SynthSpec};
    use crate::dsp::WaveBuffer;

    fn cfg() -> FrontendConfig {
        FrontendConfig::with_target_frames(64)
    }

    #[test]
    fn mel_formula_reference_point() {
        assert!((mel_from_hz(700.0) - 2595.0 * libm::log10(2.0)).abs() < 1e-12);
        assert!((mel_from_hz(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(mel_from_hz(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filters_are_nonnegative_and_unimodal() {
        let fb = mel_filterbank(&cfg()).unwrap();
        let n_bins = cfg().n_bins();
        for m in 0..cfg().n_mels {
            let row = &fb.data()[m * n_bins..(m + 1) * n_bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            for w in row[..peak].windows(2) {
                assert!(w[0] <= w[1] + 1e-12, "filter {m} not rising before its peak");
            }
            for w in row[peak..].windows(2) {
                assert!(w[0] >= w[1] - 1e-12, "filter {m} not falling after its peak");
            }
        }
    }

    #[test]
    fn adjacent_filters_cross_summing_to_one() {
        let fb = mel_filterbank(&cfg()).unwrap();
        let n_bins = cfg().n_bins();
        let n_mels = cfg().n_mels;
        let mut checked = 0;
        for m in 0..n_mels - 1 {
            let a = &fb.data()[m * n_bins..(m + 1) * n_bins];
            let b = &fb.data()[(m + 1) * n_bins..(m + 2) * n_bins];
            for bin in 0..n_bins {
                // Interior bins where filter m is falling and filter m+1 rising.
                if a[bin] > 0.0 && a[bin] < 1.0 && b[bin] > 0.0 && b[bin] < 1.0 {
                    assert!((a[bin] + b[bin] - 1.0).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no overlapping interior bins found");
    }

    #[test]
    fn each_bin_feeds_at_most_two_filters() {
        let fb = mel_filterbank(&cfg()).unwrap();
        let n_bins = cfg().n_bins();
        for bin in 0..n_bins {
            let users = (0..cfg().n_mels)
                .filter(|m| fb.data()[m * n_bins + bin] > 0.0)
                .count();
            assert!(users <= 2, "bin {bin} used by {users} filters");
        }
    }

    #[test]
    fn f_max_above_nyquist_rejected() {
        let mut c = cfg();
        c.f_max = 9000.0;
        assert!(matches!(mel_filterbank(&c), Err(CoreError::Validation(_))));
    }

    #[test]
    fn silence_is_constant_floor_then_zeros() {
        let c = cfg();
        let wave = WaveBuffer { samples: alloc::vec![0.0; 16_000], sample_rate: 16_000 };
        let frames = stft(&wave, &c).unwrap();
        let fb = mel_filterbank(&c).unwrap();
        let raw = log_mel_unnormalized(&frames, &fb, &c).unwrap();
        for &v in raw.data() {
            assert_eq!(v, libm::log(LOG_FLOOR));
        }
        let normalized = log_mel(&frames, &fb, &c).unwrap();
        assert!(normalized.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_amplitude_shifts_log_energy_by_log4() {
        let c = cfg();
        let spec = SynthSpec {
            kind: PatternKind::BandNoise { f_lo: 300.0, f_hi: 4000.0 },
            duration_s: 0.7,
            noise_floor: 0.0,
            seed: 5,
        };
        let wave = synth_signal(&spec).unwrap();
        let mut half = wave.clone();
        // Halve instead of double so nothing clips.
        for s in half.samples.iter_mut() {
            *s *= 0.5;
        }
        let fb = mel_filterbank(&c).unwrap();
        let full = log_mel_unnormalized(&stft(&wave, &c).unwrap(), &fb, &c).unwrap();
        let quarter = log_mel_unnormalized(&stft(&half, &c).unwrap(), &fb, &c).unwrap();
        let log4 = libm::log(4.0);
        let floor = libm::log(LOG_FLOOR);
        let mut checked = 0;
        for (a, b) in full.data().iter().zip(quarter.data()) {
            // Only compare cells comfortably above the floor in both versions.
            if *a > floor + 2.0 * log4 && *b > floor + log4 {
                assert!((a - b - log4).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn normalized_stats_hit_mean_zero_std_half() {
        let c = cfg();
        let spec = SynthSpec {
            kind: PatternKind::UpChirp { f_lo: 200.0, f_hi: 6000.0 },
            duration_s: 0.7,
            noise_floor: 0.01,
            seed: 11,
        };
        let wave = synth_signal(&spec).unwrap();
        let fb = mel_filterbank(&c).unwrap();
        let m = log_mel(&stft(&wave, &c).unwrap(), &fb, &c).unwrap();
        let data = m.values.data();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-5, "mean {mean}");
        assert!((libm::sqrt(var) - 0.5).abs() <= 1e-3, "std {}", libm::sqrt(var));
    }
}
