//! Hann-windowed short-time Fourier transform.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use super::fft::fft_in_place;
use super::{FrontendConfig, WaveBuffer};
use crate::error::{CoreError, Result};

/// One-sided complex spectra, `n_frames` rows of `n_bins` bins each. The frame
/// count always equals the configured target: missing frames are all-zero,
/// excess frames are dropped.
#[derive(Debug, Clone)]
pub struct ComplexFrames {
    pub n_frames: usize,
    pub n_bins: usize,
    data: Vec<Complex64>,
}

impl ComplexFrames {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n_bins..(i + 1) * self.n_bins]
    }

    /// Power spectrum |X|^2 of one frame bin.
    pub fn power(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.n_bins + bin].norm_sqr()
    }
}

/// Periodic Hann window of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - libm::cos(2.0 * core::f64::consts::PI * i as f64 / n as f64)))
        .collect()
}

pub fn stft(wave: &WaveBuffer, cfg: &FrontendConfig) -> Result<ComplexFrames> {
    let frame_len = cfg.frame_length_samples();
    let shift = cfg.frame_shift_samples();
    let n = wave.samples.len();
    if n < frame_len {
        return Err(CoreError::Validation(format!(
            "waveform of {n} samples is shorter than one frame ({frame_len})",
        )));
    }
    let n_fft = cfg.n_fft();
    let n_bins = cfg.n_bins();
    let raw_frames = 1 + (n - frame_len) / shift;
    let window = hann(frame_len);

    let out_frames = cfg.target_frames;
    let mut data = vec![Complex64::new(0.0, 0.0); out_frames * n_bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for f in 0..raw_frames.min(out_frames) {
        let start = f * shift;
        for slot in buf.iter_mut() {
            *slot = Complex64::new(0.0, 0.0);
        }
        for (i, &w) in window.iter().enumerate() {
            buf[i] = Complex64::new(wave.samples[start + i] as f64 * w, 0.0);
        }
        fft_in_place(&mut buf)?;
        data[f * n_bins..(f + 1) * n_bins].copy_from_slice(&buf[..n_bins]);
    }
    Ok(ComplexFrames { n_frames: out_frames, n_bins, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::synth::{synth_signal, PatternKind, SynthSpec};

    fn cfg64() -> FrontendConfig {
        FrontendConfig::with_target_frames(64)
    }

    #[test]
    fn ten_seconds_at_ten_ms_gives_1024_frames() {
        let wave = WaveBuffer { samples: alloc::vec![0.0; 160_000], sample_rate: 16_000 };
        let frames = stft(&wave, &FrontendConfig::ten_second()).unwrap();
        assert_eq!(frames.n_frames, 1024);
        assert_eq!(frames.n_bins, 257);
    }

    #[test]
    fn zero_waveform_has_zero_spectra() {
        let wave = WaveBuffer { samples: alloc::vec![0.0; 16_000], sample_rate: 16_000 };
        let frames = stft(&wave, &cfg64()).unwrap();
        for f in 0..frames.n_frames {
            for b in 0..frames.n_bins {
                assert_eq!(frames.power(f, b), 0.0);
            }
        }
    }

    #[test]
    fn empty_waveform_is_a_validation_error() {
        let wave = WaveBuffer { samples: alloc::vec![], sample_rate: 16_000 };
        assert!(matches!(stft(&wave, &cfg64()), Err(CoreError::Validation(_))));
    }

    #[test]
    fn bin_centered_sine_concentrates_energy() {
        // Bin centers sit at k * sr / n_fft = k * 31.25 Hz; pick k = 32 -> 1 kHz.
        let spec = SynthSpec {
            kind: PatternKind::SteadyTone { freq_hz: 1000.0 },
            duration_s: 0.7,
            noise_floor: 0.0,
            seed: 0,
        };
        let wave = synth_signal(&spec).unwrap();
        let frames = stft(&wave, &cfg64()).unwrap();
        let target_bin = 32usize;
        // The 400-sample Hann window zero-padded to 512 has a main lobe two
        // FFT bins wide on each side; >=99% of the energy stays inside it.
        for f in 0..60 {
            let total: f64 = (0..frames.n_bins).map(|b| frames.power(f, b)).sum();
            let near: f64 = (target_bin - 2..=target_bin + 2)
                .map(|b| frames.power(f, b))
                .sum();
            assert!(
                near >= 0.99 * total,
                "frame {f}: {:.4} of energy near bin {target_bin}",
                near / total
            );
            let peak = (0..frames.n_bins)
                .max_by(|&a, &b| frames.power(f, a).partial_cmp(&frames.power(f, b)).unwrap())
                .unwrap();
            assert_eq!(peak, target_bin);
        }
    }
}
