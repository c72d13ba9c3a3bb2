//! Audio frontend: deterministic signal synthesis, STFT, mel filterbank,
//! log-mel normalization, and spectrogram patchification.

pub mod fft;
pub mod mel;
pub mod patch;
pub mod stft;
pub mod synth;

pub use mel::{log_mel, mel_filterbank, mel_from_hz, mel_to_hz, MelSpectrogram};
pub use patch::{patchify, unpatchify, PATCH};
pub use stft::{stft, ComplexFrames};
pub use synth::{synth_signal, PatternKind, SynthSpec, WaveBuffer};

/// Frontend geometry and analysis parameters. The defaults follow the usual
/// audio-spectrogram-transformer convention: 16 kHz input, 25 ms Hann frames
/// with a 10 ms shift, and 128 mel bands over 0-8 kHz.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Frame count every clip is padded or truncated to before patchify.
    pub target_frames: usize,
}

impl FrontendConfig {
    /// 10-second clips: 128 mel bands x 1024 frames, an 8x64 token grid.
    pub fn ten_second() -> Self {
        Self::with_target_frames(1024)
    }

    pub fn with_target_frames(target_frames: usize) -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8_000.0,
            target_frames,
        }
    }

    pub fn frame_length_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0) as usize
    }

    pub fn frame_shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0) as usize
    }

    pub fn n_fft(&self) -> usize {
        self.frame_length_samples().next_power_of_two()
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }
}
