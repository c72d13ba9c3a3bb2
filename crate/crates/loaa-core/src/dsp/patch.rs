//! Non-overlapping patchification of a spectrogram into a token grid.

use alloc::format;
use alloc::vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Patch edge in spectrogram cells; one token covers PATCH x PATCH cells.
pub const PATCH: usize = 16;

/// Splits an `[F, T]` spectrogram into non-overlapping `patch x patch` tiles.
/// The result is an `[F/patch, T/patch, patch*patch]` grid tensor: rows are
/// frequency bands, columns are time, and each tile is flattened row-major
/// (frequency-major, time fastest).
pub fn patchify(spectrogram: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let shape = spectrogram.shape();
    if shape.len() != 2 {
        return Err(CoreError::Dimension(format!(
            "patchify expects a rank-2 spectrogram, got {shape:?}"
        )));
    }
    let (f, t) = (shape[0], shape[1]);
    if patch == 0 || f % patch != 0 || t % patch != 0 {
        return Err(CoreError::Config(format!(
            "spectrogram {f}x{t} not divisible into {patch}x{patch} patches"
        )));
    }
    let (fp, tp) = (f / patch, t / patch);
    let src = spectrogram.data();
    let mut out = vec![0.0f32; f * t];
    let tile = patch * patch;
    for pf in 0..fp {
        for pt in 0..tp {
            let base = (pf * tp + pt) * tile;
            for rr in 0..patch {
                let row = pf * patch + rr;
                let col = pt * patch;
                out[base + rr * patch..base + (rr + 1) * patch]
                    .copy_from_slice(&src[row * t + col..row * t + col + patch]);
            }
        }
    }
    Tensor::new(vec![fp, tp, tile], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let shape = grid.shape();
    if shape.len() != 3 || shape[2] != patch * patch {
        return Err(CoreError::Dimension(format!(
            "unpatchify expects [F_p, T_p, {}], got {shape:?}",
            patch * patch
        )));
    }
    let (fp, tp) = (shape[0], shape[1]);
    let (f, t) = (fp * patch, tp * patch);
    let src = grid.data();
    let tile = patch * patch;
    let mut out = vec![0.0f32; f * t];
    for pf in 0..fp {
        for pt in 0..tp {
            let base = (pf * tp + pt) * tile;
            for rr in 0..patch {
                let row = pf * patch + rr;
                let col = pt * patch;
                out[row * t + col..row * t + col + patch]
                    .copy_from_slice(&src[base + rr * patch..base + (rr + 1) * patch]);
            }
        }
    }
    Tensor::new(vec![f, t], out)
}
