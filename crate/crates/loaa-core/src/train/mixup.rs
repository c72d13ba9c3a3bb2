//! Mixup: convex combination of a batch with a seeded permutation of itself.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MixupOutput {
    pub inputs: Vec<Tensor<f32>>,
    /// `[batch, n_classes]` soft labels, row-major.
    pub targets: Vec<f32>,
    pub lambda: f64,
    pub partner: Vec<usize>,
}

/// Deterministic core: mixes with a given lambda and partner permutation.
pub fn mix_with(
    inputs: &[Tensor<f32>],
    targets: &[f32],
    n_classes: usize,
    lambda: f64,
    partner: &[usize],
) -> Result<MixupOutput> {
    let b = inputs.len();
    if targets.len() != b * n_classes {
        return Err(CoreError::Dimension(format!(
            "targets must be {b}x{n_classes}, got {} values",
            targets.len()
        )));
    }
    if partner.len() != b {
        return Err(CoreError::Dimension("partner permutation length mismatch".into()));
    }
    let lam = lambda as f32;
    let mut mixed_inputs = Vec::with_capacity(b);
    for (i, x) in inputs.iter().enumerate() {
        let other = &inputs[partner[i]];
        if other.shape() != x.shape() {
            return Err(CoreError::Dimension("mixup inputs must share one shape".into()));
        }
        let data: Vec<f32> = x
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &p)| lam * a + (1.0 - lam) * p)
            .collect();
        mixed_inputs.push(Tensor::new(x.shape().to_vec(), data)?);
    }
    let mut mixed_targets = Vec::with_capacity(b * n_classes);
    for i in 0..b {
        let own = &targets[i * n_classes..(i + 1) * n_classes];
        let other = &targets[partner[i] * n_classes..(partner[i] + 1) * n_classes];
        for (a, p) in own.iter().zip(other) {
            mixed_targets.push(lam * a + (1.0 - lam) * p);
        }
    }
    Ok(MixupOutput { inputs: mixed_inputs, targets: mixed_targets, lambda, partner: partner.to_vec() })
}

/// Draws `lambda ~ Beta(alpha, alpha)` and a partner permutation from the rng,
/// then mixes. One lambda per batch.
pub fn mixup_batch<R: Rng>(
    inputs: &[Tensor<f32>],
    targets: &[f32],
    n_classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<MixupOutput> {
    if alpha <= 0.0 {
        return Err(CoreError::Validation(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| CoreError::Validation(format!("invalid Beta({alpha}, {alpha}): {e}")))?;
    let lambda = beta.sample(rng);
    let mut partner: Vec<usize> = (0..inputs.len()).collect();
    partner.shuffle(rng);
    mix_with(inputs, targets, n_classes, lambda, &partner)
}
