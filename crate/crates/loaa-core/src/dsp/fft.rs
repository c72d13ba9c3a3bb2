//! Iterative radix-2 FFT on `Complex<f64>` buffers.

use alloc::format;

use num_complex::Complex64;

use crate::error::{CoreError, Result};

/// In-place forward DFT; the length must be a power of two.
pub fn fft_in_place(buf: &mut [Complex64]) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(CoreError::Config(format!(
            "fft length must be a nonzero power of two, got {n}"
        )));
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }
    // Butterflies, smallest span first.
    let mut span = 1;
    while span < n {
        let step = -core::f64::consts::PI / span as f64;
        for start in (0..n).step_by(span * 2) {
            for k in 0..span {
                let angle = step * k as f64;
                let tw = Complex64::new(libm::cos(angle), libm::sin(angle));
                let a = buf[start + k];
                let b = buf[start + k + span] * tw;
                buf[start + k] = a + b;
                buf[start + k + span] = a - b;
            }
        }
        span *= 2;
    }
    Ok(())
}
