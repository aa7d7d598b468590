//! Unitary FFT helpers over row-major complex buffers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward and inverse plans for one transform length, scaled by `1/sqrt(n)`.
#[derive(Clone)]
pub struct UnitaryFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for UnitaryFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryFft").field("n", &self.n).finish()
    }
}

impl UnitaryFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        UnitaryFft {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            scale: 1.0 / (n as f64).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Transforms every contiguous row of length `n` in `buf`.
    pub fn forward_rows(&self, buf: &mut [Complex64]) {
        self.run(&self.forward, buf);
    }

    pub fn inverse_rows(&self, buf: &mut [Complex64]) {
        self.run(&self.inverse, buf);
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len() % self.n, 0);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }

    /// Unitary 2D transform of an `n x n` row-major buffer.
    pub fn forward_2d(&self, buf: &mut [Complex64]) {
        self.forward_rows(buf);
        transpose_square(buf, self.n);
        self.forward_rows(buf);
        transpose_square(buf, self.n);
    }

    pub fn inverse_2d(&self, buf: &mut [Complex64]) {
        self.inverse_rows(buf);
        transpose_square(buf, self.n);
        self.inverse_rows(buf);
        transpose_square(buf, self.n);
    }
}

fn transpose_square(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}
