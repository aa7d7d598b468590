//! Shepp-Logan test phantom (modified intensities, values in `[0, 1]`).

use ndarray::{Array2, Array3};

/// `(intensity, semi-axis a, semi-axis b, center x, center y, rotation degrees)`
/// in the unit square `[-1, 1]^2`.
const ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// One `n x n` slice. Pixel `(i, j)` has its center at
/// `x = (2j + 1)/n - 1`, `y = 1 - (2i + 1)/n`.
pub fn shepp_logan(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let x = (2.0 * j as f64 + 1.0) / n as f64 - 1.0;
        let y = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let v: f64 = ELLIPSES
            .iter()
            .filter(|&&(_, a, b, x0, y0, deg)| {
                let (s, c) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - x0, y - y0);
                let xr = dx * c + dy * s;
                let yr = -dx * s + dy * c;
                (xr / a).powi(2) + (yr / b).powi(2) <= 1.0
            })
            .map(|e| e.0)
            .sum();
        // float cancellation of 1 - 0.8 - 0.2 lands slightly off zero
        if v.abs() < 1e-12 { 0.0 } else { v.clamp(0.0, 1.0) }
    })
}

/// `n_z` slices of the phantom, intensity scaled linearly from 1.0 to 0.8.
pub fn phantom_shepp_logan(n: usize, n_z: usize) -> Array3<f64> {
    let slice = shepp_logan(n);
    let mut out = Array3::zeros((n_z, n, n));
    for z in 0..n_z {
        let scale = if n_z > 1 { 1.0 - 0.2 * z as f64 / (n_z - 1) as f64 } else { 1.0 };
        out.index_axis_mut(ndarray::Axis(0), z).assign(&(&slice * scale));
    }
    out
}
