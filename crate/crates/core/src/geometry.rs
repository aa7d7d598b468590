//! Scan geometry, polar sampling coordinates, gridding kernels and the
//! deapodization factor that undoes the kernel's real-space taper.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};

/// Parallel-beam acquisition geometry shared by every operator.
///
/// The tomogram grid is square and matches the detector width; the sinogram
/// of a slice is laid out `(n_theta, n_p)`, angle-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub n_p: usize,
    pub n_theta: usize,
    pub n_z: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub angles: Vec<f64>,
    pub center: f64,
}

impl ScanGeometry {
    /// Geometry with `n_theta` equispaced angles over `[0, pi)` and the rotation
    /// axis on the central detector column.
    pub fn new(n_p: usize, n_theta: usize, n_z: usize) -> Result<Self> {
        let angles = (0..n_theta)
            .map(|i| PI * i as f64 / n_theta as f64)
            .collect();
        let geom = ScanGeometry {
            n_p,
            n_theta,
            n_z,
            n_x: n_p,
            n_y: n_p,
            angles,
            center: n_p as f64 / 2.0,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn with_center(mut self, center: f64) -> Result<Self> {
        self.center = center;
        self.validate()?;
        Ok(self)
    }

    pub fn with_angles(mut self, angles: Vec<f64>) -> Result<Self> {
        self.n_theta = angles.len();
        self.angles = angles;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TomoError::InvalidGeometry(msg));
        if self.n_p < 2 {
            return bad(format!("n_p must be >= 2, got {}", self.n_p));
        }
        if self.n_theta < 1 {
            return bad("at least one projection angle is required".into());
        }
        if self.angles.len() != self.n_theta {
            return bad(format!(
                "angle list has {} entries but n_theta = {}",
                self.angles.len(),
                self.n_theta
            ));
        }
        if self.n_x != self.n_p || self.n_y != self.n_p {
            return bad(format!(
                "tomogram grid ({} x {}) must match the detector width {}",
                self.n_y, self.n_x, self.n_p
            ));
        }
        if let Some(a) = self
            .angles
            .iter()
            .find(|a| !a.is_finite() || **a < 0.0 || **a >= 2.0 * PI)
        {
            return bad(format!("angle {a} outside [0, 2pi)"));
        }
        if !self.center.is_finite() || self.center < 0.0 || self.center >= self.n_p as f64 {
            return bad(format!(
                "rotation center {} outside [0, {})",
                self.center, self.n_p
            ));
        }
        Ok(())
    }

    /// Number of sinogram samples per slice, `n_theta * n_p`.
    pub fn n_samples(&self) -> usize {
        self.n_theta * self.n_p
    }

    /// Number of tomogram pixels per slice, `n_x * n_y`.
    pub fn n_pixels(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Signed detector frequency of raw FFT bin `j`.
    pub fn signed_frequency(&self, j: usize) -> i64 {
        signed_frequency(j, self.n_p)
    }
}

/// Signed frequency of FFT bin `j` for a transform of length `n`, in
/// `[-n/2, n/2)` (integer halving).
pub fn signed_frequency(j: usize, n: usize) -> i64 {
    let half = (n / 2) as i64;
    ((j as i64 + half).rem_euclid(n as i64)) - half
}

/// Cartesian grid coordinates of every sinogram sample, angle-major.
pub fn polar_coords(geom: &ScanGeometry) -> Vec<[f64; 2]> {
    let cx = geom.n_x as f64 / 2.0;
    let cy = geom.n_y as f64 / 2.0;
    polar_offsets(geom)
        .into_iter()
        .map(|[dx, dy]| [dx + cx, dy + cy])
        .collect()
}

/// Sample positions relative to the grid center, `p (cos theta, sin theta)`.
/// Exactly antisymmetric under `p -> -p`.
pub fn polar_offsets(geom: &ScanGeometry) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(geom.n_samples());
    for &theta in &geom.angles {
        let (s, c) = theta.sin_cos();
        for j in 0..geom.n_p {
            let p = geom.signed_frequency(j) as f64;
            out.push([p * c, p * s]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    KaiserBessel,
    Gaussian,
}

/// Compact separable interpolation kernel, normalized to `K(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Support width in grid cells (odd, at least 3).
    pub width: usize,
    /// Kaiser-Bessel `beta` or Gaussian `sigma`, depending on `family`.
    pub shape: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::kaiser_bessel(3)
    }
}

impl KernelSpec {
    /// Kaiser-Bessel kernel with `beta = 2.5 (width - 1)`.
    pub fn kaiser_bessel(width: usize) -> Self {
        KernelSpec {
            family: KernelFamily::KaiserBessel,
            width,
            shape: 2.5 * (width as f64 - 1.0),
        }
    }

    /// Gaussian kernel with `sigma = width / 6`.
    pub fn gaussian(width: usize) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            width,
            shape: width as f64 / 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.width % 2 == 0 {
            return Err(TomoError::InvalidKernel(format!(
                "width must be odd and >= 3, got {}",
                self.width
            )));
        }
        let ok = match self.family {
            KernelFamily::KaiserBessel => self.shape.is_finite() && self.shape >= 0.0,
            KernelFamily::Gaussian => self.shape.is_finite() && self.shape > 0.0,
        };
        if !ok {
            return Err(TomoError::InvalidKernel(format!(
                "bad shape parameter {} for {:?}",
                self.shape, self.family
            )));
        }
        Ok(())
    }

    pub fn half_width(&self) -> f64 {
        self.width as f64 / 2.0
    }
}

/// Kernel value at displacement `t` (grid cells).
pub fn kernel_eval(spec: &KernelSpec, t: f64) -> f64 {
    let half = spec.half_width();
    if t.abs() >= half {
        return 0.0;
    }
    match spec.family {
        KernelFamily::KaiserBessel => {
            let r = t / half;
            let beta = spec.shape;
            bessel_i0(beta * (1.0 - r * r).sqrt()) / bessel_i0(beta)
        }
        KernelFamily::Gaussian => {
            let sigma = spec.shape;
            (-t * t / (2.0 * sigma * sigma)).exp()
        }
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
        k += 1.0;
    }
    sum
}

/// Continuous Fourier transform of the kernel, `int K(t) cos(2 pi xi t) dt`.
///
/// Integrated with Simpson's rule after substituting `t = h sin(phi)`, which
/// removes the square-root edge behavior of Kaiser-Bessel.
pub fn kernel_fourier(spec: &KernelSpec, xi: f64) -> f64 {
    const INTERVALS: usize = 4096;
    let half = spec.half_width();
    let a = -PI / 2.0;
    let step = PI / INTERVALS as f64;
    let f = |phi: f64| {
        let t = half * phi.sin();
        let inner = match spec.family {
            KernelFamily::KaiserBessel => {
                let beta = spec.shape;
                bessel_i0(beta * phi.cos()) / bessel_i0(beta)
            }
            KernelFamily::Gaussian => kernel_eval(spec, t),
        };
        inner * (2.0 * PI * xi * t).cos() * half * phi.cos()
    };
    let mut sum = f(a) + f(-a);
    for k in 1..INTERVALS {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + k as f64 * step);
    }
    sum * step / 3.0
}

/// Kernel window offsets, `s_x` outer and `s_y` inner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StencilGrid {
    pub offsets: Vec<(i64, i64)>,
}

impl StencilGrid {
    pub fn new(width: usize) -> Self {
        let h = (width / 2) as i64;
        let mut offsets = Vec::with_capacity(width * width);
        for sx in -h..=h {
            for sy in -h..=h {
                offsets.push((sx, sy));
            }
        }
        StencilGrid { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Real-space correction applied before the forward FFT and after the inverse
/// FFT. Carries the `(+1, -1)` checkerboard and vanishes outside the
/// inscribed field-of-view disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Deapodization {
    pub values: Array2<f64>,
    pub support_mask: Array2<bool>,
}

/// Fourier transform of the kernel at each centered grid coordinate along one axis.
pub fn kernel_taper(spec: &KernelSpec, n: usize) -> Vec<f64> {
    let c = n as f64 / 2.0;
    (0..n)
        .map(|a| kernel_fourier(spec, (a as f64 - c) / n as f64))
        .collect()
}

/// Inscribed field-of-view disk of an `n_x` by `n_y` grid.
pub fn support_disk(n_x: usize, n_y: usize) -> Array2<bool> {
    let r = n_x.min(n_y) as f64 / 2.0;
    let (cx, cy) = (n_x as f64 / 2.0, n_y as f64 / 2.0);
    Array2::from_shape_fn((n_x, n_y), |(a, b)| {
        let dx = a as f64 - cx;
        let dy = b as f64 - cy;
        dx * dx + dy * dy < r * r
    })
}

pub fn deapodization_compute(geom: &ScanGeometry, spec: &KernelSpec) -> Result<Deapodization> {
    geom.validate()?;
    spec.validate()?;
    let fx = kernel_taper(spec, geom.n_x);
    let fy = kernel_taper(spec, geom.n_y);
    let mask = support_disk(geom.n_x, geom.n_y);

    let max = mask
        .indexed_iter()
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (fx[a] * fy[b]).abs())
        .fold(0.0, f64::max);
    let threshold = 1e-6 * max;

    let mut values = Array2::zeros((geom.n_x, geom.n_y));
    for ((a, b), &inside) in mask.indexed_iter() {
        if !inside {
            continue;
        }
        let fk = fx[a] * fy[b];
        if fk.abs() < threshold || fk == 0.0 {
            return Err(TomoError::NearZeroDenominator {
                row: a,
                col: b,
                value: fk,
                threshold,
            });
        }
        let sign = if (a + b) % 2 == 0 { 1.0 } else { -1.0 };
        values[[a, b]] = sign / fk;
    }
    Ok(Deapodization {
        values,
        support_mask: mask,
    })
}
