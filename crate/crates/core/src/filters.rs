//! Density-compensation filters and the Fourier-domain preconditioner.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::fft::UnitaryFft;
use crate::geometry::ScanGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    None,
    RamLak,
    SheppLogan,
    Hamming,
    Density,
}

impl FilterKind {
    pub fn id(self) -> u8 {
        match self {
            FilterKind::None => 0,
            FilterKind::RamLak => 1,
            FilterKind::SheppLogan => 2,
            FilterKind::Hamming => 3,
            FilterKind::Density => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::None => "none",
            FilterKind::RamLak => "ramlak",
            FilterKind::SheppLogan => "shepplogan",
            FilterKind::Hamming => "hamming",
            FilterKind::Density => "density",
        }
    }

    /// Radial response at normalized frequency `f` in `[-1/2, 1/2)`.
    /// `None` for the data-driven density filter.
    pub fn radial_response(self, f: f64) -> Option<f64> {
        let a = f.abs();
        Some(match self {
            FilterKind::None => 1.0,
            FilterKind::RamLak => a,
            FilterKind::SheppLogan => a * sinc(f),
            FilterKind::Hamming => a * (0.54 + 0.46 * (2.0 * PI * f).cos()),
            FilterKind::Density => return None,
        })
    }
}

impl std::str::FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(FilterKind::None),
            "ramlak" | "ram-lak" => Ok(FilterKind::RamLak),
            "shepplogan" | "shepp-logan" => Ok(FilterKind::SheppLogan),
            "hamming" => Ok(FilterKind::Hamming),
            "density" => Ok(FilterKind::Density),
            other => Err(format!("unknown filter '{other}'")),
        }
    }
}

fn sinc(f: f64) -> f64 {
    if f == 0.0 {
        1.0
    } else {
        (PI * f).sin() / (PI * f)
    }
}

/// Diagonal weights over sinogram samples, angle-major with detector
/// frequencies in FFT order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub weights: Vec<f64>,
}

impl FilterSpec {
    pub fn identity(n_samples: usize) -> Self {
        FilterSpec {
            kind: FilterKind::None,
            weights: vec![1.0; n_samples],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == FilterKind::None && self.weights.iter().all(|&w| w == 1.0)
    }
}

/// Radial filter replicated over every angle.
pub fn make_filter(kind: FilterKind, geom: &ScanGeometry) -> Result<FilterSpec> {
    let n = geom.n_p;
    let radial: Vec<f64> = (0..n)
        .map(|j| {
            kind.radial_response(geom.signed_frequency(j) as f64 / n as f64)
                .ok_or_else(|| {
                    TomoError::InvalidConfig(
                        "the density filter is fitted to the gridding matrix; use density_filter_solve"
                            .into(),
                    )
                })
        })
        .collect::<Result<_>>()?;
    let weights = (0..geom.n_theta).flat_map(|_| radial.iter().copied()).collect();
    Ok(FilterSpec { kind, weights })
}

/// `F^H D^{1/2} F` along the detector axis, with radial `D`.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    /// `D^{1/2}` per FFT bin.
    pub sqrt_weights: Vec<f64>,
    fft: UnitaryFft,
}

impl Preconditioner {
    pub fn new(kind: FilterKind, n_p: usize) -> Result<Self> {
        let sqrt_weights = (0..n_p)
            .map(|j| {
                let f = crate::geometry::signed_frequency(j, n_p) as f64 / n_p as f64;
                kind.radial_response(f).map(f64::sqrt).ok_or_else(|| {
                    TomoError::InvalidConfig("preconditioner needs a radial filter".into())
                })
            })
            .collect::<Result<_>>()?;
        Ok(Preconditioner {
            sqrt_weights,
            fft: UnitaryFft::new(n_p),
        })
    }

    /// Preconditioner from explicit `D` values (one per FFT bin).
    pub fn from_weights(weights: &[f64]) -> Self {
        Preconditioner {
            sqrt_weights: weights.iter().map(|w| w.max(0.0).sqrt()).collect(),
            fft: UnitaryFft::new(weights.len()),
        }
    }

    pub fn identity(n_p: usize) -> Self {
        Self::from_weights(&vec![1.0; n_p])
    }

    /// `P r`.
    pub fn apply(&self, residual: &Array2<f64>) -> Result<Array2<f64>> {
        self.apply_power(residual, 1)
    }

    /// `P^H P r`, the weighting used in normal-equation gradients.
    pub fn apply_normal(&self, residual: &Array2<f64>) -> Result<Array2<f64>> {
        self.apply_power(residual, 2)
    }

    fn apply_power(&self, residual: &Array2<f64>, power: i32) -> Result<Array2<f64>> {
        let n = self.sqrt_weights.len();
        if residual.ncols() != n {
            return Err(TomoError::shape(
                format!("(*, {n})"),
                format!("{:?}", residual.dim()),
            ));
        }
        let mut buf: Vec<Complex64> = residual.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward_rows(&mut buf);
        for row in buf.chunks_mut(n) {
            for (v, w) in row.iter_mut().zip(&self.sqrt_weights) {
                *v *= w.powi(power);
            }
        }
        self.fft.inverse_rows(&mut buf);
        Ok(Array2::from_shape_vec(residual.dim(), buf.into_iter().map(|c| c.re).collect())
            .expect("shape preserved"))
    }
}

/// Free-function form of [`Preconditioner::apply`].
pub fn precondition_apply(pre: &Preconditioner, residual: &Array2<f64>) -> Result<Array2<f64>> {
    pre.apply(residual)
}
