//! Forward projection and its (filtered) back projection, built from two
//! FFTs, the gridding matrix and the deapodization factor.
//!
//! Conventions: all FFTs are unitary. The forward operator is
//! `sqrt(n_p) F1^-1 S^H F2 (k* . u)`, its exact adjoint is
//! `sqrt(n_p) k* . F2^-1 S F1 s`, and the filtered inverse replaces `S` with
//! `S D` and the scalar with a calibration factor. The `sqrt(n_p)` factor
//! makes the forward operator return line integrals in pixel units.

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Result, TomoError};
use crate::fft::UnitaryFft;
use crate::filters::{make_filter, FilterKind, FilterSpec};
use crate::geometry::{deapodization_compute, Deapodization, KernelSpec, ScanGeometry};
use crate::gridding::{build_matrix, load_or_build, Csr, SparseGridCsr};

/// Sinogram of one slice, `(n_theta, n_p)`.
pub type Sinogram = Array2<f64>;
/// Tomogram of one slice, `(n_x, n_y)`; axis 0 pairs with `cos(theta)`.
pub type Tomogram = Array2<f64>;
pub type ComplexSinogram = Array2<Complex64>;
pub type ComplexTomogram = Array2<Complex64>;

/// Everything needed to apply the projection operators to one geometry.
/// Immutable once built and shared read-only between workers.
#[derive(Debug, Clone)]
pub struct TomoOperators {
    pub geom: ScanGeometry,
    pub kernel: KernelSpec,
    pub deapo: Deapodization,
    /// Unfiltered matrix, used by the forward operator and its adjoint.
    pub radon_matrix: SparseGridCsr,
    /// Matrix with the density filter folded into its columns.
    pub iradon_matrix: SparseGridCsr,
    pub filter: FilterSpec,
    /// Scalar applied by `iradon` so a uniform disk reconstructs to mean 1.
    pub iradon_scale: f64,
    fft_p: UnitaryFft,
}

impl TomoOperators {
    pub fn new(geom: &ScanGeometry, kernel: &KernelSpec, filter: FilterKind) -> Result<Self> {
        Self::build(geom, kernel, filter, None)
    }

    /// Same as [`TomoOperators::new`], reusing matrices cached in `cache_dir`.
    pub fn build(
        geom: &ScanGeometry,
        kernel: &KernelSpec,
        filter: FilterKind,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        geom.validate()?;
        kernel.validate()?;
        if geom.n_p % 2 != 0 {
            return Err(TomoError::InvalidGeometry(format!(
                "projection operators need an even detector width, got {}",
                geom.n_p
            )));
        }
        let deapo = deapodization_compute(geom, kernel)?;
        let radon_matrix = load_or_build(geom, kernel, None, cache_dir)?;
        let filter = match filter {
            FilterKind::Density => crate::density::density_filter_solve(&radon_matrix, geom)?.filter,
            k => make_filter(k, geom)?,
        };
        let iradon_matrix = if filter.is_identity() {
            radon_matrix.clone()
        } else {
            load_or_build(geom, kernel, Some(&filter), cache_dir)?
        };
        Self::from_parts(geom.clone(), *kernel, deapo, radon_matrix, iradon_matrix, filter)
    }

    /// Assembles operators from prebuilt matrices and calibrates `iradon`.
    pub fn from_parts(
        geom: ScanGeometry,
        kernel: KernelSpec,
        deapo: Deapodization,
        radon_matrix: SparseGridCsr,
        iradon_matrix: SparseGridCsr,
        filter: FilterSpec,
    ) -> Result<Self> {
        let (m, n) = (geom.n_pixels(), geom.n_samples());
        for mat in [&radon_matrix, &iradon_matrix] {
            if mat.shape() != (m, n) {
                return Err(TomoError::shape(format!("({m}, {n}) matrix"), format!("{:?}", mat.shape())));
            }
        }
        let fft_p = UnitaryFft::new(geom.n_p);
        let mut ops = TomoOperators {
            geom,
            kernel,
            deapo,
            radon_matrix,
            iradon_matrix,
            filter,
            iradon_scale: 1.0,
            fft_p,
        };
        ops.iradon_scale = ops.calibrate()?;
        Ok(ops)
    }

    fn calibrate(&self) -> Result<f64> {
        let ones = Tomogram::from_elem((self.geom.n_x, self.geom.n_y), 1.0);
        let sino = self.radon(&ones)?;
        let rec = self.backproject(&sino.mapv(|v| Complex64::new(v, 0.0)), &self.iradon_matrix.forward, 1.0)?;
        let (sum, count) = rec
            .iter()
            .zip(self.deapo.support_mask.iter())
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + v.re, c + 1));
        let mean = sum / count.max(1) as f64;
        Ok(if mean.is_finite() && mean.abs() > 1e-12 { 1.0 / mean } else { 1.0 })
    }

    pub fn fft_p(&self) -> &UnitaryFft {
        &self.fft_p
    }

    fn check_tomo<T>(&self, u: &Array2<T>) -> Result<()> {
        let want = (self.geom.n_x, self.geom.n_y);
        if u.dim() != want {
            return Err(TomoError::shape(format!("tomogram {want:?}"), format!("{:?}", u.dim())));
        }
        Ok(())
    }

    fn check_sino<T>(&self, s: &Array2<T>) -> Result<()> {
        let want = (self.geom.n_theta, self.geom.n_p);
        if s.dim() != want {
            return Err(TomoError::shape(format!("sinogram {want:?}"), format!("{:?}", s.dim())));
        }
        Ok(())
    }

    /// Forward projection of a complex tomogram.
    pub fn radon_complex(&self, u: &ComplexTomogram) -> Result<ComplexSinogram> {
        self.check_tomo(u)?;
        let n = self.geom.n_x;
        let mut grid: Vec<Complex64> = u
            .iter()
            .zip(self.deapo.values.iter())
            .map(|(v, k)| v * k)
            .collect();
        // Square grid, so the detector-length plan doubles as the 2D plan.
        debug_assert_eq!(n, self.fft_p.len());
        self.fft_p.forward_2d(&mut grid);
        let mut sino = self.radon_matrix.adjoint.spmv(&grid)?;
        self.fft_p.inverse_rows(&mut sino);
        let scale = (self.geom.n_p as f64).sqrt();
        for v in sino.iter_mut() {
            *v *= scale;
        }
        Ok(Array2::from_shape_vec((self.geom.n_theta, self.geom.n_p), sino).expect("sinogram shape"))
    }

    /// Forward projection; the imaginary leakage of real input is discarded.
    pub fn radon(&self, u: &Tomogram) -> Result<Sinogram> {
        Ok(self.radon_complex(&u.mapv(|v| Complex64::new(v, 0.0)))?.mapv(|c| c.re))
    }

    fn backproject(&self, sino: &ComplexSinogram, matrix: &Csr, scale: f64) -> Result<ComplexTomogram> {
        self.check_sino(sino)?;
        let mut buf: Vec<Complex64> = sino.iter().copied().collect();
        self.fft_p.forward_rows(&mut buf);
        let mut grid = matrix.spmv(&buf)?;
        self.fft_p.inverse_2d(&mut grid);
        for (v, k) in grid.iter_mut().zip(self.deapo.values.iter()) {
            *v *= k * scale;
        }
        Ok(Array2::from_shape_vec((self.geom.n_x, self.geom.n_y), grid).expect("tomogram shape"))
    }

    /// Exact adjoint of [`TomoOperators::radon_complex`].
    pub fn radon_adjoint_complex(&self, sino: &ComplexSinogram) -> Result<ComplexTomogram> {
        self.backproject(sino, &self.radon_matrix.forward, (self.geom.n_p as f64).sqrt())
    }

    pub fn radon_adjoint(&self, sino: &Sinogram) -> Result<Tomogram> {
        Ok(self
            .radon_adjoint_complex(&sino.mapv(|v| Complex64::new(v, 0.0)))?
            .mapv(|c| c.re))
    }

    /// Filtered back projection with the filter folded into the matrix.
    pub fn iradon_complex(&self, sino: &ComplexSinogram) -> Result<ComplexTomogram> {
        self.backproject(sino, &self.iradon_matrix.forward, self.iradon_scale)
    }

    pub fn iradon(&self, sino: &Sinogram) -> Result<Tomogram> {
        Ok(self.iradon_complex(&sino.mapv(|v| Complex64::new(v, 0.0)))?.mapv(|c| c.re))
    }

    /// Filtered back projection applying `filter` in the detector Fourier
    /// domain before the unfiltered matrix. Agrees with [`TomoOperators::iradon`]
    /// when `filter` is the folded filter.
    pub fn iradon_explicit(&self, sino: &Sinogram, filter: &FilterSpec) -> Result<Tomogram> {
        self.check_sino(sino)?;
        if filter.weights.len() != self.geom.n_samples() {
            return Err(TomoError::shape(
                format!("{} filter weights", self.geom.n_samples()),
                format!("{}", filter.weights.len()),
            ));
        }
        let mut buf: Vec<Complex64> = sino.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_p.forward_rows(&mut buf);
        for (v, w) in buf.iter_mut().zip(&filter.weights) {
            *v *= *w;
        }
        self.fft_p.inverse_rows(&mut buf);
        let filtered = Array2::from_shape_vec(sino.dim(), buf).expect("sinogram shape");
        Ok(self
            .backproject(&filtered, &self.radon_matrix.forward, self.iradon_scale)?
            .mapv(|c| c.re))
    }
}

/// Free-function forms mirroring the operator methods.
pub fn radon(u: &Tomogram, ops: &TomoOperators) -> Result<Sinogram> {
    ops.radon(u)
}

pub fn iradon(sino: &Sinogram, ops: &TomoOperators) -> Result<Tomogram> {
    ops.iradon(sino)
}

pub fn spmv(csr: &Csr, x: &[Complex64]) -> Result<Vec<Complex64>> {
    csr.spmv(x)
}

pub fn spmm(csr: &Csr, x: &[Complex64], n_rhs: usize) -> Result<Vec<Complex64>> {
    csr.spmm(x, n_rhs)
}

/// Convenience: operators with no cache for a fresh matrix build.
pub fn unfiltered_matrix(geom: &ScanGeometry, kernel: &KernelSpec) -> Result<SparseGridCsr> {
    build_matrix(geom, kernel, None)
}
