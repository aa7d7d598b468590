//! Slow direct-space reference implementations for cross-checking the
//! Fourier-domain operators: ray-sum projection and dense least squares.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Result, TomoError};
use crate::geometry::ScanGeometry;
use crate::operators::{Sinogram, Tomogram};

pub const DIRECT_RADON_MAX_N: usize = 128;
pub const DENSE_MAX_N: usize = 16;

/// Bilinear taps `(a, b, weight)` at fractional grid position `(x, y)`.
fn bilinear(x: f64, y: f64, n: usize, mut visit: impl FnMut(usize, usize, f64)) {
    let (a0, b0) = (x.floor(), y.floor());
    let (fa, fb) = (x - a0, y - b0);
    for (da, wa) in [(0, 1.0 - fa), (1, fa)] {
        for (db, wb) in [(0, 1.0 - fb), (1, fb)] {
            let (a, b) = (a0 as i64 + da, b0 as i64 + db);
            let w = wa * wb;
            if w != 0.0 && (0..n as i64).contains(&a) && (0..n as i64).contains(&b) {
                visit(a as usize, b as usize, w);
            }
        }
    }
}

/// Visits the interpolation taps of every ray sample for sinogram entry
/// `(angle index, detector column)`. Rays are sampled at unit spacing.
fn for_each_ray_tap(geom: &ScanGeometry, mut visit: impl FnMut(usize, usize, usize, usize, f64)) {
    let n = geom.n_x;
    let half = n as f64 / 2.0;
    let reach = n as i64;
    for (t, &theta) in geom.angles.iter().enumerate() {
        let (sn, cs) = theta.sin_cos();
        for d in 0..geom.n_p {
            let p = d as f64 - geom.center;
            for k in -reach..=reach {
                let s = k as f64;
                let x = p * cs - s * sn + half;
                let y = p * sn + s * cs + half;
                bilinear(x, y, n, |a, b, w| visit(t, d, a, b, w));
            }
        }
    }
}

/// Line integrals by rotation and column summation (bilinear interpolation).
pub fn direct_radon(u: &Tomogram, geom: &ScanGeometry) -> Result<Sinogram> {
    geom.validate()?;
    if geom.n_x > DIRECT_RADON_MAX_N {
        return Err(TomoError::GridTooLarge {
            size: geom.n_x,
            limit: DIRECT_RADON_MAX_N,
        });
    }
    if u.dim() != (geom.n_x, geom.n_y) {
        return Err(TomoError::shape(
            format!("({}, {})", geom.n_x, geom.n_y),
            format!("{:?}", u.dim()),
        ));
    }
    let mut sino = Sinogram::zeros((geom.n_theta, geom.n_p));
    for_each_ray_tap(geom, |t, d, a, b, w| sino[[t, d]] += w * u[[a, b]]);
    Ok(sino)
}

/// Dense matrix mapping a flattened tomogram to a flattened sinogram.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub matrix: DMatrix<f64>,
}

impl DenseOperator {
    /// Ray-sum system matrix matching [`direct_radon`].
    pub fn ray_sums(geom: &ScanGeometry) -> Result<Self> {
        geom.validate()?;
        if geom.n_x > DENSE_MAX_N {
            return Err(TomoError::GridTooLarge {
                size: geom.n_x,
                limit: DENSE_MAX_N,
            });
        }
        let ny = geom.n_y;
        let mut matrix = DMatrix::zeros(geom.n_samples(), geom.n_pixels());
        for_each_ray_tap(geom, |t, d, a, b, w| matrix[(t * geom.n_p + d, a * ny + b)] += w);
        Ok(DenseOperator { matrix })
    }

    /// Densifies any linear map by applying it to every basis vector.
    pub fn from_linear_map(
        rows: usize,
        cols: usize,
        mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut matrix = DMatrix::zeros(rows, cols);
        let mut e = vec![0.0; cols];
        for c in 0..cols {
            e[c] = 1.0;
            let col = apply(&e)?;
            if col.len() != rows {
                return Err(TomoError::shape(format!("{rows} outputs"), format!("{}", col.len())));
            }
            matrix.set_column(c, &DVector::from_vec(col));
            e[c] = 0.0;
        }
        Ok(DenseOperator { matrix })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

/// Solves `(A^T A + eps I) x = A^T b`, `eps = 1e-10 trace(A^T A) / M`, by
/// Cholesky factorization.
pub fn dense_lsq_solve(op: &DenseOperator, b: &[f64]) -> Result<Vec<f64>> {
    let cols = op.matrix.ncols();
    if cols > DENSE_MAX_N * DENSE_MAX_N {
        return Err(TomoError::GridTooLarge {
            size: cols,
            limit: DENSE_MAX_N * DENSE_MAX_N,
        });
    }
    if b.len() != op.matrix.nrows() {
        return Err(TomoError::shape(format!("{} data", op.matrix.nrows()), format!("{}", b.len())));
    }
    let at = op.matrix.transpose();
    let mut normal = &at * &op.matrix;
    let eps = 1e-10 * normal.trace() / cols as f64;
    for i in 0..cols {
        normal[(i, i)] += eps;
    }
    let rhs = &at * DVector::from_column_slice(b);
    let chol = normal
        .cholesky()
        .ok_or_else(|| TomoError::InvalidConfig("normal matrix is not positive definite".into()))?;
    Ok(chol.solve(&rhs).as_slice().to_vec())
}

/// Dense least squares against the ray-sum operator.
pub fn dense_lsq_solve_geom(sino: &Sinogram, geom: &ScanGeometry) -> Result<Tomogram> {
    let op = DenseOperator::ray_sums(geom)?;
    let x = dense_lsq_solve(&op, &sino.iter().copied().collect::<Vec<_>>())?;
    Ok(Array2::from_shape_vec((geom.n_x, geom.n_y), x).expect("tomogram shape"))
}
