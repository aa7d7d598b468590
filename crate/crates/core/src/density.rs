//! Least-squares density compensation: per-sample weights `w >= 0` such that
//! the gridded kernel footprints sum to one on every Cartesian cell.

use crate::error::{Result, TomoError};
use crate::filters::{FilterKind, FilterSpec};
use crate::geometry::ScanGeometry;
use crate::gridding::{Csr, SparseGridCsr};

pub const DENSITY_MAX_ITER: usize = 50;
pub const DENSITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct DensityFit {
    pub filter: FilterSpec,
    /// `||A w_k - 1||` for each CG iterate.
    pub residual_history: Vec<f64>,
    /// Residual of the returned (clamped) weights.
    pub residual: f64,
    pub converged: bool,
}

fn abs_spmv(m: &Csr, x: &[f64]) -> Vec<f64> {
    (0..m.nrows)
        .map(|r| {
            (m.row_ptr[r]..m.row_ptr[r + 1])
                .map(|k| m.vals[k].norm() * x[m.col_idx[k]])
                .sum()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|| |S| w - 1 ||` with the phases of `S` stripped.
pub fn density_residual(csr: &SparseGridCsr, weights: &[f64]) -> f64 {
    abs_spmv(&csr.forward, weights)
        .iter()
        .map(|v| (v - 1.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn density_filter_solve(csr: &SparseGridCsr, geom: &ScanGeometry) -> Result<DensityFit> {
    density_filter_solve_with(csr, geom, DENSITY_MAX_ITER, DENSITY_TOL)
}

/// CGLS on `|S| w = 1`, started from zero, then clamped to `w >= 0`.
pub fn density_filter_solve_with(
    csr: &SparseGridCsr,
    geom: &ScanGeometry,
    max_iter: usize,
    tol: f64,
) -> Result<DensityFit> {
    let (m, n) = csr.shape();
    if (m, n) != (geom.n_pixels(), geom.n_samples()) {
        return Err(TomoError::shape(
            format!("({}, {})", geom.n_pixels(), geom.n_samples()),
            format!("({m}, {n})"),
        ));
    }
    let (a, at) = (&csr.forward, &csr.adjoint);
    let mut w = vec![0.0; n];
    let mut r = vec![1.0; m];
    let mut s = abs_spmv(at, &r);
    let mut p = s.clone();
    let mut gamma = s.iter().map(|v| v * v).sum::<f64>();
    let s0 = gamma.sqrt();
    let mut history = Vec::with_capacity(max_iter);
    let mut converged = s0 == 0.0;

    for _ in 0..max_iter {
        if converged {
            break;
        }
        let q = abs_spmv(a, &p);
        let qq = q.iter().map(|v| v * v).sum::<f64>();
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        w.iter_mut().zip(&p).for_each(|(wi, pi)| *wi += alpha * pi);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
        history.push(norm(&r));
        s = abs_spmv(at, &r);
        let gamma_next = s.iter().map(|v| v * v).sum::<f64>();
        if gamma_next.sqrt() <= tol * s0 {
            converged = true;
        }
        let beta = gamma_next / gamma;
        gamma = gamma_next;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    if !converged {
        log::warn!(
            "density filter did not reach relative tolerance {tol:.1e} in {max_iter} iterations"
        );
    }
    w.iter_mut().for_each(|v| *v = v.max(0.0));
    let residual = density_residual(csr, &w);
    Ok(DensityFit {
        filter: FilterSpec {
            kind: FilterKind::Density,
            weights: w,
        },
        residual_history: history,
        residual,
        converged,
    })
}
