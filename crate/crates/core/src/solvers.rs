//! Reconstruction algorithms over the projection operators: filtered back
//! projection, preconditioned gradient descent (SIRT) with Barzilai-Borwein
//! steps, CGLS (with an optional CGS variant) and split-Bregman TV.
//!
//! The iterative methods all minimize `||P (R u - b)||` where `P` is a
//! Fourier-domain preconditioner along the detector axis, Hamming by default.

use std::time::Instant;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::filters::{FilterKind, Preconditioner};
use crate::geometry::signed_frequency;
use crate::operators::{Sinogram, TomoOperators, Tomogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fbp,
    Sirt,
    Cgls,
    Tv,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fbp => "fbp",
            Algorithm::Sirt => "sirt",
            Algorithm::Cgls => "cgls",
            Algorithm::Tv => "tv",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fbp" => Ok(Algorithm::Fbp),
            "sirt" => Ok(Algorithm::Sirt),
            "cgls" => Ok(Algorithm::Cgls),
            "tv" => Ok(Algorithm::Tv),
            other => Err(format!("unknown algorithm '{other}'")),
        }
    }
}

/// Krylov recurrence used by [`solve_cgls`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CglsMode {
    /// Conjugate gradients on the normal equations, residual-form recurrences.
    Cgls,
    /// Conjugate gradient squared on the normal equations.
    Cgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub max_iter: usize,
    /// Stop once the preconditioned residual falls below `tol` times its
    /// initial value.
    pub tol: f64,
    /// TV data weight. `None` picks `0.1 * max|R^T b|`.
    pub mu: Option<f64>,
    pub tv_inner_iter: usize,
    pub bb_enabled: bool,
    /// Filter used by FBP (and by the operators built for this config).
    pub filter: FilterKind,
    /// Radial weights of the iterative preconditioner.
    pub preconditioner: FilterKind,
    pub cgls_mode: CglsMode,
    /// Project SIRT iterates onto `u >= 0`.
    pub nonneg: bool,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        SolverConfig {
            algorithm,
            max_iter: if algorithm == Algorithm::Fbp { 1 } else { 10 },
            tol: 1e-6,
            mu: None,
            tv_inner_iter: 2,
            bb_enabled: true,
            filter: FilterKind::RamLak,
            preconditioner: FilterKind::Hamming,
            cgls_mode: CglsMode::Cgls,
            nonneg: false,
            seed: 0,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn with_preconditioner(mut self, kind: FilterKind) -> Self {
        self.preconditioner = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(TomoError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(TomoError::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(TomoError::InvalidConfig(format!("mu must be positive, got {mu}")));
            }
        }
        if self.algorithm == Algorithm::Tv && self.tv_inner_iter == 0 {
            return Err(TomoError::InvalidConfig("tv_inner_iter must be at least 1".into()));
        }
        if self.preconditioner == FilterKind::Density {
            return Err(TomoError::InvalidConfig("the preconditioner needs a radial filter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// Preconditioned data residual `||P (R u_k - b)||` after each iteration.
    pub residual_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Seconds.
    pub wall_time: f64,
}

impl SolverReport {
    pub fn final_residual(&self) -> Option<f64> {
        self.residual_history.last().copied()
    }
}

/// Radial preconditioner for the iterative solvers. Ramp-type filters vanish
/// at DC, which would leave the mean of the tomogram unobservable, so the
/// weights are floored at the ramp value of the first nonzero frequency.
pub fn solver_preconditioner(kind: FilterKind, n_p: usize) -> Result<Preconditioner> {
    let floor = 1.0 / n_p as f64;
    let weights = (0..n_p)
        .map(|j| {
            let f = signed_frequency(j, n_p) as f64 / n_p as f64;
            kind.radial_response(f)
                .map(|w| w.max(floor))
                .ok_or_else(|| TomoError::InvalidConfig("the preconditioner needs a radial filter".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Preconditioner::from_weights(&weights))
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &Array2<f64>) -> f64 {
    dot(a, a).sqrt()
}

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// `A = P R` and its transpose.
struct Preconditioned<'a> {
    ops: &'a TomoOperators,
    pre: Preconditioner,
}

impl<'a> Preconditioned<'a> {
    fn new(ops: &'a TomoOperators, kind: FilterKind) -> Result<Self> {
        Ok(Preconditioned {
            ops,
            pre: solver_preconditioner(kind, ops.geom.n_p)?,
        })
    }

    fn forward(&self, u: &Tomogram) -> Result<Sinogram> {
        self.pre.apply(&self.ops.radon(u)?)
    }

    fn adjoint(&self, r: &Sinogram) -> Result<Tomogram> {
        self.ops.radon_adjoint(&self.pre.apply(r)?)
    }

    fn data(&self, sino: &Sinogram) -> Result<Sinogram> {
        self.pre.apply(sino)
    }
}

fn check_sino(sino: &Sinogram, ops: &TomoOperators) -> Result<()> {
    let want = (ops.geom.n_theta, ops.geom.n_p);
    if sino.dim() != want {
        return Err(TomoError::shape(format!("sinogram {want:?}"), format!("{:?}", sino.dim())));
    }
    Ok(())
}

fn zero_tomogram(ops: &TomoOperators) -> Tomogram {
    Tomogram::zeros((ops.geom.n_x, ops.geom.n_y))
}

/// Dispatches on `cfg.algorithm`.
pub fn solve(sino: &Sinogram, ops: &TomoOperators, cfg: &SolverConfig) -> Result<(Tomogram, SolverReport)> {
    match cfg.algorithm {
        Algorithm::Fbp => solve_fbp_with(sino, ops, cfg.preconditioner),
        Algorithm::Sirt => solve_sirt(sino, ops, cfg),
        Algorithm::Cgls => solve_cgls(sino, ops, cfg),
        Algorithm::Tv => solve_tv(sino, ops, cfg),
    }
}

/// One application of the filtered back projection. The report carries the
/// Hamming-preconditioned data residual of the result.
pub fn solve_fbp(sino: &Sinogram, ops: &TomoOperators) -> Result<(Tomogram, SolverReport)> {
    solve_fbp_with(sino, ops, FilterKind::Hamming)
}

fn solve_fbp_with(sino: &Sinogram, ops: &TomoOperators, pre: FilterKind) -> Result<(Tomogram, SolverReport)> {
    let start = Instant::now();
    check_sino(sino, ops)?;
    let u = ops.iradon(sino)?;
    let a = Preconditioned::new(ops, pre)?;
    let residual = norm(&(a.forward(&u)? - a.data(sino)?));
    Ok((
        u,
        SolverReport {
            residual_history: vec![residual],
            iterations_run: 1,
            converged: true,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Preconditioned gradient descent from zero. The first step is the exact
/// line search along the gradient; later steps use BB1 when enabled and
/// repeat the first step length otherwise.
pub fn solve_sirt(sino: &Sinogram, ops: &TomoOperators, cfg: &SolverConfig) -> Result<(Tomogram, SolverReport)> {
    let start = Instant::now();
    cfg.validate()?;
    check_sino(sino, ops)?;
    let a = Preconditioned::new(ops, cfg.preconditioner)?;
    let b = a.data(sino)?;
    let b_norm = norm(&b);
    let mut u = zero_tomogram(ops);
    let mut report = SolverReport::default();
    if b_norm == 0.0 {
        report.converged = true;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok((u, report));
    }

    let mut r = b.clone();
    let mut g = a.adjoint(&r)?;
    let mut ag = a.forward(&g)?;
    let ag_sq = dot(&ag, &ag);
    if ag_sq == 0.0 {
        report.residual_history.push(b_norm);
        report.iterations_run = 1;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok((u, report));
    }
    let alpha0 = dot(&g, &g) / ag_sq;
    let mut alpha = alpha0;
    let mut minimum = b_norm;

    let step = |u: &Tomogram, r: &Sinogram, g: &Tomogram, ag: &Sinogram, alpha: f64| -> Result<(Tomogram, Sinogram)> {
        let mut u_next = u + &(g * alpha);
        if cfg.nonneg {
            u_next.mapv_inplace(|v| v.max(0.0));
            let r_next = &b - &a.forward(&u_next)?;
            Ok((u_next, r_next))
        } else {
            Ok((u_next, r - &(ag * alpha)))
        }
    };

    for k in 0..cfg.max_iter {
        let (mut u_next, mut r_next) = step(&u, &r, &g, &ag, alpha)?;
        let mut res = norm(&r_next);
        // a BB step that overshoots past the divergence bound is retried
        // with the line-search step
        if res > 10.0 * minimum && alpha != alpha0 {
            (u_next, r_next) = step(&u, &r, &g, &ag, alpha0)?;
            res = norm(&r_next);
        }
        if !all_finite(&u_next) {
            return Err(TomoError::NonFiniteValue { iteration: k });
        }
        report.residual_history.push(res);
        report.iterations_run = k + 1;
        if res > 10.0 * minimum {
            return Err(TomoError::DivergenceDetected {
                iteration: k,
                residual: res,
                minimum,
            });
        }
        minimum = minimum.min(res);
        let du = &u_next - &u;
        u = u_next;
        r = r_next;
        if res <= cfg.tol * b_norm {
            report.converged = true;
            break;
        }
        if k + 1 == cfg.max_iter {
            break;
        }
        let g_next = a.adjoint(&r)?;
        if cfg.bb_enabled {
            // the objective gradient is -g, so its change is -(g_next - g)
            let curvature = dot(&du, &g) - dot(&du, &g_next);
            let bb = dot(&du, &du) / curvature;
            alpha = if bb > 0.0 && bb.is_finite() { bb } else { alpha0 };
        }
        g = g_next;
        ag = a.forward(&g)?;
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((u, report))
}

/// Krylov least squares on `P R u = P b` from zero. Breakdown stops the
/// iteration with `converged = false`.
pub fn solve_cgls(sino: &Sinogram, ops: &TomoOperators, cfg: &SolverConfig) -> Result<(Tomogram, SolverReport)> {
    cfg.validate()?;
    check_sino(sino, ops)?;
    let a = Preconditioned::new(ops, cfg.preconditioner)?;
    match cfg.cgls_mode {
        CglsMode::Cgls => cgls(&a, sino, cfg),
        CglsMode::Cgs => cgs_normal(&a, sino, cfg),
    }
}

const BREAKDOWN: f64 = 1e-300;

fn cgls(a: &Preconditioned, sino: &Sinogram, cfg: &SolverConfig) -> Result<(Tomogram, SolverReport)> {
    let start = Instant::now();
    let b = a.data(sino)?;
    let b_norm = norm(&b);
    let mut x = zero_tomogram(a.ops);
    let mut report = SolverReport::default();
    let mut r = b;
    let mut s = a.adjoint(&r)?;
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let s0 = gamma.sqrt();
    if s0 == 0.0 {
        report.converged = true;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok((x, report));
    }
    for k in 0..cfg.max_iter {
        let q = a.forward(&p)?;
        let qq = dot(&q, &q);
        if qq <= BREAKDOWN || !qq.is_finite() {
            log::warn!("cgls breakdown at iteration {k}");
            break;
        }
        let alpha = gamma / qq;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &q);
        if !all_finite(&x) {
            return Err(TomoError::NonFiniteValue { iteration: k });
        }
        let res = norm(&r);
        report.residual_history.push(res);
        report.iterations_run = k + 1;
        s = a.adjoint(&r)?;
        let gamma_next = dot(&s, &s);
        if res <= cfg.tol * b_norm || gamma_next.sqrt() <= cfg.tol * s0 {
            report.converged = true;
            break;
        }
        let beta = gamma_next / gamma;
        gamma = gamma_next;
        Zip::from(&mut p).and(&s).for_each(|pi, &si| *pi = si + beta * *pi);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((x, report))
}

/// Sonneveld's CGS applied to `A^T A x = A^T b`. The data residual is
/// tracked alongside, since every normal-matrix product passes through `A`.
/// CGS convergence is erratic once the residual stagnates, so the iterate
/// with the smallest data residual is returned.
fn cgs_normal(a: &Preconditioned, sino: &Sinogram, cfg: &SolverConfig) -> Result<(Tomogram, SolverReport)> {
    let start = Instant::now();
    let b = a.data(sino)?;
    let b_norm = norm(&b);
    let mut x = zero_tomogram(a.ops);
    let mut report = SolverReport::default();
    let mut data_r = b.clone();
    let mut r = a.adjoint(&b)?;
    let r0_norm = norm(&r);
    if r0_norm == 0.0 {
        report.converged = true;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok((x, report));
    }
    let mut best = (b_norm, x.clone());
    let shadow = r.clone();
    let mut u = r.clone();
    let mut p = r.clone();
    let mut rho = dot(&shadow, &r);
    for k in 0..cfg.max_iter {
        let v = a.adjoint(&a.forward(&p)?)?;
        let sigma = dot(&shadow, &v);
        if sigma.abs() <= BREAKDOWN || !sigma.is_finite() {
            log::warn!("cgs breakdown at iteration {k}");
            break;
        }
        let alpha = rho / sigma;
        let q = &u - &(&v * alpha);
        let uq = &u + &q;
        let a_uq = a.forward(&uq)?;
        x.scaled_add(alpha, &uq);
        data_r.scaled_add(-alpha, &a_uq);
        r.scaled_add(-alpha, &a.adjoint(&a_uq)?);
        if !all_finite(&x) {
            return Err(TomoError::NonFiniteValue { iteration: k });
        }
        let res = norm(&data_r);
        report.residual_history.push(res);
        report.iterations_run = k + 1;
        if res < best.0 {
            best = (res, x.clone());
        }
        if res <= cfg.tol * b_norm || norm(&r) <= cfg.tol * r0_norm {
            report.converged = true;
            break;
        }
        let rho_next = dot(&shadow, &r);
        if rho_next.abs() <= BREAKDOWN {
            log::warn!("cgs breakdown at iteration {k}");
            break;
        }
        let beta = rho_next / rho;
        rho = rho_next;
        u = &r + &(&q * beta);
        Zip::from(&mut p).and(&u).and(&q).for_each(|pi, &ui, &qi| {
            *pi = ui + beta * (qi + beta * *pi);
        });
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((best.1, report))
}

/// Forward differences with a reflective (zero-flux) boundary.
pub fn gradient(u: &Tomogram) -> (Array2<f64>, Array2<f64>) {
    let (nx, ny) = u.dim();
    let gx = Array2::from_shape_fn((nx, ny), |(a, b)| if a + 1 < nx { u[[a + 1, b]] - u[[a, b]] } else { 0.0 });
    let gy = Array2::from_shape_fn((nx, ny), |(a, b)| if b + 1 < ny { u[[a, b + 1]] - u[[a, b]] } else { 0.0 });
    (gx, gy)
}

/// Transpose of [`gradient`] (negative divergence).
pub fn gradient_adjoint(gx: &Array2<f64>, gy: &Array2<f64>) -> Tomogram {
    let (nx, ny) = gx.dim();
    Array2::from_shape_fn((nx, ny), |(a, b)| {
        let mut v = 0.0;
        if a + 1 < nx {
            v -= gx[[a, b]];
        }
        if a > 0 {
            v += gx[[a - 1, b]];
        }
        if b + 1 < ny {
            v -= gy[[a, b]];
        }
        if b > 0 {
            v += gy[[a, b - 1]];
        }
        v
    })
}

/// Isotropic shrinkage of the vector field `(vx, vy)` by `kappa`.
pub fn shrink(vx: &Array2<f64>, vy: &Array2<f64>, kappa: f64) -> (Array2<f64>, Array2<f64>) {
    let mut dx = vx.clone();
    let mut dy = vy.clone();
    Zip::from(&mut dx).and(&mut dy).for_each(|x, y| {
        let mag = x.hypot(*y);
        let scale = if mag > kappa { (mag - kappa) / mag } else { 0.0 };
        *x *= scale;
        *y *= scale;
    });
    (dx, dy)
}

/// The TV data weight used when `cfg.mu` is unset.
pub fn default_mu(sino: &Sinogram, ops: &TomoOperators) -> Result<f64> {
    let bp = ops.radon_adjoint(sino)?;
    Ok(0.1 * bp.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Stacked operator `[sqrt(mu) P R ; sqrt(lambda) grad]` restricted to the
/// field-of-view disk.
struct TvSystem<'a> {
    a: &'a Preconditioned<'a>,
    mask: &'a Array2<bool>,
    sqrt_mu: f64,
    sqrt_lambda: f64,
}

struct Stacked {
    data: Sinogram,
    gx: Array2<f64>,
    gy: Array2<f64>,
}

impl Stacked {
    fn dot(&self, o: &Stacked) -> f64 {
        dot(&self.data, &o.data) + dot(&self.gx, &o.gx) + dot(&self.gy, &o.gy)
    }

    fn axpy(&mut self, alpha: f64, o: &Stacked) {
        self.data.scaled_add(alpha, &o.data);
        self.gx.scaled_add(alpha, &o.gx);
        self.gy.scaled_add(alpha, &o.gy);
    }
}

impl TvSystem<'_> {
    fn masked(&self, u: &Tomogram) -> Tomogram {
        let mut m = u.clone();
        Zip::from(&mut m).and(self.mask).for_each(|v, &keep| {
            if !keep {
                *v = 0.0;
            }
        });
        m
    }

    fn forward(&self, u: &Tomogram) -> Result<Stacked> {
        let u = self.masked(u);
        let (gx, gy) = gradient(&u);
        Ok(Stacked {
            data: self.a.forward(&u)? * self.sqrt_mu,
            gx: gx * self.sqrt_lambda,
            gy: gy * self.sqrt_lambda,
        })
    }

    fn adjoint(&self, s: &Stacked) -> Result<Tomogram> {
        let mut u = self.a.adjoint(&s.data)? * self.sqrt_mu;
        u.scaled_add(self.sqrt_lambda, &gradient_adjoint(&s.gx, &s.gy));
        Ok(self.masked(&u))
    }

    /// A few CGLS steps on `B u = rhs`, warm-started at `u`.
    fn refine(&self, u: &mut Tomogram, rhs: &Stacked, iters: usize) -> Result<()> {
        let bu = self.forward(u)?;
        let mut r = Stacked {
            data: &rhs.data - &bu.data,
            gx: &rhs.gx - &bu.gx,
            gy: &rhs.gy - &bu.gy,
        };
        let mut s = self.adjoint(&r)?;
        let mut p = s.clone();
        let mut gamma = dot(&s, &s);
        for _ in 0..iters {
            if gamma <= BREAKDOWN {
                break;
            }
            let q = self.forward(&p)?;
            let qq = q.dot(&q);
            if qq <= BREAKDOWN {
                break;
            }
            let alpha = gamma / qq;
            u.scaled_add(alpha, &p);
            r.axpy(-alpha, &q);
            s = self.adjoint(&r)?;
            let gamma_next = dot(&s, &s);
            let beta = gamma_next / gamma;
            gamma = gamma_next;
            Zip::from(&mut p).and(&s).for_each(|pi, &si| *pi = si + beta * *pi);
        }
        Ok(())
    }
}

/// Split-Bregman minimization of `|grad u|_1 + mu/2 ||P (R u - b)||^2` over
/// the field-of-view disk, with splitting weight `lambda = 2 mu`.
pub fn solve_tv(sino: &Sinogram, ops: &TomoOperators, cfg: &SolverConfig) -> Result<(Tomogram, SolverReport)> {
    let start = Instant::now();
    cfg.validate()?;
    check_sino(sino, ops)?;
    let a = Preconditioned::new(ops, cfg.preconditioner)?;
    let b = a.data(sino)?;
    let b_norm = norm(&b);
    let mut u = zero_tomogram(ops);
    let mut report = SolverReport::default();
    if b_norm == 0.0 {
        report.converged = true;
        report.wall_time = start.elapsed().as_secs_f64();
        return Ok((u, report));
    }
    let mu = match cfg.mu {
        Some(mu) => mu,
        None => default_mu(sino, ops)?,
    };
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(TomoError::InvalidConfig(format!("TV weight mu must be positive, got {mu}")));
    }
    let lambda = 2.0 * mu;
    let system = TvSystem {
        a: &a,
        mask: &ops.deapo.support_mask,
        sqrt_mu: mu.sqrt(),
        sqrt_lambda: lambda.sqrt(),
    };
    let shape = u.dim();
    let (mut dx, mut dy) = (Array2::zeros(shape), Array2::zeros(shape));
    let (mut bx, mut by) = (Array2::<f64>::zeros(shape), Array2::<f64>::zeros(shape));
    let data_rhs = &b * system.sqrt_mu;

    for k in 0..cfg.max_iter {
        let rhs = Stacked {
            data: data_rhs.clone(),
            gx: (&dx - &bx) * system.sqrt_lambda,
            gy: (&dy - &by) * system.sqrt_lambda,
        };
        system.refine(&mut u, &rhs, cfg.tv_inner_iter)?;
        if !all_finite(&u) {
            return Err(TomoError::NonFiniteValue { iteration: k });
        }
        let (gx, gy) = gradient(&u);
        (dx, dy) = shrink(&(&gx + &bx), &(&gy + &by), 1.0 / lambda);
        bx += &(&gx - &dx);
        by += &(&gy - &dy);
        if !all_finite(&bx) || !all_finite(&by) {
            return Err(TomoError::NonFiniteValue { iteration: k });
        }
        let res = norm(&(&b - &a.forward(&u)?));
        report.residual_history.push(res);
        report.iterations_run = k + 1;
        if res <= cfg.tol * b_norm {
            report.converged = true;
            break;
        }
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((u, report))
}
