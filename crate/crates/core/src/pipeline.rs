//! Slice-parallel reconstruction of a sinogram stack: chunk planning, complex
//! pairing of slices for filtered back projection, worker threads and
//! result assembly.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::geometry::ScanGeometry;
use crate::operators::{ComplexSinogram, ComplexTomogram, Sinogram, TomoOperators, Tomogram};
use crate::solvers::{self, solver_preconditioner, Algorithm, SolverConfig, SolverReport};

/// Sinograms of all slices, `(n_z, n_theta, n_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinogramStack {
    pub data: Array3<f64>,
    pub geometry: ScanGeometry,
}

impl SinogramStack {
    pub fn new(data: Array3<f64>, geometry: ScanGeometry) -> Result<Self> {
        let want = (geometry.n_z, geometry.n_theta, geometry.n_p);
        if data.dim() != want {
            return Err(TomoError::shape(format!("stack {want:?}"), format!("{:?}", data.dim())));
        }
        Ok(SinogramStack { data, geometry })
    }

    pub fn n_slices(&self) -> usize {
        self.data.dim().0
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), z)
    }
}

/// Reconstructed slices, `(n_z, n_x, n_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TomogramStack {
    pub data: Array3<f64>,
}

impl TomogramStack {
    pub fn slice(&self, z: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRange {
    pub start: usize,
    pub len: usize,
}

impl SliceRange {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Assignment of contiguous ranges to workers, pass by pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub worker_count: usize,
    pub max_slices_per_worker_pass: usize,
    /// `passes[p][w]` is the range of worker `w` in pass `p`.
    pub passes: Vec<Vec<SliceRange>>,
    /// Neighbouring slices loaded on each side of a range. Always 0.
    pub halo: usize,
}

impl ChunkPlan {
    pub fn n_passes(&self) -> usize {
        self.passes.len()
    }

    /// All ranges of one worker, in pass order.
    pub fn worker_ranges(&self, worker: usize) -> Vec<SliceRange> {
        self.passes.iter().map(|p| p[worker]).collect()
    }
}

/// Splits `n_z` slices into `ceil(n_z / (workers * max_per_pass))` passes.
/// Every pass but the last gives each worker `max_per_pass` slices; the last
/// one spreads the remainder so that leading workers get at most one more
/// slice than trailing ones.
pub fn plan_chunks(n_z: usize, workers: usize, max_per_pass: usize) -> ChunkPlan {
    let workers = workers.max(1);
    let max_per_pass = max_per_pass.max(1);
    let per_pass = workers * max_per_pass;
    let n_passes = n_z.div_ceil(per_pass).max(1);
    let mut passes = Vec::with_capacity(n_passes);
    let mut start = 0;
    for p in 0..n_passes {
        let count = if p + 1 == n_passes { n_z - start } else { per_pass };
        let (base, extra) = (count / workers, count % workers);
        let pass = (0..workers)
            .map(|w| {
                let len = base + usize::from(w < extra);
                let r = SliceRange { start, len };
                start += len;
                r
            })
            .collect();
        passes.push(pass);
    }
    ChunkPlan {
        worker_count: workers,
        max_slices_per_worker_pass: max_per_pass,
        passes,
        halo: 0,
    }
}

/// `a + i b`.
pub fn pair_complex(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<ComplexSinogram> {
    if a.dim() != b.dim() {
        return Err(TomoError::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let mut out = Array2::zeros(a.dim());
    ndarray::Zip::from(&mut out)
        .and(a)
        .and(b)
        .for_each(|o, &re, &im| *o = Complex64::new(re, im));
    Ok(out)
}

/// Real and imaginary parts.
pub fn unpair(c: &ComplexTomogram) -> (Tomogram, Tomogram) {
    (c.mapv(|v| v.re), c.mapv(|v| v.im))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub workers: usize,
    pub max_slices_per_pass: usize,
    /// Reconstruct slice pairs `(2k, 2k+1)` as one complex slice. Used by
    /// FBP only; iterative solvers always run on single real slices.
    pub pair_slices: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            workers: 1,
            max_slices_per_pass: 8,
            pair_slices: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// One report per slice, in slice order.
    pub slices: Vec<SolverReport>,
    /// Residual norms combined over slices, iteration by iteration.
    pub aggregate: SolverReport,
    pub plan: ChunkPlan,
}

type UnitResult = Result<Vec<(usize, Tomogram, SolverReport)>>;

/// Reconstructs slices `[2u, 2u+2)` of a paired unit `u` together.
fn fbp_pair(stack: &SinogramStack, ops: &TomoOperators, cfg: &SolverConfig, z: usize) -> UnitResult {
    let start = Instant::now();
    let (a, b) = (stack.slice(z), stack.slice(z + 1));
    let sino = pair_complex(&a, &b)?;
    let (u_a, u_b) = unpair(&ops.iradon_complex(&sino)?);
    let reprojected = ops.radon_complex(&pair_complex(&u_a.view(), &u_b.view())?)?;
    let pre = solver_preconditioner(cfg.preconditioner, ops.geom.n_p)?;
    let residual = |part: fn(&Complex64) -> f64, data: &ArrayView2<f64>| -> Result<f64> {
        let r: Sinogram = reprojected.map(part) - data;
        Ok(pre.apply(&r)?.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    let wall_time = start.elapsed().as_secs_f64() / 2.0;
    let report = |res: f64| SolverReport {
        residual_history: vec![res],
        iterations_run: 1,
        converged: true,
        wall_time,
    };
    Ok(vec![
        (z, u_a, report(residual(|c| c.re, &a)?)),
        (z + 1, u_b, report(residual(|c| c.im, &b)?)),
    ])
}

fn solve_unit(
    stack: &SinogramStack,
    ops: &TomoOperators,
    cfg: &SolverConfig,
    paired: bool,
    unit: usize,
) -> UnitResult {
    if paired {
        let z = 2 * unit;
        if z + 1 < stack.n_slices() {
            return fbp_pair(stack, ops, cfg, z);
        }
        let (u, rep) = solvers::solve(&stack.slice(z).to_owned(), ops, cfg)?;
        return Ok(vec![(z, u, rep)]);
    }
    let (u, rep) = solvers::solve(&stack.slice(unit).to_owned(), ops, cfg)?;
    Ok(vec![(unit, u, rep)])
}

fn combine(reports: &[SolverReport], wall_time: f64) -> SolverReport {
    let iterations = reports.iter().map(|r| r.iterations_run).max().unwrap_or(0);
    let residual_history = (0..iterations)
        .map(|k| {
            reports
                .iter()
                .filter_map(|r| r.residual_history.get(k).or(r.residual_history.last()))
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    SolverReport {
        residual_history,
        iterations_run: iterations,
        converged: reports.iter().all(|r| r.converged),
        wall_time,
    }
}

/// Reconstructs every slice of `stack` with `cfg`, spreading work over
/// `opts.workers` threads. Results do not depend on the worker count: each
/// slice (or FBP slice pair) is solved by exactly one worker with the same
/// arithmetic. A failing unit aborts the run once in-flight work drains.
pub fn run_pipeline(
    stack: &SinogramStack,
    ops: &TomoOperators,
    cfg: &SolverConfig,
    opts: &PipelineOptions,
) -> Result<(TomogramStack, PipelineReport)> {
    let start = Instant::now();
    cfg.validate()?;
    if stack.geometry.n_p != ops.geom.n_p || stack.geometry.n_theta != ops.geom.n_theta {
        return Err(TomoError::shape(
            format!("slices ({}, {})", ops.geom.n_theta, ops.geom.n_p),
            format!("({}, {})", stack.geometry.n_theta, stack.geometry.n_p),
        ));
    }
    let n_z = stack.n_slices();
    let paired = opts.pair_slices && cfg.algorithm == Algorithm::Fbp;
    let n_units = if paired { n_z.div_ceil(2) } else { n_z };
    let unit_span = |u: usize| if paired { (2 * u, (2 * u + 2).min(n_z)) } else { (u, u + 1) };
    let plan = plan_chunks(n_units, opts.workers, opts.max_slices_per_pass);

    let mut out = Array3::zeros((n_z, ops.geom.n_x, ops.geom.n_y));
    let mut reports = vec![SolverReport::default(); n_z];
    let abort = AtomicBool::new(false);
    let mut failure: Option<(usize, TomoError)> = None;

    std::thread::scope(|scope| {
        let (result_tx, result_rx) = mpsc::channel::<(usize, UnitResult)>();
        let mut job_txs = Vec::with_capacity(plan.worker_count);
        for _ in 0..plan.worker_count {
            let (job_tx, job_rx) = mpsc::channel::<SliceRange>();
            job_txs.push(job_tx);
            let result_tx = result_tx.clone();
            let abort = &abort;
            scope.spawn(move || {
                for range in job_rx {
                    for unit in range.start..range.end() {
                        if abort.load(Ordering::Relaxed) {
                            return;
                        }
                        let res = catch_unwind(AssertUnwindSafe(|| solve_unit(stack, ops, cfg, paired, unit)))
                            .unwrap_or_else(|_| Err(TomoError::InvalidConfig("worker panicked".into())));
                        if result_tx.send((unit, res)).is_err() {
                            return;
                        }
                    }
                }
            });
        }
        drop(result_tx);
        for pass in &plan.passes {
            for (w, range) in pass.iter().enumerate() {
                if range.len > 0 {
                    job_txs[w].send(*range).expect("worker alive while jobs remain");
                }
            }
        }
        drop(job_txs);

        for (unit, res) in result_rx {
            match res {
                Ok(slices) => {
                    for (z, u, rep) in slices {
                        out.index_axis_mut(Axis(0), z).assign(&u);
                        reports[z] = rep;
                    }
                }
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    // keep the lowest failing unit so the error is reproducible
                    if failure.as_ref().is_none_or(|(f, _)| unit < *f) {
                        failure = Some((unit, e));
                    }
                }
            }
        }
    });

    if let Some((unit, cause)) = failure {
        let (start, end) = unit_span(unit);
        return Err(TomoError::WorkerFailure {
            start,
            end,
            cause: cause.to_string(),
        });
    }
    let aggregate = combine(&reports, start.elapsed().as_secs_f64());
    Ok((
        TomogramStack { data: out },
        PipelineReport {
            slices: reports,
            aggregate,
            plan,
        },
    ))
}
