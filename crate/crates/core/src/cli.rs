//! Command-line front end: phantom simulation, reconstruction, matrix cache
//! management and quality metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array3, Axis};

use crate::error::{Result, TomoError};
use crate::filters::{make_filter, FilterKind};
use crate::geometry::{KernelSpec, ScanGeometry};
use crate::gridding::{cache_load, CacheLookup, MatrixCacheKey};
use crate::io::{
    add_gaussian_noise, cache_dir, normalize, simulate_intensity, snr, FlatField, MetricsReport, RunRecord, VolumeFile,
    VolumeKind,
};
use crate::operators::TomoOperators;
use crate::phantom::phantom_shepp_logan;
use crate::pipeline::{run_pipeline, PipelineOptions};
use crate::solvers::{Algorithm, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "sptomo", version, about = "Parallel-beam tomography reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a noisy sinogram stack of the Shepp-Logan phantom.
    Phantom(PhantomArgs),
    /// Reconstruct a sinogram (or raw intensity) stack.
    Recon(ReconArgs),
    /// Build or inspect cached gridding matrices.
    Cache(CacheArgs),
    /// SNR and relative residual of a reconstruction against a reference.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub slices: usize,
    #[arg(long, default_value_t = 90)]
    pub angles: usize,
    /// Gaussian noise level relative to the sinogram maximum.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth tomogram path; defaults to `<out>.truth`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Write raw intensities `I0 exp(-sino)` instead of the sinogram.
    #[arg(long)]
    pub i0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Fbp,
    Sirt,
    Cgls,
    Tv,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Fbp => Algorithm::Fbp,
            AlgoArg::Sirt => Algorithm::Sirt,
            AlgoArg::Cgls => Algorithm::Cgls,
            AlgoArg::Tv => Algorithm::Tv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    None,
    Ramlak,
    Shepplogan,
    Hamming,
    Density,
}

impl From<FilterArg> for FilterKind {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::None => FilterKind::None,
            FilterArg::Ramlak => FilterKind::RamLak,
            FilterArg::Shepplogan => FilterKind::SheppLogan,
            FilterArg::Hamming => FilterKind::Hamming,
            FilterArg::Density => FilterKind::Density,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Kb,
    Gauss,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value_t = KernelArg::Kb)]
    pub kernel: KernelArg,
    /// Kernel support width in grid cells (odd, at least 3).
    #[arg(long, default_value_t = 3)]
    pub kw: usize,
}

impl KernelArgs {
    pub fn spec(&self) -> KernelSpec {
        match self.kernel {
            KernelArg::Kb => KernelSpec::kaiser_bessel(self.kw),
            KernelArg::Gauss => KernelSpec::gaussian(self.kw),
        }
    }
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = AlgoArg::Fbp)]
    pub algo: AlgoArg,
    /// Iteration count; ignored by FBP.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// FBP filter, or the radial preconditioner of the iterative solvers.
    #[arg(long, value_enum)]
    pub filter: Option<FilterArg>,
    /// Rotation center in detector pixels; overrides the file header.
    #[arg(long)]
    pub center: Option<f64>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Matrix cache directory (default: $SPTOMO_CACHE_DIR).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Reference tomogram for the SNR in the metrics report.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// TV data weight.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Flat-field intensity for raw intensity input.
    #[arg(long, default_value_t = 1.0)]
    pub flat: f64,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("action").required(true).args(["build", "inspect"])))]
pub struct CacheArgs {
    /// Build the matrices for the given parameters and store them.
    #[arg(long)]
    pub build: bool,
    /// Report whether matrices for the given parameters are cached.
    #[arg(long)]
    pub inspect: bool,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 90)]
    pub angles: usize,
    #[arg(long)]
    pub center: Option<f64>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long, value_enum, default_value_t = FilterArg::Ramlak)]
    pub filter: FilterArg,
    /// Cache directory (default: $SPTOMO_CACHE_DIR).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub rec: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

fn truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".truth");
    PathBuf::from(s)
}

fn phantom(args: &PhantomArgs) -> Result<()> {
    if args.size < 8 {
        return Err(TomoError::InvalidGeometry(format!("phantom size must be >= 8, got {}", args.size)));
    }
    let geom = ScanGeometry::new(args.size, args.angles, args.slices)?;
    let ops = TomoOperators::new(&geom, &KernelSpec::default(), FilterKind::None)?;
    let truth = phantom_shepp_logan(args.size, args.slices);
    let mut sino = Array3::zeros((args.slices, args.angles, args.size));
    for (z, slice) in truth.axis_iter(Axis(0)).enumerate() {
        sino.index_axis_mut(Axis(0), z).assign(&ops.radon(&slice.to_owned())?);
    }
    add_gaussian_noise(&mut sino, args.noise, args.seed)?;
    let (kind, payload) = match args.i0 {
        Some(i0) if !(i0 > 0.0) => return Err(TomoError::InvalidFlatField { index: 0, value: i0 }),
        Some(i0) => (VolumeKind::Intensity, simulate_intensity(&sino, i0)),
        None => (VolumeKind::Sinogram, sino),
    };
    VolumeFile::from_array(kind, &payload.view(), geom.center, geom.angles.clone()).write(&args.out)?;
    let truth_out = args.truth.clone().unwrap_or_else(|| truth_path(&args.out));
    VolumeFile::from_array(VolumeKind::Tomogram, &truth.view(), geom.center, Vec::new()).write(&truth_out)?;
    println!("wrote {} and {}", args.out.display(), truth_out.display());
    Ok(())
}

fn read_reference(path: &Path, dims: (usize, usize, usize)) -> Result<Array3<f64>> {
    let v = VolumeFile::read(path)?;
    if v.shape() != dims {
        return Err(TomoError::InvalidVolume {
            path: path.to_path_buf(),
            reason: format!("dims {:?} do not match {:?}", v.shape(), dims),
        });
    }
    Ok(v.to_array())
}

fn recon(args: &ReconArgs) -> Result<()> {
    let vol = VolumeFile::read(&args.input)?;
    let mut stack = match vol.kind {
        VolumeKind::Sinogram => vol.sinogram_stack()?,
        VolumeKind::Intensity => normalize(&vol.to_array(), FlatField::Scalar(args.flat), vol.geometry()?)?,
        VolumeKind::Tomogram => {
            return Err(TomoError::InvalidVolume {
                path: args.input.clone(),
                reason: "expected a sinogram or intensity stack, found a tomogram".into(),
            })
        }
    };
    if let Some(c) = args.center {
        stack.geometry = stack.geometry.clone().with_center(c)?;
    }
    let algorithm = Algorithm::from(args.algo);
    let mut cfg = SolverConfig::new(algorithm);
    if algorithm != Algorithm::Fbp {
        cfg.max_iter = args.iters;
    }
    cfg.mu = args.mu;
    if let Some(f) = args.filter {
        if algorithm == Algorithm::Fbp {
            cfg.filter = f.into();
        } else {
            cfg.preconditioner = f.into();
        }
    }
    cfg.validate()?;

    let dir = cache_dir(args.cache.clone());
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| TomoError::io(d, e))?;
    }
    let ops = TomoOperators::build(&stack.geometry, &args.kernel.spec(), cfg.filter, dir.as_deref())?;
    let opts = PipelineOptions {
        workers: args.workers.max(1),
        ..PipelineOptions::default()
    };
    let start = Instant::now();
    let (tomo, report) = run_pipeline(&stack, &ops, &cfg, &opts)?;
    let wall_time = start.elapsed().as_secs_f64();

    let snr_db = match &args.reference {
        Some(p) => {
            let reference = read_reference(p, tomo.data.dim())?;
            let db = snr(&tomo.data, &reference);
            db.is_finite().then_some(db)
        }
        None => None,
    };
    VolumeFile::from_tomograms(&tomo, stack.geometry.center).write(&args.out)?;
    if let Some(path) = &args.metrics_out {
        MetricsReport {
            runs: vec![RunRecord {
                algo: algorithm.name().into(),
                iters: report.aggregate.iterations_run,
                snr_db,
                residual_history: report.aggregate.residual_history.clone(),
                wall_time,
            }],
        }
        .write(path)?;
    }
    let (z, x, y) = tomo.data.dim();
    print!("{} reconstructed ({z}, {x}, {y}) in {wall_time:.3} s", algorithm.name());
    if let Some(db) = snr_db {
        print!(", SNR {db:.2} dB");
    }
    println!();
    Ok(())
}

fn cache(args: &CacheArgs) -> Result<()> {
    let dir = cache_dir(args.dir.clone())
        .ok_or_else(|| TomoError::InvalidConfig("no cache directory: pass --dir or set SPTOMO_CACHE_DIR".into()))?;
    let mut geom = ScanGeometry::new(args.size, args.angles, 1)?;
    if let Some(c) = args.center {
        geom = geom.with_center(c)?;
    }
    let spec = args.kernel.spec();
    spec.validate()?;
    let kind = FilterKind::from(args.filter);
    if args.build {
        std::fs::create_dir_all(&dir).map_err(|e| TomoError::io(&dir, e))?;
        let ops = TomoOperators::build(&geom, &spec, kind, Some(&dir))?;
        for (label, m, filter) in [
            ("radon", &ops.radon_matrix, None),
            ("iradon", &ops.iradon_matrix, Some(&ops.filter)),
        ] {
            let filter = filter.filter(|f| !f.is_identity());
            let key = MatrixCacheKey::new(&geom, &spec, filter);
            println!(
                "{label}: {} nnz={} sparsity={:.3e}",
                key.path_in(&dir).display(),
                m.nnz(),
                m.sparsity()
            );
        }
        return Ok(());
    }
    let mut keys = vec![("radon", MatrixCacheKey::new(&geom, &spec, None))];
    match kind {
        FilterKind::None => {}
        // the density weights are only known once the unfiltered matrix exists
        FilterKind::Density => match cache_load(&keys[0].1, &dir)? {
            CacheLookup::Hit(m) => {
                let f = crate::density::density_filter_solve(&m, &geom)?.filter;
                keys.push(("iradon", MatrixCacheKey::new(&geom, &spec, Some(&f))));
            }
            CacheLookup::Miss => {}
        },
        k => keys.push(("iradon", MatrixCacheKey::new(&geom, &spec, Some(&make_filter(k, &geom)?)))),
    }
    for (label, key) in keys {
        match cache_load(&key, &dir)? {
            CacheLookup::Hit(m) => {
                let (rows, cols) = m.shape();
                println!(
                    "{label}: hit {} shape=({rows}, {cols}) nnz={} sparsity={:.3e}",
                    key.path_in(&dir).display(),
                    m.nnz(),
                    m.sparsity()
                );
            }
            CacheLookup::Miss => println!("{label}: miss {}", key.path_in(&dir).display()),
        }
    }
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let rec = VolumeFile::read(&args.rec)?.to_array();
    let reference = read_reference(&args.reference, rec.dim())?;
    let db = snr(&rec, &reference);
    let rr: f64 = rec.iter().map(|v| v * v).sum();
    let s = if rr > 0.0 { rec.iter().zip(&reference).map(|(a, b)| a * b).sum::<f64>() / rr } else { 0.0 };
    let err: f64 = rec.iter().zip(&reference).map(|(a, b)| (b - s * a).powi(2)).sum::<f64>().sqrt();
    let nrm: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let residual = if nrm > 0.0 { err / nrm } else { err };
    if db.is_infinite() {
        println!("snr_db: inf (exact match)");
    } else {
        println!("snr_db: {db:.4}");
    }
    println!("residual: {residual:.6e}");
    Ok(())
}

/// Parses nothing; runs an already parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Recon(a) => recon(a),
        Command::Cache(a) => cache(a),
        Command::Metrics(a) => metrics(a),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
