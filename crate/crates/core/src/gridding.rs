//! Construction of the sparse polar-to-Cartesian gridding matrix.
//!
//! Column `i` of the matrix is sinogram sample `i` (angle-major, detector
//! frequency in FFT order); row `a * n_y + b` is Cartesian Fourier cell
//! `(a, b)`. Every sample spreads onto its `k_w x k_w` neighborhood with the
//! separable kernel, multiplied by a phase that folds both FFT shifts and the
//! rotation-center offset into the matrix.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{Result, TomoError};
use crate::filters::FilterSpec;
use crate::geometry::{kernel_eval, polar_offsets, KernelSpec, ScanGeometry, StencilGrid};

/// Row index marking an entry that fell outside the Cartesian grid.
pub const OUT_OF_BOUNDS: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCoo {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<i64>,
    pub cols: Vec<usize>,
    pub vals: Vec<Complex64>,
}

impl SparseCoo {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseCoo {
            nrows,
            ncols,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn push(&mut self, row: i64, col: usize, val: Complex64) {
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
}

/// Compressed sparse row matrix with complex values.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<Complex64>,
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `y = A x`.
    pub fn spmv(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.ncols {
            return Err(TomoError::shape(
                format!("vector of length {}", self.ncols),
                format!("length {}", x.len()),
            ));
        }
        let mut y = vec![Complex64::default(); self.nrows];
        for (r, out) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = Complex64::default();
            for k in lo..hi {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
        Ok(y)
    }

    /// `Y = A X` for a row-major `X` of shape `(ncols, n_rhs)`.
    pub fn spmm(&self, x: &[Complex64], n_rhs: usize) -> Result<Vec<Complex64>> {
        if n_rhs == 0 || x.len() != self.ncols * n_rhs {
            return Err(TomoError::shape(
                format!("matrix of shape ({}, {n_rhs})", self.ncols),
                format!("{} elements", x.len()),
            ));
        }
        let mut y = vec![Complex64::default(); self.nrows * n_rhs];
        for (r, out) in y.chunks_mut(n_rhs).enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.vals[k];
                let src = &x[self.col_idx[k] * n_rhs..][..n_rhs];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Ok(y)
    }

    /// Checks the canonical-form invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.row_ptr.len() != self.nrows + 1 {
            return Err(format!(
                "row_ptr has {} entries, expected {}",
                self.row_ptr.len(),
                self.nrows + 1
            ));
        }
        if self.row_ptr[0] != 0 || self.row_ptr[self.nrows] != self.nnz() {
            return Err("row_ptr does not span [0, nnz]".into());
        }
        if self.col_idx.len() != self.nnz() {
            return Err("col_idx and vals lengths differ".into());
        }
        for r in 0..self.nrows {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if lo > hi {
                return Err(format!("row_ptr decreases at row {r}"));
            }
            let row = &self.col_idx[lo..hi];
            if row.iter().any(|&c| c >= self.ncols) {
                return Err(format!("column index out of range in row {r}"));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("columns not strictly increasing in row {r}"));
            }
        }
        Ok(())
    }
}

/// Gridding matrix `S` (`M x N`) and its separately stored conjugate
/// transpose `S^H` (`N x M`).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGridCsr {
    pub forward: Csr,
    pub adjoint: Csr,
}

impl SparseGridCsr {
    pub fn shape(&self) -> (usize, usize) {
        (self.forward.nrows, self.forward.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.forward.nnz()
    }

    pub fn sparsity(&self) -> f64 {
        let (m, n) = self.shape();
        self.nnz() as f64 / (m as f64 * n as f64)
    }
}

/// Raw COO entries, `n_theta * n_p * k_w^2` of them, before pruning.
///
/// Cells on the Nyquist row or column (index 0 on either axis) and samples
/// at detector frequency `-n_p/2` get value zero for even grids: they have no
/// conjugate partner, and dropping them keeps real tomograms mapping to real
/// sinograms.
pub fn build_coo(geom: &ScanGeometry, spec: &KernelSpec, filter: Option<&FilterSpec>) -> Result<SparseCoo> {
    geom.validate()?;
    spec.validate()?;
    if let Some(f) = filter {
        if f.weights.len() != geom.n_samples() {
            return Err(TomoError::shape(
                format!("{} filter weights", geom.n_samples()),
                format!("{}", f.weights.len()),
            ));
        }
    }
    let (nx, ny, np) = (geom.n_x as i64, geom.n_y as i64, geom.n_p);
    let even = np % 2 == 0;
    let stencil = StencilGrid::new(spec.width);
    let coords = polar_offsets(geom);
    // Even grids round the offset from the center so that ties break the same
    // way for p and -p; odd grids have no integer center and round absolutely.
    let split = |d: f64, n: usize| -> (i64, f64) {
        if n % 2 == 0 {
            let r = d.round_ties_even();
            ((n / 2) as i64 + r as i64, d - r)
        } else {
            let x = d + n as f64 / 2.0;
            let r = x.round_ties_even();
            (r as i64, x - r)
        }
    };
    let mut coo = SparseCoo::new(geom.n_pixels(), geom.n_samples());
    coo.rows.reserve(coords.len() * stencil.len());
    coo.cols.reserve(coords.len() * stencil.len());
    coo.vals.reserve(coords.len() * stencil.len());

    for (i, &[dx, dy]) in coords.iter().enumerate() {
        let p = geom.signed_frequency(i % np);
        let (rx, fx) = split(dx, geom.n_x);
        let (ry, fy) = split(dy, geom.n_y);
        let ramp = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * geom.center * p as f64 / np as f64);
        let weight = filter.map_or(1.0, |f| f.weights[i]);
        let dead_sample = even && p == -(np as i64 / 2);

        for &(sx, sy) in &stencil.offsets {
            let (a, b) = (rx + sx, ry + sy);
            let inside = (0..nx).contains(&a) && (0..ny).contains(&b);
            let row = if inside { a * ny + b } else { OUT_OF_BOUNDS };
            let val = if dead_sample || (even && (a == 0 || b == 0)) {
                Complex64::default()
            } else {
                let k = kernel_eval(spec, fx - sx as f64) * kernel_eval(spec, fy - sy as f64);
                let parity = if (a + b).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                ramp * (k * parity * weight)
            };
            coo.push(row, i, val);
        }
    }
    Ok(coo)
}

/// Drops out-of-grid entries and entries with `|val| <= threshold`.
pub fn prune(coo: SparseCoo, threshold: f64) -> SparseCoo {
    let mut out = SparseCoo::new(coo.nrows, coo.ncols);
    for ((r, c), v) in coo.rows.into_iter().zip(coo.cols).zip(coo.vals) {
        if r < 0 || r as usize >= coo.nrows || c >= coo.ncols || v.norm() <= threshold {
            continue;
        }
        out.push(r, c, v);
    }
    out
}

fn compress(nrows: usize, ncols: usize, mut triples: Vec<(usize, usize, Complex64)>) -> Csr {
    triples.sort_by_key(|&(r, c, _)| (r, c));
    let mut row_ptr = vec![0usize; nrows + 1];
    let mut col_idx: Vec<usize> = Vec::with_capacity(triples.len());
    let mut vals: Vec<Complex64> = Vec::with_capacity(triples.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in triples {
        if last == Some((r, c)) {
            *vals.last_mut().expect("duplicate follows an entry") += v;
            continue;
        }
        col_idx.push(c);
        vals.push(v);
        row_ptr[r + 1] += 1;
        last = Some((r, c));
    }
    for r in 0..nrows {
        row_ptr[r + 1] += row_ptr[r];
    }
    Csr {
        nrows,
        ncols,
        row_ptr,
        col_idx,
        vals,
    }
}

/// Canonical CSR (duplicates summed) plus the conjugate transpose.
///
/// Expects a pruned COO; any remaining out-of-bound entry is skipped.
pub fn coo_to_csr(coo: &SparseCoo) -> SparseGridCsr {
    let entries: Vec<(usize, usize, Complex64)> = coo
        .rows
        .iter()
        .zip(&coo.cols)
        .zip(&coo.vals)
        .filter(|((&r, _), _)| r >= 0 && (r as usize) < coo.nrows)
        .map(|((&r, &c), &v)| (r as usize, c, v))
        .collect();
    let transposed = entries.iter().map(|&(r, c, v)| (c, r, v.conj())).collect();
    SparseGridCsr {
        forward: compress(coo.nrows, coo.ncols, entries),
        adjoint: compress(coo.ncols, coo.nrows, transposed),
    }
}

/// Build, prune and compress in one call.
pub fn build_matrix(geom: &ScanGeometry, spec: &KernelSpec, filter: Option<&FilterSpec>) -> Result<SparseGridCsr> {
    Ok(coo_to_csr(&prune(build_coo(geom, spec, filter)?, 0.0)))
}

// ---------------------------------------------------------------------------
// On-disk cache
// ---------------------------------------------------------------------------

pub const CACHE_MAGIC: &[u8; 8] = b"SGCSR001";
pub const CACHE_VERSION: u32 = 1;

/// SHA-256 over every parameter that determines the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatrixCacheKey {
    pub digest: [u8; 32],
}

impl MatrixCacheKey {
    pub fn new(geom: &ScanGeometry, spec: &KernelSpec, filter: Option<&FilterSpec>) -> Self {
        let mut h = Sha256::new();
        h.update(b"sptomo-gridding");
        h.update(CACHE_VERSION.to_le_bytes());
        for v in [geom.n_p, geom.n_theta, geom.n_x, geom.n_y] {
            h.update((v as u64).to_le_bytes());
        }
        for a in &geom.angles {
            h.update(a.to_bits().to_le_bytes());
        }
        h.update(geom.center.to_bits().to_le_bytes());
        h.update([spec.family as u8]);
        h.update((spec.width as u64).to_le_bytes());
        h.update(spec.shape.to_bits().to_le_bytes());
        match filter {
            None => h.update([0xff]),
            Some(f) => {
                h.update([f.kind.id()]);
                for w in &f.weights {
                    h.update(w.to_bits().to_le_bytes());
                }
            }
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&h.finalize());
        MatrixCacheKey { digest }
    }

    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.sgcsr", self.hex()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(SparseGridCsr),
    Miss,
}

fn put_csr_body(buf: &mut Vec<u8>, m: &Csr) {
    for &p in &m.row_ptr {
        buf.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &c in &m.col_idx {
        buf.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for v in &m.vals {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
}

/// Serializes the matrix: header, forward arrays, then the transpose's
/// `row_ptr` (`N + 1`), `col_idx` and `vals`.
pub fn encode_cache(key: &MatrixCacheKey, m: &SparseGridCsr) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let nnz = m.nnz();
    let mut buf = Vec::with_capacity(68 + 16 * (rows + cols + 2) + 48 * nnz);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    buf.extend_from_slice(&(nnz as u64).to_le_bytes());
    buf.extend_from_slice(&key.digest);
    put_csr_body(&mut buf, &m.forward);
    put_csr_body(&mut buf, &m.adjoint);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize_vec(&mut self, n: usize) -> std::result::Result<Vec<usize>, String> {
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err("array length exceeds file size".into());
        }
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }

    fn csr(&mut self, nrows: usize, ncols: usize, nnz: usize) -> std::result::Result<Csr, String> {
        let row_ptr = self.usize_vec(nrows + 1)?;
        let col_idx = self.usize_vec(nnz)?;
        if nnz.saturating_mul(16) > self.buf.len() - self.pos {
            return Err("value array exceeds file size".into());
        }
        let vals = (0..nnz)
            .map(|_| Ok(Complex64::new(self.f64()?, self.f64()?)))
            .collect::<std::result::Result<_, String>>()?;
        let m = Csr {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            vals,
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn decode_cache(key: &MatrixCacheKey, bytes: &[u8]) -> std::result::Result<SparseGridCsr, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let nnz = r.u64()? as usize;
    if r.take(32)? != key.digest {
        return Err("digest does not match the requested key".into());
    }
    let forward = r.csr(rows, cols, nnz)?;
    let adjoint = r.csr(cols, rows, nnz)?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(SparseGridCsr { forward, adjoint })
}

/// Writes `<digest>.sgcsr` in `dir` via a temporary file and rename.
pub fn cache_store(key: &MatrixCacheKey, m: &SparseGridCsr, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| TomoError::io(dir, e))?;
    let path = key.path_in(dir);
    let tmp = dir.join(format!(".{}.{}.tmp", key.hex(), std::process::id()));
    let bytes = encode_cache(key, m);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        TomoError::io(&path, e)
    })?;
    Ok(path)
}

/// Loads a cached matrix. A missing file is a `Miss`; a damaged one is an error.
pub fn cache_load(key: &MatrixCacheKey, dir: &Path) -> Result<CacheLookup> {
    let path = key.path_in(dir);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(CacheLookup::Miss),
        Err(e) => return Err(TomoError::io(path, e)),
    };
    decode_cache(key, &bytes)
        .map(CacheLookup::Hit)
        .map_err(|reason| TomoError::CorruptCache { path, reason })
}

/// Returns the cached matrix or builds and stores it. A corrupt cache file is
/// rebuilt and overwritten.
pub fn load_or_build(
    geom: &ScanGeometry,
    spec: &KernelSpec,
    filter: Option<&FilterSpec>,
    dir: Option<&Path>,
) -> Result<SparseGridCsr> {
    let Some(dir) = dir else {
        return build_matrix(geom, spec, filter);
    };
    let key = MatrixCacheKey::new(geom, spec, filter);
    match cache_load(&key, dir) {
        Ok(CacheLookup::Hit(m)) => return Ok(m),
        Ok(CacheLookup::Miss) => {}
        Err(TomoError::CorruptCache { path, reason }) => {
            log::warn!("rebuilding corrupt cache {}: {reason}", path.display());
        }
        Err(e) => return Err(e),
    }
    let m = build_matrix(geom, spec, filter)?;
    cache_store(&key, &m, dir)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::KernelSpec;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn raw_entry_count() {
        let g = ScanGeometry::new(5, 3, 1).unwrap();
        let coo = build_coo(&g, &KernelSpec::kaiser_bessel(3), None).unwrap();
        assert_eq!(coo.nnz(), 135);
        assert!(coo.cols.iter().enumerate().all(|(k, &col)| col == k / 9));
    }

    #[test]
    fn grid_exact_sample_has_unit_center_value() {
        // theta = 0, p = 2 lands exactly on cell (6, 4) of an 8-grid.
        let g = ScanGeometry::new(8, 1, 1).unwrap();
        let coo = build_coo(&g, &KernelSpec::kaiser_bessel(3), None).unwrap();
        let center = 2 * 9 + 4; // sample j = 2, offset (0, 0)
        assert_eq!(coo.rows[center], 6 * 8 + 4);
        assert!((coo.vals[center].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_sample_rows() {
        // theta = 0, p = 1 on an 8-grid sits at (5, 4).
        let g = ScanGeometry::new(8, 1, 1).unwrap();
        let coo = build_coo(&g, &KernelSpec::kaiser_bessel(3), None).unwrap();
        let rows: Vec<i64> = coo.rows[9..18].to_vec();
        let mut expected = Vec::new();
        for sx in -1..=1 {
            for sy in -1..=1 {
                expected.push((5 + sx) * 8 + (4 + sy));
            }
        }
        assert_eq!(rows, expected);
    }

    #[test]
    fn prune_edge_sample() {
        // A sample at p = n/2 - 0.5 along theta = 0 rounds to the last cell + 1;
        // only the s_x = -1 column of the stencil stays on the grid.
        let g = ScanGeometry::new(8, 1, 1).unwrap();
        let spec = KernelSpec::kaiser_bessel(3);
        let (px, py): (f64, f64) = (8.0 - 0.5, 4.0);
        let (rx, ry) = (px.round_ties_even() as i64, py.round_ties_even() as i64);
        let mut coo = SparseCoo::new(g.n_pixels(), 1);
        for (sx, sy) in StencilGrid::new(3).offsets {
            let (a, b) = (rx + sx, ry + sy);
            let row = if (0..8).contains(&a) && (0..8).contains(&b) { a * 8 + b } else { OUT_OF_BOUNDS };
            let k = kernel_eval(&spec, px - rx as f64 - sx as f64) * kernel_eval(&spec, py - ry as f64 - sy as f64);
            coo.push(row, 0, c(k.max(1e-3)));
        }
        let kept = prune(coo, 0.0);
        assert_eq!(kept.nnz(), 3);
        assert!(kept.rows.iter().all(|&r| r / 8 == 7));
    }

    #[test]
    fn prune_threshold_semantics() {
        let mut coo = SparseCoo::new(4, 2);
        coo.push(0, 0, c(0.0));
        coo.push(1, 1, c(0.0));
        assert_eq!(prune(coo, 0.0).nnz(), 0);

        let mut coo = SparseCoo::new(4, 2);
        coo.push(0, 0, c(0.5));
        coo.push(OUT_OF_BOUNDS, 1, c(1.0));
        coo.push(3, 1, c(1e-3));
        let kept = prune(coo.clone(), 0.0);
        assert_eq!(kept.rows, vec![0, 3]);
        assert_eq!(prune(coo, 1e-2).rows, vec![0]);
    }

    #[test]
    fn csr_small_cases() {
        let empty = coo_to_csr(&SparseCoo::new(3, 2));
        assert_eq!(empty.forward.row_ptr, vec![0, 0, 0, 0]);
        assert_eq!(empty.adjoint.row_ptr, vec![0, 0, 0]);

        let mut coo = SparseCoo::new(2, 2);
        coo.push(1, 1, c(4.0));
        coo.push(0, 0, c(1.0));
        coo.push(1, 0, c(3.0));
        coo.push(0, 1, c(2.0));
        let m = coo_to_csr(&coo);
        let y = m.forward.spmv(&[c(1.0), c(0.0)]).unwrap();
        assert_eq!(y, vec![c(1.0), c(3.0)]);
        assert!(m.forward.validate().is_ok());
    }

    #[test]
    fn duplicates_are_summed() {
        let mut coo = SparseCoo::new(2, 2);
        coo.push(0, 1, c(1.5));
        coo.push(0, 1, Complex64::new(0.5, 2.0));
        let m = coo_to_csr(&coo);
        assert_eq!(m.forward.nnz(), 1);
        assert_eq!(m.forward.vals[0], Complex64::new(2.0, 2.0));
        assert_eq!(m.adjoint.vals[0], Complex64::new(2.0, -2.0));
    }

    #[test]
    fn spmv_shape_errors() {
        let m = coo_to_csr(&SparseCoo::new(3, 2));
        assert!(m.forward.spmv(&[c(1.0)]).is_err());
        assert!(m.forward.spmm(&[c(1.0); 5], 2).is_err());
    }

    #[test]
    fn phase_has_unit_modulus() {
        let g = ScanGeometry::new(16, 7, 1).unwrap().with_center(7.3).unwrap();
        let spec = KernelSpec::kaiser_bessel(3);
        let m = build_matrix(&g, &spec, None).unwrap();
        assert!(m.forward.vals.iter().all(|v| v.norm() <= 1.0 + 1e-15));
    }

    #[test]
    fn deterministic_builds() {
        let g = ScanGeometry::new(16, 9, 1).unwrap();
        let spec = KernelSpec::kaiser_bessel(5);
        assert_eq!(build_matrix(&g, &spec, None).unwrap(), build_matrix(&g, &spec, None).unwrap());
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let g = ScanGeometry::new(12, 5, 1).unwrap();
        let spec = KernelSpec::kaiser_bessel(3);
        let key = MatrixCacheKey::new(&g, &spec, None);
        assert_eq!(cache_load(&key, dir.path()).unwrap(), CacheLookup::Miss);

        let m = build_matrix(&g, &spec, None).unwrap();
        let path = cache_store(&key, &m, dir.path()).unwrap();
        match cache_load(&key, dir.path()).unwrap() {
            CacheLookup::Hit(back) => {
                assert_eq!(back.forward.row_ptr, m.forward.row_ptr);
                assert_eq!(back.adjoint.col_idx, m.adjoint.col_idx);
                assert!(back
                    .forward
                    .vals
                    .iter()
                    .zip(&m.forward.vals)
                    .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()));
            }
            CacheLookup::Miss => panic!("expected a hit"),
        }

        let moved = g.clone().with_center(6.5).unwrap();
        let other = MatrixCacheKey::new(&moved, &spec, None);
        assert_ne!(other, key);
        assert_eq!(cache_load(&other, dir.path()).unwrap(), CacheLookup::Miss);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache_load(&key, dir.path()), Err(TomoError::CorruptCache { .. })));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache_load(&key, dir.path()), Err(TomoError::CorruptCache { .. })));

        // load_or_build replaces the damaged file
        let rebuilt = load_or_build(&g, &spec, None, Some(dir.path())).unwrap();
        assert_eq!(rebuilt, m);
        assert!(matches!(cache_load(&key, dir.path()).unwrap(), CacheLookup::Hit(_)));
    }

    #[test]
    fn cache_header_layout() {
        let g = ScanGeometry::new(6, 2, 1).unwrap();
        let spec = KernelSpec::kaiser_bessel(3);
        let key = MatrixCacheKey::new(&g, &spec, None);
        let m = build_matrix(&g, &spec, None).unwrap();
        let bytes = encode_cache(&key, &m);
        assert_eq!(&bytes[0..8], b"SGCSR001");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 36);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 12);
        assert_eq!(u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize, m.nnz());
        assert_eq!(&bytes[36..68], &key.digest);
        let nnz = m.nnz();
        assert_eq!(bytes.len(), 68 + 8 * (37 + nnz) + 16 * nnz + 8 * (13 + nnz) + 16 * nnz);
    }
}
