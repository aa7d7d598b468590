//! Volume files, intensity normalization, noise simulation and the
//! reconstruction quality metrics.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::geometry::ScanGeometry;
use crate::pipeline::{SinogramStack, TomogramStack};

pub const VOLUME_MAGIC: &[u8; 8] = b"SPTOMO01";
pub const VOLUME_VERSION: u32 = 1;
/// Environment variable naming the default matrix cache directory.
pub const CACHE_DIR_ENV: &str = "SPTOMO_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    Sinogram = 0,
    Tomogram = 1,
    Intensity = 2,
}

impl VolumeKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(VolumeKind::Sinogram),
            1 => Some(VolumeKind::Tomogram),
            2 => Some(VolumeKind::Intensity),
            _ => None,
        }
    }

    /// Sinograms and raw intensities carry their projection angles.
    pub fn has_angles(self) -> bool {
        self != VolumeKind::Tomogram
    }
}

/// A 3D stack with its scan metadata. The payload is `f32`, C order,
/// little-endian; for projection data the axes are `(n_z, n_theta, n_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub kind: VolumeKind,
    pub dims: [u64; 3],
    pub center: f64,
    pub angles: Vec<f64>,
    pub data: Vec<f32>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated: needed {n} more bytes, {} left", bytes.len()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8]) -> std::result::Result<u64, String> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

fn take_f64(bytes: &mut &[u8]) -> std::result::Result<f64, String> {
    Ok(f64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

impl VolumeFile {
    pub fn from_sinograms(stack: &SinogramStack) -> Self {
        let (z, t, p) = stack.data.dim();
        VolumeFile {
            kind: VolumeKind::Sinogram,
            dims: [z as u64, t as u64, p as u64],
            center: stack.geometry.center,
            angles: stack.geometry.angles.clone(),
            data: stack.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_tomograms(stack: &TomogramStack, center: f64) -> Self {
        Self::from_array(VolumeKind::Tomogram, &stack.data.view(), center, Vec::new())
    }

    pub fn from_array(kind: VolumeKind, data: &ArrayView3<f64>, center: f64, angles: Vec<f64>) -> Self {
        let (a, b, c) = data.dim();
        VolumeFile {
            kind,
            dims: [a as u64, b as u64, c as u64],
            center,
            angles,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.dims[0] as usize, self.dims[1] as usize, self.dims[2] as usize)
    }

    pub fn to_array(&self) -> Array3<f64> {
        Array3::from_shape_vec(self.shape(), self.data.iter().map(|&v| v as f64).collect())
            .expect("payload length checked on construction")
    }

    /// Scan geometry of projection data: `n_z`, `n_theta`, `n_p` from the
    /// dims, with the stored angles and center.
    pub fn geometry(&self) -> Result<ScanGeometry> {
        if !self.kind.has_angles() {
            return Err(TomoError::InvalidGeometry("a tomogram file has no scan geometry".into()));
        }
        let (z, t, p) = self.shape();
        ScanGeometry::new(p, t, z)?
            .with_angles(self.angles.clone())?
            .with_center(self.center)
    }

    pub fn sinogram_stack(&self) -> Result<SinogramStack> {
        SinogramStack::new(self.to_array(), self.geometry()?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(61 + 8 * self.angles.len() + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.center.to_le_bytes());
        out.extend_from_slice(&(self.angles.len() as u64).to_le_bytes());
        for a in &self.angles {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let b = &mut bytes;
        if take(b, 8)? != VOLUME_MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes"));
        if version != VOLUME_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind_byte = take(b, 1)?[0];
        let kind = VolumeKind::from_u8(kind_byte).ok_or_else(|| format!("unknown kind {kind_byte}"))?;
        let dims = [take_u64(b)?, take_u64(b)?, take_u64(b)?];
        let center = take_f64(b)?;
        let angle_count = take_u64(b)? as usize;
        if kind.has_angles() && angle_count as u64 != dims[1] {
            return Err(format!("{angle_count} angles for {} projections", dims[1]));
        }
        if !kind.has_angles() && angle_count != 0 {
            return Err(format!("tomogram file lists {angle_count} angles"));
        }
        let angles = (0..angle_count).map(|_| take_f64(b)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or("dims overflow")? as usize;
        if b.len() != 4 * count {
            return Err(format!("payload has {} bytes, dims need {}", b.len(), 4 * count));
        }
        let data = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(VolumeFile {
            kind,
            dims,
            center,
            angles,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| TomoError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TomoError::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| TomoError::InvalidVolume {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Flat-field (open beam) intensity.
#[derive(Debug, Clone, Copy)]
pub enum FlatField<'a> {
    Scalar(f64),
    Stack(ArrayView3<'a, f64>),
}

/// `-ln(I / I0)`, with intensities below `1e-9 max I` clamped up first.
pub fn normalize(intensity: &Array3<f64>, flat: FlatField, geometry: ScanGeometry) -> Result<SinogramStack> {
    let floor = 1e-9 * intensity.iter().fold(0.0f64, |m, &v| m.max(v));
    let log_ratio = |i: f64, i0: f64| -(i.max(floor) / i0).ln();
    let data = match flat {
        FlatField::Scalar(i0) => {
            if !(i0 > 0.0) {
                return Err(TomoError::InvalidFlatField { index: 0, value: i0 });
            }
            intensity.mapv(|i| log_ratio(i, i0))
        }
        FlatField::Stack(i0) => {
            if i0.dim() != intensity.dim() {
                return Err(TomoError::shape(format!("{:?}", intensity.dim()), format!("{:?}", i0.dim())));
            }
            if let Some((index, &value)) = i0.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(TomoError::InvalidFlatField { index, value });
            }
            let mut out = intensity.clone();
            ndarray::Zip::from(&mut out).and(&i0).for_each(|v, &f| *v = log_ratio(*v, f));
            out
        }
    };
    SinogramStack::new(data, geometry)
}

/// Beer-Lambert forward model `I = I0 exp(-sino)`.
pub fn simulate_intensity(sino: &Array3<f64>, i0: f64) -> Array3<f64> {
    sino.mapv(|s| i0 * (-s).exp())
}

/// Adds Gaussian noise with standard deviation `sigma_rel * max|data|`.
pub fn add_gaussian_noise(data: &mut Array3<f64>, sigma_rel: f64, seed: u64) -> Result<()> {
    if sigma_rel == 0.0 {
        return Ok(());
    }
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let normal = Normal::new(0.0, sigma_rel * peak)
        .map_err(|e| TomoError::InvalidConfig(format!("noise level {sigma_rel}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(())
}

/// `10 log10(|ref|^2 / |ref - s rec|^2)` with the least-squares scale
/// `s = <ref, rec> / |rec|^2`. Exact agreement gives `+inf`.
pub fn snr<'a>(rec: impl IntoIterator<Item = &'a f64>, reference: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut rr, mut rf, mut ff) = (0.0, 0.0, 0.0);
    let pairs: Vec<(f64, f64)> = rec.into_iter().copied().zip(reference.into_iter().copied()).collect();
    if pairs.iter().all(|(a, b)| a == b) {
        return f64::INFINITY;
    }
    for &(a, b) in &pairs {
        rr += a * a;
        rf += a * b;
        ff += b * b;
    }
    let s = if rr > 0.0 { rf / rr } else { 0.0 };
    let err: f64 = pairs.iter().map(|(a, b)| (b - s * a).powi(2)).sum();
    10.0 * (ff / err).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when the reconstruction matches the reference exactly.
    pub snr_db: Option<f64>,
    pub exact_match: bool,
    pub residual: f64,
}

impl Metrics {
    pub fn new(snr_db: f64, residual: f64) -> Self {
        Metrics {
            snr_db: snr_db.is_finite().then_some(snr_db),
            exact_match: snr_db == f64::INFINITY,
            residual,
        }
    }
}

/// One solver run in a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algo: String,
    pub iters: usize,
    pub snr_db: Option<f64>,
    pub residual_history: Vec<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunRecord>,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json).map_err(|e| TomoError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TomoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TomoError::InvalidVolume {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// `explicit`, else `$SPTOMO_CACHE_DIR` when set and non-empty.
pub fn cache_dir(explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit.or_else(|| {
        std::env::var_os(CACHE_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn geom(z: usize, t: usize, p: usize) -> ScanGeometry {
        ScanGeometry::new(p, t, z).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let i0 = Array3::from_elem((2, 3, 4), 5.0);
        let s = normalize(&i0, FlatField::Stack(i0.view()), geom(2, 3, 4)).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
        let i = i0.mapv(|v| v * (-1.0f64).exp());
        let s = normalize(&i, FlatField::Scalar(5.0), geom(2, 3, 4)).unwrap();
        assert!(s.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalize_rejects_bad_flat_field() {
        let i = Array3::from_elem((1, 2, 2), 1.0);
        let mut flat = i.clone();
        flat[[0, 1, 0]] = 0.0;
        let err = normalize(&i, FlatField::Stack(flat.view()), geom(1, 2, 2)).unwrap_err();
        assert!(matches!(err, TomoError::InvalidFlatField { index: 2, .. }));
        assert!(normalize(&i, FlatField::Scalar(-1.0), geom(1, 2, 2)).is_err());
    }

    #[test]
    fn normalize_clamps_dark_pixels() {
        let mut i = Array3::from_elem((1, 1, 2), 1.0);
        i[[0, 0, 1]] = 0.0;
        let s = normalize(&i, FlatField::Scalar(1.0), geom(1, 1, 2)).unwrap();
        assert!((s.data[[0, 0, 1]] - (1e9f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn beer_lambert_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let i0 = 1000.0;
        let i = Array3::from_shape_fn((2, 4, 6), |_| rng.random_range(1.0..1000.0));
        let s = normalize(&i, FlatField::Scalar(i0), geom(2, 4, 6)).unwrap();
        let back = simulate_intensity(&s.data, i0);
        for (a, b) in back.iter().zip(i.iter()) {
            assert!((a - b).abs() <= 1e-6 * b);
        }
    }

    #[test]
    fn snr_examples() {
        let reference = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 8 + j) % 5) as f64);
        assert_eq!(snr(&reference, &reference), f64::INFINITY);
        // e orthogonal to ref with |e| = |ref| / 10
        let mut e = Array2::from_shape_fn((8, 8), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        let proj = (&e * &reference).sum() / (&reference * &reference).sum();
        e = &e - &(&reference * proj);
        let scale = (&reference * &reference).sum().sqrt() / 10.0 / (&e * &e).sum().sqrt();
        let rec = &reference + &(e * scale);
        let db = snr(&rec, &reference);
        assert!((db - 10.0 * 101f64.log10()).abs() < 1e-9, "{db}");
        // scale invariance from the optimal fit
        assert!((snr(&(&rec * 3.0), &reference) - db).abs() < 1e-9);
    }

    #[test]
    fn metrics_flag_exact_match() {
        let m = Metrics::new(f64::INFINITY, 0.0);
        assert!(m.exact_match && m.snr_db.is_none());
        let m = Metrics::new(12.5, 1.0);
        assert_eq!(m.snr_db, Some(12.5));
    }

    #[test]
    fn noise_is_seeded() {
        let base = Array3::from_elem((1, 4, 4), 2.0);
        let (mut a, mut b, mut c) = (base.clone(), base.clone(), base.clone());
        add_gaussian_noise(&mut a, 0.1, 5).unwrap();
        add_gaussian_noise(&mut b, 0.1, 5).unwrap();
        add_gaussian_noise(&mut c, 0.1, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn volume_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom(2, 3, 4).with_center(1.5).unwrap();
        let data = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a * 12 + b * 4 + c) as f64 * 0.25);
        let stack = SinogramStack::new(data.clone(), g.clone()).unwrap();
        let v = VolumeFile::from_sinograms(&stack);
        let path = dir.path().join("s.vol");
        v.write(&path).unwrap();
        let back = VolumeFile::read(&path).unwrap();
        assert_eq!(back, v);
        let s = back.sinogram_stack().unwrap();
        assert_eq!(s.data, data);
        assert_eq!(s.geometry.angles, g.angles);
        assert_eq!(s.geometry.center, 1.5);
    }

    #[test]
    fn header_layout() {
        let v = VolumeFile {
            kind: VolumeKind::Tomogram,
            dims: [1, 1, 2],
            center: 0.5,
            angles: vec![],
            data: vec![1.0, -2.0],
        };
        let bytes = v.encode();
        assert_eq!(&bytes[..8], b"SPTOMO01");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], 1);
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[37..45], &0.5f64.to_le_bytes());
        assert_eq!(&bytes[45..53], &0u64.to_le_bytes());
        assert_eq!(&bytes[53..57], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 61);
    }

    #[test]
    fn decode_rejects_malformed() {
        let v = VolumeFile {
            kind: VolumeKind::Sinogram,
            dims: [1, 2, 2],
            center: 1.0,
            angles: vec![0.0, 1.0],
            data: vec![0.0; 4],
        };
        let good = v.encode();
        assert!(VolumeFile::decode(&good).is_ok());
        assert!(VolumeFile::decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(VolumeFile::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[12] = 7;
        assert!(VolumeFile::decode(&bad).is_err());
        let mut bad = good;
        bad[45..53].copy_from_slice(&1u64.to_le_bytes());
        assert!(VolumeFile::decode(&bad).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = VolumeFile::read(Path::new("/nonexistent/input.vol")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/input.vol"));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            kind in 0u8..3,
            dims in (1u64..4, 1u64..4, 1u64..4),
            center in 0.0f64..8.0,
            seed in any::<u64>(),
        ) {
            let kind = VolumeKind::from_u8(kind).unwrap();
            let n = (dims.0 * dims.1 * dims.2) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let angles = if kind.has_angles() {
                (0..dims.1).map(|_| rng.random_range(0.0..3.0)).collect()
            } else {
                vec![]
            };
            let v = VolumeFile {
                kind,
                dims: [dims.0, dims.1, dims.2],
                center,
                angles,
                data: (0..n).map(|_| rng.random::<f32>()).collect(),
            };
            let back = VolumeFile::decode(&v.encode()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
