//! Dense volumes, the `MVF1` file format, window cropping and intensity
//! normalization.
//!
//! Voxel data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + dx * (y + dy * z)`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes opening every volume file.
pub const VOLUME_MAGIC: &[u8; 4] = b"MVF1";
/// Header length: magic, three u32 dims, dtype code, three f32 spacings.
pub const VOLUME_HEADER_LEN: usize = 4 + 12 + 1 + 12;
/// Isotropic 50 µm voxels.
pub const DEFAULT_SPACING_MM: f32 = 0.05;

const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic bytes {0:?}, expected MVF1")]
    BadMagic([u8; 4]),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("invalid dimensions {0:?}")]
    DimOverflow([u64; 3]),
    #[error("unknown dtype code {0}")]
    BadDtypeCode(u8),
    #[error("invalid spacing {0:?}")]
    BadSpacing([f32; 3]),
    #[error("label volume contains value {value} at index {index}; masks must be 0/1")]
    InvalidMask { index: usize, value: u8 },
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], len: usize },
    #[error("expected a {expected:?} volume, found {found:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("window offset {offset:?} size {size:?} exceeds volume dims {dims:?}")]
    WindowOutOfBounds {
        offset: [usize; 3],
        size: [usize; 3],
        dims: [usize; 3],
    },
    #[error("window size {size:?} exceeds the configured maximum {max:?}")]
    WindowTooLarge { size: [usize; 3], max: [usize; 3] },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Element type of a volume's payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Scalar32,
    Label8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Scalar32 => 0,
            Dtype::Label8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Scalar32),
            1 => Ok(Dtype::Label8),
            other => Err(VolumeError::BadDtypeCode(other)),
        }
    }

    fn elem_size(self) -> usize {
        match self {
            Dtype::Scalar32 => 4,
            Dtype::Label8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Scalar(Vec<f32>),
    Label(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Scalar(v) => v.len(),
            VoxelData::Label(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::Scalar(_) => Dtype::Scalar32,
            VoxelData::Label(_) => Dtype::Label8,
        }
    }
}

/// A dense 3D grid of voxels with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: VoxelData,
}

fn checked_len(dims: [usize; 3]) -> Result<usize> {
    let overflow = || VolumeError::DimOverflow(dims.map(|d| d as u64));
    if dims.contains(&0) {
        return Err(overflow());
    }
    dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .filter(|&n| n <= isize::MAX as usize / 4)
        .ok_or_else(overflow)
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(VolumeError::BadSpacing(spacing))
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: VoxelData) -> Result<Self> {
        let n = checked_len(dims)?;
        check_spacing(spacing)?;
        if data.len() != n {
            return Err(VolumeError::LengthMismatch {
                dims,
                len: data.len(),
            });
        }
        let v = Volume {
            dims,
            spacing,
            data,
        };
        v.validate_mask()?;
        Ok(v)
    }

    pub fn scalar(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, [DEFAULT_SPACING_MM; 3], VoxelData::Scalar(data))
    }

    pub fn label(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, [DEFAULT_SPACING_MM; 3], VoxelData::Label(data))
    }

    pub fn zeros(dims: [usize; 3], dtype: Dtype) -> Result<Self> {
        let n = checked_len(dims)?;
        let data = match dtype {
            Dtype::Scalar32 => VoxelData::Scalar(vec![0.0; n]),
            Dtype::Label8 => VoxelData::Label(vec![0; n]),
        };
        Self::new(dims, [DEFAULT_SPACING_MM; 3], data)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Volume::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn as_scalar(&self) -> Result<&[f32]> {
        match &self.data {
            VoxelData::Scalar(v) => Ok(v),
            VoxelData::Label(_) => Err(VolumeError::DtypeMismatch {
                expected: Dtype::Scalar32,
                found: Dtype::Label8,
            }),
        }
    }

    pub fn as_label(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::Label(v) => Ok(v),
            VoxelData::Scalar(_) => Err(VolumeError::DtypeMismatch {
                expected: Dtype::Label8,
                found: Dtype::Scalar32,
            }),
        }
    }

    /// Voxel values widened to f32 regardless of dtype.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::Scalar(v) => v.clone(),
            VoxelData::Label(v) => v.iter().map(|&b| b as f32).collect(),
        }
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        match &self.data {
            VoxelData::Scalar(v) => v.iter().filter(|&&x| x != 0.0).count(),
            VoxelData::Label(v) => v.iter().filter(|&&x| x != 0).count(),
        }
    }

    fn validate_mask(&self) -> Result<()> {
        if let VoxelData::Label(v) = &self.data {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &b)| b > 1) {
                return Err(VolumeError::InvalidMask { index, value });
            }
        }
        Ok(())
    }

    /// Serializes to the `MVF1` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate_mask()?;
        let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + self.len() * self.dtype().elem_size());
        out.extend_from_slice(VOLUME_MAGIC);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| VolumeError::DimOverflow(self.dims.map(|d| d as u64)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.dtype().code());
        for s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.data {
            VoxelData::Scalar(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxelData::Label(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VOLUME_HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != VOLUME_MAGIC {
                return Err(VolumeError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(VolumeError::TruncatedFile {
                expected: VOLUME_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != VOLUME_MAGIC {
            return Err(VolumeError::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let raw_dims = [u32_at(4), u32_at(8), u32_at(12)];
        let dims = raw_dims.map(|d| d as usize);
        let n = checked_len(dims).map_err(|_| VolumeError::DimOverflow(raw_dims.map(u64::from)))?;
        let dtype = Dtype::from_code(bytes[16])?;
        let spacing = [f32_at(17), f32_at(21), f32_at(25)];
        let expected = n
            .checked_mul(dtype.elem_size())
            .and_then(|p| p.checked_add(VOLUME_HEADER_LEN))
            .ok_or(VolumeError::DimOverflow(raw_dims.map(u64::from)))?;
        if bytes.len() < expected {
            return Err(VolumeError::TruncatedFile {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(VolumeError::TrailingBytes {
                expected,
                found: bytes.len(),
            });
        }
        let payload = &bytes[VOLUME_HEADER_LEN..];
        let data = match dtype {
            Dtype::Scalar32 => VoxelData::Scalar(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::Label8 => VoxelData::Label(payload.to_vec()),
        };
        Volume::new(dims, spacing, data)
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Volume::from_bytes(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = v.to_bytes()?;
    let io_err = |source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

/// Axis-aligned sub-box of a volume, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub offset: [usize; 3],
    pub size: [usize; 3],
}

impl Window {
    pub fn new(offset: [usize; 3], size: [usize; 3]) -> Self {
        Window { offset, size }
    }

    /// Integer center, `offset + size / 2` per axis.
    pub fn center(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.offset[a] + self.size[a] / 2)
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.offset[a] + self.size[a] <= dims[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.offset[a] && p[a] < self.offset[a] + self.size[a])
    }

    pub fn voxel_count(&self) -> usize {
        self.size.iter().product()
    }

    /// Window of `size` centered on `center`, clamped to fit inside `dims`.
    pub fn centered_clamped(center: [usize; 3], size: [usize; 3], dims: [usize; 3]) -> Self {
        let offset = std::array::from_fn(|a| {
            let max_off = dims[a].saturating_sub(size[a]);
            center[a].saturating_sub(size[a] / 2).min(max_off)
        });
        Window { offset, size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadPolicy {
    #[default]
    ZeroPad,
    Reject,
}

/// Largest window edge accepted by [`crop_window`].
pub const MAX_WINDOW_EDGE: usize = 1024;

pub fn crop_window(v: &Volume, w: &Window, pad: PadPolicy) -> Result<Volume> {
    if w.size.iter().any(|&s| s == 0 || s > MAX_WINDOW_EDGE) {
        return Err(VolumeError::WindowTooLarge {
            size: w.size,
            max: [MAX_WINDOW_EDGE; 3],
        });
    }
    let dims = v.dims();
    if pad == PadPolicy::Reject && !w.fits(dims) {
        return Err(VolumeError::WindowOutOfBounds {
            offset: w.offset,
            size: w.size,
            dims,
        });
    }
    fn copy<T: Copy + Default>(src: &[T], dims: [usize; 3], w: &Window) -> Vec<T> {
        let [sx, sy, sz] = w.size;
        let mut out = vec![T::default(); sx * sy * sz];
        let x0 = w.offset[0];
        if x0 >= dims[0] {
            return out;
        }
        let x_len = sx.min(dims[0] - x0);
        for z in 0..sz {
            let vz = w.offset[2] + z;
            if vz >= dims[2] {
                break;
            }
            for y in 0..sy {
                let vy = w.offset[1] + y;
                if vy >= dims[1] {
                    break;
                }
                let s = x0 + dims[0] * (vy + dims[1] * vz);
                let d = sx * (y + sy * z);
                out[d..d + x_len].copy_from_slice(&src[s..s + x_len]);
            }
        }
        out
    }
    let data = match v.data() {
        VoxelData::Scalar(s) => VoxelData::Scalar(copy(s, dims, w)),
        VoxelData::Label(s) => VoxelData::Label(copy(s, dims, w)),
    };
    Volume::new(w.size, v.spacing(), data)
}

/// Writes `patch` into `target` at `offset`, dropping voxels outside `target`.
pub fn paste_window(target: &mut Volume, patch: &Volume, offset: [usize; 3]) -> Result<()> {
    fn paste<T: Copy>(dst: &mut [T], dd: [usize; 3], src: &[T], sd: [usize; 3], off: [usize; 3]) {
        if off[0] >= dd[0] {
            return;
        }
        let x_len = sd[0].min(dd[0] - off[0]);
        for z in 0..sd[2] {
            let tz = off[2] + z;
            if tz >= dd[2] {
                break;
            }
            for y in 0..sd[1] {
                let ty = off[1] + y;
                if ty >= dd[1] {
                    break;
                }
                let d = off[0] + dd[0] * (ty + dd[1] * tz);
                let s = sd[0] * (y + sd[1] * z);
                dst[d..d + x_len].copy_from_slice(&src[s..s + x_len]);
            }
        }
    }
    let (dd, sd) = (target.dims, patch.dims);
    match (&mut target.data, &patch.data) {
        (VoxelData::Scalar(d), VoxelData::Scalar(s)) => paste(d, dd, s, sd, offset),
        (VoxelData::Label(d), VoxelData::Label(s)) => paste(d, dd, s, sd, offset),
        (d, s) => {
            return Err(VolumeError::DtypeMismatch {
                expected: d.dtype(),
                found: s.dtype(),
            })
        }
    }
    Ok(())
}

/// Per-volume z-score: `(v - mean) / max(std, 1e-6)`.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let data = v.as_scalar()?;
    let n = data.len() as f64;
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(STD_FLOOR);
    let out = data
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect();
    Volume::new(v.dims(), v.spacing(), VoxelData::Scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_voxel_file_is_33_bytes() {
        let v = Volume::scalar([1, 1, 1], vec![0.0]).unwrap();
        assert_eq!(v.to_bytes().unwrap().len(), 33);
    }

    #[test]
    fn label_bytes_match_hand_layout() {
        let vals = vec![0u8, 1, 0, 1, 1, 0, 0, 1];
        let v = Volume::label([2, 2, 2], vals.clone()).unwrap();
        let mut expected = b"MVF1".to_vec();
        for _ in 0..3 {
            expected.extend_from_slice(&[2, 0, 0, 0]);
        }
        expected.push(1);
        for _ in 0..3 {
            expected.extend_from_slice(&0.05f32.to_le_bytes());
        }
        expected.extend_from_slice(&vals);
        assert_eq!(v.to_bytes().unwrap(), expected);
        let back = Volume::from_bytes(&expected).unwrap();
        assert_eq!(back.as_label().unwrap(), &vals[..]);
        // x-fastest: (1,0,0) is index 1, (0,1,0) index 2, (0,0,1) index 4
        assert_eq!(back.as_label().unwrap()[back.index(1, 0, 0)], 1);
        assert_eq!(back.as_label().unwrap()[back.index(0, 1, 0)], 0);
        assert_eq!(back.as_label().unwrap()[back.index(0, 0, 1)], 1);
    }

    #[test]
    fn zeros_round_trip_rewrites_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.mvf");
        let v = Volume::zeros([4, 4, 4], Dtype::Scalar32).unwrap();
        write_volume(&v, &p).unwrap();
        let first = fs::read(&p).unwrap();
        let back = read_volume(&p).unwrap();
        write_volume(&back, &p).unwrap();
        assert_eq!(first, fs::read(&p).unwrap());
        assert_eq!(back, v);
    }

    #[test]
    fn read_errors() {
        let mut bytes = Volume::zeros([2, 2, 2], Dtype::Label8)
            .unwrap()
            .to_bytes()
            .unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Volume::from_bytes(&bad),
            Err(VolumeError::BadMagic(_))
        ));

        let mut bad = bytes.clone();
        bad[16] = 7;
        assert!(matches!(
            Volume::from_bytes(&bad),
            Err(VolumeError::BadDtypeCode(7))
        ));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Volume::from_bytes(&bad),
            Err(VolumeError::DimOverflow(_))
        ));

        let mut bad = bytes.clone();
        for o in [4, 8, 12] {
            bad[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            Volume::from_bytes(&bad),
            Err(VolumeError::DimOverflow(_))
        ));

        bytes.pop();
        assert!(matches!(
            Volume::from_bytes(&bytes),
            Err(VolumeError::TruncatedFile { .. })
        ));
        assert!(matches!(
            Volume::from_bytes(&bytes[..10]),
            Err(VolumeError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn invalid_mask_rejected_before_write() {
        let v = Volume {
            dims: [2, 1, 1],
            spacing: [1.0; 3],
            data: VoxelData::Label(vec![0, 2]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mvf");
        assert!(matches!(
            write_volume(&v, &p),
            Err(VolumeError::InvalidMask { index: 1, value: 2 })
        ));
        assert!(!p.exists());
        assert!(Volume::label([2, 1, 1], vec![0, 2]).is_err());
    }

    #[test]
    fn crop_shifts_coordinates() {
        let mut data = vec![0.0; 512];
        data[3 + 8 * (3 + 8 * 3)] = 1.0;
        let v = Volume::scalar([8, 8, 8], data).unwrap();
        let c = crop_window(&v, &Window::new([2, 2, 2], [4, 4, 4]), PadPolicy::Reject).unwrap();
        assert_eq!(c.dims(), [4, 4, 4]);
        let d = c.as_scalar().unwrap();
        assert_eq!(d[c.index(1, 1, 1)], 1.0);
        assert_eq!(d.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn crop_zero_pads_outside() {
        let v = Volume::scalar([4, 4, 4], vec![3.0; 64]).unwrap();
        let w = Window::new([2, 3, 0], [4, 4, 4]);
        let c = crop_window(&v, &w, PadPolicy::ZeroPad).unwrap();
        for (i, &val) in c.as_scalar().unwrap().iter().enumerate() {
            let [x, y, z] = c.coords(i);
            let inside = x + 2 < 4 && y + 3 < 4 && z < 4;
            assert_eq!(val, if inside { 3.0 } else { 0.0 });
        }
        assert!(matches!(
            crop_window(&v, &w, PadPolicy::Reject),
            Err(VolumeError::WindowOutOfBounds { .. })
        ));
    }

    #[test]
    fn full_window_crop_is_identity() {
        let v = Volume::scalar([3, 2, 5], (0..30).map(|i| i as f32).collect()).unwrap();
        let c = crop_window(&v, &Window::new([0, 0, 0], [3, 2, 5]), PadPolicy::Reject).unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn normalize_examples() {
        let c = Volume::scalar([2, 2, 2], vec![4.0; 8]).unwrap();
        assert!(normalize_intensity(&c)
            .unwrap()
            .as_scalar()
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));

        let v = Volume::scalar([2, 1, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(
            normalize_intensity(&v).unwrap().as_scalar().unwrap(),
            &[-1.0, 1.0]
        );
    }

    fn moments(d: &[f32]) -> (f64, f64) {
        let n = d.len() as f64;
        let m = d.iter().map(|&x| x as f64).sum::<f64>() / n;
        let s = (d.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, s)
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        ([1usize..5, 1usize..5, 1usize..5], any::<bool>()).prop_flat_map(|(dims, label)| {
            let n = dims.iter().product::<usize>();
            let spacing = prop::array::uniform3(0.01f32..2.0);
            if label {
                (prop::collection::vec(0u8..2, n), spacing)
                    .prop_map(move |(d, s)| Volume::new(dims, s, VoxelData::Label(d)).unwrap())
                    .boxed()
            } else {
                (prop::collection::vec(-1e6f32..1e6, n), spacing)
                    .prop_map(move |(d, s)| Volume::new(dims, s, VoxelData::Scalar(d)).unwrap())
                    .boxed()
            }
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip(v in arb_volume()) {
            let bytes = v.to_bytes().unwrap();
            let back = Volume::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back, v);
        }

        #[test]
        fn crop_then_paste_restores(v in arb_volume(), off in prop::array::uniform3(0usize..4), size in prop::array::uniform3(1usize..5)) {
            let w = Window::new(off, size);
            let crop = crop_window(&v, &w, PadPolicy::ZeroPad).unwrap();
            let mut blank = Volume::zeros(v.dims(), v.dtype()).unwrap();
            paste_window(&mut blank, &crop, off).unwrap();
            for i in 0..v.len() {
                let p = v.coords(i);
                if w.contains(p) {
                    match (v.data(), blank.data()) {
                        (VoxelData::Scalar(a), VoxelData::Scalar(b)) => prop_assert_eq!(a[i].to_bits(), b[i].to_bits()),
                        (VoxelData::Label(a), VoxelData::Label(b)) => prop_assert_eq!(a[i], b[i]),
                        _ => unreachable!(),
                    }
                }
            }
        }

        #[test]
        fn normalized_moments(data in prop::collection::vec(-1e3f32..1e3, 8..200)) {
            prop_assume!(data.iter().any(|&x| (x - data[0]).abs() > 1e-2));
            let n = data.len();
            let v = Volume::scalar([n, 1, 1], data).unwrap();
            let once = normalize_intensity(&v).unwrap();
            let (m, s) = moments(once.as_scalar().unwrap());
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((s - 1.0).abs() < 1e-3);
            let twice = normalize_intensity(&once).unwrap();
            for (a, b) in once.as_scalar().unwrap().iter().zip(twice.as_scalar().unwrap()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
