//! Dense 3D scalar volumes, integer label maps, and their on-disk formats.
//!
//! Voxels are stored row-major with x varying fastest:
//! `index = x + nx * (y + ny * z)`.
//!
//! # File formats
//!
//! `VOL1` (little-endian throughout):
//!
//! | bytes   | content                                        |
//! |---------|------------------------------------------------|
//! | 0..4    | ASCII `VOL1`                                   |
//! | 4..16   | `nx`, `ny`, `nz` as `u32`                      |
//! | 16      | value domain, `0` raw, `1` unit-normalized     |
//! | 17..    | `nx*ny*nz` IEEE-754 `f32` voxels               |
//!
//! `LBL1` uses the same 17-byte header with magic `LBL1` (byte 16 is written
//! as `0` and ignored), a payload of `u16` labels, then a name table:
//! `u16` count, and per entry `u16` label, `u16` byte length, UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
const HEADER_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume is constant (min = max = {0}); cannot min-max normalize")]
    ConstantVolume(f64),
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Dims, Dims),
    #[error("truncated file: expected {expected} bytes of payload, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid dims {0:?}: every axis must be positive")]
    BadDims(Dims),
    #[error("voxel {index} is not finite ({value})")]
    NonFinite { index: usize, value: f32 },
    #[error("voxel {index} = {value} lies outside [0, 1] for a unit-normalized volume")]
    OutOfUnitRange { index: usize, value: f32 },
    #[error("unknown value-domain flag {0}")]
    BadDomainFlag(u8),
    #[error("label name for {0} is not valid UTF-8")]
    BadName(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Grid extents `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    fn validate(self) -> Result<Self> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            Err(VolumeError::BadDims(self))
        } else {
            Ok(self)
        }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDomain {
    Raw,
    UnitNormalized,
}

impl ValueDomain {
    fn flag(self) -> u8 {
        match self {
            ValueDomain::Raw => 0,
            ValueDomain::UnitNormalized => 1,
        }
    }

    fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(ValueDomain::Raw),
            1 => Ok(ValueDomain::UnitNormalized),
            other => Err(VolumeError::BadDomainFlag(other)),
        }
    }
}

/// Immutable dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxels: Vec<f32>,
    domain: ValueDomain,
}

impl Volume3D {
    /// Checks voxel count, finiteness, and the unit range when flagged.
    pub fn new(dims: Dims, voxels: Vec<f32>, domain: ValueDomain) -> Result<Self> {
        let dims = dims.validate()?;
        if voxels.len() != dims.len() {
            return Err(VolumeError::TruncatedFile {
                expected: dims.len(),
                found: voxels.len(),
            });
        }
        for (index, &value) in voxels.iter().enumerate() {
            if !value.is_finite() {
                return Err(VolumeError::NonFinite { index, value });
            }
            if domain == ValueDomain::UnitNormalized && !(0.0..=1.0).contains(&value) {
                return Err(VolumeError::OutOfUnitRange { index, value });
            }
        }
        Ok(Self { dims, voxels, domain })
    }

    pub fn raw(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        Self::new(dims, voxels, ValueDomain::Raw)
    }

    /// Rounds `f64` values to storage precision.
    pub fn from_f64(dims: Dims, values: &[f64], domain: ValueDomain) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect(), domain)
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        let domain = if (0.0..=1.0).contains(&value) {
            ValueDomain::UnitNormalized
        } else {
            ValueDomain::Raw
        };
        Self::new(dims, vec![value; dims.len()], domain)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.voxels.iter().map(|&v| v as f64).collect()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Same voxels, relabelled as raw intensities.
    pub fn into_raw(self) -> Self {
        Self {
            domain: ValueDomain::Raw,
            ..self
        }
    }

    pub fn ensure_same_dims(&self, other: &Volume3D) -> Result<()> {
        if self.dims != other.dims {
            return Err(VolumeError::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

/// Affine map sending the minimum voxel to 0 and the maximum to 1.
pub fn minmax_normalize(v: &Volume3D) -> Result<Volume3D> {
    let values = v.to_f64();
    let normalized = minmax_normalize_values(&values)?;
    Volume3D::from_f64(v.dims, &normalized, ValueDomain::UnitNormalized)
}

/// Min-max scaling over a flat slice, in `f64`.
pub fn minmax_normalize_values(values: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(VolumeError::ConstantVolume(lo));
    }
    let range = hi - lo;
    Ok(values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect())
}

/// Center crop or symmetric pad to `target`. When the size difference on an
/// axis is odd, the extra voxel goes to the high-index side.
pub fn crop_or_pad(v: &Volume3D, target: Dims, fill: f32) -> Result<Volume3D> {
    let target = target.validate()?;
    let src = v.dims.as_array();
    let dst = target.as_array();
    // Signed offset: source index = destination index + shift.
    let shift: Vec<isize> = src
        .iter()
        .zip(dst.iter())
        .map(|(&s, &d)| {
            if d <= s {
                ((s - d) / 2) as isize
            } else {
                -(((d - s) / 2) as isize)
            }
        })
        .collect();
    let mut out = vec![fill; target.len()];
    for z in 0..target.nz {
        let sz = z as isize + shift[2];
        if sz < 0 || sz >= src[2] as isize {
            continue;
        }
        for y in 0..target.ny {
            let sy = y as isize + shift[1];
            if sy < 0 || sy >= src[1] as isize {
                continue;
            }
            for x in 0..target.nx {
                let sx = x as isize + shift[0];
                if sx < 0 || sx >= src[0] as isize {
                    continue;
                }
                out[target.index(x, y, z)] = v.get(sx as usize, sy as usize, sz as usize);
            }
        }
    }
    let domain = if v.domain == ValueDomain::UnitNormalized && (0.0..=1.0).contains(&fill) {
        ValueDomain::UnitNormalized
    } else {
        ValueDomain::Raw
    };
    Volume3D::new(target, out, domain)
}

fn write_header(buf: &mut Vec<u8>, magic: &[u8; 4], dims: Dims, flag: u8) {
    buf.extend_from_slice(magic);
    for d in dims.as_array() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(flag);
}

fn read_header(bytes: &[u8], magic: &[u8; 4]) -> Result<(Dims, u8)> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &found != magic {
        return Err(VolumeError::BadMagic {
            found,
            expected: *magic,
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2)).validate()?;
    Ok((dims, bytes[16]))
}

pub fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.voxels.len());
    write_header(&mut buf, VOLUME_MAGIC, v.dims, v.domain.flag());
    for &x in &v.voxels {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let (dims, flag) = read_header(bytes, VOLUME_MAGIC)?;
    let domain = ValueDomain::from_flag(flag)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = dims.len() * 4;
    if payload.len() != expected {
        return Err(VolumeError::TruncatedFile {
            expected,
            found: payload.len(),
        });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume3D::new(dims, voxels, domain)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume3D) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    decode_volume(&fs::read(path)?)
}

/// Integer parcellation over a grid. Label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap3D {
    dims: Dims,
    labels: Vec<u16>,
    names: BTreeMap<u16, String>,
}

impl LabelMap3D {
    pub fn new(dims: Dims, labels: Vec<u16>, names: BTreeMap<u16, String>) -> Result<Self> {
        let dims = dims.validate()?;
        if labels.len() != dims.len() {
            return Err(VolumeError::TruncatedFile {
                expected: dims.len(),
                found: labels.len(),
            });
        }
        Ok(Self { dims, labels, names })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn names(&self) -> &BTreeMap<u16, String> {
        &self.names
    }

    pub fn name(&self, label: u16) -> String {
        self.names
            .get(&label)
            .cloned()
            .unwrap_or_else(|| format!("label_{label}"))
    }

    /// Distinct non-background labels present in the grid, ascending.
    pub fn regions(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.labels {
            if l != 0 {
                seen.insert(l);
            }
        }
        seen.into_iter().collect()
    }
}

pub fn encode_labelmap(m: &LabelMap3D) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 2 * m.labels.len());
    write_header(&mut buf, LABEL_MAGIC, m.dims, 0);
    for &l in &m.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    buf.extend_from_slice(&(m.names.len() as u16).to_le_bytes());
    for (&label, name) in &m.names {
        buf.extend_from_slice(&label.to_le_bytes());
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    buf
}

pub fn decode_labelmap(bytes: &[u8]) -> Result<LabelMap3D> {
    let (dims, _) = read_header(bytes, LABEL_MAGIC)?;
    let payload_len = dims.len() * 2;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < payload_len + 2 {
        return Err(VolumeError::TruncatedFile {
            expected: payload_len + 2,
            found: rest.len(),
        });
    }
    let labels = rest[..payload_len]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let mut cursor = payload_len;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor + n > rest.len() {
            return Err(VolumeError::TruncatedFile {
                expected: cursor + n,
                found: rest.len(),
            });
        }
        let s = &rest[cursor..cursor + n];
        cursor += n;
        Ok(s)
    };
    let read_u16 = |s: &[u8]| u16::from_le_bytes([s[0], s[1]]);
    let count = read_u16(take(2)?);
    let mut names = BTreeMap::new();
    for _ in 0..count {
        let label = read_u16(take(2)?);
        let len = read_u16(take(2)?) as usize;
        let name = std::str::from_utf8(take(len)?).map_err(|_| VolumeError::BadName(label))?;
        names.insert(label, name.to_owned());
    }
    LabelMap3D::new(dims, labels, names)
}

pub fn write_labelmap(path: impl AsRef<Path>, m: &LabelMap3D) -> Result<()> {
    fs::write(path, encode_labelmap(m))?;
    Ok(())
}

pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap3D> {
    decode_labelmap(&fs::read(path)?)
}
