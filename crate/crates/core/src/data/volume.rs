//! INNV v1 volumes, little-endian:
//!
//! ```text
//! "INNV" | version u32 = 1 | D, H, W u32 | spacing 3 x f32 (mm) | D*H*W f32
//! ```
//!
//! The payload is slice-major (depth outer, then rows, then columns).

use std::path::Path;

use super::{DataError, Result};

pub const MAGIC: &[u8; 4] = b"INNV";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 12 + 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    /// Voxel size in mm per axis.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let v = Volume { dims, spacing, data };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(DataError::InvalidVolume(format!("dims {:?}", self.dims)));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(DataError::InvalidVolume(format!("spacing {:?}", self.spacing)));
        }
        let n: usize = self.dims.iter().product();
        if self.data.len() != n {
            return Err(DataError::InvalidVolume(format!(
                "{} values for dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    /// Slice `d` as `H * W` row-major values.
    pub fn slice(&self, d: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[d * plane..(d + 1) * plane]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, spacing) = parse_header(bytes)?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DataError::InvalidVolume(format!("dims {dims:?} overflow")))?;
        let payload = take(bytes, HEADER_BYTES, n, "payload")?;
        if bytes.len() != HEADER_BYTES + n {
            return Err(DataError::InvalidVolume(format!(
                "{} trailing bytes after payload at offset {}",
                bytes.len() - HEADER_BYTES - n,
                HEADER_BYTES + n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Volume::new(dims, spacing, data)
    }
}

fn take<'a>(bytes: &'a [u8], offset: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(offset..offset + n).ok_or_else(|| DataError::Truncated {
        offset,
        needed: n,
        what: what.to_string(),
    })
}

fn parse_header(bytes: &[u8]) -> Result<([usize; 3], [f32; 3])> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let u32_at = |o: usize, what: &str| -> Result<u32> {
        Ok(u32::from_le_bytes(take(bytes, o, 4, what)?.try_into().expect("4 bytes")))
    };
    let version = u32_at(4, "version")?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let dims = [
        u32_at(8, "depth")? as usize,
        u32_at(12, "height")? as usize,
        u32_at(16, "width")? as usize,
    ];
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_bits(u32_at(20 + 4 * i, "spacing")?);
    }
    Ok((dims, spacing))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    v.validate()?;
    let path = path.as_ref();
    std::fs::write(path, v.to_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    Volume::from_bytes(&bytes).map_err(|e| e.in_file(path))
}

/// Reads only the header: dims and spacing.
pub fn volume_header(path: impl AsRef<Path>) -> Result<([usize; 3], [f32; 3])> {
    use std::io::Read;
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_BYTES);
    f.take(HEADER_BYTES as u64)
        .read_to_end(&mut head)
        .map_err(|e| DataError::io(path, e))?;
    parse_header(&head).map_err(|e| e.in_file(path))
}
