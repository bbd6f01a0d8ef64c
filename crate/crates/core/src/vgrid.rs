//! VGRID: a little-endian binary container for dense voxel grids.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "VGRD"
//!      4     4  u32 version (1)
//!      8     4  u32 dtype (0 = u8, 1 = u16, 2 = f32)
//!     12    12  u32 X, Y, Z
//!     24    12  f32 origin x, y, z
//!     36     4  f32 voxel size
//!     40     -  X*Y*Z values, index (x*Y + y)*Z + z
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::voxel::{SceneSpec, VoxelGrid};

pub const MAGIC: &[u8; 4] = b"VGRD";
pub const VERSION: u32 = 1;
const HEADER: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl GridData {
    pub fn code(&self) -> u32 {
        match self {
            GridData::U8(_) => 0,
            GridData::U16(_) => 1,
            GridData::F32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GridData::U8(v) => v.len(),
            GridData::U16(v) => v.len(),
            GridData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(code: u32) -> Option<usize> {
        match code {
            0 => Some(1),
            1 => Some(2),
            2 => Some(4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VGrid {
    pub dims: [usize; 3],
    pub origin: [f32; 3],
    pub voxel_size: f32,
    pub data: GridData,
}

impl VGrid {
    pub fn new(dims: [usize; 3], origin: [f32; 3], voxel_size: f32, data: GridData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(
                "vgrid",
                format!("{} values for dims {:?}", data.len(), dims),
            ));
        }
        Ok(Self {
            dims,
            origin,
            voxel_size,
            data,
        })
    }

    /// Grid stored with the placement of `spec` (origin and size rounded to f32).
    pub fn from_spec(spec: &SceneSpec, data: GridData) -> Result<Self> {
        Self::new(
            spec.dims,
            spec.origin.map(|v| v as f32),
            spec.voxel_size as f32,
            data,
        )
    }

    pub fn from_labels(grid: &VoxelGrid<u8>) -> Self {
        Self::from_spec(&grid.spec, GridData::U8(grid.values.clone())).expect("grid length checked by VoxelGrid")
    }

    /// Interprets a u8 payload as labels placed by `spec`; dims must agree.
    pub fn into_labels(self, spec: SceneSpec) -> Result<VoxelGrid<u8>> {
        if self.dims != spec.dims {
            return Err(Error::shape(
                "vgrid",
                format!("file dims {:?}, expected {:?}", self.dims, spec.dims),
            ));
        }
        match self.data {
            GridData::U8(v) => VoxelGrid::from_values(spec, v),
            other => Err(Error::invalid(format!(
                "label grid must be u8, found dtype {}",
                other.code()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.data.len();
        let mut out = Vec::with_capacity(HEADER + n * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.data.code().to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for o in self.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&self.voxel_size.to_le_bytes());
        match &self.data {
            GridData::U8(v) => out.extend_from_slice(v),
            GridData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            GridData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", magic)));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let code_at = r.pos as u64;
        let code = r.u32("dtype")?;
        let width = GridData::width(code)
            .ok_or_else(|| Error::format(code_at, format!("unknown dtype code {code}")))?;
        let dims = [r.u32("X")? as usize, r.u32("Y")? as usize, r.u32("Z")? as usize];
        let origin = [r.f32("origin")?, r.f32("origin")?, r.f32("origin")?];
        let voxel_size = r.f32("voxel size")?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::format(12, format!("dims {:?} overflow", dims)))?;
        let payload = r.take(n, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after payload", bytes.len() - r.pos),
            ));
        }
        let data = match code {
            0 => GridData::U8(payload.to_vec()),
            1 => GridData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            _ => GridData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Self::new(dims, origin, voxel_size, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }
}
