//! Multi-channel volumes, brain masks and their on-disk formats.
//!
//! Voxel data is stored channel-fastest: element `(x, y, z, c)` lives at
//! `((x·Y + y)·Z + z)·C + c`. Files are little-endian:
//!
//! ```text
//! volume: "MSPV" u32 version=1 u32 X Y Z C f32 voxel[3]  f32 data[X·Y·Z·C]
//! mask:   "MSPM" u32 version=1 u32 X Y Z                 u8  data[X·Y·Z]
//! ```

pub mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"MSPV";
pub const MASK_MAGIC: &[u8; 4] = b"MSPM";
pub const FORMAT_VERSION: u32 = 1;
pub const VOLUME_HEADER_LEN: usize = 36;
pub const MASK_HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: usize,
    voxel_size: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], channels: usize, voxel_size: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let expected = checked_len(dims, channels)
            .ok_or_else(|| Error::shape(format!("extent overflow for {dims:?}×{channels}")))?;
        if expected == 0 {
            return Err(Error::shape(format!("empty volume {dims:?}×{channels}")));
        }
        if data.len() != expected {
            return Err(Error::shape(format!(
                "volume {dims:?}×{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("voxel size {voxel_size:?} must be positive")));
        }
        Ok(Self {
            dims,
            channels,
            voxel_size,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize, voxel_size: [f32; 3]) -> Result<Self> {
        let len = checked_len(dims, channels)
            .ok_or_else(|| Error::shape(format!("extent overflow for {dims:?}×{channels}")))?;
        Self::new(dims, channels, voxel_size, vec![0.0; len])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.voxel_index(x, y, z) * self.channels + c]
    }

    /// All channels of one voxel.
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let i = self.voxel_index(x, y, z) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn voxel_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f32] {
        let i = self.voxel_index(x, y, z) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Value at signed coordinates; zero outside the grid.
    pub fn get_padded(&self, x: i64, y: i64, z: i64, c: usize) -> f32 {
        if self.contains(x, y, z) {
            self.get(x as usize, y as usize, z as usize, c)
        } else {
            0.0
        }
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
    }
}

fn checked_len(dims: [usize; 3], channels: usize) -> Option<usize> {
    dims.iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let expected = checked_len(dims, 1)
            .ok_or_else(|| Error::shape(format!("extent overflow for mask {dims:?}")))?;
        if data.len() != expected || expected == 0 {
            return Err(Error::shape(format!(
                "mask {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not 0 or 1")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Masked voxel coordinates in x, y, z row-major order.
    pub fn coordinates(&self) -> Vec<[usize; 3]> {
        let [_, ny, nz] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| [i / (ny * nz), (i / nz) % ny, i % nz])
            .collect()
    }
}

/// Header fields of a volume file, readable without the payload.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub channels: usize,
    pub voxel_size: [f32; 3],
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(VOLUME_HEADER_LEN + volume.data.len() * 4);
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &d in volume.dims.iter().chain(std::iter::once(&volume.channels)) {
        buf.extend_from_slice(&extent_u32(d, path)?.to_le_bytes());
    }
    for s in volume.voxel_size {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for v in &volume.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path, &buf)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let header = parse_volume_header(&bytes, path)?;
    let len = checked_len(header.dims, header.channels)
        .filter(|l| l.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(path, "extent overflow"))?;
    let payload = &bytes[VOLUME_HEADER_LEN..];
    if payload.len() != len * 4 {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {} bytes, found {}", len * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(header.dims, header.channels, header.voxel_size, data)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_volume_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; VOLUME_HEADER_LEN];
    read_prefix(&mut file, &mut head, path)?;
    parse_volume_header(&head, path)
}

fn parse_volume_header(bytes: &[u8], path: &Path) -> Result<VolumeHeader> {
    check_magic(bytes, VOLUME_MAGIC, VOLUME_HEADER_LEN, path)?;
    let u = |i: usize| read_u32(bytes, 8 + 4 * i) as usize;
    let f = |i: usize| f32::from_le_bytes(bytes[24 + 4 * i..28 + 4 * i].try_into().unwrap());
    let header = VolumeHeader {
        dims: [u(0), u(1), u(2)],
        channels: u(3),
        voxel_size: [f(0), f(1), f(2)],
    };
    if header.voxel_size.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(path, format!("voxel size {:?}", header.voxel_size)));
    }
    Ok(header)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(MASK_HEADER_LEN + mask.data.len());
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &d in &mask.dims {
        buf.extend_from_slice(&extent_u32(d, path)?.to_le_bytes());
    }
    buf.extend_from_slice(&mask.data);
    write_all(path, &buf)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let dims = parse_mask_header(&bytes, path)?;
    let len = checked_len(dims, 1).ok_or_else(|| Error::format(path, "extent overflow"))?;
    let payload = &bytes[MASK_HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {len} bytes, found {}", payload.len()),
        ));
    }
    Mask::new(dims, payload.to_vec()).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_mask_dims(path: impl AsRef<Path>) -> Result<[usize; 3]> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; MASK_HEADER_LEN];
    read_prefix(&mut file, &mut head, path)?;
    parse_mask_header(&head, path)
}

fn parse_mask_header(bytes: &[u8], path: &Path) -> Result<[usize; 3]> {
    check_magic(bytes, MASK_MAGIC, MASK_HEADER_LEN, path)?;
    Ok([
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    ])
}

fn check_magic(bytes: &[u8], magic: &[u8; 4], header_len: usize, path: &Path) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < header_len {
        return Err(Error::format(path, "truncated header"));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("version mismatch: file has {version}, reader supports {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn extent_u32(d: usize, path: &Path) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::format(path, format!("extent {d} does not fit in u32")))
}

fn read_prefix(file: &mut File, head: &mut Vec<u8>, path: &Path) -> Result<()> {
    let mut filled = 0;
    while filled < head.len() {
        let n = file.read(&mut head[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    head.truncate(filled);
    Ok(())
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
