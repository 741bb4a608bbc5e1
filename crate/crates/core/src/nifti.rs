//! Single-file NIfTI-1 reader and writer.
//!
//! Deliberately narrow subset: `.nii` single-file form, datatypes uint8,
//! int16, int32, float32, no extensions, no compression. Headers are parsed
//! in either byte order (detected from `sizeof_hdr`); the writer always emits
//! little-endian with the voxel payload at offset 352.
//!
//! Orientation fields beyond voxel spacing are not interpreted: inputs are
//! assumed rigidly registered already. The translation part of the q-form
//! (`qoffset_{x,y,z}`) is used to carry the volume origin so the on-disk form
//! round-trips the in-memory geometry.

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const HEADER_LEN: usize = 348;
pub const VOX_OFFSET: u32 = 352;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";

/// Supported NIfTI-1 datatype codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i16)]
pub enum Datatype {
    UInt8 = 2,
    Int16 = 4,
    Int32 = 8,
    Float32 = 16,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            8 => Ok(Self::Int32),
            16 => Ok(Self::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Int32 => 4,
            Self::Float32 => 4,
        }
    }
}

/// Decoded fixed-size NIfTI-1 header (the fields this pipeline uses).
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qoffset: [f32; 3],
    pub magic: [u8; 4],
    /// True if the file was stored big-endian.
    pub big_endian: bool,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(self, b: &[u8]) -> i16 {
        let a = [b[0], b[1]];
        match self {
            Self::Little => i16::from_le_bytes(a),
            Self::Big => i16::from_be_bytes(a),
        }
    }

    fn i32(self, b: &[u8]) -> i32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Self::Little => i32::from_le_bytes(a),
            Self::Big => i32::from_be_bytes(a),
        }
    }

    fn f32(self, b: &[u8]) -> f32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Self::Little => f32::from_le_bytes(a),
            Self::Big => f32::from_be_bytes(a),
        }
    }
}

// Field byte offsets in the 348-byte header.
mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const QFORM_CODE: usize = 252;
    pub const QOFFSET_X: usize = 268;
    pub const MAGIC: usize = 344;
}

impl NiftiHeader {
    /// Image shape in voxels (first three extents).
    pub fn shape(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        ]
    }

    pub fn origin(&self) -> [f64; 3] {
        [
            self.qoffset[0] as f64,
            self.qoffset[1] as f64,
            self.qoffset[2] as f64,
        ]
    }

    pub fn num_voxels(&self) -> usize {
        let rank = self.dim[0] as usize;
        (1..=rank).map(|a| self.dim[a] as usize).product()
    }
}

/// Decode a 348-byte header, auto-detecting endianness from `sizeof_hdr`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() != HEADER_LEN {
        return Err(Error::CorruptHeader(format!(
            "header must be {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let endian = if Endian::Little.i32(&bytes[offset::SIZEOF_HDR..]) == HEADER_LEN as i32 {
        Endian::Little
    } else if Endian::Big.i32(&bytes[offset::SIZEOF_HDR..]) == HEADER_LEN as i32 {
        Endian::Big
    } else {
        return Err(Error::CorruptHeader(
            "sizeof_hdr != 348 in either byte order".into(),
        ));
    };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[offset::MAGIC..offset::MAGIC + 4]);
    if magic != MAGIC_SINGLE {
        return Err(Error::BadMagic);
    }

    let mut dim = [0i16; 8];
    for (a, d) in dim.iter_mut().enumerate() {
        *d = endian.i16(&bytes[offset::DIM + 2 * a..]);
    }
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(Error::CorruptHeader(format!("dim[0] = {rank} outside 1..=7")));
    }
    for a in 1..=rank as usize {
        if dim[a] < 1 {
            return Err(Error::CorruptHeader(format!(
                "extent dim[{a}] = {} must be >= 1",
                dim[a]
            )));
        }
    }

    let datatype = Datatype::from_code(endian.i16(&bytes[offset::DATATYPE..]))?;

    let mut pixdim = [0f32; 8];
    for (a, p) in pixdim.iter_mut().enumerate() {
        *p = endian.f32(&bytes[offset::PIXDIM + 4 * a..]);
    }

    let vox_offset = endian.f32(&bytes[offset::VOX_OFFSET..]);
    if !(vox_offset >= VOX_OFFSET as f32) {
        return Err(Error::CorruptHeader(format!(
            "vox_offset {vox_offset} < {VOX_OFFSET}"
        )));
    }

    let scl_slope = endian.f32(&bytes[offset::SCL_SLOPE..]);
    let scl_inter = endian.f32(&bytes[offset::SCL_INTER..]);
    let qoffset = [
        endian.f32(&bytes[offset::QOFFSET_X..]),
        endian.f32(&bytes[offset::QOFFSET_X + 4..]),
        endian.f32(&bytes[offset::QOFFSET_X + 8..]),
    ];

    Ok(NiftiHeader {
        dim,
        datatype,
        pixdim,
        vox_offset,
        scl_slope,
        scl_inter,
        qoffset,
        magic,
        big_endian: matches!(endian, Endian::Big),
    })
}

fn spatial_shape_checked(hdr: &NiftiHeader) -> Result<[usize; 3]> {
    let rank = hdr.dim[0];
    if rank < 3 {
        return Err(Error::UnsupportedRank(rank));
    }
    for a in 4..=rank as usize {
        if hdr.dim[a] != 1 {
            return Err(Error::UnsupportedRank(rank));
        }
    }
    let shape = hdr.shape();
    for (a, &s) in hdr.spacing().iter().enumerate() {
        if !(s > 0.0) {
            return Err(Error::CorruptHeader(format!(
                "pixdim[{}] = {s} must be positive",
                a + 1
            )));
        }
    }
    Ok(shape)
}

fn decode_voxels(data: &[u8], n: usize, dt: Datatype, big_endian: bool) -> Result<Vec<f64>> {
    let bpv = dt.bytes_per_voxel();
    if data.len() < n * bpv {
        return Err(Error::TruncatedData);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b = &data[i * bpv..(i + 1) * bpv];
        let v = match dt {
            Datatype::UInt8 => b[0] as f64,
            Datatype::Int16 => {
                let a = [b[0], b[1]];
                (if big_endian { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }) as f64
            }
            Datatype::Int32 => {
                let a = [b[0], b[1], b[2], b[3]];
                (if big_endian { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }) as f64
            }
            Datatype::Float32 => {
                let a = [b[0], b[1], b[2], b[3]];
                (if big_endian { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }) as f64
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Read a `.nii` file into a volume, applying the slope/intercept scaling.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptHeader(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let hdr = parse_header(&bytes[..HEADER_LEN])?;
    let shape = spatial_shape_checked(&hdr)?;
    let n: usize = shape.iter().product();

    let start = hdr.vox_offset as usize;
    if bytes.len() < start {
        return Err(Error::TruncatedData);
    }
    let mut voxels = decode_voxels(&bytes[start..], n, hdr.datatype, hdr.big_endian)?;

    // slope 0 means "no scaling" by convention.
    if hdr.scl_slope != 0.0 {
        let (s, b) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
        for v in &mut voxels {
            *v = s * *v + b;
        }
    }
    if voxels.iter().any(|v| v.is_nan()) {
        return Err(Error::NaNInData);
    }

    Volume::new(shape, hdr.spacing(), hdr.origin(), voxels)
}

/// Read a `.nii` file holding integer labels.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    LabelMap::from_volume(&read_volume(path)?)
}

fn encode_header(v: &Volume, dt: Datatype) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[offset::SIZEOF_HDR..offset::SIZEOF_HDR + 4]
        .copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let shape = v.shape();
    let dim: [i16; 8] = [
        3,
        shape[0] as i16,
        shape[1] as i16,
        shape[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (a, d) in dim.iter().enumerate() {
        h[offset::DIM + 2 * a..offset::DIM + 2 * a + 2].copy_from_slice(&d.to_le_bytes());
    }
    h[offset::DATATYPE..offset::DATATYPE + 2].copy_from_slice(&dt.code().to_le_bytes());
    let bitpix = (dt.bytes_per_voxel() * 8) as i16;
    h[offset::BITPIX..offset::BITPIX + 2].copy_from_slice(&bitpix.to_le_bytes());
    let spacing = v.spacing();
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (a, p) in pixdim.iter().enumerate() {
        h[offset::PIXDIM + 4 * a..offset::PIXDIM + 4 * a + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[offset::VOX_OFFSET..offset::VOX_OFFSET + 4]
        .copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[offset::SCL_SLOPE..offset::SCL_SLOPE + 4].copy_from_slice(&1f32.to_le_bytes());
    h[offset::SCL_INTER..offset::SCL_INTER + 4].copy_from_slice(&0f32.to_le_bytes());
    // qform carries only the translation (origin); code 1 = scanner anat.
    h[offset::QFORM_CODE..offset::QFORM_CODE + 2].copy_from_slice(&1i16.to_le_bytes());
    let origin = v.origin();
    for a in 0..3 {
        h[offset::QOFFSET_X + 4 * a..offset::QOFFSET_X + 4 * a + 4]
            .copy_from_slice(&(origin[a] as f32).to_le_bytes());
    }
    h[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(&MAGIC_SINGLE);
    h
}

fn encode_voxels(voxels: &[f64], dt: Datatype) -> (Vec<u8>, usize) {
    let mut out = Vec::with_capacity(voxels.len() * dt.bytes_per_voxel());
    let mut clipped = 0usize;
    match dt {
        Datatype::Float32 => {
            for &v in voxels {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Datatype::UInt8 => {
            for &v in voxels {
                let r = v.round();
                let c = r.clamp(0.0, u8::MAX as f64);
                if c != r {
                    clipped += 1;
                }
                out.push(c as u8);
            }
        }
        Datatype::Int16 => {
            for &v in voxels {
                let r = v.round();
                let c = r.clamp(i16::MIN as f64, i16::MAX as f64);
                if c != r {
                    clipped += 1;
                }
                out.extend_from_slice(&(c as i16).to_le_bytes());
            }
        }
        Datatype::Int32 => {
            for &v in voxels {
                let r = v.round();
                let c = r.clamp(i32::MIN as f64, i32::MAX as f64);
                if c != r {
                    clipped += 1;
                }
                out.extend_from_slice(&(c as i32).to_le_bytes());
            }
        }
    }
    (out, clipped)
}

/// Write a volume as a little-endian single-file `.nii` with the given datatype.
/// Integer targets round voxel values; out-of-range values are clamped with a warning.
pub fn write_volume(v: &Volume, dt: Datatype, path: &Path) -> Result<()> {
    let header = encode_header(v, dt);
    let (payload, clipped) = encode_voxels(v.voxels(), dt);
    if clipped > 0 {
        log::warn!(
            "{}: {clipped} voxel value(s) clipped to the {dt:?} range",
            path.display()
        );
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&header)?;
    f.write_all(&[0u8; (VOX_OFFSET as usize) - HEADER_LEN])?;
    f.write_all(&payload)?;
    Ok(())
}

/// Write a label map as uint8.
pub fn write_label_map(lm: &LabelMap, path: &Path) -> Result<()> {
    write_volume(&lm.to_volume(), Datatype::UInt8, path)
}
