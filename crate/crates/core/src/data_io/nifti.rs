//! Single-file NIfTI-1 (`.nii`) reader and writer, limited to 32-bit float
//! and 16-bit signed integer payloads with at most three dimensions.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{Modality, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DESCRIP_PREFIX: &str = "htc-core modality=";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const MAGIC: usize = 344;
}

/// On-disk voxel encoding used by [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NiftiStorage {
    Float32,
    /// Stored as `round((v - inter) / slope)`; read back as `slope * raw + inter`.
    Int16 { slope: f32, inter: f32 },
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(self, b: &[u8]) -> i16 {
        match self {
            Endian::Little => LittleEndian::read_i16(b),
            Endian::Big => BigEndian::read_i16(b),
        }
    }

    fn i32(self, b: &[u8]) -> i32 {
        match self {
            Endian::Little => LittleEndian::read_i32(b),
            Endian::Big => BigEndian::read_i32(b),
        }
    }

    fn f32(self, b: &[u8]) -> f32 {
        match self {
            Endian::Little => LittleEndian::read_f32(b),
            Endian::Big => BigEndian::read_f32(b),
        }
    }
}

/// Reads a single-file NIfTI-1 volume. The brain mask is the nonzero region.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    parse_nifti(&bytes)
}

pub(crate) fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::CorruptFile(format!(
            "{} bytes is shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?} (only single-file \"n+1\" is supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    // dim[0] must be 1..=7; a byte-swapped value tells the file is big-endian.
    let dim0 = &bytes[offsets::DIM..offsets::DIM + 2];
    let endian = if (1..=7).contains(&LittleEndian::read_i16(dim0)) {
        Endian::Little
    } else if (1..=7).contains(&BigEndian::read_i16(dim0)) {
        Endian::Big
    } else {
        return Err(Error::CorruptFile("dim[0] outside 1..=7 in either byte order".into()));
    };
    if endian.i32(&bytes[offsets::SIZEOF_HDR..]) != HEADER_SIZE as i32 {
        return Err(Error::UnsupportedFormat("sizeof_hdr is not 348".into()));
    }

    let ndim = endian.i16(&bytes[offsets::DIM..]) as usize;
    let mut dims = [1usize; 3];
    for i in 1..=ndim {
        let d = endian.i16(&bytes[offsets::DIM + 2 * i..]);
        if d < 1 {
            return Err(Error::CorruptFile(format!("dim[{i}] = {d}")));
        }
        if i <= 3 {
            dims[i - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "{ndim}-D image with dim[{i}] = {d}; at most 3 significant dimensions"
            )));
        }
    }
    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate().take(ndim.min(3)) {
        let v = endian.f32(&bytes[offsets::PIXDIM + 4 * (i + 1)..]).abs();
        *s = if v > 0.0 { v } else { 1.0 };
    }

    let datatype = endian.i16(&bytes[offsets::DATATYPE..]);
    let width = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let vox_offset = endian.f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::CorruptFile(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let end = start + count * width;
    if bytes.len() < end {
        return Err(Error::CorruptFile(format!(
            "payload truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[start..end];
    let slope = endian.f32(&bytes[offsets::SCL_SLOPE..]);
    let inter = endian.f32(&bytes[offsets::SCL_INTER..]);
    let scaled = slope != 0.0 && slope.is_finite();
    let inter = if inter.is_finite() { inter } else { 0.0 };
    let data: Vec<f32> = (0..count)
        .map(|i| {
            let raw = match datatype {
                DT_FLOAT32 => endian.f32(&payload[4 * i..]),
                _ => endian.i16(&payload[2 * i..]) as f32,
            };
            if scaled {
                slope * raw + inter
            } else {
                raw
            }
        })
        .collect();

    let descrip = &bytes[offsets::DESCRIP..offsets::DESCRIP + 80];
    let descrip = String::from_utf8_lossy(descrip.split(|&b| b == 0).next().unwrap_or(&[]));
    let modality = descrip
        .strip_prefix(DESCRIP_PREFIX)
        .and_then(Modality::from_tag)
        .unwrap_or(Modality::Phantom);
    Volume::new(dims, data, spacing, modality)
}

/// Writes a little-endian single-file NIfTI-1 image. Volumes read back
/// from a file produced here re-serialise to identical bytes.
pub fn write_nifti(path: impl AsRef<Path>, vol: &Volume, storage: NiftiStorage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_nifti(vol, storage)).map_err(Error::io(path))
}

pub(crate) fn encode_nifti(vol: &Volume, storage: NiftiStorage) -> Vec<u8> {
    let (datatype, width) = match storage {
        NiftiStorage::Float32 => (DT_FLOAT32, 4),
        NiftiStorage::Int16 { .. } => (DT_INT16, 2),
    };
    let mut out = vec![0u8; VOX_OFFSET + vol.data.len() * width];
    let h = &mut out[..HEADER_SIZE];
    LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let ndim = if vol.dims[2] > 1 { 3 } else if vol.dims[1] > 1 { 2 } else { 1 };
    LittleEndian::write_i16(&mut h[offsets::DIM..], ndim);
    for i in 0..7 {
        let d = if i < 3 { vol.dims[i] as i16 } else { 1 };
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * (i + 1)..], d);
    }
    LittleEndian::write_i16(&mut h[offsets::DATATYPE..], datatype);
    LittleEndian::write_i16(&mut h[offsets::BITPIX..], (width * 8) as i16);
    LittleEndian::write_f32(&mut h[offsets::PIXDIM..], 1.0);
    for i in 0..3 {
        LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * (i + 1)..], vol.spacing[i]);
    }
    LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    let (slope, inter) = match storage {
        NiftiStorage::Float32 => (0.0, 0.0),
        NiftiStorage::Int16 { slope, inter } => (slope, inter),
    };
    LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..], slope);
    LittleEndian::write_f32(&mut h[offsets::SCL_INTER..], inter);
    h[offsets::XYZT_UNITS] = 2; // millimetres
    let descrip = format!("{DESCRIP_PREFIX}{}", vol.modality.tag());
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip.as_bytes());
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    let payload = &mut out[VOX_OFFSET..];
    match storage {
        NiftiStorage::Float32 => {
            for (i, &v) in vol.data.iter().enumerate() {
                LittleEndian::write_f32(&mut payload[4 * i..], v);
            }
        }
        NiftiStorage::Int16 { slope, inter } => {
            for (i, &v) in vol.data.iter().enumerate() {
                let raw = ((v - inter) / slope).round().clamp(i16::MIN as f32, i16::MAX as f32);
                LittleEndian::write_i16(&mut payload[2 * i..], raw as i16);
            }
        }
    }
    out
}
