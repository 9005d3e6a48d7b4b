//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! The 348-byte header is decoded field by field so that a read/write cycle
//! preserves every byte the writer controls. Orientation fields (qform/sform)
//! are carried through but never applied; voxels stay in stored order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
/// Offset of voxel data written by [`write_volume`]: header plus the 4-byte extension flag.
pub const SINGLE_FILE_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const MAGIC_OFFSET: usize = 344;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

/// Voxel storage types this reader accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Uint8 => 8,
            Datatype::Int16 => 16,
            Datatype::Int32 | Datatype::Float32 => 32,
            Datatype::Float64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }
}

/// Decoded NIfTI-1 header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    #[serde(skip)]
    pub data_type: [u8; 10],
    #[serde(skip)]
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p: [f32; 3],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    #[serde(skip)]
    pub descrip: [u8; 80],
    #[serde(skip)]
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    #[serde(skip)]
    pub intent_name: [u8; 16],
    #[serde(skip)]
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p: [0.0; 3],
            intent_code: 0,
            datatype: Datatype::Float32.code(),
            bitpix: Datatype::Float32.bitpix(),
            slice_start: 0,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: SINGLE_FILE_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2, // millimetres
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
            intent_name: [0; 16],
            magic: MAGIC_SINGLE,
            endianness: Endianness::Little,
        }
    }
}

impl NiftiHeader {
    pub fn rank(&self) -> usize {
        self.dim[0] as usize
    }

    /// Spatial extents `(nx, ny, nz)`; missing axes count as 1.
    pub fn spatial_dims(&self) -> [usize; 3] {
        let mut out = [1usize; 3];
        for (i, slot) in out.iter_mut().enumerate() {
            if i < self.rank() {
                *slot = self.dim[i + 1] as usize;
            }
        }
        out
    }

    pub fn voxel_spacing(&self) -> [f32; 3] {
        [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
    }

    pub fn datatype_kind(&self) -> Result<Datatype> {
        Datatype::from_code(self.datatype)
    }

    pub fn is_single_file(&self) -> bool {
        self.magic == MAGIC_SINGLE
    }

    pub fn description(&self) -> String {
        let end = self.descrip.iter().position(|&b| b == 0).unwrap_or(80);
        String::from_utf8_lossy(&self.descrip[..end]).into_owned()
    }

    /// Real value of a stored voxel, honouring `scl_slope == 0` as "unscaled".
    /// The identity scaling returns `stored` untouched, so `-0.0` survives.
    pub fn scale(&self, stored: f64) -> f64 {
        if self.scl_slope == 0.0 || (self.scl_slope == 1.0 && self.scl_inter == 0.0) {
            stored
        } else {
            stored * self.scl_slope as f64 + self.scl_inter as f64
        }
    }

    /// Serialize to 348 bytes in this header's byte order.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        match self.endianness {
            Endianness::Little => self.encode::<LittleEndian>(),
            Endianness::Big => self.encode::<BigEndian>(),
        }
    }

    fn encode<E: ByteOrder>(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        E::write_i32(&mut b[0..], self.sizeof_hdr);
        b[4..14].copy_from_slice(&self.data_type);
        b[14..32].copy_from_slice(&self.db_name);
        E::write_i32(&mut b[32..], self.extents);
        E::write_i16(&mut b[36..], self.session_error);
        b[38] = self.regular;
        b[39] = self.dim_info;
        for (i, &d) in self.dim.iter().enumerate() {
            E::write_i16(&mut b[40 + 2 * i..], d);
        }
        for (i, &p) in self.intent_p.iter().enumerate() {
            E::write_f32(&mut b[56 + 4 * i..], p);
        }
        E::write_i16(&mut b[68..], self.intent_code);
        E::write_i16(&mut b[70..], self.datatype);
        E::write_i16(&mut b[72..], self.bitpix);
        E::write_i16(&mut b[74..], self.slice_start);
        for (i, &p) in self.pixdim.iter().enumerate() {
            E::write_f32(&mut b[76 + 4 * i..], p);
        }
        E::write_f32(&mut b[108..], self.vox_offset);
        E::write_f32(&mut b[112..], self.scl_slope);
        E::write_f32(&mut b[116..], self.scl_inter);
        E::write_i16(&mut b[120..], self.slice_end);
        b[122] = self.slice_code;
        b[123] = self.xyzt_units;
        E::write_f32(&mut b[124..], self.cal_max);
        E::write_f32(&mut b[128..], self.cal_min);
        E::write_f32(&mut b[132..], self.slice_duration);
        E::write_f32(&mut b[136..], self.toffset);
        E::write_i32(&mut b[140..], self.glmax);
        E::write_i32(&mut b[144..], self.glmin);
        b[148..228].copy_from_slice(&self.descrip);
        b[228..252].copy_from_slice(&self.aux_file);
        E::write_i16(&mut b[252..], self.qform_code);
        E::write_i16(&mut b[254..], self.sform_code);
        for (i, &q) in self.quatern.iter().chain(&self.qoffset).enumerate() {
            E::write_f32(&mut b[256 + 4 * i..], q);
        }
        for (i, &s) in self.srow_x.iter().chain(&self.srow_y).chain(&self.srow_z).enumerate() {
            E::write_f32(&mut b[280 + 4 * i..], s);
        }
        b[328..344].copy_from_slice(&self.intent_name);
        b[344..348].copy_from_slice(&self.magic);
        b
    }
}

/// Decode a NIfTI-1 header, detecting byte order from `sizeof_hdr`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            bytes.len(),
            format!("need {HEADER_SIZE} header bytes, found {}", bytes.len()),
        ));
    }
    let endianness = if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        Endianness::Little
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        Endianness::Big
    } else {
        return Err(Error::format(
            0,
            format!(
                "sizeof_hdr is {} (little-endian) / {} (big-endian), expected 348",
                LittleEndian::read_i32(bytes),
                BigEndian::read_i32(bytes)
            ),
        ));
    };
    let header = match endianness {
        Endianness::Little => decode::<LittleEndian>(bytes, endianness),
        Endianness::Big => decode::<BigEndian>(bytes, endianness),
    };
    validate(&header)?;
    Ok(header)
}

fn decode<E: ByteOrder>(b: &[u8], endianness: Endianness) -> NiftiHeader {
    let f32_at = |off: usize| E::read_f32(&b[off..]);
    let i16_at = |off: usize| E::read_i16(&b[off..]);
    let mut h = NiftiHeader {
        sizeof_hdr: E::read_i32(b),
        extents: E::read_i32(&b[32..]),
        session_error: i16_at(36),
        regular: b[38],
        dim_info: b[39],
        intent_code: i16_at(68),
        datatype: i16_at(70),
        bitpix: i16_at(72),
        slice_start: i16_at(74),
        vox_offset: f32_at(108),
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
        slice_end: i16_at(120),
        slice_code: b[122],
        xyzt_units: b[123],
        cal_max: f32_at(124),
        cal_min: f32_at(128),
        slice_duration: f32_at(132),
        toffset: f32_at(136),
        glmax: E::read_i32(&b[140..]),
        glmin: E::read_i32(&b[144..]),
        qform_code: i16_at(252),
        sform_code: i16_at(254),
        endianness,
        ..NiftiHeader::default()
    };
    h.data_type.copy_from_slice(&b[4..14]);
    h.db_name.copy_from_slice(&b[14..32]);
    for i in 0..8 {
        h.dim[i] = i16_at(40 + 2 * i);
        h.pixdim[i] = f32_at(76 + 4 * i);
    }
    for i in 0..3 {
        h.intent_p[i] = f32_at(56 + 4 * i);
        h.quatern[i] = f32_at(256 + 4 * i);
        h.qoffset[i] = f32_at(268 + 4 * i);
    }
    for i in 0..4 {
        h.srow_x[i] = f32_at(280 + 4 * i);
        h.srow_y[i] = f32_at(296 + 4 * i);
        h.srow_z[i] = f32_at(312 + 4 * i);
    }
    h.descrip.copy_from_slice(&b[148..228]);
    h.aux_file.copy_from_slice(&b[228..252]);
    h.intent_name.copy_from_slice(&b[328..344]);
    h.magic.copy_from_slice(&b[344..348]);
    h
}

fn validate(h: &NiftiHeader) -> Result<()> {
    if h.magic != MAGIC_SINGLE && h.magic != MAGIC_PAIR {
        return Err(Error::format(
            MAGIC_OFFSET,
            format!("bad magic {:?}, expected \"n+1\\0\" or \"ni1\\0\"", h.magic),
        ));
    }
    let rank = h.dim[0];
    if !(1..=7).contains(&rank) {
        return Err(Error::format(40, format!("dim[0] = {rank} is outside 1..=7")));
    }
    for i in 1..=rank as usize {
        if h.dim[i] < 1 {
            return Err(Error::format(
                40 + 2 * i,
                format!("dim[{i}] = {} must be at least 1", h.dim[i]),
            ));
        }
    }
    let kind = h.datatype_kind()?;
    if h.bitpix != kind.bitpix() {
        return Err(Error::format(
            72,
            format!(
                "bitpix {} is inconsistent with datatype {} ({} bits)",
                h.bitpix,
                h.datatype,
                kind.bitpix()
            ),
        ));
    }
    Ok(())
}

/// A decoded scan: header plus real-valued voxels shaped `[nz, ny, nx]`.
///
/// The x axis (NIfTI `dim[1]`) varies fastest on disk and becomes the last
/// tensor axis, so the tensor reads as `[D, H, W]` with W left-right.
#[derive(Debug, Clone)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    pub voxels: Tensor<f32>,
}

impl NiftiVolume {
    /// Build a float32 volume from a `[D, H, W]` tensor with the given spacing `(dx, dy, dz)`.
    pub fn from_tensor(voxels: Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        let [d, h, w] = match *voxels.dims() {
            [d, h, w] => [d, h, w],
            _ => {
                return Err(Error::shape(format!(
                    "expected [D, H, W] voxels, got {:?}",
                    voxels.shape()
                )))
            }
        };
        let mut header = NiftiHeader::default();
        for (i, n) in [w, h, d].into_iter().enumerate() {
            header.dim[i + 1] =
                i16::try_from(n).map_err(|_| Error::invalid(format!("extent {n} does not fit a NIfTI-1 header")))?;
        }
        header.pixdim[1..4].copy_from_slice(&spacing);
        Ok(NiftiVolume { header, voxels })
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.header.voxel_spacing()
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.voxels.dims();
        [d[0], d[1], d[2]]
    }
}

fn decompress_if_gzip(raw: Vec<u8>) -> Result<Vec<u8>> {
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decode a complete `.nii` (optionally gzip-compressed) byte buffer.
pub fn decode_volume(raw: Vec<u8>) -> Result<NiftiVolume> {
    let bytes = decompress_if_gzip(raw)?;
    let header = parse_header(&bytes)?;
    if !header.is_single_file() {
        return Err(Error::PairedFile);
    }
    let kind = header.datatype_kind()?;
    let [nx, ny, nz] = header.spatial_dims();
    let count = nx * ny * nz;
    let offset = header.vox_offset as usize;
    if header.vox_offset < HEADER_SIZE as f32 {
        return Err(Error::format(
            108,
            format!("vox_offset {} lies inside the header", header.vox_offset),
        ));
    }
    let needed = count * kind.bytes();
    let available = bytes.len().saturating_sub(offset);
    if available < needed {
        return Err(Error::TruncatedFile {
            expected: needed,
            found: available,
        });
    }
    let data = &bytes[offset..offset + needed];
    let values = match header.endianness {
        Endianness::Little => convert::<LittleEndian>(data, kind, &header),
        Endianness::Big => convert::<BigEndian>(data, kind, &header),
    };
    let voxels = Tensor::from_vec(&[nz, ny, nx], values)?;
    Ok(NiftiVolume { header, voxels })
}

fn convert<E: ByteOrder>(data: &[u8], kind: Datatype, header: &NiftiHeader) -> Vec<f32> {
    let width = kind.bytes();
    data.chunks_exact(width)
        .map(|c| {
            let stored = match kind {
                Datatype::Uint8 => c[0] as f64,
                Datatype::Int16 => E::read_i16(c) as f64,
                Datatype::Int32 => E::read_i32(c) as f64,
                Datatype::Float32 => E::read_f32(c) as f64,
                Datatype::Float64 => E::read_f64(c),
            };
            header.scale(stored) as f32
        })
        .collect()
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(Error::at_path(path))?;
    decode_volume(raw)
}

/// Read only the header of a `.nii` / `.nii.gz` file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(Error::at_path(path))?;
    parse_header(&decompress_if_gzip(raw)?)
}

/// Encode as a little-endian float32 single-file NIfTI-1 image.
pub fn encode_volume(vol: &NiftiVolume) -> Result<Vec<u8>> {
    let [d, h, w] = vol.dims();
    let mut header = vol.header.clone();
    header.sizeof_hdr = HEADER_SIZE as i32;
    header.magic = MAGIC_SINGLE;
    header.endianness = Endianness::Little;
    header.datatype = Datatype::Float32.code();
    header.bitpix = Datatype::Float32.bitpix();
    header.vox_offset = SINGLE_FILE_VOX_OFFSET as f32;
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    header.dim = [3, 1, 1, 1, 1, 1, 1, 1];
    for (i, n) in [w, h, d].into_iter().enumerate() {
        header.dim[i + 1] =
            i16::try_from(n).map_err(|_| Error::invalid(format!("extent {n} does not fit a NIfTI-1 header")))?;
    }
    let mut out = Vec::with_capacity(SINGLE_FILE_VOX_OFFSET + 4 * vol.voxels.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; 4]); // no extensions
    for &v in vol.voxels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_volume(vol: &NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(vol)?;
    let mut file = fs::File::create(path).map_err(Error::at_path(path))?;
    file.write_all(&bytes).map_err(Error::at_path(path))?;
    Ok(())
}
