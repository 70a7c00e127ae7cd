//! Minimal NIfTI-1 single-file reader/writer.
//!
//! Supported subset: little-endian, `n+1` magic, datatypes uint8 / int16 /
//! float32, identity intensity scaling, sform affine. Axis-aligned affines are
//! reoriented to the canonical positive-diagonal orientation on load; oblique
//! ones are rejected. Files ending in `.gz` are gzip-wrapped.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
const INTENT_VECTOR: i16 = 1007;
const NIFTI_UNITS_MM: u8 = 2;

/// Voxel types that can be written to and converted from NIfTI files.
pub trait NiftiVoxel: Copy + Default + Send + Sync + 'static {
    const DATATYPE: i16;
    const BITPIX: i16;

    fn from_sample(v: f64) -> Result<Self>;
    fn write_le(self, out: &mut Vec<u8>);
}

impl NiftiVoxel for f32 {
    const DATATYPE: i16 = DT_FLOAT32;
    const BITPIX: i16 = 32;

    fn from_sample(v: f64) -> Result<Self> {
        Ok(v as f32)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl NiftiVoxel for u8 {
    const DATATYPE: i16 = DT_UINT8;
    const BITPIX: i16 = 8;

    fn from_sample(v: f64) -> Result<Self> {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Format {
                field: "data",
                message: format!("value {v} is not a valid label (integer 0..=255)"),
            });
        }
        Ok(v as u8)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

/// Parsed header fields this reader cares about.
#[derive(Clone, Debug)]
struct Header {
    dim: [i16; 8],
    datatype: i16,
    vox_offset: usize,
    affine: Matrix4<f64>,
}

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn format_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        field,
        message: message.into(),
    }
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(format_err("sizeof_hdr", format!("file has only {} bytes", b.len())));
    }
    let sizeof_hdr = rd_i32(b, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(format_err("sizeof_hdr", "big-endian files are not supported"));
        }
        return Err(format_err("sizeof_hdr", format!("expected 348, got {sizeof_hdr}")));
    }
    if &b[344..348] != MAGIC {
        return Err(format_err("magic", format!("expected \"n+1\\0\", got {:?}", &b[344..348])));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = rd_i16(b, 40 + 2 * i);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(format_err("dim", format!("dim[0]={} out of range", dim[0])));
    }
    for i in 1..=dim[0] as usize {
        if dim[i] < 1 {
            return Err(format_err("dim", format!("dim[{i}]={} must be >= 1", dim[i])));
        }
    }
    let datatype = rd_i16(b, 70);
    let bitpix = rd_i16(b, 72);
    let expected_bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if bitpix != expected_bitpix {
        return Err(format_err(
            "bitpix",
            format!("datatype {datatype} requires bitpix {expected_bitpix}, got {bitpix}"),
        ));
    }
    let vox_offset = rd_f32(b, 108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(format_err("vox_offset", format!("invalid value {vox_offset}")));
    }
    let scl_slope = rd_f32(b, 112);
    if scl_slope != 0.0 && scl_slope != 1.0 {
        return Err(format_err("scl_slope", format!("only 0 or 1 supported, got {scl_slope}")));
    }
    let scl_inter = rd_f32(b, 116);
    if scl_inter != 0.0 {
        return Err(format_err("scl_inter", format!("only 0 supported, got {scl_inter}")));
    }
    let sform_code = rd_i16(b, 254);
    if sform_code < 1 {
        return Err(format_err("sform_code", format!("must be >= 1, got {sform_code}")));
    }
    let mut affine = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            affine[(r, c)] = rd_f32(b, 280 + 16 * r + 4 * c) as f64;
        }
    }
    Ok(Header {
        dim,
        datatype,
        vox_offset: vox_offset as usize,
        affine,
    })
}

fn decode_samples(h: &Header, bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let end = h.vox_offset + count * width;
    if bytes.len() < end {
        return Err(format_err(
            "vox_offset",
            format!("data truncated: need {end} bytes, file has {}", bytes.len()),
        ));
    }
    let raw = &bytes[h.vox_offset..end];
    let out = match h.datatype {
        DT_UINT8 => raw.iter().map(|&v| v as f64).collect(),
        DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(out)
}

/// Axis permutation and flips taking an axis-aligned affine to canonical form.
struct Reorientation {
    /// `world_axis[j]` is the world axis voxel axis `j` runs along.
    world_axis: [usize; 3],
    flip: [bool; 3],
}

fn reorientation(affine: &Matrix4<f64>) -> Result<Reorientation> {
    let mut world_axis = [0usize; 3];
    let mut flip = [false; 3];
    let mut used = [false; 3];
    for j in 0..3 {
        let col = [affine[(0, j)], affine[(1, j)], affine[(2, j)]];
        let (r, &big) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        if big == 0.0 {
            return Err(Error::NonInvertibleAffine);
        }
        for (rr, v) in col.iter().enumerate() {
            if rr != r && v.abs() > 1e-6 * big.abs() {
                return Err(Error::ObliqueAffine(format!(
                    "voxel axis {j} has components {col:?}"
                )));
            }
        }
        if used[r] {
            return Err(Error::NonInvertibleAffine);
        }
        used[r] = true;
        world_axis[j] = r;
        flip[j] = big < 0.0;
    }
    Ok(Reorientation { world_axis, flip })
}

/// Decoded NIfTI payload in canonical orientation: grid + samples (+ vector components).
struct Decoded {
    grid: Grid,
    components: usize,
    samples: Vec<f64>,
}

fn decode(bytes: &[u8], allow_vector: bool) -> Result<Decoded> {
    let h = parse_header(bytes)?;
    let ndim = h.dim[0] as usize;
    let extra: Vec<usize> = (4..=ndim).map(|i| h.dim[i] as usize).collect();
    let components = match (ndim, allow_vector) {
        (3, _) => 1,
        (4, _) if extra == [1] => 1,
        (5, true) if extra == [1, 3] => 3,
        _ => {
            return Err(format_err(
                "dim",
                format!("unsupported dimensionality dim[0]={} dims={:?}", h.dim[0], &h.dim[1..=ndim]),
            ))
        }
    };
    let dims = [h.dim[1] as usize, h.dim[2] as usize, h.dim[3] as usize];
    let n = dims[0] * dims[1] * dims[2];
    let samples = decode_samples(&h, bytes, n * components)?;
    // validates invertibility
    Grid::new(dims, h.affine)?;

    let ro = reorientation(&h.affine)?;
    if components > 1 && (ro.world_axis != [0, 1, 2] || ro.flip.iter().any(|&f| f)) {
        return Err(Error::ObliqueAffine(
            "vector fields must be stored in canonical orientation".into(),
        ));
    }
    let mut new_dims = [0usize; 3];
    let mut new_affine = Matrix4::identity();
    let mut corner = [0.0f64; 3];
    for j in 0..3 {
        let r = ro.world_axis[j];
        new_dims[r] = dims[j];
        new_affine[(r, r)] = h.affine[(r, j)].abs();
        if ro.flip[j] {
            corner[j] = (dims[j] - 1) as f64;
        }
    }
    let old_grid = Grid::new(dims, h.affine)?;
    let origin = old_grid.voxel_to_world(corner);
    new_affine[(0, 3)] = origin.x;
    new_affine[(1, 3)] = origin.y;
    new_affine[(2, 3)] = origin.z;
    let grid = Grid::new(new_dims, new_affine)?;

    if ro.world_axis == [0, 1, 2] && !ro.flip.iter().any(|&f| f) {
        return Ok(Decoded {
            grid,
            components,
            samples,
        });
    }
    let mut out = vec![0.0; n];
    for k in 0..dims[2] {
        for jj in 0..dims[1] {
            for i in 0..dims[0] {
                let old = [i, jj, k];
                let mut new = [0usize; 3];
                for j in 0..3 {
                    let idx = if ro.flip[j] { dims[j] - 1 - old[j] } else { old[j] };
                    new[ro.world_axis[j]] = idx;
                }
                out[grid.index(new[0], new[1], new[2])] = samples[old_grid.index(i, jj, k)];
            }
        }
    }
    Ok(Decoded {
        grid,
        components,
        samples: out,
    })
}

fn encode_header(grid: &Grid, datatype: i16, bitpix: i16, components: usize) -> Vec<u8> {
    let mut b = vec![0u8; VOX_OFFSET];
    put_i32(&mut b, 0, HEADER_SIZE as i32);
    b[38] = b'r';
    let dims = grid.dims();
    let mut dim = [1i16; 8];
    if components == 1 {
        dim[0] = 3;
    } else {
        dim[0] = 5;
        dim[5] = components as i16;
    }
    for a in 0..3 {
        dim[a + 1] = dims[a] as i16;
    }
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut b, 40 + 2 * i, *d);
    }
    if components > 1 {
        put_i16(&mut b, 68, INTENT_VECTOR);
    }
    put_i16(&mut b, 70, datatype);
    put_i16(&mut b, 72, bitpix);
    let spacing = grid.spacing();
    let mut pixdim = [1.0f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = spacing[a] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut b, 76 + 4 * i, *p);
    }
    put_f32(&mut b, 108, VOX_OFFSET as f32);
    put_f32(&mut b, 112, 1.0);
    b[123] = NIFTI_UNITS_MM;
    let descrip = b"rootreg";
    b[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut b, 254, 1); // sform_code: scanner
    let a = grid.affine();
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut b, 280 + 16 * r + 4 * c, a[(r, c)] as f32);
        }
    }
    b[344..348].copy_from_slice(MAGIC);
    b
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let payload = if is_gz(path) {
        // level 1 keeps large fields fast; mtime is zero so output is reproducible
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    crate::io_util::write_atomic(path, &payload)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Decode an in-memory NIfTI-1 image into canonical orientation.
pub fn decode_volume<T: NiftiVoxel>(bytes: &[u8]) -> Result<Volume<T>> {
    let d = decode(bytes, false)?;
    let data = d
        .samples
        .into_iter()
        .map(T::from_sample)
        .collect::<Result<Vec<T>>>()?;
    Volume::new(d.grid, data)
}

/// Encode a volume as an uncompressed NIfTI-1 byte stream.
pub fn encode_volume<T: NiftiVoxel>(vol: &Volume<T>) -> Vec<u8> {
    let mut b = encode_header(vol.grid(), T::DATATYPE, T::BITPIX, 1);
    b.reserve(vol.data().len() * (T::BITPIX as usize / 8));
    for &v in vol.data() {
        v.write_le(&mut b);
    }
    b
}

pub fn load_volume<T: NiftiVoxel>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    decode_volume(&read_file(path)?)
}

pub fn save_volume<T: NiftiVoxel>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(vol))
}

/// 3-component float32 vector volume (dim[5]=3), used for displacement fields.
pub(crate) fn encode_vectors(grid: &Grid, vectors: &[[f32; 3]]) -> Vec<u8> {
    let mut b = encode_header(grid, DT_FLOAT32, 32, 3);
    b.reserve(vectors.len() * 12);
    for c in 0..3 {
        for v in vectors {
            b.extend_from_slice(&v[c].to_le_bytes());
        }
    }
    b
}

pub(crate) fn decode_vectors(bytes: &[u8]) -> Result<(Grid, Vec<[f32; 3]>)> {
    let d = decode(bytes, true)?;
    if d.components != 3 {
        return Err(format_err("dim", "expected a 3-component vector volume (dim[5]=3)"));
    }
    let n = d.grid.len();
    let vectors = (0..n)
        .map(|i| {
            [
                d.samples[i] as f32,
                d.samples[n + i] as f32,
                d.samples[2 * n + i] as f32,
            ]
        })
        .collect();
    Ok((d.grid, vectors))
}

pub(crate) fn load_vectors(path: &Path) -> Result<(Grid, Vec<[f32; 3]>)> {
    decode_vectors(&read_file(path)?)
}

pub(crate) fn save_vectors(grid: &Grid, vectors: &[[f32; 3]], path: &Path) -> Result<()> {
    write_file(path, &encode_vectors(grid, vectors))
}
