//! Minimal single-file NIfTI-1 (.nii) reader and writer.
//!
//! Supported subset: little-endian, `dim[0] = 3`, datatype float32
//! (code 16) for images and uint8 (code 2) for masks, voxel data at
//! offset 352 (348-byte header plus a zeroed 4-byte extension flag).
//! Intensity scaling fields are written as identity and ignored on read.
//! Orientation tags are in-memory metadata only; a freshly read volume is
//! always axial (file order defines the canonical grid).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Orientation, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: u64 = 352;
const MAGIC: [u8; 4] = *b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;

struct HeaderInfo {
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    datatype: i16,
    vox_offset: u64,
}

fn format_err(path: &Path, field: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        reason: reason.into(),
    }
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn parse_header(path: &Path, buf: &[u8; HEADER_SIZE]) -> Result<HeaderInfo> {
    let sizeof_hdr = get_i32(buf, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let reason = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("expected 348, got {sizeof_hdr}")
        };
        return Err(format_err(path, "sizeof_hdr", reason));
    }
    if buf[344..348] != MAGIC {
        return Err(format_err(
            path,
            "magic",
            format!("expected \"n+1\\0\", got {:?}", &buf[344..348]),
        ));
    }
    let ndim = get_i16(buf, 40);
    if ndim != 3 {
        return Err(format_err(path, "dim[0]", format!("expected 3, got {ndim}")));
    }
    let mut dims = [0usize; 3];
    for (a, dim) in dims.iter_mut().enumerate() {
        let d = get_i16(buf, 42 + 2 * a);
        if d < 1 {
            return Err(format_err(
                path,
                "dim",
                format!("dim[{}] = {d}, must be >= 1", a + 1),
            ));
        }
        *dim = d as usize;
    }
    let mut spacing = [0f64; 3];
    for (a, sp) in spacing.iter_mut().enumerate() {
        let p = get_f32(buf, 80 + 4 * a);
        if !p.is_finite() || p <= 0.0 {
            return Err(format_err(
                path,
                "pixdim",
                format!("pixdim[{}] = {p}, must be positive", a + 1),
            ));
        }
        *sp = p as f64;
    }
    let vox_offset = get_f32(buf, 108);
    if !vox_offset.is_finite() || vox_offset < VOX_OFFSET as f32 || vox_offset.fract() != 0.0 {
        return Err(format_err(
            path,
            "vox_offset",
            format!("expected an integer >= 352, got {vox_offset}"),
        ));
    }
    Ok(HeaderInfo {
        shape: (dims[0], dims[1], dims[2]),
        spacing,
        datatype: get_i16(buf, 70),
        vox_offset: vox_offset as u64,
    })
}

fn read_file(path: &Path) -> Result<(HeaderInfo, Vec<u8>)> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; HEADER_SIZE];
    file.read_exact(&mut header).map_err(|e| {
        format_err(path, "sizeof_hdr", format!("file too short for header: {e}"))
    })?;
    let info = parse_header(path, &header)?;

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let skip = (info.vox_offset - HEADER_SIZE as u64) as usize;
    if rest.len() < skip {
        return Err(format_err(path, "vox_offset", "file shorter than vox_offset"));
    }
    Ok((info, rest.split_off(skip)))
}

/// Read a float32 image volume. The returned volume is axial.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (info, payload) = read_file(path)?;
    if info.datatype != DT_FLOAT32 {
        return Err(Error::UnsupportedType {
            path: path.to_path_buf(),
            code: info.datatype,
        });
    }
    let n = info.shape.0 * info.shape.1 * info.shape.2;
    if payload.len() < n * 4 {
        return Err(format_err(
            path,
            "dim",
            format!("payload holds {} bytes, need {}", payload.len(), n * 4),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload[..n * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Volume::new(data, info.shape, info.spacing, Orientation::Axial)
}

/// Read a uint8 binary mask. Values other than 0/1 are rejected.
pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    let (info, payload) = read_file(path)?;
    if info.datatype != DT_UINT8 {
        return Err(Error::UnsupportedType {
            path: path.to_path_buf(),
            code: info.datatype,
        });
    }
    let n = info.shape.0 * info.shape.1 * info.shape.2;
    if payload.len() < n {
        return Err(format_err(
            path,
            "dim",
            format!("payload holds {} bytes, need {n}", payload.len()),
        ));
    }
    MaskVolume::new(
        payload[..n].to_vec(),
        info.shape,
        info.spacing,
        Orientation::Axial,
    )
    .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn build_header(shape: (usize, usize, usize), spacing: [f64; 3], datatype: i16) -> Result<[u8; HEADER_SIZE]> {
    let mut buf = [0u8; HEADER_SIZE];
    put_i32(&mut buf, 0, HEADER_SIZE as i32);
    put_i16(&mut buf, 40, 3);
    for (a, &d) in [shape.0, shape.1, shape.2].iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::parameter(
                "shape",
                format!("axis {a} extent {d} exceeds the NIfTI-1 dim limit"),
            ));
        }
        put_i16(&mut buf, 42 + 2 * a, d as i16);
    }
    for a in 3..7 {
        put_i16(&mut buf, 42 + 2 * a, 1);
    }
    put_i16(&mut buf, 70, datatype);
    put_i16(&mut buf, 72, if datatype == DT_FLOAT32 { 32 } else { 8 });
    put_f32(&mut buf, 76, 1.0); // pixdim[0], quaternion factor
    for (a, &sp) in spacing.iter().enumerate() {
        put_f32(&mut buf, 80 + 4 * a, sp as f32);
    }
    put_f32(&mut buf, 108, VOX_OFFSET as f32);
    put_f32(&mut buf, 112, 1.0); // scl_slope
    buf[123] = 2; // xyzt_units: millimetres
    buf[344..348].copy_from_slice(&MAGIC);
    Ok(buf)
}

fn write_payload(path: &Path, header: [u8; HEADER_SIZE], payload: &[u8]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&header)?;
    file.write_all(&[0u8; 4])?; // no extensions
    file.write_all(payload)?;
    file.flush()?;
    Ok(())
}

/// Write a volume as float32. Intensities are cast from f64; values that
/// originated from a float32 file round-trip bit-exactly.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let header = build_header(v.shape(), v.spacing(), DT_FLOAT32)?;
    let mut payload = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_payload(path.as_ref(), header, &payload)
}

/// Write a mask as uint8.
pub fn write_mask(path: impl AsRef<Path>, m: &MaskVolume) -> Result<()> {
    let header = build_header(m.shape(), m.spacing(), DT_UINT8)?;
    write_payload(path.as_ref(), header, m.data())
}
