//! `.pvol` and `.plab` files. Both start with a fixed little-endian header
//! followed by the raw payload; the byte layout is documented in the book's
//! file-format chapter.

use std::fs;
use std::path::Path;

use super::{voxel_count, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::io::{put_f64, put_u32, Reader};

const VOLUME_MAGIC: &[u8; 4] = b"PVOL";
const LABEL_MAGIC: &[u8; 4] = b"PLAB";
const VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;
const DTYPE_U8: u32 = 2;

pub fn volume_bytes(vol: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(52 + vol.data().len() * 8);
    out.extend_from_slice(VOLUME_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, DTYPE_F64);
    put_u32(&mut out, vol.channels() as u32);
    for d in vol.dims() {
        put_u32(&mut out, d as u32);
    }
    for s in vol.spacing() {
        put_f64(&mut out, s);
    }
    for &v in vol.data() {
        put_f64(&mut out, v);
    }
    out
}

pub fn labels_bytes(lab: &LabelVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + lab.labels().len());
    out.extend_from_slice(LABEL_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, DTYPE_U8);
    put_u32(&mut out, lab.num_classes() as u32);
    for d in lab.dims() {
        put_u32(&mut out, d as u32);
    }
    out.extend_from_slice(lab.labels());
    out
}

fn header(r: &mut Reader, magic: &[u8; 4], dtype: u32) -> std::result::Result<(), String> {
    if r.take(4).map_err(|_| "bad magic")? != magic {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let got = r.u32()?;
    if got != dtype {
        return Err(format!("unsupported dtype code {got}"));
    }
    Ok(())
}

fn payload_check(r: &Reader, expected: usize) -> std::result::Result<(), String> {
    if r.remaining() != expected {
        return Err(format!(
            "payload size mismatch: header implies {expected} bytes, found {}",
            r.remaining()
        ));
    }
    Ok(())
}

pub(crate) fn parse_volume(bytes: &[u8]) -> std::result::Result<Volume, String> {
    let mut r = Reader::new(bytes);
    header(&mut r, VOLUME_MAGIC, DTYPE_F64)?;
    let channels = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f64()?, r.f64()?, r.f64()?];
    let n = channels * voxel_count(dims);
    payload_check(&r, n * 8)?;
    let data = r.f64s(n)?;
    Volume::new(channels, dims, spacing, data).map_err(|e| e.to_string())
}

pub(crate) fn parse_labels(bytes: &[u8]) -> std::result::Result<LabelVolume, String> {
    let mut r = Reader::new(bytes);
    header(&mut r, LABEL_MAGIC, DTYPE_U8)?;
    let classes = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n = voxel_count(dims);
    payload_check(&r, n)?;
    let labels = r.take(n)?.to_vec();
    LabelVolume::new(dims, classes, labels).map_err(|e| e.to_string())
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    fs::write(path, volume_bytes(vol))?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, lab: &LabelVolume) -> Result<()> {
    fs::write(path, labels_bytes(lab))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    parse_volume(&fs::read(path)?).map_err(|e| Error::format(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    parse_labels(&fs::read(path)?).map_err(|e| Error::format(path, e))
}

/// Reads a `.pvol` and, when a sibling `.plab` exists, its labels.
pub fn read_case(path: impl AsRef<Path>) -> Result<(Volume, Option<LabelVolume>)> {
    let path = path.as_ref();
    let vol = read_volume(path)?;
    let lab_path = path.with_extension("plab");
    if !lab_path.exists() {
        return Ok((vol, None));
    }
    let lab = read_labels(&lab_path)?;
    if lab.dims() != vol.dims() {
        return Err(Error::format(
            &lab_path,
            format!("dims mismatch: labels {:?}, volume {:?}", lab.dims(), vol.dims()),
        ));
    }
    Ok((vol, Some(lab)))
}
