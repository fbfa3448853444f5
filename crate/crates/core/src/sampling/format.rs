//! `.ppc` point-cloud files: a fixed little-endian header followed by the
//! coordinate, origin, feature and (optional) label arrays.

use std::fs;
use std::path::Path;

use super::{Origin, PointCloud};
use crate::error::{Error, Result};
use crate::io::{put_f64, put_u32, Reader};

const MAGIC: &[u8; 4] = b"PPCL";
const VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;

pub fn point_cloud_bytes(pc: &PointCloud) -> Vec<u8> {
    let n = pc.len();
    let mut out = Vec::with_capacity(36 + n * (13 + 8 * pc.num_features));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, if pc.labels.is_some() { FLAG_LABELS } else { 0 });
    out.extend_from_slice(&(n as u64).to_le_bytes());
    put_u32(&mut out, pc.num_features as u32);
    for d in pc.dims {
        put_u32(&mut out, d as u32);
    }
    for c in &pc.coords {
        for &x in c {
            put_u32(&mut out, x as u32);
        }
    }
    out.extend(pc.origin.iter().map(|o| match o {
        Origin::Foreground => 1u8,
        Origin::Background => 0u8,
    }));
    for &f in &pc.feats {
        put_f64(&mut out, f);
    }
    if let Some(l) = &pc.labels {
        out.extend_from_slice(l);
    }
    out
}

pub(crate) fn parse(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| "bad magic")? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let flags = r.u32()?;
    if flags & !FLAG_LABELS != 0 {
        return Err(format!("unknown flags {flags:#x}"));
    }
    let n = r.u64()? as usize;
    let f = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let has_labels = flags & FLAG_LABELS != 0;
    let expected = n
        .checked_mul(12 + 1 + 8 * f + has_labels as usize)
        .ok_or("point count overflows")?;
    if r.remaining() != expected {
        return Err(format!(
            "payload size mismatch: header implies {expected} bytes, found {}",
            r.remaining()
        ));
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.u32()? as usize, r.u32()? as usize, r.u32()? as usize]);
    }
    let origin = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(Origin::Background),
            1 => Ok(Origin::Foreground),
            other => Err(format!("origin flag {other}")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let feats = r.f64s(n * f)?;
    let labels = if has_labels { Some(r.take(n)?.to_vec()) } else { None };
    PointCloud::new(dims, coords, f, feats, labels, origin).map_err(|e| e.to_string())
}

pub fn write_point_cloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    fs::write(path, point_cloud_bytes(pc))?;
    Ok(())
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse(&fs::read(path)?).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(labels: bool) -> PointCloud {
        PointCloud::new(
            [3, 4, 5],
            vec![[0, 0, 0], [2, 3, 4], [1, 2, 0]],
            2,
            vec![0.5, -1.25, 3.0, 1e-300, f64::MIN_POSITIVE, -0.0],
            labels.then(|| vec![0, 2, 1]),
            vec![Origin::Foreground, Origin::Background, Origin::Foreground],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_with_and_without_labels() {
        for labels in [true, false] {
            let pc = cloud(labels);
            let bytes = point_cloud_bytes(&pc);
            let back = parse(&bytes).unwrap();
            assert_eq!(point_cloud_bytes(&back), bytes);
            assert_eq!(back, pc);
        }
    }

    #[test]
    fn header_errors() {
        let bytes = point_cloud_bytes(&cloud(true));
        assert!(parse(&bytes[..bytes.len() - 1]).unwrap_err().contains("payload size mismatch"));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert_eq!(parse(&bad).unwrap_err(), "bad magic");
        let mut dup = bytes.clone();
        // Point 2 moved onto point 0.
        let at = 36 + 2 * 12;
        dup[at..at + 12].fill(0);
        assert!(parse(&dup).unwrap_err().contains("sampled twice"));
    }
}
