//! Binary array files: magic `XLRM`, u32 format version, u32 rank, u32 dims,
//! then a little-endian f32 payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ScannerGeometry;
use crate::projector::ProjectionSet;
use crate::volume::VolumeGrid;

pub const MAGIC: &[u8; 4] = b"XLRM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_array(dims: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let word = |i: usize| -> Option<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing XLRM header".into()));
    }
    let version = word(4).unwrap();
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let rank = word(8).unwrap() as usize;
    if rank > 8 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(word(12 + 4 * k).ok_or_else(|| bad("truncated header".into()))? as usize);
    }
    let start = 12 + 4 * rank;
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow".into()))?;
    if bytes.len() - start != count * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, dims {:?} need {}",
            bytes.len() - start,
            dims,
            count * 4
        )));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_array(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    std::fs::write(path, encode_array(dims, data)).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

/// Stored as `[R, R, R]`, x fastest.
pub fn write_volume(path: &Path, vol: &VolumeGrid) -> Result<()> {
    let r = vol.resolution();
    write_array(path, &[r, r, r], vol.values())
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let (dims, data) = read_array(path)?;
    if dims.len() != 3 || dims[0] != dims[1] || dims[1] != dims[2] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a cubic volume, found dims {dims:?}"),
        });
    }
    VolumeGrid::from_values(dims[0], data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Stored as `[views, rows, cols]`; the geometry lives in the manifest.
pub fn write_projections(path: &Path, proj: &ProjectionSet) -> Result<()> {
    let g = &proj.geom;
    write_array(path, &[g.n_views(), g.det_rows, g.det_cols], &proj.images)
}

pub fn read_projections(path: &Path, geom: &ScannerGeometry) -> Result<ProjectionSet> {
    let (dims, data) = read_array(path)?;
    let want = [geom.n_views(), geom.det_rows, geom.det_cols];
    if dims != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("projection dims {dims:?} do not match geometry {want:?}"),
        });
    }
    ProjectionSet::new(geom.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_and_errors() {
        let p = Path::new("mem");
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let bytes = encode_array(&[2, 3, 4], &data);
        assert_eq!(&bytes[..4], b"XLRM");
        let (dims, back) = decode_array(&bytes, p).unwrap();
        assert_eq!(dims, vec![2, 3, 4]);
        assert_eq!(back, data);

        assert!(decode_array(&bytes[..bytes.len() - 1], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'Y';
        assert!(decode_array(&wrong, p).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        let err = decode_array(&ver, p).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let vol = VolumeGrid::from_values(3, (0..27).map(|i| i as f32 / 26.0).collect()).unwrap();
        write_volume(&path, &vol).unwrap();
        assert_eq!(read_volume(&path).unwrap(), vol);
        write_array(&path, &[3, 9], vol.values()).unwrap();
        assert!(read_volume(&path).is_err());
    }
}
