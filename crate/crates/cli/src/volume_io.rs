//! Label-volume file formats.
//!
//! The native format is a raw little-endian voxel array (`u8` or `u16`)
//! next to a JSON sidecar `<file>.json` holding `{dims, dtype, spacing}`.
//! Reading additionally understands a small NIfTI-1 subset — enough to
//! ingest segmentation masks straight from common tooling — but writing
//! always emits the native format.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use medcot_core::labels::LabelVolume;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("header mismatch in {path}: {detail}")]
    HeaderMismatch { path: String, detail: String },
    #[error("unsupported voxel datatype code {code} in {path}")]
    UnsupportedDatatype { path: String, code: i16 },
    #[error("truncated file {path}: expected {expected} voxel bytes, found {actual}")]
    TruncatedFile { path: String, expected: usize, actual: usize },
    #[error("invalid volume: {0}")]
    Volume(medcot_core::labels::LabelError),
}

/// Sidecar schema. Field names are part of the format.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    dtype: String,
    spacing: Option<[f64; 3]>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> VolumeIoError + '_ {
    move |source| VolumeIoError::Io { path: path.display().to_string(), source }
}

/// Writes the native raw + sidecar pair. Voxels are stored as `u8` when
/// every label fits, halving mask size, else as little-endian `u16`.
pub fn write_volume(vol: &LabelVolume, path: &Path) -> Result<(), VolumeIoError> {
    let max = vol.voxels().iter().copied().max().unwrap_or(0);
    let narrow = max <= u16::from(u8::MAX);
    let bytes: Vec<u8> = if narrow {
        vol.voxels().iter().map(|&v| v as u8).collect()
    } else {
        vol.voxels().iter().flat_map(|v| v.to_le_bytes()).collect()
    };
    std::fs::write(path, bytes).map_err(io_err(path))?;

    let sidecar = Sidecar {
        dims: vol.dims(),
        dtype: if narrow { "u8".into() } else { "u16".into() },
        spacing: vol.spacing(),
    };
    let sidecar_file = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sidecar_file, json).map_err(io_err(&sidecar_file))?;
    Ok(())
}

/// Reads either format. NIfTI files are recognized by content (their
/// fixed header size, optionally behind a gzip container); anything else
/// must be a native raw file with its sidecar present.
pub fn read_volume(path: &Path) -> Result<LabelVolume, VolumeIoError> {
    let raw = std::fs::read(path).map_err(io_err(path))?;
    let data = maybe_gunzip(path, raw)?;
    if looks_like_nifti(&data) {
        read_nifti(path, &data)
    } else {
        read_native(path, &data)
    }
}

fn maybe_gunzip(path: &Path, data: Vec<u8>) -> Result<Vec<u8>, VolumeIoError> {
    if data.len() < 2 || data[0] != 0x1f || data[1] != 0x8b {
        return Ok(data);
    }
    let mut out = Vec::new();
    GzDecoder::new(&data[..])
        .read_to_end(&mut out)
        .map_err(io_err(path))?;
    Ok(out)
}

const NIFTI_HEADER_LEN: usize = 348;

fn looks_like_nifti(data: &[u8]) -> bool {
    if data.len() < NIFTI_HEADER_LEN {
        return false;
    }
    let first = i32::from_le_bytes(data[0..4].try_into().unwrap());
    let magic = &data[344..348];
    (first == 348 || first.swap_bytes() == 348) && (magic.starts_with(b"n+1") || magic.starts_with(b"ni1"))
}

fn read_native(path: &Path, data: &[u8]) -> Result<LabelVolume, VolumeIoError> {
    let sidecar_file = sidecar_path(path);
    let sidecar_text = std::fs::read_to_string(&sidecar_file).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            VolumeIoError::HeaderMismatch {
                path: path.display().to_string(),
                detail: format!(
                    "not a recognized volume header and no sidecar at {}",
                    sidecar_file.display()
                ),
            }
        } else {
            VolumeIoError::Io { path: sidecar_file.display().to_string(), source: e }
        }
    })?;
    let sidecar: Sidecar =
        serde_json::from_str(&sidecar_text).map_err(|e| VolumeIoError::HeaderMismatch {
            path: sidecar_file.display().to_string(),
            detail: e.to_string(),
        })?;

    let count = sidecar.dims.iter().product::<usize>();
    let voxels: Vec<u16> = match sidecar.dtype.as_str() {
        "u8" => {
            expect_len(path, data, count)?;
            data.iter().map(|&b| u16::from(b)).collect()
        }
        "u16" => {
            expect_len(path, data, count * 2)?;
            data.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        }
        other => {
            return Err(VolumeIoError::HeaderMismatch {
                path: sidecar_file.display().to_string(),
                detail: format!("unknown dtype {other:?} (expected \"u8\" or \"u16\")"),
            })
        }
    };
    LabelVolume::new(sidecar.dims, voxels, sidecar.spacing).map_err(VolumeIoError::Volume)
}

fn expect_len(path: &Path, data: &[u8], expected: usize) -> Result<(), VolumeIoError> {
    if data.len() != expected {
        return Err(VolumeIoError::TruncatedFile {
            path: path.display().to_string(),
            expected,
            actual: data.len(),
        });
    }
    Ok(())
}

/// Minimal NIfTI-1 reader: 348-byte header, 3-D dims, integer voxel
/// types only (codes 2, 4, 512). Axes map so the fastest-varying file
/// axis stays fastest in memory; spacing comes along in the same order.
fn read_nifti(path: &Path, data: &[u8]) -> Result<LabelVolume, VolumeIoError> {
    let header = &data[..NIFTI_HEADER_LEN];
    let little = i32::from_le_bytes(header[0..4].try_into().unwrap()) == 348;
    let mismatch = |detail: String| VolumeIoError::HeaderMismatch {
        path: path.display().to_string(),
        detail,
    };

    let read_i16 = |off: usize| -> i16 {
        let raw = i16::from_le_bytes(header[off..off + 2].try_into().unwrap());
        if little { raw } else { raw.swap_bytes() }
    };
    let read_f32 = |off: usize| -> f32 {
        let bits = u32::from_le_bytes(header[off..off + 4].try_into().unwrap());
        f32::from_bits(if little { bits } else { bits.swap_bytes() })
    };

    let ndim = read_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(mismatch(format!("dim[0] = {ndim} out of range 1..=7")));
    }
    let dim: Vec<i16> = (0..8).map(|i| read_i16(40 + 2 * i)).collect();
    if ndim < 3 {
        return Err(mismatch(format!("need a 3-D volume, got dim[0] = {ndim}")));
    }
    for (axis, &extent) in dim.iter().enumerate().take(ndim as usize + 1).skip(4) {
        if extent > 1 {
            return Err(mismatch(format!("axis {axis} has extent {extent}; only 3-D volumes are supported")));
        }
    }
    let (nx, ny, nz) = (dim[1], dim[2], dim[3]);
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(mismatch(format!("non-positive dims ({nx}, {ny}, {nz})")));
    }
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);

    let datatype = read_i16(70);
    let elem_size: usize = match datatype {
        2 => 1,          // unsigned char
        4 | 512 => 2,    // signed short / unsigned short
        code => {
            return Err(VolumeIoError::UnsupportedDatatype {
                path: path.display().to_string(),
                code,
            })
        }
    };

    let vox_offset = read_f32(108);
    if !vox_offset.is_finite() || vox_offset < NIFTI_HEADER_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(mismatch(format!("vox_offset {vox_offset} invalid")));
    }
    let offset = vox_offset as usize;

    let count = nx * ny * nz;
    let need = offset + count * elem_size;
    if data.len() < need {
        return Err(VolumeIoError::TruncatedFile {
            path: path.display().to_string(),
            expected: need,
            actual: data.len(),
        });
    }
    let body = &data[offset..need];

    let voxels: Vec<u16> = match datatype {
        2 => body.iter().map(|&b| u16::from(b)).collect(),
        512 => body
            .chunks_exact(2)
            .map(|c| {
                let raw = u16::from_le_bytes([c[0], c[1]]);
                if little { raw } else { raw.swap_bytes() }
            })
            .collect(),
        4 => {
            let mut out = Vec::with_capacity(count);
            for c in body.chunks_exact(2) {
                let raw = i16::from_le_bytes([c[0], c[1]]);
                let v = if little { raw } else { raw.swap_bytes() };
                if v < 0 {
                    return Err(mismatch(format!("negative voxel value {v} cannot be a label")));
                }
                out.push(v as u16);
            }
            out
        }
        _ => unreachable!("datatype vetted above"),
    };

    // File axis order is x fastest, z slowest; store (z, y, x) so the
    // linear layout is unchanged and x remains the fastest axis.
    let spacing = {
        let dx = f64::from(read_f32(76 + 4));
        let dy = f64::from(read_f32(76 + 8));
        let dz = f64::from(read_f32(76 + 12));
        if dx > 0.0 && dy > 0.0 && dz > 0.0 {
            Some([dz, dy, dx])
        } else {
            None
        }
    };
    LabelVolume::new([nz, ny, nx], voxels, spacing).map_err(VolumeIoError::Volume)
}

#[cfg(test)]
pub(crate) fn build_nifti_bytes(
    dims_xyz: [i16; 3],
    datatype: i16,
    pixdim_xyz: [f32; 3],
    body: &[u8],
) -> Vec<u8> {
    let mut header = vec![0u8; NIFTI_HEADER_LEN];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    let mut dim = [0i16; 8];
    dim[0] = 3;
    dim[1] = dims_xyz[0];
    dim[2] = dims_xyz[1];
    dim[3] = dims_xyz[2];
    for (i, d) in dim.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&datatype.to_le_bytes());
    let bitpix: i16 = if datatype == 2 { 8 } else { 16 };
    header[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim = [1.0f32, pixdim_xyz[0], pixdim_xyz[1], pixdim_xyz[2]];
    for (i, p) in pixdim.iter().enumerate() {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    header[108..112].copy_from_slice(&352f32.to_le_bytes());
    header[344..348].copy_from_slice(b"n+1\0");
    header.extend_from_slice(&[0u8; 4]); // pad to vox_offset 352
    header.extend_from_slice(body);
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> LabelVolume {
        let mut voxels = vec![0u16; 3 * 4 * 5];
        voxels[0] = 5;
        voxels[31] = 20;
        voxels[59] = 300;
        LabelVolume::new([3, 4, 5], voxels, Some([2.5, 0.8, 0.8])).unwrap()
    }

    #[test]
    fn native_round_trip_u16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        assert_eq!(back.voxels(), vol.voxels());
        assert_eq!(back.spacing(), vol.spacing());

        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("vol.raw.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["dtype"], "u16");
        assert_eq!(sidecar["dims"], serde_json::json!([3, 4, 5]));
    }

    #[test]
    fn native_uses_u8_when_labels_fit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.raw");
        let vol = LabelVolume::new([2, 2, 2], vec![0, 1, 2, 3, 4, 5, 6, 255], None).unwrap();
        write_volume(&vol, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.voxels(), vol.voxels());
        assert_eq!(back.spacing(), None);
    }

    #[test]
    fn truncated_native_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        write_volume(&sample_volume(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, bytes).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, VolumeIoError::TruncatedFile { expected: 120, actual: 118, .. }));
    }

    #[test]
    fn sidecar_missing_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("orphan.raw");
        std::fs::write(&path, [0u8; 8]).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, VolumeIoError::HeaderMismatch { .. }));
    }

    #[test]
    fn nifti_u8_reads_with_axis_remap() {
        // 2 x 3 x 4 in file (x, y, z) order; value encodes its (x, y, z)
        // as x + 10y + 50z, which stays within u8 range.
        let (nx, ny, nz) = (2usize, 3usize, 4usize);
        let mut body = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    body.push((x + 10 * y + 50 * z) as u8);
                }
            }
        }
        let bytes = build_nifti_bytes([2, 3, 4], 2, [0.7, 0.8, 2.5], &body);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.nii");
        std::fs::write(&path, &bytes).unwrap();

        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.dims(), [4, 3, 2]);
        assert_eq!(
            vol.spacing(),
            Some([2.5f32 as f64, 0.8f32 as f64, 0.7f32 as f64])
        );
        // (h, w, d) = (z, y, x)
        assert_eq!(vol.get(3, 2, 1), 171);
        assert_eq!(vol.get(0, 0, 1), 1);
        assert_eq!(vol.get(2, 1, 0), 110);
    }

    #[test]
    fn nifti_gzip_and_i16_paths() {
        use flate2::write::GzEncoder;
        use std::io::Write;

        let body: Vec<u8> = [5i16, 0, 20, 300]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let bytes = build_nifti_bytes([4, 1, 1], 4, [1.0, 1.0, 1.0], &body);

        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        let gz = enc.finish().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.nii.gz");
        std::fs::write(&path, &gz).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.dims(), [1, 1, 4]);
        assert_eq!(vol.voxels(), &[5, 0, 20, 300]);
    }

    #[test]
    fn nifti_negative_i16_voxel_rejected() {
        let body: Vec<u8> = [5i16, -1, 0, 0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = build_nifti_bytes([4, 1, 1], 4, [1.0, 1.0, 1.0], &body);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.nii");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path).unwrap_err(),
            VolumeIoError::HeaderMismatch { .. }
        ));
    }

    #[test]
    fn nifti_float_datatype_rejected() {
        let bytes = build_nifti_bytes([1, 1, 1], 64, [1.0, 1.0, 1.0], &[0; 8]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f64.nii");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path).unwrap_err(),
            VolumeIoError::UnsupportedDatatype { code: 64, .. }
        ));
    }

    #[test]
    fn nifti_truncated_body_rejected() {
        let bytes = build_nifti_bytes([4, 4, 4], 2, [1.0, 1.0, 1.0], &[0; 63]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.nii");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path).unwrap_err(),
            VolumeIoError::TruncatedFile { expected: 416, actual: 415, .. }
        ));
    }

    #[test]
    fn nifti_big_endian_header_is_understood() {
        // Hand-build a big-endian header: every multi-byte field swapped.
        let mut bytes = build_nifti_bytes([2, 1, 1], 2, [1.0, 1.0, 1.0], &[7, 9]);
        for range in [0..4usize, 108..112] {
            bytes[range.clone()].reverse(); // sizeof_hdr, vox_offset
        }
        for i in 0..8 {
            bytes[40 + 2 * i..42 + 2 * i].reverse(); // dim
        }
        bytes[70..72].reverse(); // datatype
        bytes[72..74].reverse(); // bitpix
        for i in 0..8 {
            bytes[76 + 4 * i..80 + 4 * i].reverse(); // pixdim
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.nii");
        std::fs::write(&path, &bytes).unwrap();
        let vol = read_volume(&path).unwrap();
        assert_eq!(vol.dims(), [1, 1, 2]);
        assert_eq!(vol.voxels(), &[7, 9]);
    }
}
