//! Minimal single-file NIfTI-1 reader/writer for pre-stripped volumes.
//! Supports uncompressed `.nii` with uint8, int16, int32, float32 or float64
//! data. Skull stripping and bias-field correction happen upstream.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::{DataError, Volume};

const HDR_SIZE: usize = 348;

fn le16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le32f(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Load a volume from a `.nii` file. Data is returned as (Z, Y, X) with the
/// NIfTI x axis fastest.
pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HDR_SIZE {
        return Err(DataError::CorruptHeader("file shorter than NIfTI-1 header".into()));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != 348 {
        return Err(DataError::CorruptHeader(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(DataError::CorruptHeader("magic is not n+1".into()));
    }
    let ndim = le16(&bytes, 40);
    if !(3..=4).contains(&ndim) {
        return Err(DataError::ShapeMismatch(format!("need a 3D volume, got dim[0] = {ndim}")));
    }
    let nx = le16(&bytes, 42) as usize;
    let ny = le16(&bytes, 44) as usize;
    let nz = le16(&bytes, 46) as usize;
    let datatype = le16(&bytes, 70);
    let vox_offset = le32f(&bytes, 108) as usize;
    let mut slope = le32f(&bytes, 112);
    let inter = le32f(&bytes, 116);
    if slope == 0.0 {
        slope = 1.0;
    }
    // pixdim[1..3] are x, y, z; spacing is stored (z, y, x) to match voxels
    let spacing = [le32f(&bytes, 88), le32f(&bytes, 84), le32f(&bytes, 80)];

    let n = nx * ny * nz;
    let data = &bytes[vox_offset..];
    let raw: Vec<f32> = match datatype {
        2 => data.iter().take(n).map(|v| *v as f32).collect(),
        4 => data
            .chunks_exact(2)
            .take(n)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        8 => data
            .chunks_exact(4)
            .take(n)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
            .collect(),
        16 => data
            .chunks_exact(4)
            .take(n)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        64 => data
            .chunks_exact(8)
            .take(n)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32)
            .collect(),
        dt => return Err(DataError::CorruptHeader(format!("unsupported datatype {dt}"))),
    };
    if raw.len() != n {
        return Err(DataError::ShapeMismatch(format!(
            "payload has {} voxels, header claims {n}",
            raw.len()
        )));
    }
    // NIfTI stores x fastest; build (z, y, x)
    let voxels = Array3::from_shape_vec((nz, ny, nx), raw)
        .map_err(|e| DataError::ShapeMismatch(e.to_string()))?
        .mapv(|v| v * slope + inter);
    Ok(Volume {
        voxels,
        spacing: Some(spacing),
        orientation: "RAS".into(),
    })
}

/// Write a volume as uncompressed float32 NIfTI-1.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), DataError> {
    let (nz, ny, nx) = volume.voxels.dim();
    let mut hdr = vec![0u8; HDR_SIZE + 4]; // header + extension flag
    hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&16i16.to_le_bytes()); // float32
    hdr[72..74].copy_from_slice(&32i16.to_le_bytes()); // bitpix
    let sp = volume.spacing.unwrap_or([1.0, 1.0, 1.0]);
    hdr[76..80].copy_from_slice(&1.0f32.to_le_bytes()); // pixdim[0]
    hdr[80..84].copy_from_slice(&sp[2].to_le_bytes());
    hdr[84..88].copy_from_slice(&sp[1].to_le_bytes());
    hdr[88..92].copy_from_slice(&sp[0].to_le_bytes());
    hdr[108..112].copy_from_slice(&352.0f32.to_le_bytes()); // vox_offset
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    hdr[344..348].copy_from_slice(b"n+1\0");

    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&hdr)?;
        for v in volume.voxels.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
