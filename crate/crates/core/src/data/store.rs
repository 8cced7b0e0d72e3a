//! Dataset directory format: `meta.json` + contiguous little-endian arrays
//! (`images.bin` f32, `labels.bin` u8) + `volumes.json`. Target training
//! splits omit `labels.bin`; evaluation labels live in `labels.eval.bin`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainShiftSpec, SliceSample};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub domain: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub shift: Option<DomainShiftSpec>,
    pub geometry_seed: u64,
    pub has_labels: bool,
    pub has_eval_labels: bool,
}

/// Range of consecutive samples belonging to one volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSpan {
    pub volume_id: String,
    pub start: usize,
    pub len: usize,
    pub axis: usize,
    pub orig_size: (usize, usize),
}

/// An in-memory slice dataset. `labels` drive training (absent for target
/// train splits); `eval_labels` are evaluation-only and never read by the
/// optimization path.
#[derive(Debug, Clone)]
pub struct SliceDataset {
    pub meta: DatasetMeta,
    pub images: Array3<f32>,
    pub labels: Option<Array3<u8>>,
    pub eval_labels: Option<Array3<u8>>,
    pub volumes: Vec<VolumeSpan>,
}

impl SliceDataset {
    pub fn len(&self) -> usize {
        self.images.len_of(ndarray::Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gather images at `indices` into a (B, 1, H, W) batch.
    pub fn image_batch(&self, indices: &[usize]) -> Array4<f32> {
        let (_, h, w) = self.images.dim();
        let mut out = Array4::<f32>::zeros((indices.len(), 1, h, w));
        for (bi, &i) in indices.iter().enumerate() {
            out.slice_mut(s![bi, 0, .., ..]).assign(&self.images.index_axis(ndarray::Axis(0), i));
        }
        out
    }

    /// Gather training labels at `indices`; None when the split is unlabeled.
    pub fn label_batch(&self, indices: &[usize]) -> Option<Array3<u8>> {
        let labels = self.labels.as_ref()?;
        let (_, h, w) = labels.dim();
        let mut out = Array3::<u8>::zeros((indices.len(), h, w));
        for (bi, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&labels.index_axis(ndarray::Axis(0), i));
        }
        Some(out)
    }

    /// Samples of one volume, reconstructed as [`SliceSample`]s with
    /// evaluation labels when available.
    pub fn volume_samples(&self, span: &VolumeSpan) -> Vec<SliceSample> {
        let labels = self.labels.as_ref().or(self.eval_labels.as_ref());
        (0..span.len)
            .map(|k| {
                let i = span.start + k;
                SliceSample {
                    image: self.images.index_axis(ndarray::Axis(0), i).to_owned(),
                    label: labels.map(|l| l.index_axis(ndarray::Axis(0), i).to_owned()),
                    volume_id: span.volume_id.clone(),
                    slice_index: k,
                    axis: span.axis,
                    orig_size: span.orig_size,
                }
            })
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn f32s_to_bytes(a: &Array3<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_dataset(ds: &SliceDataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&ds.meta)?)?;
    write_atomic(&dir.join("volumes.json"), &serde_json::to_vec_pretty(&ds.volumes)?)?;
    write_atomic(&dir.join("images.bin"), &f32s_to_bytes(&ds.images))?;
    if let Some(labels) = &ds.labels {
        write_atomic(&dir.join("labels.bin"), labels.as_slice().unwrap())?;
    }
    if let Some(labels) = &ds.eval_labels {
        write_atomic(&dir.join("labels.eval.bin"), labels.as_slice().unwrap())?;
    }
    Ok(())
}

fn read_labels(path: &Path, shape: (usize, usize, usize)) -> Result<Array3<u8>, DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let want = shape.0 * shape.1 * shape.2;
    if bytes.len() != want {
        return Err(DataError::ShapeMismatch(format!(
            "{}: {} bytes for shape {shape:?}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(Array3::from_shape_vec(shape, bytes).unwrap())
}

pub fn load_dataset(dir: &Path) -> Result<SliceDataset, DataError> {
    let meta_bytes = std::fs::read(dir.join("meta.json"))
        .map_err(|e| DataError::CorruptHeader(format!("meta.json: {e}")))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| DataError::CorruptHeader(format!("meta.json: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch(meta.version, FORMAT_VERSION));
    }
    let volumes: Vec<VolumeSpan> = serde_json::from_slice(
        &std::fs::read(dir.join("volumes.json"))
            .map_err(|e| DataError::CorruptHeader(format!("volumes.json: {e}")))?,
    )
    .map_err(|e| DataError::CorruptHeader(format!("volumes.json: {e}")))?;

    let shape = (meta.count, meta.height, meta.width);
    let mut bytes = Vec::new();
    File::open(dir.join("images.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() != shape.0 * shape.1 * shape.2 * 4 {
        return Err(DataError::ShapeMismatch(format!(
            "images.bin: {} bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let images = Array3::from_shape_vec(shape, vals).unwrap();

    let labels = if meta.has_labels {
        Some(read_labels(&dir.join("labels.bin"), shape)?)
    } else {
        None
    };
    let eval_labels = if meta.has_eval_labels {
        Some(read_labels(&dir.join("labels.eval.bin"), shape)?)
    } else {
        None
    };

    Ok(SliceDataset {
        meta,
        images,
        labels,
        eval_labels,
        volumes,
    })
}

pub(crate) fn new_meta(
    domain: &str,
    count: usize,
    size: (usize, usize),
    shift: Option<DomainShiftSpec>,
    geometry_seed: u64,
    has_labels: bool,
    has_eval_labels: bool,
) -> DatasetMeta {
    DatasetMeta {
        version: FORMAT_VERSION,
        domain: domain.to_string(),
        count,
        height: size.0,
        width: size.1,
        class_names: vec!["background".into(), "left".into(), "right".into()],
        shift,
        geometry_seed,
        has_labels,
        has_eval_labels,
    }
}
