//! Synthetic domain-shift data, the preprocessing pipeline (percentile clip,
//! standardize, rescale, slice, pad), the on-disk dataset format and
//! slice/volume conversion.

mod nifti;
mod store;
mod synth;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nifti::{load_volume, save_volume};
pub use store::{load_dataset, save_dataset, DatasetMeta, SliceDataset, VolumeSpan};
pub use synth::{generate_synthetic_pair, DomainDatasetPair, SLICES_PER_VOLUME};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid shift spec: {0}")]
    InvalidSpec(String),
    #[error("zero-variance volume")]
    ZeroVariance,
    #[error("constant volume cannot be rescaled")]
    ConstantVolume,
    #[error("slice {got:?} larger than target {want:?}")]
    SliceTooLarge { got: (usize, usize), want: (usize, usize) },
    #[error("missing slice {0}")]
    MissingSlice(usize),
    #[error("duplicate slice {0}")]
    DuplicateSlice(usize),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("version mismatch: file {0}, supported {1}")]
    VersionMismatch(u32, u32),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A 3D intensity volume.
#[derive(Debug, Clone)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing: Option<[f32; 3]>,
    pub orientation: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>) -> Self {
        Volume {
            voxels,
            spacing: None,
            orientation: "RAS".into(),
        }
    }
}

/// One preprocessed 2D training sample. Target-domain training samples carry
/// no label.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub label: Option<Array2<u8>>,
    pub volume_id: String,
    pub slice_index: usize,
    pub axis: usize,
    /// Spatial size of the slice before padding, for reassembly.
    pub orig_size: (usize, usize),
}

/// Appearance-shift parameters applied to target-domain volumes before
/// preprocessing. This is the artifact's own model of scanner/protocol
/// shift, not a claim about MRI physics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub bias_field_amplitude: f64,
    /// Length scale of the multiplicative bias field, in pixels.
    pub bias_field_smoothness: f64,
    pub noise_sigma: f64,
    pub contrast_gamma: f64,
    pub seed: u64,
}

impl DomainShiftSpec {
    pub fn identity(seed: u64) -> Self {
        DomainShiftSpec {
            intensity_gain: 1.0,
            intensity_offset: 0.0,
            bias_field_amplitude: 0.0,
            bias_field_smoothness: 16.0,
            noise_sigma: 0.0,
            contrast_gamma: 1.0,
            seed,
        }
    }

    /// The pinned shift used by the desk-scale adaptation benchmark.
    pub fn desk_benchmark(seed: u64) -> Self {
        DomainShiftSpec {
            intensity_gain: 0.6,
            intensity_offset: 0.1,
            bias_field_amplitude: 0.4,
            bias_field_smoothness: 16.0,
            noise_sigma: 0.05,
            contrast_gamma: 1.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.contrast_gamma <= 0.0 {
            return Err(DataError::InvalidSpec("contrast_gamma must be > 0".into()));
        }
        if self.noise_sigma < 0.0 || self.bias_field_amplitude < 0.0 {
            return Err(DataError::InvalidSpec(
                "noise_sigma and bias_field_amplitude must be >= 0".into(),
            ));
        }
        if self.bias_field_smoothness <= 0.0 {
            return Err(DataError::InvalidSpec("bias_field_smoothness must be > 0".into()));
        }
        Ok(())
    }
}

/// Percentile by linear interpolation between closest order statistics.
pub fn percentile_value(volume: &Volume, p: f64) -> f32 {
    let mut v: Vec<f32> = volume.voxels.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= v.len() {
        v[v.len() - 1]
    } else {
        v[lo] + frac as f32 * (v[lo + 1] - v[lo])
    }
}

/// Clamp intensities above the p-th percentile of the volume.
pub fn clip_percentile(volume: &Volume, p: f64) -> Volume {
    let cut = percentile_value(volume, p);
    let mut out = volume.clone();
    out.voxels.mapv_inplace(|v| v.min(cut));
    out
}

/// Shift/scale to zero mean and unit population variance.
pub fn standardize(volume: &Volume) -> Result<Volume, DataError> {
    let n = volume.voxels.len() as f64;
    let mean = volume.voxels.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = volume
        .voxels
        .iter()
        .map(|v| {
            let d = *v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(DataError::ZeroVariance);
    }
    let inv = 1.0 / var.sqrt();
    let mut out = volume.clone();
    out.voxels.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
    Ok(out)
}

/// Affine map sending the volume min to `lo` and max to `hi`.
pub fn rescale(volume: &Volume, lo: f64, hi: f64) -> Result<Volume, DataError> {
    if lo >= hi {
        return Err(DataError::InvalidSpec(format!("rescale: lo {lo} >= hi {hi}")));
    }
    let mn = volume.voxels.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let mx = volume.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    if mx <= mn {
        return Err(DataError::ConstantVolume);
    }
    let scale = (hi - lo) / (mx - mn);
    let mut out = volume.clone();
    out.voxels.mapv_inplace(|v| (lo + (v as f64 - mn) * scale) as f32);
    Ok(out)
}

fn pad_margins(s: usize, out: usize) -> (usize, usize) {
    let lead = (out - s) / 2;
    (lead, out - s - lead)
}

fn pad_slice_f32(slice: &Array2<f32>, out: (usize, usize)) -> Array2<f32> {
    let (h, w) = slice.dim();
    let (lh, _) = pad_margins(h, out.0);
    let (lw, _) = pad_margins(w, out.1);
    let mut padded = Array2::<f32>::zeros(out);
    padded.slice_mut(ndarray::s![lh..lh + h, lw..lw + w]).assign(slice);
    padded
}

fn pad_slice_u8(slice: &Array2<u8>, out: (usize, usize)) -> Array2<u8> {
    let (h, w) = slice.dim();
    let (lh, _) = pad_margins(h, out.0);
    let (lw, _) = pad_margins(w, out.1);
    let mut padded = Array2::<u8>::zeros(out); // class 0 = background
    padded.slice_mut(ndarray::s![lh..lh + h, lw..lw + w]).assign(slice);
    padded
}

/// Slice a volume along `axis` and center-pad every slice to `out_size`
/// (labels padded with background). The extra pixel for odd differences goes
/// on the trailing side.
pub fn slice_and_pad(
    volume: &Volume,
    labels: Option<&Array3<u8>>,
    axis: usize,
    out_size: (usize, usize),
    volume_id: &str,
) -> Result<Vec<SliceSample>, DataError> {
    let n = volume.voxels.len_of(Axis(axis));
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let img: Array2<f32> = volume.voxels.index_axis(Axis(axis), idx).to_owned();
        let dims = img.dim();
        if dims.0 > out_size.0 || dims.1 > out_size.1 {
            return Err(DataError::SliceTooLarge { got: dims, want: out_size });
        }
        let label = match labels {
            Some(l) => {
                let ls: Array2<u8> = l.index_axis(Axis(axis), idx).to_owned();
                if ls.dim() != dims {
                    return Err(DataError::ShapeMismatch("label slice vs image slice".into()));
                }
                Some(pad_slice_u8(&ls, out_size))
            }
            None => None,
        };
        samples.push(SliceSample {
            image: pad_slice_f32(&img, out_size),
            label,
            volume_id: volume_id.to_string(),
            slice_index: idx,
            axis,
            orig_size: dims,
        });
    }
    Ok(samples)
}

/// Stack per-slice label masks back into a volume, cropping the padding.
/// Inverse of [`slice_and_pad`] on labels.
pub fn reassemble(slices: &[SliceSample]) -> Result<Array3<u8>, DataError> {
    if slices.is_empty() {
        return Err(DataError::Empty("reassemble: no slices".into()));
    }
    let n = slices.iter().map(|s| s.slice_index).max().unwrap() + 1;
    let axis = slices[0].axis;
    let orig = slices[0].orig_size;
    let mut ordered: Vec<Option<&SliceSample>> = vec![None; n];
    for s in slices {
        if ordered[s.slice_index].is_some() {
            return Err(DataError::DuplicateSlice(s.slice_index));
        }
        ordered[s.slice_index] = Some(s);
    }
    let mut planes = Vec::with_capacity(n);
    for (i, slot) in ordered.iter().enumerate() {
        let s = slot.ok_or(DataError::MissingSlice(i))?;
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| DataError::Empty(format!("slice {i} has no label")))?;
        let (ph, pw) = label.dim();
        let (lh, _) = pad_margins(orig.0, ph);
        let (lw, _) = pad_margins(orig.1, pw);
        planes.push(
            label
                .slice(ndarray::s![lh..lh + orig.0, lw..lw + orig.1])
                .to_owned(),
        );
    }
    let mut stacked = Array3::<u8>::zeros((n, orig.0, orig.1));
    for (i, p) in planes.iter().enumerate() {
        stacked.index_axis_mut(Axis(0), i).assign(p);
    }
    // restore the slicing axis to its original position
    let vol = match axis {
        0 => stacked,
        1 => stacked.permuted_axes([1, 0, 2]).as_standard_layout().to_owned(),
        2 => stacked.permuted_axes([1, 2, 0]).as_standard_layout().to_owned(),
        a => return Err(DataError::ShapeMismatch(format!("axis {a} out of range"))),
    };
    Ok(vol)
}

/// Standard per-volume pipeline: clip to the 99th percentile, standardize,
/// rescale to [-1, 1], then slice and pad.
pub fn preprocess_volume(
    volume: &Volume,
    labels: Option<&Array3<u8>>,
    axis: usize,
    out_size: (usize, usize),
    volume_id: &str,
) -> Result<Vec<SliceSample>, DataError> {
    let v = clip_percentile(volume, 99.0);
    let v = standardize(&v)?;
    let v = rescale(&v, -1.0, 1.0)?;
    slice_and_pad(&v, labels, axis, out_size, volume_id)
}
