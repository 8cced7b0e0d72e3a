//! Synthetic domain-shifted benchmark data: noisy "head" discs containing a
//! left and a right ellipsoidal structure, rendered as small 3D volumes,
//! optionally appearance-shifted, then run through the standard pipeline.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::store::{new_meta, SliceDataset, VolumeSpan};
use super::{preprocess_volume, DataError, DomainShiftSpec, Volume};

pub const SLICES_PER_VOLUME: usize = 4;

/// Labeled source dataset and unlabeled target dataset drawn from the same
/// geometry distribution; target evaluation labels are stored separately.
#[derive(Debug, Clone)]
pub struct DomainDatasetPair {
    pub source: SliceDataset,
    pub target: SliceDataset,
}

struct Ellipsoid {
    zc: f64,
    yc: f64,
    xc: f64,
    az: f64,
    ay: f64,
    ax: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.zc) / self.az;
        let dy = y - self.yc;
        let dx = x - self.xc;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.ax;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ay;
        dz * dz + u * u + v * v <= 1.0
    }

    /// In-plane coverage fraction of the unit pixel at (y, x), estimated from
    /// a 2x2 subsample. Models the partial-volume effect: boundary pixels get
    /// intermediate intensities, which keeps them genuinely ambiguous and
    /// prevents the segmentation loss from collapsing to zero.
    fn coverage(&self, z: f64, y: f64, x: f64) -> f64 {
        let mut c = 0.0;
        for dy in [-0.25, 0.25] {
            for dx in [-0.25, 0.25] {
                if self.contains(z, y + dy, x + dx) {
                    c += 0.25;
                }
            }
        }
        c
    }
}

fn sample_ellipsoid(
    rng: &mut ChaCha20Rng,
    d: usize,
    zc_jitter: f64,
    center: (f64, f64),
    center_jitter: f64,
    az_range: (f64, f64),
    radius_range: (f64, f64),
    scale: f64,
) -> Ellipsoid {
    let theta: f64 = rng.gen_range(-0.4..0.4);
    Ellipsoid {
        zc: d as f64 / 2.0 - 0.5 + rng.gen_range(-zc_jitter..zc_jitter),
        yc: center.0 + rng.gen_range(-center_jitter..center_jitter),
        xc: center.1 + rng.gen_range(-center_jitter..center_jitter),
        az: rng.gen_range(az_range.0..az_range.1),
        ay: rng.gen_range(radius_range.0..radius_range.1) * scale,
        ax: rng.gen_range(radius_range.0..radius_range.1) * scale,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
    }
}

/// Smooth random field in [-1, 1] on an (h, w) grid via bilinear upsampling
/// of a coarse lattice with the given length scale.
fn smooth_field(rng: &mut ChaCha20Rng, h: usize, w: usize, scale: f64) -> ndarray::Array2<f64> {
    let gh = (h as f64 / scale).ceil() as usize + 2;
    let gw = (w as f64 / scale).ceil() as usize + 2;
    let grid = ndarray::Array2::from_shape_simple_fn((gh, gw), || rng.gen_range(-1.0..1.0));
    ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
        let u = i as f64 / scale;
        let v = j as f64 / scale;
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - i0 as f64, v - j0 as f64);
        let g = |a: usize, b: usize| grid[[a.min(gh - 1), b.min(gw - 1)]];
        g(i0, j0) * (1.0 - fu) * (1.0 - fv)
            + g(i0 + 1, j0) * fu * (1.0 - fv)
            + g(i0, j0 + 1) * (1.0 - fu) * fv
            + g(i0 + 1, j0 + 1) * fu * fv
    })
}

/// Render one raw volume and its label volume.
fn render_volume(rng: &mut ChaCha20Rng, d: usize, h: usize, w: usize) -> (Volume, Array3<u8>) {
    let m = h.min(w) as f64;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r_lo = 0.16;
    let r_hi = 0.24;
    let off_frac = 0.26;
    let head = sample_ellipsoid(
        rng,
        d,
        0.3,
        (cy, cx),
        2.0,
        (d as f64 * 1.3, d as f64 * 1.9),
        (0.34, 0.42),
        m,
    );
    let offset = off_frac * m;
    let left = sample_ellipsoid(
        rng,
        d,
        0.4,
        (cy, cx - offset),
        1.5,
        (d as f64 * 0.7, d as f64 * 1.1),
        (r_lo, r_hi),
        m,
    );
    let right = sample_ellipsoid(
        rng,
        d,
        0.4,
        (cy, cx + offset),
        1.5,
        (d as f64 * 0.7, d as f64 * 1.1),
        (r_lo, r_hi),
        m,
    );
    let texture = smooth_field(rng, h, w, 10.0);
    // per-volume acquisition jitter: without this heterogeneity the
    // segmentation loss converges into an overconfident minimum that is
    // brittle under later fine-tuning
    let gain: f64 = rng.gen_range(0.85..1.15);
    let shift: f64 = rng.gen_range(-0.05..0.05);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut voxels = Array3::<f32>::zeros((d, h, w));
    let mut labels = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                let mut v = 0.0;
                if head.contains(zf, yf, xf) {
                    v = 0.35 + 0.08 * texture[[y, x]];
                    // moderate structure/head contrast: the appearance shift
                    // (gain + gamma) must be able to wash the structures out.
                    // Intensity blends with partial-volume coverage while the
                    // label thresholds at half coverage, so the exact border
                    // stays irreducibly uncertain.
                    let (cl, cr) = (left.coverage(zf, yf, xf), right.coverage(zf, yf, xf));
                    let c = cl.max(cr);
                    v += c * (0.75 - v);
                    if cl >= 0.5 || cr >= 0.5 {
                        labels[[z, y, x]] = if cl >= cr { 1 } else { 2 };
                    }
                }
                voxels[[z, y, x]] = (v * gain + shift + noise.sample(rng)) as f32;
            }
        }
    }
    (Volume::new(voxels), labels)
}

/// Apply the appearance shift to a raw volume: gain/offset, multiplicative
/// smooth bias field, gamma contrast, additive Gaussian noise. Runs before
/// preprocessing.
fn apply_shift(volume: &mut Volume, spec: &DomainShiftSpec, rng: &mut ChaCha20Rng) {
    let (d, h, w) = volume.voxels.dim();
    volume
        .voxels
        .mapv_inplace(|v| (v as f64 * spec.intensity_gain + spec.intensity_offset) as f32);
    if spec.bias_field_amplitude > 0.0 {
        for z in 0..d {
            let field = smooth_field(rng, h, w, spec.bias_field_smoothness);
            let mut plane = volume.voxels.index_axis_mut(ndarray::Axis(0), z);
            for y in 0..h {
                for x in 0..w {
                    plane[[y, x]] =
                        (plane[[y, x]] as f64 * (1.0 + spec.bias_field_amplitude * field[[y, x]])) as f32;
                }
            }
        }
    }
    if (spec.contrast_gamma - 1.0).abs() > 1e-12 {
        let mn = volume.voxels.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let mx = volume.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        if mx > mn {
            let span = mx - mn;
            volume.voxels.mapv_inplace(|v| {
                let t = ((v as f64 - mn) / span).clamp(0.0, 1.0);
                (mn + span * t.powf(spec.contrast_gamma)) as f32
            });
        }
    }
    if spec.noise_sigma > 0.0 {
        let mn = volume.voxels.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let mx = volume.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let noise = Normal::new(0.0, spec.noise_sigma * (mx - mn).max(1e-12)).unwrap();
        volume.voxels.mapv_inplace(|v| (v as f64 + noise.sample(rng)) as f32);
    }
}

struct DomainAccum {
    images: Vec<f32>,
    labels: Vec<u8>,
    volumes: Vec<VolumeSpan>,
    count: usize,
}

impl DomainAccum {
    fn new() -> Self {
        DomainAccum {
            images: Vec::new(),
            labels: Vec::new(),
            volumes: Vec::new(),
            count: 0,
        }
    }

    fn push_volume(&mut self, samples: &[super::SliceSample], volume_id: &str) {
        let start = self.count;
        for s in samples {
            self.images.extend(s.image.iter());
            if let Some(l) = &s.label {
                self.labels.extend(l.iter());
            }
            self.count += 1;
        }
        self.volumes.push(VolumeSpan {
            volume_id: volume_id.to_string(),
            start,
            len: samples.len(),
            axis: samples[0].axis,
            orig_size: samples[0].orig_size,
        });
    }
}

/// Generate a source/target dataset pair. `n_source` and `n_target` count
/// volumes of [`SLICES_PER_VOLUME`] coronal slices each; `size` is the padded
/// slice size. Raw volumes are rendered slightly smaller than `size` so the
/// padding path is exercised. Pure function of (geometry_seed, shift, counts).
pub fn generate_synthetic_pair(
    n_source: usize,
    n_target: usize,
    shift: &DomainShiftSpec,
    geometry_seed: u64,
    size: (usize, usize),
) -> Result<DomainDatasetPair, DataError> {
    shift.validate()?;
    if n_source == 0 || n_target == 0 {
        return Err(DataError::Empty("n_source and n_target must be >= 1".into()));
    }
    if size.0 < 16 || size.1 < 16 {
        return Err(DataError::InvalidSpec(format!("size {size:?} too small")));
    }
    let raw = (size.0 - 8, size.1 - 4);
    let d = SLICES_PER_VOLUME;

    let build = |domain: &str, n: usize, geom_stream: u64, shift: Option<&DomainShiftSpec>| -> Result<DomainAccum, DataError> {
        let mut geom_rng = ChaCha20Rng::seed_from_u64(geometry_seed.wrapping_mul(2).wrapping_add(geom_stream));
        let mut shift_rng = shift.map(|s| ChaCha20Rng::seed_from_u64(s.seed));
        let mut acc = DomainAccum::new();
        for vi in 0..n {
            let (mut vol, labels) = render_volume(&mut geom_rng, d, raw.0, raw.1);
            if let (Some(spec), Some(rng)) = (shift, shift_rng.as_mut()) {
                apply_shift(&mut vol, spec, rng);
            }
            let id = format!("{domain}-{vi:04}");
            let samples = preprocess_volume(&vol, Some(&labels), 0, size, &id)?;
            acc.push_volume(&samples, &id);
        }
        Ok(acc)
    };

    let src = build("source", n_source, 0, None)?;
    let tgt = build("target", n_target, 1, Some(shift))?;

    let src_shape = (src.count, size.0, size.1);
    let tgt_shape = (tgt.count, size.0, size.1);
    let src_images = Array3::from_shape_vec(src_shape, src.images).unwrap();
    let src_labels = Array3::from_shape_vec(src_shape, src.labels).unwrap();
    let tgt_images = Array3::from_shape_vec(tgt_shape, tgt.images).unwrap();
    let tgt_labels = Array3::from_shape_vec(tgt_shape, tgt.labels).unwrap();

    let source = SliceDataset {
        meta: new_meta("source", src.count, size, None, geometry_seed, true, false),
        images: src_images,
        labels: Some(src_labels),
        eval_labels: None,
        volumes: src.volumes,
    };
    let target = SliceDataset {
        meta: new_meta("target", tgt.count, size, Some(*shift), geometry_seed, false, true),
        images: tgt_images,
        labels: None,
        eval_labels: Some(tgt_labels),
        volumes: tgt.volumes,
    };
    Ok(DomainDatasetPair { source, target })
}
