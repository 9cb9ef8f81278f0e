//! Intensity-based decomposition of an image pair into corresponding ROIs.
//!
//! Both volumes are min-max normalized, pooled (moving first, then fixed) and
//! described by one Gaussian mixture. Each voxel is labelled with its most
//! responsible component, and every label masks out one ROI per image.

mod gmm;
mod kselect;

pub use gmm::{
    em_step, fit_gmm, fit_gmm_traced, initial_model, responsibilities, FitOptions, GmmInput, GmmModel,
    Responsibilities, MAX_K, MIN_EFFECTIVE_COUNT, VARIANCE_FLOOR,
};
pub use kselect::{histogram_peak_count, select_k, KScan, KScore, ScoreKind};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{minmax_normalized_f64, Dims, Volume};

/// Per-voxel component labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(dims: Dims, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::LengthMismatch {
                expected: dims.len(),
                got: labels.len(),
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn from_fn<F>(dims: Dims, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> u16 + Sync + Send,
    {
        let mut labels = vec![0u16; dims.len()];
        par::for_each_chunk_mut(&mut labels, dims.slice_len(), |z, s| {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    s[x + dims.nx * y] = f(x, y, z);
                }
            }
        });
        Self { dims, labels }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.dims.index(x, y, z)]
    }

    /// Largest label value present.
    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// One masked volume per label, all sharing the source dims.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    rois: Vec<Volume>,
}

impl RoiSet {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn get(&self, i: usize) -> &Volume {
        &self.rois[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Volume> {
        self.rois.iter()
    }

    pub fn into_vec(self) -> Vec<Volume> {
        self.rois
    }
}

/// Normalized moving samples followed by normalized fixed samples, plus the
/// background mask when a threshold is set.
pub fn pooled_input(mov: &Volume, fix: &Volume, background_threshold: Option<f64>) -> Result<GmmInput> {
    mov.dims().ensure_same(&fix.dims())?;
    let mut samples = minmax_normalized_f64(mov)?;
    samples.extend(minmax_normalized_f64(fix)?);
    let mask = background_threshold.map(|t| samples.iter().map(|&s| s > t).collect());
    GmmInput::new(samples, mask)
}

/// Fits one mixture to the pooled normalized intensities of both images.
pub fn fit_gmm_joint(mov: &Volume, fix: &Volume, k: usize, opts: &FitOptions) -> Result<GmmModel> {
    if k == 0 || k > MAX_K {
        return Err(Error::InvalidConfig(format!("k must be in 1..={MAX_K}, got {k}")));
    }
    let input = pooled_input(mov, fix, opts.background_threshold)?;
    fit_gmm(&input, k, opts)
}

/// Hard labels: the most responsible component for each voxel of `v`, after
/// normalizing `v` by its own range. With a background threshold, voxels at
/// or below it get the lowest-mean component.
pub fn assign_labels(model: &GmmModel, v: &Volume, background_threshold: Option<f64>) -> Result<LabelMap> {
    let norm = minmax_normalized_f64(v)?;
    Ok(label_samples(model, v.dims(), &norm, background_threshold))
}

fn label_samples(model: &GmmModel, dims: Dims, norm: &[f64], background_threshold: Option<f64>) -> LabelMap {
    let mut labels = vec![0u16; norm.len()];
    par::for_each_chunk_mut(&mut labels, dims.slice_len(), |z, out| {
        let base = z * dims.slice_len();
        for (i, l) in out.iter_mut().enumerate() {
            let x = norm[base + i];
            *l = match background_threshold {
                Some(t) if x <= t => 0,
                _ => model.most_responsible(x) as u16,
            };
        }
    });
    LabelMap { dims, labels }
}

/// Labels for the pooled `2N` samples, split back into the moving half and
/// the fixed half.
pub fn assign_joint_labels(
    model: &GmmModel,
    mov: &Volume,
    fix: &Volume,
    background_threshold: Option<f64>,
) -> Result<(LabelMap, LabelMap)> {
    let input = pooled_input(mov, fix, None)?;
    let n = mov.dims().len();
    let (m, f) = input.samples().split_at(n);
    Ok((
        label_samples(model, mov.dims(), m, background_threshold),
        label_samples(model, fix.dims(), f, background_threshold),
    ))
}

/// Soft memberships of every voxel of `v` (normalized by its own range).
pub fn volume_responsibilities(model: &GmmModel, v: &Volume) -> Result<Responsibilities> {
    Ok(responsibilities(model, &minmax_normalized_f64(v)?))
}

/// Splits `v` into `k` masked volumes: ROI `i` keeps the voxels labelled `i`
/// and zeroes the rest.
pub fn extract_rois(v: &Volume, labels: &LabelMap, k: usize) -> Result<RoiSet> {
    v.dims().ensure_same(&labels.dims())?;
    if let Some(&bad) = labels.labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidConfig(format!("label {bad} out of range for k = {k}")));
    }
    let rois = (0..k)
        .map(|i| {
            let data = v
                .data()
                .iter()
                .zip(&labels.labels)
                .map(|(&x, &l)| if l as usize == i { x } else { 0.0 })
                .collect();
            Volume::new(v.dims(), data)
        })
        .collect::<Result<_>>()?;
    Ok(RoiSet { rois })
}
