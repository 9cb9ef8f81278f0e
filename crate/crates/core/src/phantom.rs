//! Synthetic image pairs with known labels and a known deformation.
//!
//! The fixed image is a set of nested ellipsoidal regions, each with its own
//! intensity, plus Gaussian noise. The moving labels are the fixed labels
//! pushed through a smooth diffeomorphism (a sum of low-frequency sinusoidal
//! velocity modes integrated by scaling and squaring) by nearest-neighbour
//! lookup, and the moving image renders them with fresh noise. Rendering from
//! labels keeps both images free of partial-volume intensities.
//!
//! The regions are nested ellipsoidal shells repeated over a 3x3x3 lattice of
//! blobs with jittered centres and axes. Region boundaries are level sets of
//! the distance to the nearest blob in its own ellipsoidal metric, placed at
//! quantiles so every region holds the same number of voxels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::easr::{LabelMap, MAX_K};
use crate::error::{Error, Result};
use crate::par;
use crate::transform::{scaling_and_squaring, warp_labels, DisplacementField, SsSchedule};
use crate::volume::{Dims, VectorField, Volume};

const GEOMETRY_STREAM: u64 = 0;
const FIXED_NOISE_STREAM: u64 = 1;
const MOVING_NOISE_STREAM: u64 = 2;
/// Blobs per axis in the label lattice.
const BLOBS_PER_AXIS: usize = 3;
/// Blob centre jitter as a fraction of the lattice cell.
const CENTER_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub k: usize,
    pub intensity_means: Vec<f64>,
    pub noise_sigma: f64,
    /// Largest velocity magnitude in voxels.
    pub warp_amplitude: f64,
    /// Number of sinusoidal velocity modes.
    pub warp_smoothness: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims { nx: 64, ny: 64, nz: 64 },
            k: 3,
            intensity_means: vec![0.15, 0.5, 0.85],
            noise_sigma: 0.02,
            warp_amplitude: 4.0,
            warp_smoothness: 3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Evenly spaced means in `[0.1, 0.9]` for `k` regions.
    pub fn with_k(k: usize) -> Self {
        let means = if k == 1 {
            vec![0.5]
        } else {
            (0..k).map(|i| 0.1 + 0.8 * i as f64 / (k - 1) as f64).collect()
        };
        Self {
            k,
            intensity_means: means,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.k > 1 {
            let min_gap = self.intensity_means.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            if min_gap < 4.0 * self.noise_sigma {
                return Err(Error::InvalidSpec(format!(
                    "mean gap {min_gap} is below 4 x noise sigma {}",
                    self.noise_sigma
                )));
            }
        }
        Ok(())
    }

    /// Everything except the noise separability rule.
    fn validate_geometry(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.k == 0 || self.k > MAX_K {
            return bad(format!("k must be in 1..={MAX_K}, got {}", self.k));
        }
        if self.intensity_means.len() != self.k {
            return bad(format!("{} intensity means for k = {}", self.intensity_means.len(), self.k));
        }
        if self.intensity_means.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return bad("intensity means must lie in (0, 1)".into());
        }
        if self.intensity_means.windows(2).any(|w| w[1] <= w[0]) {
            return bad("intensity means must be strictly increasing".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let limit = self.dims.min_axis() as f64 / 8.0;
        if !(self.warp_amplitude >= 0.0 && self.warp_amplitude <= limit) {
            return bad(format!("warp amplitude must be in [0, {limit}], got {}", self.warp_amplitude));
        }
        if self.warp_amplitude > 0.0 && self.warp_smoothness == 0 {
            return bad("a non-zero warp needs at least one mode".into());
        }
        if self.dims.min_axis() < 8 {
            return bad("phantoms need at least 8 voxels per axis".into());
        }
        Ok(())
    }
}

/// A generated pair. Registering `moving` onto `fixed` should recover
/// `true_field`: `warp(moving, true_field)` is the clean fixed image up to
/// noise and the staircase of the nearest-neighbour label warp.
#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub labels_moving: LabelMap,
    pub labels_fixed: LabelMap,
    pub true_field: DisplacementField,
}

fn geometry_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(GEOMETRY_STREAM);
    rng
}

fn fixed_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> LabelMap {
    let per_axis = BLOBS_PER_AXIS;
    let jit = CENTER_JITTER;
    let dims = spec.dims;
    let n = dims.as_array();
    let mut blobs = Vec::new();
    for bz in 0..per_axis {
        for by in 0..per_axis {
            for bx in 0..per_axis {
                let b = [bx, by, bz];
                let cell = [0, 1, 2].map(|a| n[a] as f64 / per_axis as f64);
                let center: [f64; 3] = [0, 1, 2].map(|a| (b[a] as f64 + 0.5 + rng.gen_range(-jit..jit)) * cell[a] - 0.5);
                let semi: [f64; 3] = [0, 1, 2].map(|a| rng.gen_range(0.8..1.2) * cell[a]);
                blobs.push((center, semi));
            }
        }
    }
    let radius: Vec<f64> = (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let p = [x as f64, y as f64, z as f64];
            blobs
                .iter()
                .map(|(c, s)| (0..3).map(|a| ((p[a] - c[a]) / s[a]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut sorted = radius.clone();
    sorted.sort_by(f64::total_cmp);
    // thresholds[j] separates region k-1-j (inside) from the next one out.
    let k = spec.k;
    let thresholds: Vec<f64> = (1..k).map(|j| sorted[j * sorted.len() / k]).collect();
    let labels = radius
        .iter()
        .map(|&r| (k - 1 - thresholds.iter().filter(|&&t| r >= t).count()) as u16)
        .collect();
    LabelMap::new(dims, labels).expect("label count matches dims")
}

fn velocity(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> VectorField {
    let dims = spec.dims;
    if spec.warp_amplitude == 0.0 {
        return VectorField::zeros(dims);
    }
    let n = dims.as_array();
    let modes: Vec<([f64; 3], [f64; 3], f64)> = (0..spec.warp_smoothness)
        .map(|_| {
            let wave = [0, 1, 2].map(|a| rng.gen_range(1.0..2.0) * std::f64::consts::TAU / n[a] as f64);
            let dir = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            (wave, dir, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let v = VectorField::from_fn(dims, |x, y, z| {
        let mut out = [0.0; 3];
        for (wave, dir, phase) in &modes {
            let s = (wave[0] * x as f64 + wave[1] * y as f64 + wave[2] * z as f64 + phase).sin();
            for c in 0..3 {
                out[c] += dir[c] * s;
            }
        }
        out
    });
    let peak = v.max_norm();
    if peak == 0.0 {
        v
    } else {
        v.scaled(spec.warp_amplitude / peak)
    }
}

/// Clean image plus noise drawn slice by slice, so the result does not
/// depend on how slices are scheduled.
fn add_noise(clean: &[f64], dims: Dims, sigma: f64, seed: u64, stream: u64) -> Volume {
    let mut out = vec![0.0f32; clean.len()];
    let plane = dims.slice_len();
    par::for_each_chunk_mut(&mut out, plane, |z, slice| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stream << 32) | z as u64);
        let noise = Normal::new(0.0, sigma).expect("sigma validated");
        for (o, &c) in slice.iter_mut().zip(&clean[z * plane..(z + 1) * plane]) {
            let e = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *o = (c + e) as f32;
        }
    });
    Volume::new(dims, out).expect("finite phantom intensities")
}

/// Generates a pair from a validated spec.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    render(spec, spec.noise_sigma)
}

/// Same geometry and warp as `spec`, rendered at an arbitrary noise level.
/// The separability rule is not applied, so noise sweeps can go past it.
pub fn make_phantom_pair_with_noise(spec: &PhantomSpec, noise_sigma: f64) -> Result<PhantomPair> {
    spec.validate_geometry()?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidSpec(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
    }
    render(spec, noise_sigma)
}

fn render(spec: &PhantomSpec, sigma: f64) -> Result<PhantomPair> {
    let dims = spec.dims;
    let mut rng = geometry_rng(spec.seed);
    let labels_fixed = fixed_labels(spec, &mut rng);
    let v = velocity(spec, &mut rng);
    let sched = SsSchedule::default();
    let forward = scaling_and_squaring(&v, sched);
    let true_field = scaling_and_squaring(&v.scaled(-1.0), sched);

    let labels_moving = warp_labels(&labels_fixed, &forward)?;
    let clean = |l: &LabelMap| -> Vec<f64> { l.labels().iter().map(|&x| spec.intensity_means[x as usize]).collect() };
    Ok(PhantomPair {
        fixed: add_noise(&clean(&labels_fixed), dims, sigma, spec.seed, FIXED_NOISE_STREAM),
        moving: add_noise(&clean(&labels_moving), dims, sigma, spec.seed, MOVING_NOISE_STREAM),
        labels_moving,
        labels_fixed,
        true_field,
    })
}
