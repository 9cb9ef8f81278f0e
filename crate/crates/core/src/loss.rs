//! Registration objective: negated local normalized cross-correlation plus a
//! weighted diffusion regularizer, with its analytic gradient with respect to
//! the displacement field.
//!
//! Local NCC averages the windowed Pearson correlation over every voxel.
//! Windows are cubes of edge `2r + 1` clipped at the volume faces; a window
//! where either image has variance below `1e-10` contributes zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::transform::{warp_f64, DisplacementField};
use crate::volume::{Dims, GradStencil, VectorField, Volume};

pub const MAX_WINDOW_RADIUS: usize = 7;
/// Window variances below this are treated as flat.
pub const FLAT_VARIANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub window_radius: usize,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            window_radius: 4,
            alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn new(window_radius: usize, alpha: f64) -> Result<Self> {
        let cfg = Self { window_radius, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_WINDOW_RADIUS).contains(&self.window_radius) {
            return Err(Error::InvalidConfig(format!(
                "window radius must be in 1..={MAX_WINDOW_RADIUS}, got {}",
                self.window_radius
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        self.validate()?;
        if dims.min_axis() <= 2 * self.window_radius {
            return Err(Error::WindowTooLarge {
                radius: self.window_radius,
                dims,
            });
        }
        Ok(())
    }
}

/// Loss value split into its parts: `total = -sim + alpha * smo`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Local NCC between the fixed and the warped image.
    pub sim: f64,
    /// Mean squared forward-difference norm of the displacement.
    pub smo: f64,
    pub total: f64,
}

impl LossReport {
    fn new(sim: f64, smo: f64, alpha: f64) -> Self {
        Self {
            sim,
            smo,
            total: -sim + alpha * smo,
        }
    }
}

/// Sums of `data` over the clipped `(2r+1)^3` box around every voxel.
fn box_sum(dims: Dims, data: &[f64], r: usize) -> Vec<f64> {
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let plane = dims.slice_len();
    let mut xy = vec![0.0; data.len()];
    par::for_each_chunk_mut(&mut xy, plane, |z, out| {
        let src = &data[z * plane..(z + 1) * plane];
        let mut rows = vec![0.0; plane];
        for y in 0..ny {
            sliding_sum(&src[y * nx..(y + 1) * nx], r, &mut rows[y * nx..(y + 1) * nx]);
        }
        let mut col = vec![0.0; ny];
        let mut acc = vec![0.0; ny];
        for x in 0..nx {
            for y in 0..ny {
                col[y] = rows[x + nx * y];
            }
            sliding_sum(&col, r, &mut acc);
            for y in 0..ny {
                out[x + nx * y] = acc[y];
            }
        }
    });
    let mut out = vec![0.0; data.len()];
    par::for_each_chunk_mut(&mut out, plane, |z, o| {
        for zz in z.saturating_sub(r)..(z + r + 1).min(nz) {
            for (a, b) in o.iter_mut().zip(&xy[zz * plane..(zz + 1) * plane]) {
                *a += b;
            }
        }
    });
    out
}

/// Running window sum over one line.
fn sliding_sum(src: &[f64], r: usize, out: &mut [f64]) {
    let n = src.len();
    let mut s: f64 = src[..=r.min(n - 1)].iter().sum();
    for i in 0..n {
        out[i] = s;
        if i + r + 1 < n {
            s += src[i + r + 1];
        }
        if i >= r {
            s -= src[i - r];
        }
    }
}

/// Number of voxels in the clipped window around each voxel.
fn window_counts(dims: Dims, r: usize) -> Vec<f64> {
    let len = |p: usize, n: usize| ((p + r).min(n - 1) - p.saturating_sub(r) + 1) as f64;
    (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            len(x, dims.nx) * len(y, dims.ny) * len(z, dims.nz)
        })
        .collect()
}

/// Box statistics of the fixed image, reused across evaluations.
struct FixedStats {
    dims: Dims,
    r: usize,
    values: Vec<f64>,
    count: Vec<f64>,
    sum: Vec<f64>,
    /// Sum of squared deviations from the window mean.
    var_sum: Vec<f64>,
}

impl FixedStats {
    fn new(fixed: &[f64], dims: Dims, r: usize) -> Self {
        let count = window_counts(dims, r);
        let sum = box_sum(dims, fixed, r);
        let sq: Vec<f64> = fixed.iter().map(|v| v * v).collect();
        let sum_sq = box_sum(dims, &sq, r);
        let var_sum = (0..fixed.len()).map(|i| sum_sq[i] - sum[i] * sum[i] / count[i]).collect();
        Self {
            dims,
            r,
            values: fixed.to_vec(),
            count,
            sum,
            var_sum,
        }
    }

    /// Per-window correlations plus the terms needed for the gradient.
    fn windows(&self, warped: &[f64]) -> Windows {
        let (dims, r) = (self.dims, self.r);
        let sum_j = box_sum(dims, warped, r);
        let sq: Vec<f64> = warped.iter().map(|v| v * v).collect();
        let sum_jj = box_sum(dims, &sq, r);
        let prod: Vec<f64> = warped.iter().zip(&self.values).map(|(j, i)| i * j).collect();
        let sum_ij = box_sum(dims, &prod, r);
        let n = dims.len();
        let mut cc = vec![0.0; n];
        let mut var_j = vec![0.0; n];
        let mut active = vec![false; n];
        for x in 0..n {
            let c = self.count[x];
            let vi = self.var_sum[x];
            let vj = sum_jj[x] - sum_j[x] * sum_j[x] / c;
            var_j[x] = vj;
            if vi / c < FLAT_VARIANCE || vj / c < FLAT_VARIANCE {
                continue;
            }
            let cov = sum_ij[x] - self.sum[x] * sum_j[x] / c;
            cc[x] = cov / (vi * vj).sqrt();
            active[x] = true;
        }
        Windows {
            cc,
            sum_j,
            var_j,
            active,
        }
    }

    fn ncc(&self, warped: &[f64]) -> f64 {
        let w = self.windows(warped);
        ordered_mean(&w.cc)
    }

    /// NCC and its derivative with respect to every warped intensity.
    fn ncc_and_grad(&self, warped: &[f64]) -> (f64, Vec<f64>) {
        let (dims, r) = (self.dims, self.r);
        let w = self.windows(warped);
        let n = dims.len();
        let mut a = vec![0.0; n];
        let mut a_mean_i = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut b_mean_j = vec![0.0; n];
        for x in 0..n {
            if !w.active[x] {
                continue;
            }
            let c = self.count[x];
            a[x] = 1.0 / (self.var_sum[x] * w.var_j[x]).sqrt();
            b[x] = w.cc[x] / w.var_j[x];
            a_mean_i[x] = a[x] * self.sum[x] / c;
            b_mean_j[x] = b[x] * w.sum_j[x] / c;
        }
        let (ba, bai, bb, bbj) = (
            box_sum(dims, &a, r),
            box_sum(dims, &a_mean_i, r),
            box_sum(dims, &b, r),
            box_sum(dims, &b_mean_j, r),
        );
        let inv_n = 1.0 / n as f64;
        let grad = (0..n)
            .map(|y| inv_n * (self.values[y] * ba[y] - bai[y] - warped[y] * bb[y] + bbj[y]))
            .collect();
        (ordered_mean(&w.cc), grad)
    }
}

struct Windows {
    cc: Vec<f64>,
    sum_j: Vec<f64>,
    var_j: Vec<f64>,
    active: Vec<bool>,
}

fn ordered_mean(v: &[f64]) -> f64 {
    par::sum_chunks(v.len(), 8192, |r| v[r].iter().sum()) / v.len() as f64
}

/// Mean windowed correlation between two images of equal shape.
pub fn local_ncc(fixed: &Volume, warped: &Volume, cfg: &LossConfig) -> Result<f64> {
    let dims = fixed.dims();
    dims.ensure_same(&warped.dims())?;
    cfg.check_dims(dims)?;
    Ok(FixedStats::new(&fixed.to_f64(), dims, cfg.window_radius).ncc(&warped.to_f64()))
}

/// Mean over voxels of the squared forward differences of `phi` along each
/// axis; differences that would leave the grid count as zero.
pub fn smoothness(phi: &DisplacementField) -> f64 {
    let dims = phi.dims();
    let u = phi.data();
    let strides = [1, dims.nx, dims.slice_len()];
    let n = dims.as_array();
    let total = par::sum_chunks(dims.len(), dims.slice_len(), |range| {
        let mut acc = 0.0;
        for i in range {
            let (x, y, z) = dims.coords(i);
            let p = [x, y, z];
            for a in 0..3 {
                if p[a] + 1 < n[a] {
                    let (v, w) = (u[i], u[i + strides[a]]);
                    acc += (w[0] - v[0]).powi(2) + (w[1] - v[1]).powi(2) + (w[2] - v[2]).powi(2);
                }
            }
        }
        acc
    });
    total / dims.len() as f64
}

fn smoothness_grad(phi: &DisplacementField, scale: f64, out: &mut [[f64; 3]]) {
    let dims = phi.dims();
    let u = phi.data();
    let strides = [1, dims.nx, dims.slice_len()];
    let n = dims.as_array();
    let k = 2.0 * scale / dims.len() as f64;
    par::for_each_chunk_mut(out, dims.slice_len(), |z, slice| {
        let base = z * dims.slice_len();
        for (j, g) in slice.iter_mut().enumerate() {
            let i = base + j;
            let (x, y, _) = dims.coords(i);
            let p = [x, y, z];
            for a in 0..3 {
                let s = strides[a];
                for c in 0..3 {
                    let mut d = 0.0;
                    if p[a] > 0 {
                        d += u[i][c] - u[i - s][c];
                    }
                    if p[a] + 1 < n[a] {
                        d -= u[i + s][c] - u[i][c];
                    }
                    g[c] += k * d;
                }
            }
        }
    });
}

/// The full objective for one fixed/moving pair. Fixed-image window
/// statistics are computed once and shared by every evaluation.
pub struct Objective<'a> {
    moving: &'a Volume,
    stats: FixedStats,
    cfg: LossConfig,
}

impl<'a> Objective<'a> {
    pub fn new(fixed: &Volume, moving: &'a Volume, cfg: LossConfig) -> Result<Self> {
        let dims = fixed.dims();
        dims.ensure_same(&moving.dims())?;
        cfg.check_dims(dims)?;
        Ok(Self {
            moving,
            stats: FixedStats::new(&fixed.to_f64(), dims, cfg.window_radius),
            cfg,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn dims(&self) -> Dims {
        self.stats.dims
    }

    pub fn evaluate(&self, phi: &DisplacementField) -> Result<LossReport> {
        self.dims().ensure_same(&phi.dims())?;
        let warped = warp_f64(self.moving, phi);
        Ok(LossReport::new(self.stats.ncc(&warped), smoothness(phi), self.cfg.alpha))
    }

    /// Loss at `phi` and its gradient with respect to every displacement
    /// component.
    pub fn value_and_gradient(&self, phi: &DisplacementField) -> Result<(LossReport, VectorField)> {
        let dims = self.dims();
        dims.ensure_same(&phi.dims())?;
        let u = phi.data();
        let data = self.moving.data();
        // Warped values and moving-image gradients at the sample points.
        let mut sampled = vec![(0.0, [0.0; 3]); dims.len()];
        par::for_each_chunk_mut(&mut sampled, dims.slice_len(), |z, slice| {
            let base = z * dims.slice_len();
            for (j, s) in slice.iter_mut().enumerate() {
                let i = base + j;
                let (x, y, _) = dims.coords(i);
                let p = [x as f64 + u[i][0], y as f64 + u[i][1], z as f64 + u[i][2]];
                *s = GradStencil::at(dims, p).value_and_grad(data);
            }
        });
        let warped: Vec<f64> = sampled.iter().map(|s| s.0).collect();
        let (sim, d_sim) = self.stats.ncc_and_grad(&warped);
        let mut grad: Vec<[f64; 3]> = sampled
            .iter()
            .zip(&d_sim)
            .map(|((_, g), &d)| [-d * g[0], -d * g[1], -d * g[2]])
            .collect();
        if self.cfg.alpha != 0.0 {
            smoothness_grad(phi, self.cfg.alpha, &mut grad);
        }
        let report = LossReport::new(sim, smoothness(phi), self.cfg.alpha);
        Ok((report, VectorField::new(dims, grad)?))
    }
}

/// `-local_ncc(fixed, warp(moving, phi)) + alpha * smoothness(phi)`.
pub fn total_loss(fixed: &Volume, moving: &Volume, phi: &DisplacementField, cfg: &LossConfig) -> Result<LossReport> {
    Objective::new(fixed, moving, *cfg)?.evaluate(phi)
}

/// Gradient of [`total_loss`] with respect to the displacement field.
pub fn loss_gradient(fixed: &Volume, moving: &Volume, phi: &DisplacementField, cfg: &LossConfig) -> Result<VectorField> {
    Ok(Objective::new(fixed, moving, *cfg)?.value_and_gradient(phi)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{identity_field, warp};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<[f64; 4]> = (0..4)
            .map(|_| [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.0..6.0)])
            .collect();
        Volume::from_fn(dims, |x, y, z| {
            let s: f64 = waves
                .iter()
                .map(|w| (w[0] * x as f64 + w[1] * y as f64 + w[2] * z as f64 + w[3]).sin())
                .sum();
            (0.5 + 0.12 * s) as f32
        })
    }

    fn random_volume(dims: Dims, rng: &mut ChaCha8Rng) -> Volume {
        Volume::new(dims, (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    /// Windowed correlation straight from the definition.
    fn brute_ncc(a: &Volume, b: &Volume, r: usize) -> f64 {
        let d = a.dims();
        let mut total = 0.0;
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let mut pts = Vec::new();
            for zz in z.saturating_sub(r)..=(z + r).min(d.nz - 1) {
                for yy in y.saturating_sub(r)..=(y + r).min(d.ny - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(d.nx - 1) {
                        pts.push((a.get(xx, yy, zz) as f64, b.get(xx, yy, zz) as f64));
                    }
                }
            }
            let n = pts.len() as f64;
            let ma = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let va: f64 = pts.iter().map(|p| (p.0 - ma).powi(2)).sum();
            let vb: f64 = pts.iter().map(|p| (p.1 - mb).powi(2)).sum();
            if va / n < FLAT_VARIANCE || vb / n < FLAT_VARIANCE {
                continue;
            }
            let c: f64 = pts.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
            total += c / (va * vb).sqrt();
        }
        total / d.len() as f64
    }

    fn brute_smoothness(f: &VectorField) -> f64 {
        let d = f.dims();
        let mut total = 0.0;
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let u = f.get(x, y, z);
                    let mut add = |w: [f64; 3]| {
                        total += (0..3).map(|c| (w[c] - u[c]).powi(2)).sum::<f64>();
                    };
                    if x + 1 < d.nx {
                        add(f.get(x + 1, y, z));
                    }
                    if y + 1 < d.ny {
                        add(f.get(x, y + 1, z));
                    }
                    if z + 1 < d.nz {
                        add(f.get(x, y, z + 1));
                    }
                }
            }
        }
        total / d.len() as f64
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(0, 1.0).is_err());
        assert!(LossConfig::new(8, 1.0).is_err());
        assert!(LossConfig::new(3, -0.1).is_err());
        assert!(LossConfig::new(3, f64::NAN).is_err());
        let v = textured(Dims::cube(8).unwrap(), 1);
        let err = local_ncc(&v, &v, &LossConfig::new(4, 1.0).unwrap());
        assert!(matches!(err, Err(Error::WindowTooLarge { radius: 4, .. })));
        assert!(local_ncc(&v, &v, &LossConfig::new(3, 1.0).unwrap()).is_ok());
    }

    #[test]
    fn box_sums_match_brute_force() {
        let dims = Dims::new(9, 7, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 1..4 {
            let fast = box_sum(dims, &data, r);
            for i in 0..dims.len() {
                let (x, y, z) = dims.coords(i);
                let mut s = 0.0;
                for zz in z.saturating_sub(r)..=(z + r).min(dims.nz - 1) {
                    for yy in y.saturating_sub(r)..=(y + r).min(dims.ny - 1) {
                        for xx in x.saturating_sub(r)..=(x + r).min(dims.nx - 1) {
                            s += data[dims.index(xx, yy, zz)];
                        }
                    }
                }
                assert_abs_diff_eq!(fast[i], s, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ncc_reference_cases() {
        let dims = Dims::cube(12).unwrap();
        let cfg = LossConfig::new(2, 1.0).unwrap();
        let f = textured(dims, 3);
        assert_abs_diff_eq!(local_ncc(&f, &f, &cfg).unwrap(), 1.0, epsilon = 1e-6);
        let affine = f.map(|v| 2.5 * v + 0.7);
        assert_abs_diff_eq!(local_ncc(&f, &affine, &cfg).unwrap(), 1.0, epsilon = 1e-6);
        let neg = f.map(|v| -v);
        assert_abs_diff_eq!(local_ncc(&f, &neg, &cfg).unwrap(), -1.0, epsilon = 1e-6);
        let flat = Volume::filled(dims, 0.3);
        assert_eq!(local_ncc(&f, &flat, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn ncc_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = Dims::new(9, 8, 7).unwrap();
        for r in 1..=3 {
            let a = random_volume(dims, &mut rng);
            let b = random_volume(dims, &mut rng);
            let cfg = LossConfig::new(r, 0.0).unwrap();
            assert_abs_diff_eq!(local_ncc(&a, &b, &cfg).unwrap(), brute_ncc(&a, &b, r), epsilon = 1e-10);
        }
    }

    #[test]
    fn smoothness_cases() {
        let dims = Dims::new(6, 5, 4).unwrap();
        assert_eq!(smoothness(&VectorField::constant(dims, [1.0, 2.0, 3.0])), 0.0);
        let ramp = VectorField::from_fn(dims, |x, _, _| [x as f64, 0.0, 0.0]);
        assert_abs_diff_eq!(smoothness(&ramp), (5.0 * 5.0 * 4.0) / (6.0 * 5.0 * 4.0), epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = VectorField::from_fn(dims, |_, _, _| [0.0; 3]);
        let f = VectorField::new(dims, f.data().iter().map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap();
        assert_abs_diff_eq!(smoothness(&f), brute_smoothness(&f), epsilon = 1e-10);
        assert_abs_diff_eq!(smoothness(&f.scaled(3.0)), 9.0 * smoothness(&f), epsilon = 1e-9);
    }

    #[test]
    fn total_loss_cases() {
        let dims = Dims::cube(12).unwrap();
        let f = textured(dims, 6);
        let id = identity_field(dims);
        for alpha in [0.0, 3.0] {
            let cfg = LossConfig::new(2, alpha).unwrap();
            let r = total_loss(&f, &f, &id, &cfg).unwrap();
            assert_abs_diff_eq!(r.total, -1.0, epsilon = 1e-6);
        }
        let phi = VectorField::from_fn(dims, |x, y, _| [0.1 * (y as f64).sin(), 0.05 * x as f64, 0.0]);
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.0, 1.0, 10.0, 100.0] {
            let r = total_loss(&f, &f, &phi, &LossConfig::new(2, alpha).unwrap()).unwrap();
            assert!((r.total - (-r.sim + alpha * r.smo)).abs() < 1e-12);
            assert!(r.total > last);
            last = r.total;
        }
        // The warp used inside the loss agrees with the public warp.
        let w = warp(&f, &phi).unwrap();
        let direct = local_ncc(&f, &w, &LossConfig::new(2, 0.0).unwrap()).unwrap();
        let r = total_loss(&f, &f, &phi, &LossConfig::new(2, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(r.sim, direct, epsilon = 1e-5);
    }

    #[test]
    fn gradient_vanishes_at_the_optimum() {
        let dims = Dims::cube(12).unwrap();
        let f = textured(dims, 7);
        let g = loss_gradient(&f, &f, &identity_field(dims), &LossConfig::new(2, 1.0).unwrap()).unwrap();
        assert!(g.max_norm() < 1e-6, "{}", g.max_norm());
    }

    #[test]
    fn gradient_is_linear_in_alpha() {
        let dims = Dims::cube(10).unwrap();
        let f = textured(dims, 8);
        let m = textured(dims, 9);
        let phi = VectorField::from_fn(dims, |x, y, z| [0.4 + 0.1 * (y as f64 * 0.7).sin(), 0.5, 0.45 + 0.05 * ((x + z) as f64).cos()]);
        let grad = |alpha| loss_gradient(&f, &m, &phi, &LossConfig::new(2, alpha).unwrap()).unwrap();
        let (g0, g1, g2) = (grad(0.0), grad(1.0), grad(2.0));
        for i in 0..dims.len() {
            for c in 0..3 {
                let lhs = g2.data()[i][c] - g0.data()[i][c];
                let rhs = 2.0 * (g1.data()[i][c] - g0.data()[i][c]);
                assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }

    /// Displacements whose sample points stay at least 0.3 voxel away from
    /// lattice planes, where trilinear interpolation has kinks.
    fn off_lattice_field(dims: Dims, rng: &mut ChaCha8Rng) -> VectorField {
        let base = [rng.gen_range(-2.0..2.0f64).round(), rng.gen_range(-2.0..2.0f64).round(), 0.0];
        let freq: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        VectorField::from_fn(dims, |x, y, z| {
            let s = [(freq[0] * y as f64).sin(), (freq[1] * z as f64).cos(), (freq[2] * x as f64).sin()];
            [0, 1, 2].map(|c| base[c] + 0.5 + 0.2 * s[c])
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = Dims::new(14, 13, 12).unwrap();
        let h = 1e-3;
        for instance in 0..20 {
            let f = textured(dims, 100 + instance);
            let m = textured(dims, 200 + instance);
            let phi = off_lattice_field(dims, &mut rng);
            let cfg = LossConfig::new(rng.gen_range(1..=3), rng.gen_range(0.0..2.0)).unwrap();
            let obj = Objective::new(&f, &m, cfg).unwrap();
            let (_, grad) = obj.value_and_gradient(&phi).unwrap();
            for _ in 0..200 {
                let i = rng.gen_range(0..dims.len());
                let c = rng.gen_range(0..3);
                let bumped = |delta: f64| {
                    let mut data = phi.data().to_vec();
                    data[i][c] += delta;
                    obj.evaluate(&VectorField::new(dims, data).unwrap()).unwrap().total
                };
                let numeric = (bumped(h) - bumped(-h)) / (2.0 * h);
                let analytic = grad.data()[i][c];
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                assert!(rel < 1e-3, "instance {instance} voxel {i} comp {c}: {analytic} vs {numeric}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ncc_is_symmetric_bounded_and_affine_invariant(seed in 0u64..10_000, scale in 0.1f32..5.0, shift in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(7, 6, 5).unwrap();
            let a = random_volume(dims, &mut rng);
            let b = random_volume(dims, &mut rng);
            let cfg = LossConfig::new(1, 0.0).unwrap();
            let ab = local_ncc(&a, &b, &cfg).unwrap();
            prop_assert!((ab - local_ncc(&b, &a, &cfg).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
            let b2 = b.map(|v| scale * v + shift);
            prop_assert!((ab - local_ncc(&a, &b2, &cfg).unwrap()).abs() < 1e-6);
        }
    }
}
