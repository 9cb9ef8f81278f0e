//! Backward warping, field composition, scaling-and-squaring integration of
//! stationary velocities, and Jacobian determinants.

use serde::{Deserialize, Serialize};

use crate::easr::LabelMap;
use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Dims, Stencil, VectorField, Volume};

/// Displacement `u` of the map `x -> x + u(x)` over the fixed-image grid.
pub type DisplacementField = VectorField;
/// Stationary velocity integrated by [`scaling_and_squaring`].
pub type VelocityField = VectorField;

pub const MAX_SQUARINGS: u32 = 12;

/// Number of squaring steps; the velocity is first divided by `2^steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct SsSchedule(u32);

impl SsSchedule {
    pub fn new(steps: u32) -> Result<Self> {
        if steps > MAX_SQUARINGS {
            return Err(Error::InvalidConfig(format!(
                "squaring steps must be at most {MAX_SQUARINGS}, got {steps}"
            )));
        }
        Ok(Self(steps))
    }

    pub fn steps(self) -> u32 {
        self.0
    }
}

impl Default for SsSchedule {
    fn default() -> Self {
        Self(7)
    }
}

impl TryFrom<u32> for SsSchedule {
    type Error = Error;
    fn try_from(steps: u32) -> Result<Self> {
        Self::new(steps)
    }
}

impl From<SsSchedule> for u32 {
    fn from(s: SsSchedule) -> u32 {
        s.0
    }
}

pub fn identity_field(dims: Dims) -> DisplacementField {
    VectorField::zeros(dims)
}

fn sample_point(dims: Dims, i: usize, u: [f64; 3]) -> [f64; 3] {
    let (x, y, z) = dims.coords(i);
    [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
}

/// Warped intensities at full precision.
pub(crate) fn warp_f64(moving: &Volume, phi: &DisplacementField) -> Vec<f64> {
    let dims = moving.dims();
    let u = phi.data();
    let data = moving.data();
    let mut out = vec![0.0; dims.len()];
    par::for_each_chunk_mut(&mut out, dims.slice_len(), |z, slice| {
        let base = z * dims.slice_len();
        for (j, o) in slice.iter_mut().enumerate() {
            let i = base + j;
            *o = Stencil::at(dims, sample_point(dims, i, u[i])).apply_f32(data);
        }
    });
    out
}

/// `out(x) = moving(x + u(x))` with clamp-to-edge trilinear sampling.
pub fn warp(moving: &Volume, phi: &DisplacementField) -> Result<Volume> {
    moving.dims().ensure_same(&phi.dims())?;
    Ok(Volume::from_f64(moving.dims(), &warp_f64(moving, phi)))
}

/// Nearest-neighbour warp of a label map; sample points are clamped to the grid.
pub fn warp_labels(labels: &LabelMap, phi: &DisplacementField) -> Result<LabelMap> {
    let dims = labels.dims();
    dims.ensure_same(&phi.dims())?;
    let n = dims.as_array();
    let u = phi.data();
    Ok(LabelMap::from_fn(dims, |x, y, z| {
        let d = u[dims.index(x, y, z)];
        let c: Vec<usize> = [x, y, z]
            .iter()
            .enumerate()
            .map(|(a, &p)| (p as f64 + d[a]).round().clamp(0.0, (n[a] - 1) as f64) as usize)
            .collect();
        labels.get(c[0], c[1], c[2])
    }))
}

fn compose_into(outer: &[[f64; 3]], inner: &[[f64; 3]], dims: Dims, out: &mut [[f64; 3]]) {
    par::for_each_chunk_mut(out, dims.slice_len(), |z, slice| {
        let base = z * dims.slice_len();
        for (j, o) in slice.iter_mut().enumerate() {
            let i = base + j;
            let ui = inner[i];
            let s = Stencil::at(dims, sample_point(dims, i, ui)).apply_vec(outer);
            *o = [ui[0] + s[0], ui[1] + s[1], ui[2] + s[2]];
        }
    });
}

/// `outer(inner(x))`: `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    let dims = outer.dims();
    dims.ensure_same(&inner.dims())?;
    let mut out = VectorField::zeros(dims);
    compose_into(outer.data(), inner.data(), dims, out.data_mut());
    Ok(out)
}

/// Exponential of a stationary velocity: `u = v / 2^T`, then `T` squarings
/// `phi <- phi o phi`.
pub fn scaling_and_squaring(v: &VelocityField, sched: SsSchedule) -> DisplacementField {
    let dims = v.dims();
    let mut cur = v.scaled(1.0 / f64::powi(2.0, sched.steps() as i32));
    let mut next = VectorField::zeros(dims);
    for _ in 0..sched.steps() {
        compose_into(cur.data(), cur.data(), dims, next.data_mut());
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// `det(I + grad u)` with central differences inside and one-sided
/// differences on the faces.
pub fn jacobian_determinant(phi: &DisplacementField) -> Result<Volume> {
    Ok(Volume::from_f64(phi.dims(), &jacobian_determinant_f64(phi)?))
}

pub(crate) fn jacobian_determinant_f64(phi: &DisplacementField) -> Result<Vec<f64>> {
    let dims = phi.dims();
    if dims.min_axis() < 3 {
        return Err(Error::TooSmall(format!(
            "jacobian needs at least 3 voxels per axis, got {}x{}x{}",
            dims.nx, dims.ny, dims.nz
        )));
    }
    let u = phi.data();
    let n = dims.as_array();
    let strides = [1, dims.nx, dims.slice_len()];
    let mut det = vec![0.0f64; dims.len()];
    par::for_each_chunk_mut(&mut det, dims.slice_len(), |z, slice| {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.index(x, y, z);
                let p = [x, y, z];
                // m[c][a] = d u_c / d x_a
                let mut m = [[0.0f64; 3]; 3];
                for a in 0..3 {
                    let s = strides[a];
                    let (lo, hi, h) = if p[a] == 0 {
                        (i, i + s, 1.0)
                    } else if p[a] + 1 == n[a] {
                        (i - s, i, 1.0)
                    } else {
                        (i - s, i + s, 2.0)
                    };
                    for (c, row) in m.iter_mut().enumerate() {
                        row[a] = (u[hi][c] - u[lo][c]) / h;
                    }
                }
                for (c, row) in m.iter_mut().enumerate() {
                    row[c] += 1.0;
                }
                slice[x + dims.nx * y] = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            }
        }
    });
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::folding_fraction;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: Dims) -> Volume {
        Volume::from_fn(dims, |x, _, _| x as f32)
    }

    /// Sum of three plane waves with between a quarter and `max_cycles`
    /// periods across each axis, scaled to the given peak norm.
    fn smooth_field(dims: Dims, peak: f64, max_cycles: f64, seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.as_array();
        let modes: Vec<([f64; 3], [f64; 3], f64)> = (0..3)
            .map(|_| {
                let freq = [0, 1, 2].map(|a| rng.gen_range(0.25..max_cycles) * std::f64::consts::TAU / n[a] as f64);
                let amp = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                (freq, amp, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let f = VectorField::from_fn(dims, |x, y, z| {
            let mut v = [0.0; 3];
            for (freq, amp, phase) in &modes {
                let s = (freq[0] * x as f64 + freq[1] * y as f64 + freq[2] * z as f64 + phase).sin();
                for c in 0..3 {
                    v[c] += amp[c] * s;
                }
            }
            v
        });
        f.scaled(peak / f.max_norm())
    }

    fn interior_max_diff(a: &VectorField, b: &VectorField, margin: usize) -> f64 {
        let d = a.dims();
        let mut worst = 0.0f64;
        for z in margin..d.nz - margin {
            for y in margin..d.ny - margin {
                for x in margin..d.nx - margin {
                    let (p, q) = (a.get(x, y, z), b.get(x, y, z));
                    for c in 0..3 {
                        worst = worst.max((p[c] - q[c]).abs());
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn schedule_bounds() {
        assert_eq!(SsSchedule::default().steps(), 7);
        assert!(SsSchedule::new(12).is_ok());
        assert!(SsSchedule::new(13).is_err());
        assert!(serde_json::from_str::<SsSchedule>("13").is_err());
        assert_eq!(serde_json::to_string(&SsSchedule::default()).unwrap(), "7");
    }

    #[test]
    fn identity_warp_is_exact() {
        let dims = Dims::new(6, 5, 4).unwrap();
        let v = Volume::from_fn(dims, |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.37);
        assert_eq!(warp(&v, &identity_field(dims)).unwrap(), v);
        let det = jacobian_determinant(&identity_field(dims)).unwrap();
        assert!(det.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn shifted_ramp() {
        let dims = Dims::cube(8).unwrap();
        let out = warp(&ramp(dims), &VectorField::constant(dims, [1.0, 0.0, 0.0])).unwrap();
        for x in 0..8 {
            assert_eq!(out.get(x, 3, 3), (x + 1).min(7) as f32);
        }
        let half = warp(&ramp(dims), &VectorField::constant(dims, [0.5, 0.0, 0.0])).unwrap();
        for x in 0..7 {
            assert_eq!(half.get(x, 2, 5), x as f32 + 0.5);
        }
        let other = Dims::cube(7).unwrap();
        assert!(matches!(warp(&ramp(dims), &identity_field(other)), Err(Error::ShapeMismatch(..))));
    }

    #[test]
    fn label_warp_rounds_to_nearest() {
        let dims = Dims::cube(6).unwrap();
        let l = LabelMap::from_fn(dims, |x, _, _| x as u16);
        let out = warp_labels(&l, &VectorField::constant(dims, [1.4, 0.0, -0.2])).unwrap();
        for x in 0..6 {
            assert_eq!(out.get(x, 1, 1), (x + 1).min(5) as u16);
        }
    }

    #[test]
    fn composition_identity_and_translation() {
        let dims = Dims::cube(10).unwrap();
        let f = smooth_field(dims, 1.5, 2.0, 1);
        let id = identity_field(dims);
        assert_eq!(compose(&f, &id).unwrap(), f);
        assert_eq!(compose(&id, &f).unwrap(), f);
        let a = VectorField::constant(dims, [1.0, -0.5, 0.25]);
        let b = VectorField::constant(dims, [0.5, 1.0, 0.0]);
        let ab = compose(&b, &a).unwrap();
        for z in 1..8 {
            for y in 1..8 {
                for x in 1..8 {
                    let v = ab.get(x, y, z);
                    assert_abs_diff_eq!(v[0], 1.5, epsilon = 1e-12);
                    assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-12);
                    assert_abs_diff_eq!(v[2], 0.25, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn composition_is_associative() {
        let dims = Dims::cube(32).unwrap();
        for seed in 0..4 {
            let f = smooth_field(dims, 0.5, 0.5, 10 + seed);
            let g = smooth_field(dims, 0.5, 0.5, 20 + seed);
            let h = smooth_field(dims, 0.5, 0.5, 30 + seed);
            let left = compose(&compose(&f, &g).unwrap(), &h).unwrap();
            let right = compose(&f, &compose(&g, &h).unwrap()).unwrap();
            // Piecewise-linear resampling is only approximately associative;
            // keep the comparison away from clamped borders.
            let err = interior_max_diff(&left, &right, 4);
            assert!(err < 1e-3, "{err}");
        }
    }

    #[test]
    fn scaling_and_squaring_fixed_points() {
        let dims = Dims::cube(12).unwrap();
        for t in [0, 3, 7] {
            let s = SsSchedule::new(t).unwrap();
            assert_eq!(scaling_and_squaring(&identity_field(dims), s), identity_field(dims));
            let c = scaling_and_squaring(&VectorField::constant(dims, [1.25, -0.75, 0.5]), s);
            for z in 2..10 {
                for y in 2..10 {
                    for x in 2..10 {
                        let v = c.get(x, y, z);
                        assert_abs_diff_eq!(v[0], 1.25, epsilon = 1e-12);
                        assert_abs_diff_eq!(v[1], -0.75, epsilon = 1e-12);
                        assert_abs_diff_eq!(v[2], 0.5, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    /// Flow of `dx/dt = lambda (x - c)` for unit time, integrated with RK4.
    fn rk4_flow(x0: f64, c: f64, lambda: f64) -> f64 {
        let f = |x: f64| lambda * (x - c);
        let steps = 1000;
        let h = 1.0 / steps as f64;
        let mut x = x0;
        for _ in 0..steps {
            let k1 = f(x);
            let k2 = f(x + 0.5 * h * k1);
            let k3 = f(x + 0.5 * h * k2);
            let k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        x
    }

    #[test]
    fn linear_velocity_matches_rk4() {
        let dims = Dims::new(48, 6, 6).unwrap();
        let c = dims.center()[0];
        let lambda = 0.1;
        let v = VectorField::from_fn(dims, |x, _, _| [lambda * (x as f64 - c), 0.0, 0.0]);
        let phi = scaling_and_squaring(&v, SsSchedule::default());
        let mut worst = 0.0f64;
        // Trajectories from these voxels stay inside the grid.
        for x in 6..42 {
            let expected = rk4_flow(x as f64, c, lambda) - x as f64;
            worst = worst.max((phi.get(x, 3, 3)[0] - expected).abs());
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn jacobian_analytic_cases() {
        let dims = Dims::cube(7).unwrap();
        let c = dims.center();
        let scale = VectorField::from_fn(dims, |x, y, z| {
            [0.1 * (x as f64 - c[0]), 0.1 * (y as f64 - c[1]), 0.1 * (z as f64 - c[2])]
        });
        let det = jacobian_determinant(&scale).unwrap();
        let fold = jacobian_determinant(&VectorField::from_fn(dims, |x, _, _| [-2.0 * (x as f64 - c[0]), 0.0, 0.0])).unwrap();
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    assert_abs_diff_eq!(det.get(x, y, z) as f64, 1.331, epsilon = 1e-6);
                    assert_eq!(fold.get(x, y, z), -1.0);
                }
            }
        }
        let thin = VectorField::zeros(Dims::new(2, 5, 5).unwrap());
        assert!(matches!(jacobian_determinant(&thin), Err(Error::TooSmall(_))));
    }

    #[test]
    fn integration_has_converged() {
        let dims = Dims::cube(32).unwrap();
        for seed in 0..5 {
            let v = smooth_field(dims, 2.0, 0.75, seed);
            let a = scaling_and_squaring(&v, SsSchedule::new(7).unwrap());
            let b = scaling_and_squaring(&v, SsSchedule::new(8).unwrap());
            assert!(interior_max_diff(&a, &b, 3) < 1e-3);
        }
    }

    #[test]
    fn group_property_and_inverse() {
        let dims = Dims::cube(32).unwrap();
        for seed in 0..5 {
            let v = smooth_field(dims, 2.0, 0.75, 100 + seed);
            let s = SsSchedule::default();
            let full = scaling_and_squaring(&v, s);
            let half = scaling_and_squaring(&v.scaled(0.5), s);
            let twice = compose(&half, &half).unwrap();
            assert!(interior_max_diff(&full, &twice, 3) < 1e-3);

            let back = scaling_and_squaring(&v.scaled(-1.0), s);
            let round = compose(&full, &back).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for z in 3..29 {
                for y in 3..29 {
                    for x in 3..29 {
                        let u = round.get(x, y, z);
                        total += (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                        count += 1;
                    }
                }
            }
            assert!(total / (count as f64) < 1e-2);
        }
    }

    #[test]
    fn bounded_velocities_never_fold() {
        let dims = Dims::cube(16).unwrap();
        for seed in 0..100 {
            let v = smooth_field(dims, 2.0, 2.0, 1000 + seed);
            let phi = scaling_and_squaring(&v, SsSchedule::default());
            assert_eq!(folding_fraction(&phi).unwrap(), 0.0, "seed {seed}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn warp_is_linear_in_the_image(seed in 0u64..1000, a in -3.0f32..3.0, b in -3.0f32..3.0) {
            let dims = Dims::cube(6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v1 = Volume::new(dims, (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let v2 = Volume::from_fn(dims, |x, y, z| ((x * 31 + y * 17 + z * 7) % 11) as f32 * 0.1);
            let phi = smooth_field(dims, 2.5, 2.0, seed);
            let combo = Volume::new(dims, v1.data().iter().zip(v2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = warp_f64(&combo, &phi);
            let w1 = warp_f64(&v1, &phi);
            let w2 = warp_f64(&v2, &phi);
            for i in 0..dims.len() {
                let rhs = a as f64 * w1[i] + b as f64 * w2[i];
                prop_assert!((lhs[i] - rhs).abs() < 1e-6);
            }
        }
    }
}
