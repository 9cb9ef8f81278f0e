//! Registration quality metrics: Dice overlap, 95th-percentile Hausdorff
//! distance, folding percentage and the spread of the log Jacobian.
//!
//! Distances are in voxels. Boundaries use 6-connectivity with the volume
//! faces counted as outside. Jacobian statistics ignore the one-voxel faces,
//! where derivatives are one-sided.

use serde::{Deserialize, Serialize};

use crate::easr::LabelMap;
use crate::error::{Error, Result};
use crate::par;
use crate::transform::{jacobian_determinant_f64, DisplacementField};
use crate::volume::Dims;

/// Floor applied to determinants before taking logs in [`sdlogj`].
pub const LOG_DET_FLOOR: f64 = 1e-9;

/// Metric summary; key names are part of the `evaluate` output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<u16>,
    pub dsc_per_label: Vec<f64>,
    pub dsc_mean: f64,
    /// `None` where the label is missing from one of the maps.
    pub hd95_per_label: Vec<Option<f64>>,
    pub hd95_mean: f64,
    pub folding_percent: f64,
    pub sdlogj: f64,
}

/// Dice overlap of the voxels carrying `label` in `a` and `b`. Two empty sets
/// score 1, exactly one empty set scores 0.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u16) -> Result<f64> {
    a.dims().ensure_same(&b.dims())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (na + nb) as f64,
    })
}

fn boundary_mask(l: &LabelMap, label: u16) -> Vec<bool> {
    let d = l.dims();
    let lab = l.labels();
    let mut out = vec![false; d.len()];
    par::for_each_chunk_mut(&mut out, d.slice_len(), |z, slice| {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                if lab[i] != label {
                    continue;
                }
                let face = x == 0 || y == 0 || z == 0 || x + 1 == d.nx || y + 1 == d.ny || z + 1 == d.nz;
                slice[x + d.nx * y] = face
                    || lab[i - 1] != label
                    || lab[i + 1] != label
                    || lab[i - d.nx] != label
                    || lab[i + d.nx] != label
                    || lab[i - d.slice_len()] != label
                    || lab[i + d.slice_len()] != label;
            }
        }
    });
    out
}

/// Voxels of `label` that touch another label or the volume face.
pub fn boundary_voxels(l: &LabelMap, label: u16) -> Vec<usize> {
    boundary_mask(l, label)
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Exact squared Euclidean distance to the nearest `true` voxel of `seeds`
/// (separable lower-envelope transform, one axis at a time).
pub fn squared_distance_transform(dims: Dims, seeds: &[bool]) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut f: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let n = dims.as_array();
    let strides = [1, dims.nx, dims.slice_len()];
    for axis in 0..3 {
        let len = n[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let lines: Vec<usize> = (0..n[o1] * n[o2])
            .map(|j| (j % n[o1]) * strides[o1] + (j / n[o1]) * strides[o2])
            .collect();
        let rows = par::map_range(lines.len(), |j| {
            let start = lines[j];
            let line: Vec<f64> = (0..len).map(|t| f[start + t * stride]).collect();
            edt_1d(&line)
        });
        for (start, row) in lines.iter().zip(rows) {
            for (t, v) in row.into_iter().enumerate() {
                f[start + t * stride] = v;
            }
        }
    }
    f
}

/// One-dimensional squared distance transform of a sampled function.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let meet = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = meet(v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Boundary-to-nearest-boundary distances in both directions, sorted.
fn pooled_boundary_distances(a: &LabelMap, b: &LabelMap, label: u16) -> Result<Vec<f64>> {
    a.dims().ensure_same(&b.dims())?;
    let ma = boundary_mask(a, label);
    let mb = boundary_mask(b, label);
    if !ma.iter().any(|&x| x) || !mb.iter().any(|&x| x) {
        return Err(Error::EmptyLabel(label));
    }
    let da = squared_distance_transform(a.dims(), &ma);
    let db = squared_distance_transform(a.dims(), &mb);
    let mut d: Vec<f64> = ma
        .iter()
        .zip(&db)
        .filter(|(&m, _)| m)
        .map(|(_, &s)| s.sqrt())
        .chain(mb.iter().zip(&da).filter(|(&m, _)| m).map(|(_, &s)| s.sqrt()))
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// 95th percentile of the pooled symmetric boundary distances.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u16) -> Result<f64> {
    Ok(percentile_sorted(&pooled_boundary_distances(a, b, label)?, 95.0))
}

/// Largest pooled boundary distance (the classic Hausdorff distance).
pub fn hausdorff(a: &LabelMap, b: &LabelMap, label: u16) -> Result<f64> {
    Ok(*pooled_boundary_distances(a, b, label)?.last().unwrap())
}

fn interior_determinants(phi: &DisplacementField) -> Result<Vec<f64>> {
    let det = jacobian_determinant_f64(phi)?;
    let d = phi.dims();
    let mut out = Vec::with_capacity((d.nx - 2) * (d.ny - 2) * (d.nz - 2));
    for z in 1..d.nz - 1 {
        for y in 1..d.ny - 1 {
            for x in 1..d.nx - 1 {
                out.push(det[d.index(x, y, z)]);
            }
        }
    }
    Ok(out)
}

/// Percentage of interior voxels whose Jacobian determinant is `<= 0`.
pub fn folding_fraction(phi: &DisplacementField) -> Result<f64> {
    let dets = interior_determinants(phi)?;
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    Ok(100.0 * folded as f64 / dets.len() as f64)
}

/// Population standard deviation of `ln(max(det, 1e-9))` over interior voxels.
pub fn sdlogj(phi: &DisplacementField) -> Result<f64> {
    let logs: Vec<f64> = interior_determinants(phi)?
        .into_iter()
        .map(|d| d.max(LOG_DET_FLOOR).ln())
        .collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    Ok((logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Full report for the labels present in either map, with field statistics
/// when a field is supplied (identity otherwise).
pub fn evaluate(a: &LabelMap, b: &LabelMap, phi: Option<&DisplacementField>) -> Result<MetricsReport> {
    a.dims().ensure_same(&b.dims())?;
    let top = a.max_label().max(b.max_label());
    let labels: Vec<u16> = (0..=top).filter(|&l| a.count(l) + b.count(l) > 0).collect();
    let dsc = labels.iter().map(|&l| dice(a, b, l)).collect::<Result<Vec<_>>>()?;
    let hd = labels
        .iter()
        .map(|&l| match hd95(a, b, l) {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyLabel(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = hd.iter().flatten().copied().collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (folding_percent, sdlogj) = match phi {
        Some(p) => (folding_fraction(p)?, sdlogj(p)?),
        None => (0.0, 0.0),
    };
    Ok(MetricsReport {
        dsc_mean: mean(&dsc),
        hd95_mean: mean(&defined),
        labels,
        dsc_per_label: dsc,
        hd95_per_label: hd,
        folding_percent,
        sdlogj,
    })
}
