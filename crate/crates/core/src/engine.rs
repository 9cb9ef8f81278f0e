//! The registration pipeline.
//!
//! Both images are segmented jointly, each intensity class becomes a masked
//! channel that is registered on its own by multiresolution Adam descent, and
//! the channel fields are blended with the fixed image's class memberships.
//! A short joint refinement on the full images follows. In diffeomorphic
//! mode every stage optimizes a stationary velocity instead of a
//! displacement and the final map is its exponential.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::easr::{
    assign_joint_labels, extract_rois, fit_gmm_joint, select_k, volume_responsibilities, FitOptions, GmmModel,
    KScan, LabelMap, Responsibilities, MAX_K,
};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossReport, Objective};
use crate::metrics::MetricsReport;
use crate::par;
use crate::transform::{scaling_and_squaring, warp, DisplacementField, SsSchedule, VelocityField};
use crate::volume::{downsample, upsample_field, Dims, VectorField, Volume};

/// How many intensity classes to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KChoice {
    Fixed(usize),
    /// Pick with [`select_k`] inside this range.
    Auto { k_min: usize, k_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub k: KChoice,
    pub loss: LossConfig,
    /// Pyramid depth; level 0 is full resolution.
    pub levels: usize,
    /// Iterations per level, coarsest first.
    pub iters_per_level: Vec<usize>,
    /// Adam step sizes in voxels of each level, coarsest first.
    pub step_sizes: Vec<f64>,
    pub diffeomorphic: bool,
    pub ss_schedule: SsSchedule,
    /// Joint full-image iterations after fusion.
    pub refine_iters: usize,
    /// Gaussian sigma in voxels applied to the fused field.
    pub fusion_smoothing_sigma: f64,
    /// Recorded with the results; the optimizer itself is deterministic.
    pub seed: u64,
    pub gmm: FitOptions,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            k: KChoice::Fixed(3),
            loss: LossConfig::default(),
            levels: 3,
            iters_per_level: vec![150, 100, 60],
            step_sizes: vec![0.5, 0.25, 0.1],
            diffeomorphic: false,
            ss_schedule: SsSchedule::default(),
            refine_iters: 30,
            fusion_smoothing_sigma: 1.0,
            seed: 0,
            gmm: FitOptions::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.loss.validate()?;
        match self.k {
            KChoice::Fixed(k) if k == 0 || k > MAX_K => return bad(format!("k must be in 1..={MAX_K}, got {k}")),
            KChoice::Auto { k_min, k_max } if k_min == 0 || k_min > k_max || k_max > MAX_K => {
                return Err(Error::InvalidRange(k_min, k_max))
            }
            _ => {}
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.iters_per_level.len() != self.levels || self.step_sizes.len() != self.levels {
            return bad(format!(
                "{} levels need {} iteration counts and step sizes, got {} and {}",
                self.levels,
                self.levels,
                self.iters_per_level.len(),
                self.step_sizes.len()
            ));
        }
        if self.step_sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("step sizes must be positive".into());
        }
        if !(self.fusion_smoothing_sigma >= 0.0 && self.fusion_smoothing_sigma.is_finite()) {
            return bad("fusion smoothing sigma must be >= 0".into());
        }
        Ok(())
    }
}

/// Which optimization a trace row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Roi(usize),
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Roi(i) => write!(f, "{i}"),
            Stage::Joint => f.write_str("joint"),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Stage::Roi(i) => s.serialize_u64(*i as u64),
            Stage::Joint => s.serialize_str("joint"),
        }
    }
}

/// Loss before one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Pyramid level, 0 being full resolution.
    pub level: usize,
    pub channel: Stage,
    pub sim: f64,
    pub smo: f64,
    pub total: f64,
}

pub const TRACE_HEADER: &str = "iter,level,channel,sim,smo,total";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.17e},{:.17e},{:.17e}",
            self.iter, self.level, self.channel, self.sim, self.smo, self.total
        )
    }
}

/// Header line plus one line per row.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ChannelResult {
    pub roi_index: usize,
    /// Displacement, or velocity in diffeomorphic mode.
    pub field: VectorField,
    /// Loss of the final field at full resolution.
    pub report: LossReport,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field: DisplacementField,
    /// Fused and refined velocity in diffeomorphic mode.
    pub velocity: Option<VelocityField>,
    pub warped: Volume,
    pub channels: Vec<ChannelResult>,
    pub model: GmmModel,
    pub labels_moving: LabelMap,
    pub labels_fixed: LabelMap,
    pub k_scan: Option<KScan>,
    /// Full-image loss of the final field.
    pub report: LossReport,
    /// Channel traces in channel order, then the joint refinement.
    pub trace: Vec<TraceRow>,
    pub metrics: Option<MetricsReport>,
    /// Seconds per phase.
    pub wall_times: BTreeMap<String, f64>,
}

const WARMUP_ITERS: f64 = 10.0;

/// Adam with the usual decay rates. The step size is annealed along a
/// half cosine over the run so the per-voxel jitter that Adam keeps up near
/// an optimum dies out by the last iteration.
struct Adam {
    lr: f64,
    iters: usize,
    m: Vec<[f64; 3]>,
    v: Vec<[f64; 3]>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, iters: usize, n: usize) -> Self {
        Self {
            lr,
            iters,
            m: vec![[0.0; 3]; n],
            v: vec![[0.0; 3]; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [[f64; 3]], g: &[[f64; 3]]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let progress = (self.t - 1) as f64 / self.iters.max(1) as f64;
        let warmup = (self.t as f64 / WARMUP_ITERS).min(1.0);
        let lr = 0.5 * self.lr * warmup * (1.0 + (std::f64::consts::PI * progress).cos());
        for (((xi, gi), mi), vi) in x.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            for c in 0..3 {
                mi[c] = Self::BETA1 * mi[c] + (1.0 - Self::BETA1) * gi[c];
                vi[c] = Self::BETA2 * vi[c] + (1.0 - Self::BETA2) * gi[c] * gi[c];
                xi[c] -= lr * (mi[c] / c1) / ((vi[c] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Loss and gradient of the optimized parameter (displacement, or velocity
/// in diffeomorphic mode). For velocities the displacement gradient at
/// `exp(v)` is used as the descent direction.
fn param_loss(obj: &Objective, param: &VectorField, diffeomorphic: bool, sched: SsSchedule) -> Result<(LossReport, VectorField)> {
    if diffeomorphic {
        obj.value_and_gradient(&scaling_and_squaring(param, sched))
    } else {
        obj.value_and_gradient(param)
    }
}

fn param_report(obj: &Objective, param: &VectorField, diffeomorphic: bool, sched: SsSchedule) -> Result<LossReport> {
    if diffeomorphic {
        obj.evaluate(&scaling_and_squaring(param, sched))
    } else {
        obj.evaluate(param)
    }
}

#[allow(clippy::too_many_arguments)]
fn descend(
    obj: &Objective,
    param: &mut VectorField,
    iters: usize,
    lr: f64,
    cfg: &RegistrationConfig,
    level: usize,
    stage: Stage,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    let mut adam = Adam::new(lr, iters, param.dims().len());
    for iter in 0..iters {
        let (report, grad) = param_loss(obj, param, cfg.diffeomorphic, cfg.ss_schedule)?;
        trace.push(TraceRow {
            iter,
            level,
            channel: stage,
            sim: report.sim,
            smo: report.smo,
            total: report.total,
        });
        adam.step(param.data_mut(), grad.data());
    }
    Ok(())
}

/// Window radius that fits a level; coarse levels of small volumes get a
/// smaller window.
fn level_loss(cfg: &LossConfig, dims: Dims) -> LossConfig {
    let fit = (dims.min_axis() - 1) / 2;
    LossConfig {
        window_radius: cfg.window_radius.min(fit.max(1)),
        ..*cfg
    }
}

fn pyramid(v: &Volume, levels: usize) -> Result<Vec<Volume>> {
    let mut out = vec![v.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

fn channel(mov: &Volume, fix: &Volume, cfg: &RegistrationConfig, roi_index: usize) -> Result<ChannelResult> {
    mov.dims().ensure_same(&fix.dims())?;
    cfg.validate()?;
    let movs = pyramid(mov, cfg.levels)?;
    let fixes = pyramid(fix, cfg.levels)?;
    let mut param = VectorField::zeros(fixes[cfg.levels - 1].dims());
    let mut trace = Vec::new();
    for (step, level) in (0..cfg.levels).rev().enumerate() {
        let dims = fixes[level].dims();
        if param.dims() != dims {
            param = upsample_field(&param, dims)?;
        }
        let obj = Objective::new(&fixes[level], &movs[level], level_loss(&cfg.loss, dims))?;
        descend(
            &obj,
            &mut param,
            cfg.iters_per_level[step],
            cfg.step_sizes[step],
            cfg,
            level,
            Stage::Roi(roi_index),
            &mut trace,
        )?;
    }
    let obj = Objective::new(fix, mov, cfg.loss)?;
    let report = param_report(&obj, &param, cfg.diffeomorphic, cfg.ss_schedule)?;
    Ok(ChannelResult {
        roi_index,
        field: param,
        report,
        trace,
    })
}

/// Registers one masked channel by multiresolution descent, coarsest level
/// first.
pub fn register_roi_channel(mov_roi: &Volume, fix_roi: &Volume, cfg: &RegistrationConfig) -> Result<ChannelResult> {
    channel(mov_roi, fix_roi, cfg, 0)
}

/// Separable Gaussian smoothing of each component; the kernel is truncated
/// at three sigma and renormalized where it leaves the grid.
fn gaussian_smooth(f: &VectorField, sigma: f64) -> VectorField {
    if sigma <= 0.0 {
        return f.clone();
    }
    let dims = f.dims();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let n = dims.as_array();
    let strides = [1, dims.nx, dims.slice_len()];
    let mut cur = f.data().to_vec();
    for axis in 0..3 {
        let src = cur.clone();
        par::for_each_chunk_mut(&mut cur, dims.slice_len(), |z, slice| {
            let base = z * dims.slice_len();
            for (j, out) in slice.iter_mut().enumerate() {
                let i = base + j;
                let (x, y, _) = dims.coords(i);
                let p = [x, y, z][axis] as isize;
                let mut acc = [0.0; 3];
                let mut wsum = 0.0;
                for d in -radius..=radius {
                    let q = p + d;
                    if q < 0 || q >= n[axis] as isize {
                        continue;
                    }
                    let w = kernel[(d + radius) as usize];
                    let s = src[(i as isize + d * strides[axis] as isize) as usize];
                    for c in 0..3 {
                        acc[c] += w * s[c];
                    }
                    wsum += w;
                }
                *out = acc.map(|a| a / wsum);
            }
        });
    }
    VectorField::new(dims, cur).expect("smoothing keeps fields finite")
}

/// Membership-weighted blend of channel fields followed by Gaussian
/// smoothing. `weights` has one row per voxel and one column per channel.
pub fn fuse_fields(fields: &[&VectorField], weights: &Responsibilities, sigma: f64) -> Result<VectorField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidConfig("no channel fields to fuse".into()))?;
    let dims = first.dims();
    for f in fields {
        dims.ensure_same(&f.dims())?;
    }
    if weights.len() != dims.len() {
        return Err(Error::LengthMismatch {
            expected: dims.len(),
            got: weights.len(),
        });
    }
    if weights.k() != fields.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weight columns for {} channels",
            weights.k(),
            fields.len()
        )));
    }
    let mut out = vec![[0.0; 3]; dims.len()];
    par::for_each_chunk_mut(&mut out, dims.slice_len(), |z, slice| {
        let base = z * dims.slice_len();
        for (j, o) in slice.iter_mut().enumerate() {
            let i = base + j;
            for (w, f) in weights.row(i).iter().zip(fields) {
                let u = f.data()[i];
                for c in 0..3 {
                    o[c] += w * u[c];
                }
            }
        }
    });
    Ok(gaussian_smooth(&VectorField::new(dims, out)?, sigma))
}

fn k_mismatch(k: usize, e: Error) -> Error {
    match e {
        Error::EmptyComponent { .. } => Error::KMismatch { k, source: Box::new(e) },
        e => e,
    }
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Full pipeline: joint mixture fit, per-class channels, fusion, joint
/// refinement and the final warp.
pub fn register(mov: &Volume, fix: &Volume, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    let start = Instant::now();
    mov.dims().ensure_same(&fix.dims())?;
    cfg.validate()?;
    let mut wall_times = BTreeMap::new();

    let t = Instant::now();
    let (k, k_scan) = match cfg.k {
        KChoice::Fixed(k) => (k, None),
        KChoice::Auto { k_min, k_max } => {
            let scan = select_k(mov, fix, (k_min, k_max), None, &cfg.gmm)?;
            (scan.selected, Some(scan))
        }
    };
    let model = fit_gmm_joint(mov, fix, k, &cfg.gmm).map_err(|e| k_mismatch(k, e))?;
    let (labels_moving, labels_fixed) = assign_joint_labels(&model, mov, fix, cfg.gmm.background_threshold)?;
    let rois_m = extract_rois(mov, &labels_moving, k)?;
    let rois_f = extract_rois(fix, &labels_fixed, k)?;
    wall_times.insert("segmentation".to_string(), elapsed(t));

    let t = Instant::now();
    let channels = par::map_range(k, |i| channel(rois_m.get(i), rois_f.get(i), cfg, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    wall_times.insert("channels".to_string(), elapsed(t));

    let t = Instant::now();
    let weights = volume_responsibilities(&model, fix)?;
    let fields: Vec<&VectorField> = channels.iter().map(|c| &c.field).collect();
    // A single channel is returned as is, so k = 1 reduces exactly to
    // plain single-channel registration.
    let sigma = if k > 1 { cfg.fusion_smoothing_sigma } else { 0.0 };
    let mut param = fuse_fields(&fields, &weights, sigma)?;
    wall_times.insert("fusion".to_string(), elapsed(t));

    let t = Instant::now();
    let obj = Objective::new(fix, mov, cfg.loss)?;
    let mut trace: Vec<TraceRow> = channels.iter().flat_map(|c| c.trace.iter().copied()).collect();
    let lr = *cfg.step_sizes.last().unwrap();
    descend(&obj, &mut param, cfg.refine_iters, lr, cfg, 0, Stage::Joint, &mut trace)?;
    let (field, velocity) = if cfg.diffeomorphic {
        (scaling_and_squaring(&param, cfg.ss_schedule), Some(param))
    } else {
        (param, None)
    };
    let report = obj.evaluate(&field)?;
    let warped = warp(mov, &field)?;
    wall_times.insert("refinement".to_string(), elapsed(t));
    wall_times.insert("total".to_string(), elapsed(start));

    Ok(RegistrationResult {
        field,
        velocity,
        warped,
        channels,
        model,
        labels_moving,
        labels_fixed,
        k_scan,
        report,
        trace,
        metrics: None,
        wall_times,
    })
}

/// [`register`] with the diffeomorphic branch switched on.
pub fn register_diffeomorphic(mov: &Volume, fix: &Volume, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    let cfg = RegistrationConfig {
        diffeomorphic: true,
        ..cfg.clone()
    };
    register(mov, fix, &cfg)
}
