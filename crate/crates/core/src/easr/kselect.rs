//! Choosing the ROI count: a histogram peak count proposes a candidate, then
//! its neighbours are scored and the candidate is only abandoned on clear
//! evidence.

use serde::Serialize;

use super::gmm::{fit_gmm, FitOptions, MAX_K};
use super::{assign_joint_labels, pooled_input, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::volume::Volume;

pub const HISTOGRAM_BINS: usize = 256;
pub const SMOOTHING_SIGMA_BINS: f64 = 2.0;
/// A peak must hold more than this fraction of the total mass in its bin.
pub const PEAK_MASS_FRACTION: f64 = 0.01;
/// Relative score gain needed to move away from the histogram candidate.
pub const SWITCH_GAIN: f64 = 0.05;

/// What the neighbour scores measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Negated BIC of the joint fit.
    Bic,
    /// Mean best-match Dice of the segmentation against held-out labels.
    HoldoutDsc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KScore {
    pub k: usize,
    /// Higher is better; `-inf` when the fit failed.
    pub score: f64,
}

/// Outcome of [`select_k`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KScan {
    pub selected: usize,
    /// Histogram candidate after clamping to the range.
    pub candidate: usize,
    pub peaks: usize,
    pub range: [usize; 2],
    pub criterion: ScoreKind,
    pub scores: Vec<KScore>,
}

/// Number of strict local maxima of the Gaussian-smoothed histogram of
/// `samples` (expected in `[0, 1]`) whose height exceeds 1% of the samples.
pub fn histogram_peak_count(samples: &[f64]) -> usize {
    if samples.is_empty() {
        return 0;
    }
    let mut hist = vec![0.0f64; HISTOGRAM_BINS];
    for &s in samples {
        let b = (s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize;
        hist[b.min(HISTOGRAM_BINS - 1)] += 1.0;
    }
    let radius = (4.0 * SMOOTHING_SIGMA_BINS).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / SMOOTHING_SIGMA_BINS).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    // Zero padding: mass smoothed past either end is lost, so an edge bin
    // can still be a peak.
    let smooth: Vec<f64> = (0..HISTOGRAM_BINS as isize)
        .map(|i| {
            (-radius..=radius)
                .filter_map(|d| {
                    let j = i + d;
                    (0..HISTOGRAM_BINS as isize)
                        .contains(&j)
                        .then(|| hist[j as usize] * kernel[(d + radius) as usize])
                })
                .sum::<f64>()
                / norm
        })
        .collect();
    let floor = PEAK_MASS_FRACTION * samples.len() as f64;
    (0..HISTOGRAM_BINS)
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { smooth[i - 1] };
            let right = smooth.get(i + 1).copied().unwrap_or(f64::NEG_INFINITY);
            smooth[i] > floor && smooth[i] > left && smooth[i] > right
        })
        .count()
}

fn holdout_score(model_labels: &(LabelMap, LabelMap), holdout: (&LabelMap, &LabelMap)) -> Result<f64> {
    let per_image = |seg: &LabelMap, truth: &LabelMap| -> Result<f64> {
        let truth_labels: Vec<u16> = (0..=truth.max_label()).filter(|&l| truth.count(l) > 0).collect();
        let mut total = 0.0;
        for &t in &truth_labels {
            let mut best = 0.0f64;
            for g in 0..=seg.max_label() {
                best = best.max(dice_between(seg, g, truth, t)?);
            }
            total += best;
        }
        Ok(total / truth_labels.len() as f64)
    };
    Ok(0.5 * (per_image(&model_labels.0, holdout.0)? + per_image(&model_labels.1, holdout.1)?))
}

/// Dice of label `la` in `a` against label `lb` in `b`.
fn dice_between(a: &LabelMap, la: u16, b: &LabelMap, lb: u16) -> Result<f64> {
    if la == lb {
        return dice(a, b, la);
    }
    a.dims().ensure_same(&b.dims())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        na += (x == la) as usize;
        nb += (y == lb) as usize;
        both += (x == la && y == lb) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

/// Picks the number of intensity classes for a moving/fixed pair.
///
/// The smoothed-histogram peak count, clamped to `range`, is the candidate.
/// Its neighbours `k - 1` and `k + 1` (when inside the range) are scored with
/// negated BIC, or with the held-out Dice when `holdout` label maps (moving,
/// fixed) are given. The smaller neighbour wins if it improves on the
/// candidate by at least 5% relative, otherwise the larger one under the same
/// margin, otherwise the candidate stays.
pub fn select_k(
    mov: &Volume,
    fix: &Volume,
    range: (usize, usize),
    holdout: Option<(&LabelMap, &LabelMap)>,
    opts: &FitOptions,
) -> Result<KScan> {
    let (lo, hi) = range;
    if lo < 1 || lo > hi || hi > MAX_K {
        return Err(Error::InvalidRange(lo, hi));
    }
    if let Some((hm, hf)) = holdout {
        mov.dims().ensure_same(&hm.dims())?;
        fix.dims().ensure_same(&hf.dims())?;
    }
    let input = pooled_input(mov, fix, opts.background_threshold)?;
    let peaks = histogram_peak_count(input.active());
    let candidate = peaks.clamp(lo, hi);
    let criterion = if holdout.is_some() { ScoreKind::HoldoutDsc } else { ScoreKind::Bic };

    let score = |k: usize| -> Result<f64> {
        let model = match fit_gmm(&input, k, opts) {
            Ok(m) => m,
            Err(e) if e.is_numerical() => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        };
        match holdout {
            None => Ok(-model.bic(input.active().len())),
            Some(h) => holdout_score(&assign_joint_labels(&model, mov, fix, opts.background_threshold)?, h),
        }
    };

    let mut scores = Vec::new();
    if lo == hi {
        return Ok(KScan { selected: lo, candidate, peaks, range: [lo, hi], criterion, scores });
    }
    let s_hat = score(candidate)?;
    scores.push(KScore { k: candidate, score: s_hat });
    let gain = |s: f64| {
        if s_hat.is_finite() {
            (s - s_hat) / s_hat.abs().max(f64::MIN_POSITIVE)
        } else if s.is_finite() {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut selected = candidate;
    for k in [candidate.checked_sub(1), Some(candidate + 1)].into_iter().flatten() {
        if k < lo || k > hi {
            continue;
        }
        let s = score(k)?;
        scores.push(KScore { k, score: s });
        if selected == candidate && gain(s) >= SWITCH_GAIN {
            selected = k;
        }
    }
    scores.sort_by_key(|s| s.k);
    Ok(KScan { selected, candidate, peaks, range: [lo, hi], criterion, scores })
}
