//! One-dimensional Gaussian mixtures fitted by expectation-maximization.
//!
//! Component densities are evaluated in log space and every reduction runs
//! over fixed-size sample chunks whose partials are added in chunk order, so a
//! fit is bit-reproducible for a given input regardless of thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Lower bound applied to every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Components with a smaller effective sample count are reported as empty.
pub const MIN_EFFECTIVE_COUNT: f64 = 1e-8;
/// Largest supported component count.
pub const MAX_K: usize = 8;

const CHUNK: usize = 1 << 13;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture parameters, components ordered by ascending mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Log-likelihood of the fitting samples under these parameters.
    #[serde(rename = "loglik")]
    pub log_likelihood: f64,
    #[serde(rename = "iters")]
    pub iterations: usize,
}

impl GmmModel {
    /// Builds a model from raw parameters, flooring variances, renormalizing
    /// weights and sorting components by mean. The log-likelihood is left at
    /// negative infinity until evaluated.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || k > MAX_K || means.len() != k || variances.len() != k {
            return Err(Error::InvalidConfig(format!(
                "mixture needs 1..={MAX_K} components with matching parameter lengths"
            )));
        }
        let params = weights.iter().chain(&means).chain(&variances);
        if params.clone().any(|v| !v.is_finite()) || weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidConfig("mixture parameters must be finite with positive weights".into()));
        }
        let total: f64 = weights.iter().sum();
        let mut m = Self {
            k,
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            variances: variances.iter().map(|v| v.max(VARIANCE_FLOOR)).collect(),
            log_likelihood: f64::NEG_INFINITY,
            iterations: 0,
        };
        m.canonicalize();
        Ok(m)
    }

    /// Sorts components by ascending mean (stable, so equal means keep their
    /// relative order).
    fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]));
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        self.means = order.iter().map(|&i| self.means[i]).collect();
        self.variances = order.iter().map(|&i| self.variances[i]).collect();
    }

    /// Per-component `ln(pi_k) - ln(2 pi var_k) / 2` and `1 / (2 var_k)`.
    fn log_terms(&self) -> (Vec<f64>, Vec<f64>) {
        let offs = (0..self.k)
            .map(|j| self.weights[j].ln() - 0.5 * (LN_2PI + self.variances[j].ln()))
            .collect();
        let inv = self.variances.iter().map(|v| 0.5 / v).collect();
        (offs, inv)
    }

    /// Mixture density at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        let (offs, inv) = self.log_terms();
        (0..self.k)
            .map(|j| (offs[j] - (x - self.means[j]).powi(2) * inv[j]).exp())
            .sum()
    }

    /// Log-likelihood of `samples` under this model.
    pub fn log_likelihood_of(&self, samples: &[f64]) -> f64 {
        let (offs, inv) = self.log_terms();
        par::sum_chunks(samples.len(), CHUNK, |r| {
            let mut logp = vec![0.0; self.k];
            samples[r]
                .iter()
                .map(|&x| self.log_joint(x, &offs, &inv, &mut logp))
                .sum()
        })
    }

    /// Fills `logp[j] = ln(pi_j N(x | mu_j, var_j))` and returns the
    /// log-sum-exp over components.
    #[inline]
    fn log_joint(&self, x: f64, offs: &[f64], inv: &[f64], logp: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.k {
            let d = x - self.means[j];
            logp[j] = offs[j] - d * d * inv[j];
            max = max.max(logp[j]);
        }
        let s: f64 = logp.iter().map(|l| (l - max).exp()).sum();
        max + s.ln()
    }

    /// Writes the responsibilities of `x` into `out` (sums to one).
    #[inline]
    fn posterior(&self, x: f64, offs: &[f64], inv: &[f64], out: &mut [f64]) -> f64 {
        let lse = self.log_joint(x, offs, inv, out);
        for v in out.iter_mut() {
            *v = (*v - lse).exp();
        }
        let s: f64 = out.iter().sum();
        for v in out.iter_mut() {
            *v /= s;
        }
        lse
    }

    /// Index of the component with the highest responsibility for `x`; ties go
    /// to the lowest index.
    pub fn most_responsible(&self, x: f64) -> usize {
        let (offs, inv) = self.log_terms();
        self.argmax_with(x, &offs, &inv)
    }

    #[inline]
    fn argmax_with(&self, x: f64, offs: &[f64], inv: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..self.k {
            let d = x - self.means[j];
            let v = offs[j] - d * d * inv[j];
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        best
    }

    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        3 * self.k - 1
    }

    /// Bayesian information criterion for `n` samples (lower is better).
    pub fn bic(&self, n: usize) -> f64 {
        -2.0 * self.log_likelihood + self.n_params() as f64 * (n as f64).ln()
    }
}

/// Soft component memberships, one row of `k` values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    data: Vec<f64>,
}

impl Responsibilities {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k)
    }

    /// Rows built directly from values; used for hard assignments and tests.
    pub fn from_rows(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || data.len() % k != 0 {
            return Err(Error::InvalidConfig("responsibility matrix shape".into()));
        }
        Ok(Self { k, data })
    }
}

/// Component responsibilities for every sample.
pub fn responsibilities(model: &GmmModel, samples: &[f64]) -> Responsibilities {
    let k = model.k;
    let (offs, inv) = model.log_terms();
    let mut data = vec![0.0; samples.len() * k];
    par::for_each_chunk_mut(&mut data, CHUNK * k, |c, out| {
        let base = c * CHUNK;
        for (i, row) in out.chunks_exact_mut(k).enumerate() {
            model.posterior(samples[base + i], &offs, &inv, row);
        }
    });
    Responsibilities { k, data }
}

/// Samples for mixture fitting with an optional inclusion mask.
#[derive(Debug, Clone)]
pub struct GmmInput {
    samples: Vec<f64>,
    mask: Option<Vec<bool>>,
    active: Vec<f64>,
}

impl GmmInput {
    pub fn new(samples: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != samples.len() {
                return Err(Error::LengthMismatch {
                    expected: samples.len(),
                    got: m.len(),
                });
            }
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let active = match &mask {
            Some(m) => samples.iter().zip(m).filter(|(_, &keep)| keep).map(|(&s, _)| s).collect(),
            None => samples.clone(),
        };
        Ok(Self { samples, mask, active })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// The masked-in samples that take part in fitting.
    pub fn active(&self) -> &[f64] {
        &self.active
    }
}

/// Sufficient statistics of one E-step: log-likelihood of the current model
/// and per-component sums of `gamma`, `gamma x`, `gamma x^2`.
struct EStats {
    loglik: f64,
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

fn e_pass(model: &GmmModel, samples: &[f64]) -> EStats {
    let k = model.k;
    let (offs, inv) = model.log_terms();
    let parts = par::map_range(samples.len().div_ceil(CHUNK), |c| {
        let chunk = &samples[c * CHUNK..((c + 1) * CHUNK).min(samples.len())];
        let mut st = EStats {
            loglik: 0.0,
            s0: vec![0.0; k],
            s1: vec![0.0; k],
            s2: vec![0.0; k],
        };
        let mut g = vec![0.0; k];
        for &x in chunk {
            st.loglik += model.posterior(x, &offs, &inv, &mut g);
            for j in 0..k {
                st.s0[j] += g[j];
                st.s1[j] += g[j] * x;
                st.s2[j] += g[j] * x * x;
            }
        }
        st
    });
    let mut total = EStats {
        loglik: 0.0,
        s0: vec![0.0; k],
        s1: vec![0.0; k],
        s2: vec![0.0; k],
    };
    for p in parts {
        total.loglik += p.loglik;
        for j in 0..k {
            total.s0[j] += p.s0[j];
            total.s1[j] += p.s1[j];
            total.s2[j] += p.s2[j];
        }
    }
    total
}

fn m_step(model: &GmmModel, st: &EStats, n: usize) -> Result<GmmModel> {
    let k = model.k;
    let mut weights = vec![0.0; k];
    let mut means = vec![0.0; k];
    let mut variances = vec![0.0; k];
    for j in 0..k {
        if st.s0[j] < MIN_EFFECTIVE_COUNT {
            return Err(Error::EmptyComponent {
                component: j,
                count: st.s0[j],
            });
        }
        weights[j] = st.s0[j] / n as f64;
        means[j] = st.s1[j] / st.s0[j];
        variances[j] = (st.s2[j] / st.s0[j] - means[j] * means[j]).max(VARIANCE_FLOOR);
    }
    let mut next = GmmModel {
        k,
        weights,
        means,
        variances,
        log_likelihood: f64::NEG_INFINITY,
        iterations: model.iterations + 1,
    };
    next.canonicalize();
    Ok(next)
}

/// One EM iteration: responsibilities under `model`, then the weight, mean
/// and variance updates. The returned model carries its own log-likelihood.
pub fn em_step(model: &GmmModel, input: &GmmInput) -> Result<GmmModel> {
    let samples = input.active();
    let st = e_pass(model, samples);
    let mut next = m_step(model, &st, samples.len())?;
    next.log_likelihood = next.log_likelihood_of(samples);
    Ok(next)
}

/// Options for [`fit_gmm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Normalized intensities at or below this value are left out of the fit.
    pub background_threshold: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            rel_tol: 1e-6,
            background_threshold: None,
        }
    }
}

/// Deterministic starting point: means at the `(2j+1)/(2k)` quantiles,
/// variances at pooled variance / k^2, uniform weights.
pub fn initial_model(samples: &[f64], k: usize) -> Result<GmmModel> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no samples to fit".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let quantile = |q: f64| {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let means = (0..k).map(|j| quantile((2 * j + 1) as f64 / (2 * k) as f64)).collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    GmmModel::new(vec![1.0; k], means, vec![var / (k * k) as f64; k])
}

/// Fits a `k`-component mixture to the active samples of `input`.
///
/// Iterates until the relative log-likelihood change drops below
/// `opts.rel_tol` or `opts.max_iters` is reached; hitting the iteration cap is
/// not an error.
pub fn fit_gmm(input: &GmmInput, k: usize, opts: &FitOptions) -> Result<GmmModel> {
    fit_gmm_traced(input, k, opts).map(|(m, _)| m)
}

/// Like [`fit_gmm`], also returning the log-likelihood after every iterate
/// (starting with the initial model).
pub fn fit_gmm_traced(input: &GmmInput, k: usize, opts: &FitOptions) -> Result<(GmmModel, Vec<f64>)> {
    if k == 0 || k > MAX_K {
        return Err(Error::InvalidConfig(format!("k must be in 1..={MAX_K}, got {k}")));
    }
    let samples = input.active();
    if samples.len() < 10 * k {
        return Err(Error::InvalidConfig(format!(
            "{} active samples are too few for k = {k}",
            samples.len()
        )));
    }
    let mut model = initial_model(samples, k)?;
    let mut st = e_pass(&model, samples);
    model.log_likelihood = st.loglik;
    let mut trace = vec![st.loglik];
    for _ in 0..opts.max_iters {
        let mut next = m_step(&model, &st, samples.len())?;
        let next_st = e_pass(&next, samples);
        next.log_likelihood = next_st.loglik;
        trace.push(next.log_likelihood);
        let change = (next.log_likelihood - model.log_likelihood).abs();
        let scale = model.log_likelihood.abs().max(1e-300);
        model = next;
        st = next_st;
        if change / scale < opts.rel_tol {
            break;
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn model(w: &[f64], m: &[f64], v: &[f64]) -> GmmModel {
        GmmModel::new(w.to_vec(), m.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn single_component_owns_everything() {
        let m = model(&[1.0], &[0.3], &[0.01]);
        let r = responsibilities(&m, &[0.0, 0.3, 0.9, 1.0]);
        assert!(r.rows().all(|row| row == [1.0]));
    }

    #[test]
    fn midpoint_splits_evenly() {
        let m = model(&[0.5, 0.5], &[0.2, 0.6], &[0.02, 0.02]);
        let r = responsibilities(&m, &[0.4]);
        assert_abs_diff_eq!(r.row(0)[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.row(0)[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn responsibility_matches_direct_formula() {
        // Direct evaluation of pi_k N(x) / sum_j pi_j N(x) in the linear
        // domain: N(0.2 | 0.1, 0.01) = exp(-0.5) / sqrt(0.02 pi), N(0.2 | 0.9,
        // 0.01) = exp(-24.5) / sqrt(0.02 pi); the 0.5 weights and the shared
        // normalizer cancel.
        let g0 = (-0.5f64).exp();
        let g1 = (-24.5f64).exp();
        let expected = [g0 / (g0 + g1), g1 / (g0 + g1)];
        let m = model(&[0.5, 0.5], &[0.1, 0.9], &[0.01, 0.01]);
        let r = responsibilities(&m, &[0.2]);
        assert_abs_diff_eq!(r.row(0)[0], expected[0], epsilon = 1e-15);
        assert_abs_diff_eq!(r.row(0)[1], expected[1], epsilon = 1e-15);
        assert_abs_diff_eq!(r.row(0)[1], 3.775_134_544_136_581_6e-11, epsilon = 1e-22);
    }

    #[test]
    fn one_step_recovers_separated_clusters() {
        let mut s = vec![0.1; 100];
        s.extend(vec![0.9; 100]);
        let input = GmmInput::new(s, None).unwrap();
        let m0 = model(&[0.5, 0.5], &[0.2, 0.8], &[0.01, 0.01]);
        let m1 = em_step(&m0, &input).unwrap();
        assert_abs_diff_eq!(m1.means[0], 0.1, epsilon = 1e-6);
        assert_abs_diff_eq!(m1.means[1], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(m1.weights[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(m1.weights[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn k1_step_is_closed_form() {
        let s: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let mean = s.iter().sum::<f64>() / 50.0;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0;
        let input = GmmInput::new(s, None).unwrap();
        let m = em_step(&model(&[1.0], &[0.0], &[1.0]), &input).unwrap();
        assert_abs_diff_eq!(m.means[0], mean, epsilon = 1e-12);
        assert_abs_diff_eq!(m.variances[0], var, epsilon = 1e-12);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn empty_component_is_reported() {
        let input = GmmInput::new(vec![0.0; 40], None).unwrap();
        let m = model(&[0.5, 0.5], &[0.0, 1.0], &[1e-6, 1e-6]);
        assert!(matches!(em_step(&m, &input), Err(Error::EmptyComponent { component: 1, .. })));
    }

    #[test]
    fn mask_excludes_samples() {
        let input = GmmInput::new(vec![0.0, 0.5, 0.6, 0.0], Some(vec![false, true, true, false])).unwrap();
        assert_eq!(input.active(), &[0.5, 0.6]);
    }

    #[test]
    fn fit_recovers_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Vec::new();
        for (mu, n) in [(0.2, 3000), (0.55, 2000), (0.85, 1000)] {
            let d = Normal::new(mu, 0.03).unwrap();
            s.extend((0..n).map(|_| d.sample(&mut rng)));
        }
        let input = GmmInput::new(s, None).unwrap();
        let (m, trace) = fit_gmm_traced(&input, 3, &FitOptions::default()).unwrap();
        for (got, want) in m.means.iter().zip([0.2, 0.55, 0.85]) {
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
        assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert_eq!(m.iterations + 1, trace.len());
    }

    #[test]
    fn bic_penalizes_parameters() {
        let m = model(&[0.5, 0.5], &[0.2, 0.8], &[0.01, 0.01]);
        let mut m = m;
        m.log_likelihood = 10.0;
        assert_abs_diff_eq!(m.bic(100), -20.0 + 5.0 * 100f64.ln(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn em_is_monotone(seed in 0u64..1_000_000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 300;
            let s: Vec<f64> = (0..n).map(|_| {
                let c = rng.gen_range(0..3) as f64;
                (0.2 + 0.3 * c + 0.05 * rng.gen::<f64>()).clamp(0.0, 1.0)
            }).collect();
            let input = GmmInput::new(s.clone(), None).unwrap();
            let mut m = initial_model(&s, k).unwrap();
            m.log_likelihood = m.log_likelihood_of(&s);
            for _ in 0..15 {
                let next = match em_step(&m, &input) { Ok(n) => n, Err(_) => break };
                prop_assert!(next.log_likelihood >= m.log_likelihood - 1e-9,
                    "{} < {}", next.log_likelihood, m.log_likelihood);
                m = next;
            }
        }

        #[test]
        fn rows_sum_to_one(xs in proptest::collection::vec(-0.5f64..1.5, 1..200),
                           m0 in 0.0f64..0.4, m1 in 0.4f64..1.0, v in 1e-6f64..0.1) {
            let m = model(&[0.3, 0.7], &[m0, m1], &[v, 2.0 * v]);
            let r = responsibilities(&m, &xs);
            for row in r.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&g| (0.0..=1.0).contains(&g)));
            }
        }

        #[test]
        fn component_order_does_not_matter(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..400).map(|i| 0.25 * (i % 3) as f64 + 0.02 * rng.gen::<f64>()).collect();
            let input = GmmInput::new(s, None).unwrap();
            let a = model(&[1.0, 1.0, 1.0], &[0.1, 0.3, 0.6], &[0.01, 0.01, 0.01]);
            let b = model(&[1.0, 1.0, 1.0], &[0.6, 0.1, 0.3], &[0.01, 0.01, 0.01]);
            let (mut a, mut b) = (a, b);
            for _ in 0..20 {
                a = em_step(&a, &input).unwrap();
                b = em_step(&b, &input).unwrap();
            }
            for j in 0..3 {
                prop_assert!((a.means[j] - b.means[j]).abs() < 1e-6);
                prop_assert!((a.weights[j] - b.weights[j]).abs() < 1e-6);
                prop_assert!((a.variances[j] - b.variances[j]).abs() < 1e-6);
            }
        }
    }
}
