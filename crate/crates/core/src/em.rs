//! Maximum-likelihood reconstruction by expectation maximization.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{EffectiveEfficiencies, PairedHistogram};
use crate::model::{DetectorParams, JointHistogram, JointPhotonDistribution, StripGeometry};
use crate::povm::{default_bounds, PovmCache, PovmTable};

/// Largest admissible drop of the log-likelihood between iterations.
pub const MONOTONE_SLACK: f64 = 1e-12;
/// Largest admissible normalization drift within one step.
pub const MAX_DRIFT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once `|ΔL| ≤ tolerance · max(|L|, 1)`.
    pub tolerance: f64,
    /// Smallest admissible forward probability for an observed photocount.
    #[serde(skip_serializing_if = "is_default_floor")]
    pub floor: f64,
}

fn is_default_floor(v: &f64) -> bool {
    *v == EmConfig::default().floor
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-10, floor: 1e-300 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance", "must be positive"));
        }
        if !(self.floor >= 0.0) {
            return Err(Error::invalid("floor", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    /// Its truncation deficit is the probability on the outermost row and
    /// column of the photon-number support.
    pub distribution: JointPhotonDistribution,
    pub iterations: usize,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Forward probability falling beyond the photocount bounds.
    pub forward_deficit: f64,
}

impl EmResult {
    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult1d {
    pub distribution: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Probability in the last photon-number bin.
    pub truncation_deficit: f64,
    /// Forward probability falling beyond the photocount bound.
    pub forward_deficit: f64,
}

impl EmResult1d {
    pub fn mean(&self) -> f64 {
        self.distribution.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Rows of `t` matching the photocount support of `f`.
fn povm_rows(t: &PovmTable, rows: usize, nonzero_rows: usize) -> Result<ArrayView2<'_, f64>> {
    if t.c_max() + 1 < nonzero_rows {
        return Err(Error::invalid(
            "povm",
            format!("table covers photocounts up to {} but data reaches {}", t.c_max(), nonzero_rows - 1),
        ));
    }
    Ok(t.matrix().slice(s![..rows.min(t.c_max() + 1), ..]))
}

fn last_nonzero(v: impl Iterator<Item = bool>) -> usize {
    v.enumerate().filter(|(_, nz)| *nz).map(|(k, _)| k + 1).last().unwrap_or(0)
}

/// Data of one 2D EM problem with the histogram trimmed to the table rows.
struct Problem2d<'a> {
    f: Array2<f64>,
    ts: ArrayView2<'a, f64>,
    ti: ArrayView2<'a, f64>,
}

impl<'a> Problem2d<'a> {
    fn new(f: ArrayView2<f64>, ts: &'a PovmTable, ti: &'a PovmTable) -> Result<Self> {
        let sum: f64 = f.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("f", format!("histogram sums to {sum}")));
        }
        let rows_s = last_nonzero(f.rows().into_iter().map(|r| r.iter().any(|&v| v > 0.0)));
        let rows_i = last_nonzero(f.columns().into_iter().map(|c| c.iter().any(|&v| v > 0.0)));
        let ts = povm_rows(ts, f.nrows(), rows_s)?;
        let ti = povm_rows(ti, f.ncols(), rows_i)?;
        let f = f.slice(s![..ts.nrows(), ..ti.nrows()]).to_owned();
        Ok(Self { f, ts, ti })
    }

    fn forward(&self, p: &Array2<f64>) -> Array2<f64> {
        self.ts.dot(&p.dot(&self.ti.t()))
    }

    /// One update; returns the new distribution and `L` of the old one.
    fn step(&self, p: &Array2<f64>, floor: f64) -> Result<(Array2<f64>, f64)> {
        let forward = self.forward(p);
        let mut ll = 0.0;
        let ratio = Array2::from_shape_fn(self.f.dim(), |(a, b)| {
            let f = self.f[[a, b]];
            if f > 0.0 {
                f / forward[[a, b]]
            } else {
                0.0
            }
        });
        for ((a, b), &f) in self.f.indexed_iter() {
            if f > 0.0 {
                let fw = forward[[a, b]];
                if !(fw >= floor) || fw <= 0.0 {
                    return Err(Error::ModelMismatch(format!(
                        "photocount ({a}, {b}) observed with frequency {f:e} but predicted {fw:e}"
                    )));
                }
                ll += f * fw.ln();
            }
        }
        let multiplier = self.ts.t().dot(&ratio).dot(&self.ti);
        let mut next = p * &multiplier;
        let sum = next.sum();
        let drift = (sum - 1.0).abs();
        if !(drift <= MAX_DRIFT) {
            return Err(Error::NormalizationDrift { drift });
        }
        next /= sum;
        Ok((next, ll))
    }
}

/// One EM update of `p` against the photocount frequencies `f`.
pub fn em_step_2d(
    p: &JointPhotonDistribution,
    f: ArrayView2<f64>,
    ts: &PovmTable,
    ti: &PovmTable,
    config: &EmConfig,
) -> Result<JointPhotonDistribution> {
    check_columns(p.probabilities(), ts, ti)?;
    let problem = Problem2d::new(f, ts, ti)?;
    let (next, _) = problem.step(&p.probabilities().to_owned(), config.floor)?;
    let deficit = edge_mass(&next);
    JointPhotonDistribution::new(next, deficit)
}

fn check_columns(p: ArrayView2<f64>, ts: &PovmTable, ti: &PovmTable) -> Result<()> {
    if p.nrows() != ts.n_max() + 1 || p.ncols() != ti.n_max() + 1 {
        return Err(Error::invalid(
            "p",
            format!(
                "shape {:?} does not match POVM photon bounds ({}, {})",
                p.dim(),
                ts.n_max(),
                ti.n_max()
            ),
        ));
    }
    Ok(())
}

/// Iterates from the uniform distribution until the likelihood settles.
pub fn em_run(f: ArrayView2<f64>, ts: &PovmTable, ti: &PovmTable, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    let problem = Problem2d::new(f, ts, ti)?;
    let shape = (ts.n_max() + 1, ti.n_max() + 1);
    let mut p = Array2::from_elem(shape, 1.0 / (shape.0 * shape.1) as f64);
    let (trace, converged, iterations) = iterate(config, &mut p, |p, floor| problem.step(p, floor))?;
    let forward_deficit = (1.0 - problem.forward(&p).sum()).max(0.0);
    let deficit = edge_mass(&p);
    Ok(EmResult {
        distribution: JointPhotonDistribution::new(p, deficit)?,
        iterations,
        log_likelihood: trace,
        converged,
        forward_deficit,
    })
}

/// Probability on the last row and column.
pub(crate) fn edge_mass(p: &Array2<f64>) -> f64 {
    let (r, c) = p.dim();
    let rows: f64 = p.row(r - 1).sum();
    let cols: f64 = p.column(c - 1).sum();
    rows + cols - p[[r - 1, c - 1]]
}

fn forward_1d(t: ArrayView2<f64>, p: ArrayView1<f64>) -> Array1<f64> {
    t.dot(&p)
}

/// One-dimensional EM on a photocount distribution `f`.
pub fn em_run_1d(f: &[f64], t: &PovmTable, config: &EmConfig) -> Result<EmResult1d> {
    config.validate()?;
    let sum: f64 = f.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("f", format!("distribution sums to {sum}")));
    }
    let rows = last_nonzero(f.iter().map(|&v| v > 0.0));
    let t = povm_rows(t, f.len(), rows)?;
    let f = ArrayView1::from(&f[..t.nrows()]).to_owned();
    let n = t.ncols();
    let mut p = Array1::from_elem(n, 1.0 / n as f64);

    let (trace, converged, iterations) = {
        let step = |p: &Array1<f64>, floor: f64| -> Result<(Array1<f64>, f64)> {
            let fw = forward_1d(t.view(), p.view());
            let mut ll = 0.0;
            let mut ratio = Array1::zeros(f.len());
            for (c, &fc) in f.iter().enumerate() {
                if fc > 0.0 {
                    if !(fw[c] >= floor) || fw[c] <= 0.0 {
                        return Err(Error::ModelMismatch(format!(
                            "photocount {c} observed with frequency {fc:e} but predicted {:e}",
                            fw[c]
                        )));
                    }
                    ll += fc * fw[c].ln();
                    ratio[c] = fc / fw[c];
                }
            }
            let mut next = p * &t.t().dot(&ratio);
            let s = next.sum();
            let drift = (s - 1.0).abs();
            if !(drift <= MAX_DRIFT) {
                return Err(Error::NormalizationDrift { drift });
            }
            next /= s;
            Ok((next, ll))
        };
        iterate(config, &mut p, step)?
    };
    let forward_deficit = (1.0 - forward_1d(t.view(), p.view()).sum()).max(0.0);
    Ok(EmResult1d {
        truncation_deficit: p[n - 1],
        distribution: p.to_vec(),
        iterations,
        log_likelihood: trace,
        converged,
        forward_deficit,
    })
}

/// Runs `step`, which maps `p` to `(p_next, L(p))`, until the likelihood settles.
fn iterate<P>(
    config: &EmConfig,
    p: &mut P,
    step: impl Fn(&P, f64) -> Result<(P, f64)>,
) -> Result<(Vec<f64>, bool, usize)> {
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let (next, ll) = step(p, config.floor)?;
        if let Some(&prev) = trace.last() {
            if ll < prev - MONOTONE_SLACK {
                return Err(Error::NonMonotoneLikelihood { iteration: iterations, drop: prev - ll });
            }
            trace.push(ll);
            if (ll - prev).abs() <= config.tolerance * ll.abs().max(1.0) {
                return Ok((trace, true, iterations));
            }
        } else {
            trace.push(ll);
        }
        if iterations == config.max_iterations {
            return Ok((trace, false, iterations));
        }
        *p = next;
        iterations += 1;
    }
}

/// Reconstruction with the noisy detector model on both strips.
pub fn reconstruct_standard(
    f: &JointHistogram,
    params_s: &DetectorParams,
    params_i: &DetectorParams,
    config: &EmConfig,
) -> Result<EmResult> {
    reconstruct_standard_cached(f, params_s, params_i, config, &PovmCache::new())
}

pub fn reconstruct_standard_cached(
    f: &JointHistogram,
    params_s: &DetectorParams,
    params_i: &DetectorParams,
    config: &EmConfig,
    cache: &PovmCache,
) -> Result<EmResult> {
    let (obs_s, obs_i) = f.observed_max();
    let (cs, ns) = default_bounds(obs_s, params_s)?;
    let (ci, ni) = default_bounds(obs_i, params_i)?;
    let ts = cache.get_or_build(params_s, cs, ns)?;
    let ti = cache.get_or_build(params_i, ci, ni)?;
    let freq = f.normalized()?;
    em_run(freq.view(), &ts, &ti, config)
}

/// Which effective efficiency drives the pair reconstruction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaPairPolicy {
    #[default]
    Mean,
    Idler,
    Signal,
    Geometric,
}

impl EtaPairPolicy {
    pub fn resolve(&self, eff: &EffectiveEfficiencies) -> f64 {
        match self {
            EtaPairPolicy::Mean => eff.mean(),
            EtaPairPolicy::Idler => eff.eta_i_eff,
            EtaPairPolicy::Signal => eff.eta_s_eff,
            EtaPairPolicy::Geometric => eff.geometric(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredReconstruction {
    pub distribution: JointPhotonDistribution,
    pub pairs: EmResult1d,
    pub unpaired: EmResult,
    pub eta_pair: f64,
}

impl FilteredReconstruction {
    pub fn converged(&self) -> bool {
        self.pairs.converged && self.unpaired.converged
    }
}

/// Pair-filtered reconstruction: noiseless models for the pair counts and
/// for the unpaired counts, recombined by convolution.
pub fn reconstruct_filtered(
    paired: &PairedHistogram,
    eta_s: f64,
    eta_i: f64,
    eta_pair: f64,
    geometry: &StripGeometry,
    config: &EmConfig,
) -> Result<FilteredReconstruction> {
    reconstruct_filtered_cached(paired, eta_s, eta_i, eta_pair, geometry.signal_pixels(), geometry, config, &PovmCache::new())
}

/// As [`reconstruct_filtered`], with an explicit pixel count for the pair
/// detector model and a shared table cache.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_filtered_cached(
    paired: &PairedHistogram,
    eta_s: f64,
    eta_i: f64,
    eta_pair: f64,
    pair_pixels: u32,
    geometry: &StripGeometry,
    config: &EmConfig,
    cache: &PovmCache,
) -> Result<FilteredReconstruction> {
    if !(eta_pair > 0.0 && eta_pair <= 1.0) {
        return Err(Error::invalid("eta_pair", format!("{eta_pair} is outside (0, 1]")));
    }
    let pair_params = DetectorParams::new(pair_pixels, eta_pair, 0.0)?;
    let obs_p = paired.pair_counts.len().saturating_sub(1);
    let (cp, np) = default_bounds(obs_p, &pair_params)?;
    let tp = cache.get_or_build(&pair_params, cp, np)?;
    let pairs = em_run_1d(&paired.pair_distribution(), &tp, config)?;

    let params_s = DetectorParams::new(geometry.signal_pixels(), eta_s, 0.0)?;
    let params_i = DetectorParams::new(geometry.idler_pixels(), eta_i, 0.0)?;
    let unpaired = reconstruct_standard_cached(&paired.unpaired_counts, &params_s, &params_i, config, cache)?;
    let distribution = convolve_with_deficit(&pairs.distribution, &unpaired.distribution, pairs.truncation_deficit)?;
    Ok(FilteredReconstruction { distribution, pairs, unpaired, eta_pair })
}

/// `p(n_s, n_i) = Σ_{n_p} p_pair(n_p) · p_unpaired(n_s - n_p, n_i - n_p)`.
pub fn convolve(p_pair: &[f64], p_unpaired: &JointPhotonDistribution) -> Result<JointPhotonDistribution> {
    convolve_with_deficit(p_pair, p_unpaired, 0.0)
}

fn convolve_with_deficit(
    p_pair: &[f64],
    p_unpaired: &JointPhotonDistribution,
    pair_deficit: f64,
) -> Result<JointPhotonDistribution> {
    if p_pair.is_empty() {
        return Err(Error::invalid("p_pair", "empty distribution"));
    }
    let pair_sum: f64 = p_pair.iter().sum();
    if p_pair.iter().any(|&v| !(v >= 0.0)) || (pair_sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("p_pair", "not a normalized distribution"));
    }
    let u = p_unpaired.probabilities();
    let mut out = Array2::zeros((p_pair.len() + u.nrows() - 1, p_pair.len() + u.ncols() - 1));
    for (np, &w) in p_pair.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut block = out.slice_mut(s![np..np + u.nrows(), np..np + u.ncols()]);
        block.scaled_add(w, &u);
    }
    let deficit = 1.0 - (1.0 - pair_deficit) * (1.0 - p_unpaired.truncation_deficit());
    JointPhotonDistribution::new(out, deficit.max(0.0))
}
