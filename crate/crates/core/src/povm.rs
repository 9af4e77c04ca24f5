//! Detection POVM of a pixelated photon-counting strip.
//!
//! `T(c, n)` is the probability that `n` incident photons produce `c` fired
//! pixels on a strip of `N` pixels with efficiency `η` and per-pixel dark
//! count probability `D`:
//!
//! ```text
//! T(c,n) = C(N,c) (1-D)^N (1-η)^n (-1)^c
//!          Σ_{l=0}^{c} C(c,l) (-1)^l (1-D)^{-l} (1 + l η / (N (1-η)))^n
//! ```
//!
//! The alternating sum is evaluated term by term in log magnitude with the
//! sign tracked separately and a compensated accumulator. When the estimated
//! cancellation error of an entry is too large the entry is taken from a
//! term-positive recursion over photons (pixel occupancy followed by dark
//! counts on the still-empty pixels), which describes the same quantity
//! without any subtraction.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::DetectorParams;

/// Relative error above which an alternating-sum entry is recomputed.
const FALLBACK_REL_ERROR: f64 = 1e-10;
/// Cancellation (in decimal digits) above which the recursion is used.
const MAX_CANCELLATION_DIGITS: f64 = 12.0;
/// Relative error an entry may not exceed.
const MAX_REL_ERROR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PovmTable {
    params: DetectorParams,
    /// Indexed `[c, n]`.
    t: Array2<f64>,
    fallback_entries: usize,
}

impl PovmTable {
    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn get(&self, c: usize, n: usize) -> f64 {
        self.t[[c, n]]
    }

    /// The full table indexed `[c, n]`.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn c_max(&self) -> usize {
        self.t.nrows() - 1
    }

    pub fn n_max(&self) -> usize {
        self.t.ncols() - 1
    }

    /// `Σ_c T(c, n)` over the stored photocount range.
    pub fn column_sum(&self, n: usize) -> f64 {
        self.t.column(n).sum()
    }

    /// Number of entries taken from the positive recursion rather than the
    /// alternating sum.
    pub fn fallback_entries(&self) -> usize {
        self.fallback_entries
    }
}

/// Builds `T(c, n)` for `c in 0..=c_max`, `n in 0..=n_max`.
pub fn build_povm(params: &DetectorParams, c_max: usize, n_max: usize) -> Result<PovmTable> {
    let pixels = params.pixels() as usize;
    if c_max > pixels {
        return Err(Error::invalid(
            "c_max",
            format!("{c_max} exceeds the pixel count {pixels}"),
        ));
    }
    let ln_fact = ln_factorials(c_max);
    let prefactors: Vec<f64> = (0..=c_max)
        .map(|c| ln_binomial_large(pixels, c) + pixels as f64 * (-params.dark()).ln_1p())
        .collect();

    let columns: Vec<Vec<(f64, f64)>> = (0..=n_max)
        .into_par_iter()
        .map(|n| {
            (0..=c_max)
                .map(|c| alternating_entry(params, &ln_fact, prefactors[c], c, n))
                .collect()
        })
        .collect();

    let mut t = Array2::zeros((c_max + 1, n_max + 1));
    let mut recursion: Option<Array2<f64>> = None;
    let mut fallback_entries = 0;
    for (n, column) in columns.into_iter().enumerate() {
        for (c, (value, rel_error)) in column.into_iter().enumerate() {
            if rel_error <= FALLBACK_REL_ERROR && value.is_finite() {
                t[[c, n]] = value;
                continue;
            }
            let table = recursion.get_or_insert_with(|| occupancy_table(params, c_max, n_max));
            let fallback = table[[c, n]];
            let fallback_error = f64::EPSILON * (4 * (n + c) + 16) as f64;
            if !fallback.is_finite() || fallback_error > MAX_REL_ERROR {
                return Err(Error::NumericalInstability { c, n, rel_error: fallback_error });
            }
            t[[c, n]] = fallback;
            fallback_entries += 1;
        }
    }
    Ok(PovmTable {
        params: *params,
        t,
        fallback_entries,
    })
}

/// The same table with dark counts switched off.
pub fn build_noiseless_povm(params: &DetectorParams, c_max: usize, n_max: usize) -> Result<PovmTable> {
    build_povm(&params.noiseless(), c_max, n_max)
}

/// Default truncation: `c_max = observed + 5` (capped at the pixel count) and
/// `n_max = ⌈c_max/η⌉ + ⌈4·sqrt(⌈c_max/η⌉)⌉`.
pub fn default_bounds(observed_max: usize, params: &DetectorParams) -> Result<(usize, usize)> {
    if params.eta() <= 0.0 {
        return Err(Error::invalid("eta", "reconstruction needs a non-zero efficiency"));
    }
    let c_max = (observed_max + 5).min(params.pixels() as usize);
    let amplified = (c_max as f64 / params.eta()).ceil();
    let n_max = amplified + (4.0 * amplified.sqrt()).ceil();
    Ok((c_max, n_max as usize))
}

/// Returns `(value, estimated relative error)` of the alternating sum.
fn alternating_entry(
    params: &DetectorParams,
    ln_fact: &[f64],
    ln_prefactor: f64,
    c: usize,
    n: usize,
) -> (f64, f64) {
    let pixels = params.pixels() as f64;
    let eta = params.eta();
    let ln_keep = (-params.dark()).ln_1p();

    let mut logs = Vec::with_capacity(c + 1);
    for l in 0..=c {
        // (1-η)^n (1 + lη/(N(1-η)))^n = (1 - η(N-l)/N)^n
        let base = ((1.0 - eta) * pixels + eta * l as f64) / pixels;
        let ln_power = if n == 0 {
            0.0
        } else if base <= 0.0 {
            continue;
        } else {
            n as f64 * base.ln()
        };
        let ln_term = ln_fact[c] - ln_fact[l] - ln_fact[c - l] - l as f64 * ln_keep + ln_power;
        let negative = (c - l) % 2 == 1;
        logs.push((ln_term, negative));
    }
    if logs.is_empty() {
        return (0.0, 0.0);
    }
    let peak = logs.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = Neumaier::default();
    let mut magnitude = 0.0;
    let mut worst_log: f64 = 0.0;
    for &(ln_term, negative) in &logs {
        let v = (ln_term - peak).exp();
        magnitude += v;
        sum.add(if negative { -v } else { v });
        worst_log = worst_log.max(ln_term.abs());
    }
    let s = sum.total();
    if s <= 0.0 {
        return (0.0, f64::INFINITY);
    }
    let cancellation = magnitude / s;
    if cancellation.log10() > MAX_CANCELLATION_DIGITS {
        return (0.0, f64::INFINITY);
    }
    let exponent = ln_prefactor + peak + s.ln();
    let rel_error = f64::EPSILON
        * ((ln_prefactor.abs() + peak.abs()) + cancellation * (4.0 * (c + 1) as f64 + worst_log));
    (exponent.exp(), rel_error)
}

/// Term-positive construction of the whole table: photons fill pixels one at
/// a time, then every pixel left empty may dark-fire.
pub(crate) fn occupancy_table(params: &DetectorParams, c_max: usize, n_max: usize) -> Array2<f64> {
    let pixels = params.pixels() as usize;
    let nf = pixels as f64;
    let eta = params.eta();

    // occupancy[k] = P(k pixels hit by light) after the current photon count
    let mut occupancy = vec![0.0; c_max + 1];
    occupancy[0] = 1.0;
    let dark = dark_pmf_table(params, c_max);
    let mut t = Array2::zeros((c_max + 1, n_max + 1));
    for n in 0..=n_max {
        if n > 0 {
            for k in (0..=c_max.min(n)).rev() {
                let stay = 1.0 - eta * (pixels - k) as f64 / nf;
                let mut v = occupancy[k] * stay;
                if k > 0 {
                    v += occupancy[k - 1] * eta * (pixels - k + 1) as f64 / nf;
                }
                occupancy[k] = v;
            }
        }
        for c in 0..=c_max {
            let mut acc = 0.0;
            for k in 0..=c.min(n) {
                acc += occupancy[k] * dark[[k, c - k]];
            }
            t[[c, n]] = acc;
        }
    }
    t
}

/// `dark[[k, j]]` = P(j dark counts among the `N - k` pixels without light).
fn dark_pmf_table(params: &DetectorParams, c_max: usize) -> Array2<f64> {
    let pixels = params.pixels() as usize;
    let d = params.dark();
    let mut table = Array2::zeros((c_max + 1, c_max + 1));
    for k in 0..=c_max {
        let free = pixels - k;
        for j in 0..=(c_max - k) {
            table[[k, j]] = if d == 0.0 {
                if j == 0 { 1.0 } else { 0.0 }
            } else if j > free {
                0.0
            } else {
                (ln_binomial_large(free, j) + j as f64 * d.ln() + (free - j) as f64 * (-d).ln_1p()).exp()
            };
        }
    }
    table
}

/// `ln C(n, k)` as a sum of `k` well-conditioned logarithms.
fn ln_binomial_large(n: usize, k: usize) -> f64 {
    (0..k).map(|t| ((n - t) as f64 / (t + 1) as f64).ln()).sum()
}

fn ln_factorials(max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=max {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Kahan–Babuška–Neumaier running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Neumaier {
    sum: f64,
    compensation: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Monte-Carlo estimate of `T(·, n)`: each of `n` photons survives with
/// probability `η` and lands on a uniformly chosen pixel, and every pixel
/// left dark fires with probability `D`. Returns frequencies indexed by `c`.
pub fn povm_oracle(params: &DetectorParams, n: usize, trials: u64, seed: u64) -> Vec<f64> {
    const CHUNK: u64 = 1 << 16;
    let pixels = params.pixels();
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let len = CHUNK.min(trials - chunk * CHUNK);
            let mut tally = vec![0u64; n + 1];
            let mut hit: Vec<u32> = Vec::with_capacity(n);
            let survivors = Binomial::new(n as u64, params.eta()).expect("eta validated");
            let darks: Vec<Binomial> = (0..=n.min(pixels as usize))
                .map(|lit| Binomial::new(pixels as u64 - lit as u64, params.dark()).expect("dark validated"))
                .collect();
            for _ in 0..len {
                hit.clear();
                let k = survivors.sample(&mut rng);
                for _ in 0..k {
                    let pixel = rng.random_range(0..pixels);
                    if !hit.contains(&pixel) {
                        hit.push(pixel);
                    }
                }
                let lit = hit.len() as u64;
                let dark = if params.dark() > 0.0 {
                    darks[lit as usize].sample(&mut rng)
                } else {
                    0
                };
                let c = (lit + dark) as usize;
                if c >= tally.len() {
                    tally.resize(c + 1, 0);
                }
                tally[c] += 1;
            }
            tally
        })
        .collect();
    let len = partial.iter().map(Vec::len).max().unwrap_or(1);
    let mut total = vec![0u64; len];
    for part in &partial {
        for (acc, &v) in total.iter_mut().zip(part) {
            *acc += v;
        }
    }
    total.into_iter().map(|v| v as f64 / trials as f64).collect()
}

type CacheKey = (u32, u64, u64, usize, usize);

/// Immutable tables shared across reconstructions with equal parameters
/// and bounds.
#[derive(Debug, Default, Clone)]
pub struct PovmCache {
    tables: Arc<Mutex<HashMap<CacheKey, Arc<PovmTable>>>>,
}

impl PovmCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, params: &DetectorParams, c_max: usize, n_max: usize) -> Result<Arc<PovmTable>> {
        let key = (
            params.pixels(),
            params.eta().to_bits(),
            params.dark().to_bits(),
            c_max,
            n_max,
        );
        if let Some(table) = self.tables.lock().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(table));
        }
        let table = Arc::new(build_povm(params, c_max, n_max)?);
        self.tables
            .lock()
            .expect("cache poisoned")
            .entry(key)
            .or_insert_with(|| Arc::clone(&table));
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.tables.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: u32, eta: f64, d: f64) -> DetectorParams {
        DetectorParams::new(n, eta, d).unwrap()
    }

    /// Enumerates every photon outcome (lost or one of N pixels) and every
    /// dark-count pattern.
    fn brute_force(p: &DetectorParams, n: usize) -> Vec<f64> {
        let pixels = p.pixels() as usize;
        let outcomes = pixels + 1;
        let mut dist = vec![0.0; pixels + 1];
        let mut idx = vec![0usize; n];
        loop {
            let mut prob = 1.0;
            let mut lit = vec![false; pixels];
            for &o in &idx {
                if o == pixels {
                    prob *= 1.0 - p.eta();
                } else {
                    prob *= p.eta() / pixels as f64;
                    lit[o] = true;
                }
            }
            for mask in 0u32..(1 << pixels) {
                let mut q = prob;
                let mut c = 0;
                for (k, &l) in lit.iter().enumerate() {
                    let dark = mask & (1 << k) != 0;
                    q *= if dark { p.dark() } else { 1.0 - p.dark() };
                    if l || dark {
                        c += 1;
                    }
                }
                dist[c] += q;
            }
            let mut pos = 0;
            loop {
                if pos == n {
                    return dist;
                }
                idx[pos] += 1;
                if idx[pos] < outcomes {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn vacuum_entry_is_all_pixels_silent() {
        let t = build_povm(&params(2, 0.3, 0.1), 2, 0).unwrap();
        assert!((t.get(0, 0) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn single_photon_on_two_pixels() {
        let t = build_povm(&params(2, 0.5, 0.0), 2, 1).unwrap();
        assert!((t.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((t.get(1, 1) - 0.5).abs() < 1e-15);
        assert!(t.get(2, 1).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        for &(n_pix, eta, d) in &[(1, 0.4, 0.0), (3, 0.7, 0.05), (4, 0.25, 0.2), (5, 0.9, 0.0), (6, 0.5, 0.1)] {
            let p = params(n_pix, eta, d);
            let table = build_povm(&p, n_pix as usize, 5).unwrap();
            for n in 0..=5usize.min(if n_pix > 4 { 3 } else { 5 }) {
                let exact = brute_force(&p, n);
                for (c, &e) in exact.iter().enumerate() {
                    assert!(
                        (table.get(c, n) - e).abs() < 1e-12,
                        "N={n_pix} eta={eta} D={d} c={c} n={n}: {} vs {e}",
                        table.get(c, n)
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_table_vanishes_above_diagonal() {
        for n_pix in 1..=6u32 {
            let p = params(n_pix, 0.6, 0.0);
            let t = build_noiseless_povm(&p, n_pix as usize, 5).unwrap();
            for n in 0..=5 {
                for c in (n + 1)..=(n_pix as usize) {
                    assert!(t.get(c, n).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_efficiency_detects_nothing() {
        let t = build_noiseless_povm(&params(50, 0.0, 0.3), 10, 20).unwrap();
        for n in 0..=20 {
            assert_eq!(t.get(0, n), 1.0);
            for c in 1..=10 {
                assert_eq!(t.get(c, n), 0.0);
            }
        }
    }

    #[test]
    fn unit_efficiency_on_large_strip_detects_single_photon() {
        let t = build_noiseless_povm(&params(100_000, 1.0, 0.0), 3, 1).unwrap();
        assert!((t.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn both_routes_agree_where_the_sum_is_well_conditioned() {
        let p = params(6500, 0.228, 0.2 / 6500.0);
        let direct = build_povm(&p, 40, 60).unwrap();
        let positive = occupancy_table(&p, 40, 60);
        for ((c, n), &v) in direct.matrix().indexed_iter() {
            let w = positive[[c, n]];
            assert!((v - w).abs() <= 1e-9 * w.abs().max(1e-300), "c={c} n={n}: {v} vs {w}");
        }
    }

    #[test]
    fn columns_sum_to_one_when_exhaustive() {
        let p = params(30, 0.5, 0.02);
        let t = build_povm(&p, 30, 40).unwrap();
        for n in 0..=40 {
            assert!((t.column_sum(n) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_mean_matches_occupancy_formula() {
        let p = params(80, 0.35, 0.0);
        let t = build_povm(&p, 80, 60).unwrap();
        for n in 0..=60 {
            let mean: f64 = (0..=80).map(|c| c as f64 * t.get(c, n)).sum();
            let expected = 80.0 * (1.0 - (1.0 - 0.35 / 80.0f64).powi(n as i32));
            assert!((mean - expected).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn c_max_beyond_pixels_is_rejected() {
        assert!(build_povm(&params(4, 0.5, 0.0), 5, 3).is_err());
    }

    #[test]
    fn default_bounds_follow_inverse_efficiency() {
        let p = params(6500, 0.25, 0.0);
        assert_eq!(default_bounds(15, &p).unwrap(), (20, 80 + 36));
        assert!(default_bounds(3, &params(6500, 0.0, 0.0)).is_err());
    }

    #[test]
    fn table_is_deterministic() {
        let p = params(6500, 0.223, 0.2 / 6500.0);
        let a = build_povm(&p, 30, 120).unwrap();
        let b = build_povm(&p, 30, 120).unwrap();
        assert!(a.matrix().iter().zip(b.matrix()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn oracle_vacuum() {
        let f = povm_oracle(&params(10, 0.5, 0.0), 0, 1000, 3);
        assert_eq!(f[0], 1.0);
    }

    #[test]
    fn oracle_single_photon_two_pixels() {
        let trials = 1_000_000;
        let f = povm_oracle(&params(2, 0.5, 0.0), 1, trials, 11);
        let se = (0.25f64 / trials as f64).sqrt();
        assert!((f[1] - 0.5).abs() < 3.0 * se, "{}", f[1]);
    }

    #[test]
    fn oracle_matches_table_in_total_variation() {
        let p = params(100, 0.3, 0.01);
        let table = build_povm(&p, 100, 5).unwrap();
        let f = povm_oracle(&p, 5, 1_000_000, 5);
        let tv: f64 = (0..=100)
            .map(|c| (f.get(c).copied().unwrap_or(0.0) - table.get(c, 5)).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv = {tv}");
    }

    #[test]
    fn cache_reuses_tables() {
        let cache = PovmCache::new();
        let p = params(100, 0.3, 0.0);
        let a = cache.get_or_build(&p, 10, 20).unwrap();
        let b = cache.get_or_build(&p, 10, 20).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }
}
