//! Moments, nonclassicality identifiers and correlation quantifiers.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution as _};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::PairedHistogram;
use crate::model::{JointHistogram, JointPhotonDistribution};

pub const MAX_ORDER: usize = 4;
/// Largest truncation deficit tolerated by moment evaluation.
pub const MAX_TAIL_MASS: f64 = 1e-6;
/// Relative agreement required between the two intensity-moment routes.
pub const DUAL_PATH_TOLERANCE: f64 = 1e-9;
/// Upper end of the bracket expansion for the nonclassicality depth.
pub const TAU_LIMIT: f64 = 1e6;
pub const DEFAULT_TAU_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Photocount,
    PhotonNumber,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Photocount => "photocount",
            Source::PhotonNumber => "photon-number",
        }
    }
}

/// Either a photocount histogram or a reconstructed photon-number distribution.
#[derive(Debug, Clone, Copy)]
pub enum Distribution<'a> {
    Histogram(&'a JointHistogram),
    PhotonNumber(&'a JointPhotonDistribution),
}

/// Joint moments indexed `[j, k]`, defined for `j + k ≤ order`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub order: usize,
    pub source: Source,
    /// `⟨x_s^j x_i^k⟩`.
    pub raw: Array2<f64>,
    /// `⟨(x_s)_j (x_i)_k⟩` with falling factorials, when summed directly.
    pub factorial: Option<Array2<f64>>,
    /// `⟨W_s^j W_i^k⟩`, filled by [`intensity_moments`].
    pub intensity: Option<Array2<f64>>,
}

impl MomentSet {
    /// Moment set built from raw moments only.
    pub fn from_raw(raw: Array2<f64>, source: Source) -> Result<Self> {
        let order = raw.nrows().saturating_sub(1);
        if raw.ncols() != raw.nrows() || order == 0 || order > MAX_ORDER {
            return Err(Error::invalid("raw", "expected a square table of order 1..=4"));
        }
        Ok(Self { order, source, raw, factorial: None, intensity: None })
    }

    pub fn means(&self) -> (f64, f64) {
        (self.raw[[1, 0]], self.raw[[0, 1]])
    }

    fn intensity_table(&self) -> Result<&Array2<f64>> {
        self.intensity
            .as_ref()
            .ok_or_else(|| Error::invalid("moments", "intensity moments not computed"))
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::invalid("order", format!("{order} is outside 1..=4")));
    }
    Ok(())
}

fn falling(x: u128, k: usize) -> u128 {
    (0..k as u128).map(|m| x.saturating_sub(m)).product()
}

/// Direct summation of raw and falling-factorial moments.
pub fn raw_moments(dist: Distribution<'_>, order: usize) -> Result<MomentSet> {
    check_order(order)?;
    let side = order + 1;
    let mut raw = Array2::from_elem((side, side), f64::NAN);
    let mut factorial = Array2::from_elem((side, side), f64::NAN);
    let source = match dist {
        Distribution::Histogram(h) => {
            let total = h.total_shots();
            if total == 0 {
                return Err(Error::NoFrames);
            }
            for j in 0..side {
                for k in 0..side - j {
                    let mut sr: u128 = 0;
                    let mut sf: u128 = 0;
                    for ((s, i), &n) in h.counts().indexed_iter() {
                        if n == 0 {
                            continue;
                        }
                        let (s, i, n) = (s as u128, i as u128, n as u128);
                        sr += n * s.pow(j as u32) * i.pow(k as u32);
                        sf += n * falling(s, j) * falling(i, k);
                    }
                    raw[[j, k]] = sr as f64 / total as f64;
                    factorial[[j, k]] = sf as f64 / total as f64;
                }
            }
            Source::Photocount
        }
        Distribution::PhotonNumber(p) => {
            if p.truncation_deficit() >= MAX_TAIL_MASS {
                return Err(Error::TailMass(p.truncation_deficit()));
            }
            let probs = p.probabilities();
            for j in 0..side {
                for k in 0..side - j {
                    let mut sr = 0.0;
                    let mut sf = 0.0;
                    for ((s, i), &v) in probs.indexed_iter() {
                        if v == 0.0 {
                            continue;
                        }
                        let (sf64, if64) = (s as f64, i as f64);
                        sr += v * sf64.powi(j as i32) * if64.powi(k as i32);
                        sf += v * falling(s as u128, j) as f64 * falling(i as u128, k) as f64;
                    }
                    raw[[j, k]] = sr;
                    factorial[[j, k]] = sf;
                }
            }
            Source::PhotonNumber
        }
    };
    Ok(MomentSet { order, source, raw, factorial: Some(factorial), intensity: None })
}

/// Signed Stirling numbers of the first kind, `s[n][k]`, for `n ≤ 4`.
pub fn stirling_first() -> [[f64; MAX_ORDER + 1]; MAX_ORDER + 1] {
    let mut s = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
    s[0][0] = 1.0;
    for n in 0..MAX_ORDER {
        for k in 1..=n + 1 {
            s[n + 1][k] = s[n][k - 1] - n as f64 * s[n][k];
        }
    }
    s
}

/// Stirling numbers of the second kind, `S[n][k]`, for `n ≤ 4`.
pub fn stirling_second() -> [[f64; MAX_ORDER + 1]; MAX_ORDER + 1] {
    let mut s = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
    s[0][0] = 1.0;
    for n in 0..MAX_ORDER {
        for k in 1..=n + 1 {
            s[n + 1][k] = k as f64 * s[n][k] + s[n][k - 1];
        }
    }
    s
}

/// Fills `intensity` by Stirling inversion and checks it against the
/// directly summed factorial moments (or, without them, against a triangular
/// solve of the second-kind system).
pub fn intensity_moments(mut moments: MomentSet) -> Result<MomentSet> {
    let side = moments.order + 1;
    let s1 = stirling_first();
    let s2 = stirling_second();
    let raw = &moments.raw;
    let mut inverted = Array2::from_elem((side, side), f64::NAN);
    let mut scale = Array2::from_elem((side, side), f64::NAN);
    for j in 0..side {
        for k in 0..side - j {
            let mut acc = 0.0;
            let mut mag = 0.0;
            for a in 0..=j {
                for b in 0..=k {
                    let term = s1[j][a] * s1[k][b] * raw[[a, b]];
                    acc += term;
                    mag += term.abs();
                }
            }
            inverted[[j, k]] = acc;
            scale[[j, k]] = mag;
        }
    }
    let check = match &moments.factorial {
        Some(f) => f.clone(),
        None => {
            let mut w = Array2::from_elem((side, side), f64::NAN);
            for a in 0..side {
                for b in 0..side - a {
                    let mut acc = raw[[a, b]];
                    for j in 0..=a {
                        for k in 0..=b {
                            if (j, k) != (a, b) {
                                acc -= s2[a][j] * s2[b][k] * w[[j, k]];
                            }
                        }
                    }
                    w[[a, b]] = acc;
                }
            }
            w
        }
    };
    for j in 0..side {
        for k in 0..side - j {
            let (a, b) = (inverted[[j, k]], check[[j, k]]);
            let bound = DUAL_PATH_TOLERANCE * scale[[j, k]].max(f64::MIN_POSITIVE);
            if !((a - b).abs() <= bound) {
                return Err(Error::InternalMismatch { j, k, a, b });
            }
        }
    }
    moments.intensity = Some(inverted);
    Ok(moments)
}

/// Raw moments followed by intensity moments.
pub fn moments(dist: Distribution<'_>, order: usize) -> Result<MomentSet> {
    intensity_moments(raw_moments(dist, order)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Identifiers {
    pub e2: f64,
    pub e3: f64,
    pub e4: f64,
}

impl Identifiers {
    pub fn get(&self, k: usize) -> f64 {
        match k {
            2 => self.e2,
            3 => self.e3,
            _ => self.e4,
        }
    }
}

fn identifier(w: &Array2<f64>, k: usize) -> f64 {
    match k {
        2 => w[[2, 0]] + w[[0, 2]] - 2.0 * w[[1, 1]],
        3 => w[[3, 0]] + w[[0, 3]] - w[[2, 1]] - w[[1, 2]],
        _ => w[[4, 0]] + w[[0, 4]] - 2.0 * w[[2, 2]],
    }
}

pub fn nonclassicality_identifiers(moments: &MomentSet) -> Result<Identifiers> {
    if moments.order < 4 {
        return Err(Error::invalid("moments", "identifiers need moments up to order 4"));
    }
    let w = moments.intensity_table()?;
    Ok(Identifiers { e2: identifier(w, 2), e3: identifier(w, 3), e4: identifier(w, 4) })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, m| acc * (n - m) as f64 / (m + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, m| acc * m as f64)
}

/// Intensity moments after adding independent thermal noise of mean `t_s`
/// and `t_i` to the two beams.
pub fn add_thermal_noise(w: &Array2<f64>, t_s: f64, t_i: f64) -> Array2<f64> {
    let side = w.nrows();
    let mut out = Array2::from_elem((side, side), f64::NAN);
    for a in 0..side {
        for b in 0..side - a {
            let mut acc = 0.0;
            for j in 0..=a {
                for k in 0..=b {
                    acc += binomial(a, j)
                        * binomial(b, k)
                        * w[[j, k]]
                        * factorial(a - j)
                        * t_s.powi((a - j) as i32)
                        * factorial(b - k)
                        * t_i.powi((b - k) as i32);
                }
            }
            out[[a, b]] = acc;
        }
    }
    out
}

/// Relative thermal means added to the signal and idler beams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseWeights {
    pub signal: f64,
    pub idler: f64,
}

impl Default for NoiseWeights {
    fn default() -> Self {
        Self { signal: 1.0, idler: 1.0 }
    }
}

/// Smallest thermal mean `T ≥ 0` that makes `E_k` non-negative.
pub fn nonclassicality_depth(moments: &MomentSet, k: usize, tol: f64) -> Result<f64> {
    nonclassicality_depth_weighted(moments, k, tol, NoiseWeights::default())
}

pub fn nonclassicality_depth_weighted(moments: &MomentSet, k: usize, tol: f64, weights: NoiseWeights) -> Result<f64> {
    if !(2..=4).contains(&k) {
        return Err(Error::invalid("k", format!("identifier E_{k} does not exist")));
    }
    if moments.order < k {
        return Err(Error::invalid("moments", format!("E_{k} needs moments up to order {k}")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let w = moments.intensity_table()?;
    let e = |t: f64| identifier(&add_thermal_noise(w, t * weights.signal, t * weights.idler), k);
    if e(0.0) >= 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while e(hi) < 0.0 {
        if hi >= TAU_LIMIT {
            return Err(Error::NoConcealment { k, limit: TAU_LIMIT });
        }
        lo = hi;
        hi = (hi * 2.0).min(TAU_LIMIT);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if e(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    /// Normalized covariance.
    pub c: f64,
    /// Sub-shot-noise parameter.
    pub r: f64,
}

pub fn correlation_quantifiers(moments: &MomentSet) -> Result<Correlations> {
    if moments.order < 2 {
        return Err(Error::invalid("moments", "correlations need moments up to order 2"));
    }
    let m = &moments.raw;
    let (ms, mi) = (m[[1, 0]], m[[0, 1]]);
    let var_s = m[[2, 0]] - ms * ms;
    let var_i = m[[0, 2]] - mi * mi;
    let cov = m[[1, 1]] - ms * mi;
    if ms + mi <= 0.0 {
        return Err(Error::DivisionByZero("sum of mean values"));
    }
    let r = ((var_s + var_i - 2.0 * cov) / (ms + mi)).max(0.0);
    let negligible = |var: f64, second: f64| var <= 1e-14 * second.max(1.0);
    if negligible(var_s, m[[2, 0]]) {
        return Err(Error::ZeroVariance("signal"));
    }
    if negligible(var_i, m[[0, 2]]) {
        return Err(Error::ZeroVariance("idler"));
    }
    let c = (cov / (var_s * var_i).sqrt()).clamp(-1.0, 1.0);
    Ok(Correlations { c, r })
}

/// `S_a = ⟨c_p⟩ / ⟨u_a⟩`: mean pair count over the mean unpaired count
/// retained in stream `a`.
pub fn signal_to_noise(paired: &PairedHistogram) -> Result<(f64, f64)> {
    if paired.mean_unpaired_signal == 0.0 {
        return Err(Error::DivisionByZero("mean unpaired signal photocount"));
    }
    if paired.mean_unpaired_idler == 0.0 {
        return Err(Error::DivisionByZero("mean unpaired idler photocount"));
    }
    Ok((
        paired.mean_pairs / paired.mean_unpaired_signal,
        paired.mean_pairs / paired.mean_unpaired_idler,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source: Source,
    pub m_d: Option<usize>,
    pub mean_s: f64,
    pub mean_i: f64,
    pub mean_avg: f64,
    pub c: f64,
    pub r: f64,
    pub e2: f64,
    pub e3: f64,
    pub e4: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub tau4: f64,
    pub s_s: Option<f64>,
    pub s_i: Option<f64>,
}

impl MetricsReport {
    pub fn tau(&self, k: usize) -> f64 {
        match k {
            2 => self.tau2,
            3 => self.tau3,
            _ => self.tau4,
        }
    }

    /// Scalar fields in a fixed order, as used by the bootstrap.
    pub fn values(&self) -> [f64; 12] {
        [
            self.mean_s, self.mean_i, self.mean_avg, self.c, self.r, self.e2, self.e3, self.e4, self.tau2,
            self.tau3, self.tau4, self.s_s.unwrap_or(f64::NAN),
        ]
    }

    pub const VALUE_NAMES: [&'static str; 12] =
        ["mean_s", "mean_i", "mean_avg", "C", "R", "E2", "E3", "E4", "tau2", "tau3", "tau4", "S_s"];
}

/// Every quantifier of one distribution.
pub fn metrics_report(dist: Distribution<'_>, m_d: Option<usize>, paired: Option<&PairedHistogram>) -> Result<MetricsReport> {
    let m = moments(dist, MAX_ORDER)?;
    let (mean_s, mean_i) = m.means();
    let corr = correlation_quantifiers(&m)?;
    let e = nonclassicality_identifiers(&m)?;
    let tau = |k| nonclassicality_depth(&m, k, DEFAULT_TAU_TOLERANCE);
    let (s_s, s_i) = match paired {
        Some(p) => {
            let (a, b) = signal_to_noise(p)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    Ok(MetricsReport {
        source: m.source,
        m_d,
        mean_s,
        mean_i,
        mean_avg: 0.5 * (mean_s + mean_i),
        c: corr.c,
        r: corr.r,
        e2: e.e2,
        e3: e.e3,
        e4: e.e4,
        tau2: tau(2)?,
        tau3: tau(3)?,
        tau4: tau(4)?,
        s_s,
        s_i,
    })
}

/// Multinomial resample of a histogram with the same number of shots.
pub fn resample_histogram(hist: &JointHistogram, rng: &mut ChaCha8Rng) -> Result<JointHistogram> {
    let total = hist.total_shots();
    let mut out = Array2::<u64>::zeros(hist.counts().dim());
    let mut remaining_n = total;
    let mut remaining_w = total;
    for ((s, i), &w) in hist.counts().indexed_iter() {
        if remaining_n == 0 || remaining_w == 0 {
            break;
        }
        if w == 0 {
            continue;
        }
        let draw = if w >= remaining_w {
            remaining_n
        } else {
            Binomial::new(remaining_n, w as f64 / remaining_w as f64)
                .map_err(|e| Error::invalid("bootstrap", e.to_string()))?
                .sample(rng)
        };
        out[[s, i]] = draw;
        remaining_n -= draw;
        remaining_w -= w;
    }
    JointHistogram::from_counts(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub sd: Vec<f64>,
    /// Replicas that produced finite values.
    pub used: usize,
}

/// Standard deviations of `statistic` over resampled histograms. Replicas
/// for which the statistic fails are skipped.
pub fn bootstrap<F>(hist: &JointHistogram, replicates: usize, seed: u64, statistic: F) -> Result<BootstrapSummary>
where
    F: Fn(&JointHistogram) -> Result<Vec<f64>> + Sync,
{
    if replicates < 2 {
        return Err(Error::invalid("replicates", "bootstrap needs at least 2 replicas"));
    }
    let samples: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let h = resample_histogram(hist, &mut rng).ok()?;
            statistic(&h).ok()
        })
        .collect();
    let good: Vec<&Vec<f64>> = samples.iter().flatten().collect();
    if good.len() < 2 {
        return Err(Error::invalid("bootstrap", "fewer than 2 replicas succeeded"));
    }
    let width = good[0].len();
    let sd = (0..width)
        .map(|k| {
            let vals: Vec<f64> = good.iter().map(|v| v[k]).filter(|x| x.is_finite()).collect();
            if vals.len() < 2 {
                return f64::NAN;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        })
        .collect();
    Ok(BootstrapSummary { sd, used: good.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: Array2<f64>) -> JointPhotonDistribution {
        JointPhotonDistribution::new(p, 0.0).unwrap()
    }

    fn poisson(mean: f64, n_max: usize) -> Vec<f64> {
        let mut p = vec![(-mean).exp()];
        for n in 1..=n_max {
            let prev = p[n - 1];
            p.push(prev * mean / n as f64);
        }
        p
    }

    fn product(a: &[f64], b: &[f64]) -> Array2<f64> {
        let p = Array2::from_shape_fn((a.len(), b.len()), |(s, i)| a[s] * b[i]);
        let total = p.sum();
        p / total
    }

    fn diagonal(weights: &[f64]) -> Array2<f64> {
        let mut p = Array2::zeros((weights.len(), weights.len()));
        for (n, &w) in weights.iter().enumerate() {
            p[[n, n]] = w;
        }
        let total = p.sum();
        p / total
    }

    #[test]
    fn stirling_tables_are_inverse() {
        let (a, b) = (stirling_first(), stirling_second());
        for n in 0..=4 {
            for m in 0..=4 {
                let prod: f64 = (0..=4).map(|k| a[n][k] * b[k][m]).sum();
                assert_eq!(prod, if n == m { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(a[4][1..=4], [-6.0, 11.0, -6.0, 1.0]);
    }

    #[test]
    fn delta_moments() {
        let d = JointPhotonDistribution::delta(4, 4, (2, 3));
        let m = raw_moments(Distribution::PhotonNumber(&d), 2).unwrap();
        assert_eq!(m.raw[[1, 0]], 2.0);
        assert_eq!(m.raw[[1, 1]], 6.0);
    }

    #[test]
    fn independent_marginals_factorize() {
        let p = dist(product(&[0.3, 0.5, 0.2], &[0.1, 0.6, 0.1, 0.2]));
        let m = raw_moments(Distribution::PhotonNumber(&p), 2).unwrap();
        assert!((m.raw[[1, 1]] - m.raw[[1, 0]] * m.raw[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn low_order_intensity_moments() {
        let p = dist(product(&[0.2, 0.3, 0.1, 0.4], &[0.5, 0.5]));
        let m = moments(Distribution::PhotonNumber(&p), 4).unwrap();
        let w = m.intensity.unwrap();
        assert!((w[[1, 0]] - m.raw[[1, 0]]).abs() < 1e-15);
        assert!((w[[2, 0]] - (m.raw[[2, 0]] - m.raw[[1, 0]])).abs() < 1e-12);
    }

    #[test]
    fn poisson_intensity_moments_are_powers() {
        let lambda = 1.7;
        let p = dist(product(&poisson(lambda, 60), &[1.0]));
        let w = moments(Distribution::PhotonNumber(&p), 4).unwrap().intensity.unwrap();
        for l in 1..=4 {
            assert!((w[[l, 0]] / lambda.powi(l as i32) - 1.0).abs() < 1e-9, "order {l}");
        }
    }

    #[test]
    fn triangular_route_agrees_without_factorial_moments() {
        let p = dist(product(&poisson(2.0, 40), &poisson(0.5, 30)));
        let m = raw_moments(Distribution::PhotonNumber(&p), 4).unwrap();
        let direct = m.factorial.clone().unwrap();
        let bare = intensity_moments(MomentSet::from_raw(m.raw.clone(), Source::PhotonNumber).unwrap()).unwrap();
        let w = bare.intensity.unwrap();
        for j in 0..=4 {
            for k in 0..=4 - j {
                assert!((w[[j, k]] - direct[[j, k]]).abs() <= 1e-9 * direct[[j, k]].abs().max(1.0));
            }
        }
    }

    #[test]
    fn corrupted_factorial_moments_are_detected() {
        let p = dist(product(&poisson(2.0, 40), &poisson(0.5, 30)));
        let mut m = raw_moments(Distribution::PhotonNumber(&p), 4).unwrap();
        m.factorial.as_mut().unwrap()[[2, 1]] *= 1.001;
        assert!(matches!(intensity_moments(m), Err(Error::InternalMismatch { j: 2, k: 1, .. })));
    }

    #[test]
    fn independent_thermal_beams_are_classical() {
        let thermal: Vec<f64> = (0..80).map(|n| 0.5f64.powi(n) * 0.5).collect();
        let p = dist(product(&thermal, &thermal));
        let m = moments(Distribution::PhotonNumber(&p), 4).unwrap();
        let e = nonclassicality_identifiers(&m).unwrap();
        let w = m.intensity.as_ref().unwrap();
        assert!((e.e2 - (2.0 * w[[2, 0]] - 2.0 * w[[1, 0]].powi(2))).abs() < 1e-9);
        assert!(e.e2 >= 0.0);
        assert_eq!(nonclassicality_depth(&m, 2, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn perfectly_correlated_field() {
        let p = dist(diagonal(&poisson(3.0, 60)));
        let m = moments(Distribution::PhotonNumber(&p), 4).unwrap();
        let mean = m.raw[[1, 0]];
        let e = nonclassicality_identifiers(&m).unwrap();
        assert!((e.e2 + 2.0 * mean).abs() < 1e-9);
        let tau = nonclassicality_depth(&m, 2, 1e-6).unwrap();
        assert!((tau - mean.sqrt()).abs() < 1e-4, "{tau} vs {}", mean.sqrt());
    }

    #[test]
    fn vacuum_identifiers_vanish() {
        let d = JointPhotonDistribution::delta(3, 3, (0, 0));
        let e = nonclassicality_identifiers(&moments(Distribution::PhotonNumber(&d), 4).unwrap()).unwrap();
        assert_eq!((e.e2, e.e3, e.e4), (0.0, 0.0, 0.0));
    }

    #[test]
    fn depth_shrinks_with_classical_background() {
        let corr = diagonal(&poisson(2.0, 30));
        let uniform = Array2::from_elem((31, 31), 1.0 / 961.0);
        let mut last = f64::INFINITY;
        for mix in [0.0, 0.02, 0.05, 0.1] {
            let p = dist(&corr * (1.0 - mix) + &uniform * mix);
            let m = moments(Distribution::PhotonNumber(&p), 4).unwrap();
            let tau = nonclassicality_depth(&m, 2, 1e-6).unwrap();
            assert!(tau <= last + 1e-6);
            last = tau;
        }
    }

    #[test]
    fn thermal_noise_composes_in_quadrature_for_e2() {
        let p = dist(diagonal(&poisson(4.0, 60)));
        let m = moments(Distribution::PhotonNumber(&p), 4).unwrap();
        let tau = nonclassicality_depth(&m, 2, 1e-6).unwrap();
        let t0 = 1.1;
        let noisy = MomentSet {
            intensity: Some(add_thermal_noise(m.intensity.as_ref().unwrap(), t0, t0)),
            ..m.clone()
        };
        let shifted = nonclassicality_depth(&noisy, 2, 1e-6).unwrap();
        assert!((shifted - (tau * tau - t0 * t0).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn correlation_examples() {
        let same = dist(diagonal(&[0.2, 0.3, 0.5]));
        let c = correlation_quantifiers(&raw_moments(Distribution::PhotonNumber(&same), 2).unwrap()).unwrap();
        assert!((c.c - 1.0).abs() < 1e-12 && c.r.abs() < 1e-12);

        let indep = dist(product(&poisson(1.5, 50), &poisson(0.7, 40)));
        let c = correlation_quantifiers(&raw_moments(Distribution::PhotonNumber(&indep), 2).unwrap()).unwrap();
        assert!((c.r - 1.0).abs() < 1e-9);

        let anti = dist(ndarray::array![[0.0, 0.5], [0.5, 0.0]]);
        let c = correlation_quantifiers(&raw_moments(Distribution::PhotonNumber(&anti), 2).unwrap()).unwrap();
        assert!((c.c + 1.0).abs() < 1e-12);

        let fixed = JointPhotonDistribution::delta(3, 3, (2, 1));
        let m = raw_moments(Distribution::PhotonNumber(&fixed), 2).unwrap();
        assert!(matches!(correlation_quantifiers(&m), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn histogram_moments_are_exact_ratios() {
        let h = JointHistogram::from_counts(ndarray::array![[3, 1], [0, 2]]).unwrap();
        let m = raw_moments(Distribution::Histogram(&h), 2).unwrap();
        assert_eq!(m.raw[[1, 1]], 2.0 / 6.0);
        assert_eq!(m.source, Source::Photocount);
    }

    #[test]
    fn tail_mass_rejected() {
        let p = JointPhotonDistribution::new(ndarray::array![[1.0]], 1e-5).unwrap();
        assert!(matches!(raw_moments(Distribution::PhotonNumber(&p), 2), Err(Error::TailMass(_))));
    }

    #[test]
    fn resampling_preserves_shot_count() {
        let h = JointHistogram::from_counts(ndarray::array![[30, 10], [5, 55]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = resample_histogram(&h, &mut rng).unwrap();
        assert_eq!(r.total_shots(), 100);
        let summary = bootstrap(&h, 50, 1, |h| Ok(vec![h.means()?.0])).unwrap();
        assert_eq!(summary.used, 50);
        // binomial standard error of a 0/1 mean near 0.6 with 100 shots
        assert!((summary.sd[0] - 0.049).abs() < 0.02, "{}", summary.sd[0]);
    }
}
