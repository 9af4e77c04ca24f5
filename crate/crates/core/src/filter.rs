//! Spatial pair filtering.
//!
//! Every signal photocount defines a detection area of `m_d` idler pixels
//! around its mapped position. Idler photocounts inside an area are paired
//! greedily with the signal photocounts; the leftovers are split into
//! unpaired photocounts that still lie inside some detection area (kept) and
//! photocounts outside every area (discarded as noise). The same relation is
//! read in both directions: a signal photocount is kept when at least one
//! idler photocount falls inside its area.

use nalgebra::{SMatrix, SVector};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_frame, Frame, JointHistogram, Pixel, StripGeometry};

/// The `m_d` pixel offsets closest to the mapped centre, ordered by distance
/// and then lexicographically by `(Δrow, Δcol)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionArea {
    offsets: Vec<(i32, i32)>,
    half: i32,
    /// Position of each offset in `offsets`, over the `(2·half+1)²` square.
    rank: Vec<u32>,
}

impl DetectionArea {
    pub fn new(m_d: usize) -> Result<Self> {
        if m_d == 0 {
            return Err(Error::invalid("m_d", "detection area needs at least one pixel"));
        }
        let mut half = ((m_d as f64 / std::f64::consts::PI).sqrt().ceil() as i32) + 1;
        loop {
            let mut cells: Vec<(i64, i32, i32)> = Vec::with_capacity(((2 * half + 1) as usize).pow(2));
            for dr in -half..=half {
                for dc in -half..=half {
                    cells.push(((dr as i64).pow(2) + (dc as i64).pow(2), dr, dc));
                }
            }
            let inscribed = cells.iter().filter(|c| c.0 <= (half as i64).pow(2)).count();
            if inscribed < m_d {
                half += 1;
                continue;
            }
            cells.sort_unstable();
            let side = (2 * half + 1) as usize;
            let mut rank = vec![u32::MAX; side * side];
            let offsets: Vec<(i32, i32)> = cells[..m_d].iter().map(|&(_, r, c)| (r, c)).collect();
            for (k, &(r, c)) in offsets.iter().enumerate() {
                rank[(r + half) as usize * side + (c + half) as usize] = k as u32;
            }
            return Ok(Self { offsets, half, rank });
        }
    }

    pub fn m_d(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    /// Position of `(Δrow, Δcol)` in the nearest-first ordering, if inside.
    pub fn rank(&self, dr: i64, dc: i64) -> Option<u32> {
        let h = self.half as i64;
        if dr.abs() > h || dc.abs() > h {
            return None;
        }
        let side = 2 * h + 1;
        let r = self.rank[((dr + h) * side + dc + h) as usize];
        (r != u32::MAX).then_some(r)
    }
}

/// Smallest `m_d` whose area around any mapped signal pixel covers the whole
/// idler strip.
pub fn full_coverage_md(geometry: &StripGeometry) -> usize {
    let (sr, sc) = geometry.signal_shape();
    let (ir, ic) = geometry.idler_shape();
    let mut worst: i64 = 0;
    for &r in &[0, sr - 1] {
        for &c in &[0, sc - 1] {
            let (ar, ac) = geometry.idler_anchor((r, c));
            for &tr in &[0i64, ir as i64 - 1] {
                for &tc in &[0i64, ic as i64 - 1] {
                    worst = worst.max((tr - ar).pow(2) + (tc - ac).pow(2));
                }
            }
        }
    }
    let h = (worst as f64).sqrt().ceil() as i64;
    let mut count = 0;
    for dr in -h..=h {
        for dc in -h..=h {
            if dr * dr + dc * dc <= worst {
                count += 1;
            }
        }
    }
    count
}

/// Classification of one frame's photocounts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingOutcome {
    pub pairs: usize,
    /// Unmatched signal photocounts with an idler photocount in their area.
    pub unpaired_signal: usize,
    /// Unmatched idler photocounts inside at least one detection area.
    pub unpaired_idler: usize,
    pub discarded_signal: usize,
    pub discarded_idler: usize,
}

impl PairingOutcome {
    pub fn retained_signal(&self) -> usize {
        self.pairs + self.unpaired_signal
    }

    pub fn retained_idler(&self) -> usize {
        self.pairs + self.unpaired_idler
    }
}

/// Greedy one-to-one matching: signal photocounts are visited in row-major
/// order and each takes the free idler photocount nearest to its mapped
/// centre (ties broken by the area ordering).
pub fn pair_frame(frame: &Frame, geometry: &StripGeometry, area: &DetectionArea) -> PairingOutcome {
    let mut signal: Vec<Pixel> = frame.signal.clone();
    signal.sort_unstable();
    let idler = &frame.idler;
    let mut taken = vec![false; idler.len()];
    let mut idler_inside = vec![false; idler.len()];
    let mut out = PairingOutcome::default();

    for &s in &signal {
        let (ar, ac) = geometry.idler_anchor(s);
        let mut best: Option<(u32, usize)> = None;
        let mut sees_idler = false;
        for (j, &(r, c)) in idler.iter().enumerate() {
            let Some(rank) = area.rank(r as i64 - ar, c as i64 - ac) else {
                continue;
            };
            sees_idler = true;
            idler_inside[j] = true;
            if !taken[j] && best.is_none_or(|(b, _)| rank < b) {
                best = Some((rank, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[j] = true;
                out.pairs += 1;
            }
            None if sees_idler => out.unpaired_signal += 1,
            None => out.discarded_signal += 1,
        }
    }
    for (j, &inside) in idler_inside.iter().enumerate() {
        if taken[j] {
            continue;
        }
        if inside {
            out.unpaired_idler += 1;
        } else {
            out.discarded_idler += 1;
        }
    }
    out
}

/// Histograms of paired and unpaired photocounts for one detection-area size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedHistogram {
    pub m_d: usize,
    /// Tally of shots by pair count `c_p`.
    pub pair_counts: Vec<u64>,
    /// Tally by `(unpaired signal, unpaired idler)` kept inside the areas.
    pub unpaired_counts: JointHistogram,
    /// Tally by the retained totals `(c_p + unpaired signal, c_p + unpaired idler)`.
    pub retained_counts: JointHistogram,
    pub total_shots: u64,
    pub mean_pairs: f64,
    pub mean_unpaired_signal: f64,
    pub mean_unpaired_idler: f64,
    pub retained_signal_mean: f64,
    pub retained_idler_mean: f64,
}

impl PairedHistogram {
    pub fn pair_distribution(&self) -> Vec<f64> {
        let total = self.total_shots as f64;
        self.pair_counts.iter().map(|&n| n as f64 / total).collect()
    }
}

pub fn filter_frames(frames: &[Frame], geometry: &StripGeometry, m_d: usize) -> Result<PairedHistogram> {
    let area = DetectionArea::new(m_d)?;
    filter_frames_with(frames, geometry, &area)
}

pub fn filter_frames_with(frames: &[Frame], geometry: &StripGeometry, area: &DetectionArea) -> Result<PairedHistogram> {
    if frames.is_empty() {
        return Err(Error::NoFrames);
    }
    frames.iter().try_for_each(|f| validate_frame(f, geometry))?;
    let outcomes: Vec<PairingOutcome> = frames
        .par_iter()
        .map(|f| pair_frame(f, geometry, area))
        .collect();
    tally_outcomes(area.m_d(), &outcomes)
}

pub(crate) fn tally_outcomes(m_d: usize, outcomes: &[PairingOutcome]) -> Result<PairedHistogram> {
    let max_p = outcomes.iter().map(|o| o.pairs).max().unwrap_or(0);
    let max_us = outcomes.iter().map(|o| o.unpaired_signal).max().unwrap_or(0);
    let max_ui = outcomes.iter().map(|o| o.unpaired_idler).max().unwrap_or(0);
    let max_rs = outcomes.iter().map(|o| o.retained_signal()).max().unwrap_or(0);
    let max_ri = outcomes.iter().map(|o| o.retained_idler()).max().unwrap_or(0);

    let mut pair_counts = vec![0u64; max_p + 1];
    let mut unpaired = JointHistogram::new(max_us, max_ui);
    let mut retained = JointHistogram::new(max_rs, max_ri);
    let (mut sp, mut sus, mut sui) = (0u64, 0u64, 0u64);
    for o in outcomes {
        pair_counts[o.pairs] += 1;
        unpaired.add(o.unpaired_signal, o.unpaired_idler)?;
        retained.add(o.retained_signal(), o.retained_idler())?;
        sp += o.pairs as u64;
        sus += o.unpaired_signal as u64;
        sui += o.unpaired_idler as u64;
    }
    let total = outcomes.len() as f64;
    Ok(PairedHistogram {
        m_d,
        pair_counts,
        unpaired_counts: unpaired,
        retained_counts: retained,
        total_shots: outcomes.len() as u64,
        mean_pairs: sp as f64 / total,
        mean_unpaired_signal: sus as f64 / total,
        mean_unpaired_idler: sui as f64 / total,
        retained_signal_mean: (sp + sus) as f64 / total,
        retained_idler_mean: (sp + sui) as f64 / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveEfficiencies {
    pub m_d: usize,
    pub eta_i_eff: f64,
    pub eta_s_eff: f64,
}

impl EffectiveEfficiencies {
    pub fn mean(&self) -> f64 {
        0.5 * (self.eta_i_eff + self.eta_s_eff)
    }

    pub fn geometric(&self) -> f64 {
        (self.eta_i_eff * self.eta_s_eff).sqrt()
    }
}

/// `η_{i,p}^eff = (⟨c_i⟩^red / ⟨c_i⟩)·η_s` and its signal counterpart.
pub fn effective_efficiencies(
    paired: &PairedHistogram,
    unfiltered: &JointHistogram,
    eta_s: f64,
    eta_i: f64,
) -> Result<EffectiveEfficiencies> {
    if paired.total_shots != unfiltered.total_shots() {
        return Err(Error::invalid("unfiltered", "histograms come from different frame sets"));
    }
    let (mean_s, mean_i) = unfiltered.means()?;
    if mean_i == 0.0 {
        return Err(Error::DivisionByZero("mean idler photocount"));
    }
    if mean_s == 0.0 {
        return Err(Error::DivisionByZero("mean signal photocount"));
    }
    Ok(EffectiveEfficiencies {
        m_d: paired.m_d,
        eta_i_eff: paired.retained_idler_mean / mean_i * eta_s,
        eta_s_eff: paired.retained_signal_mean / mean_s * eta_i,
    })
}

/// Histogram of idler-minus-mapped-signal offsets, with the geometric
/// acceptance of each offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetHistogram {
    pub window: usize,
    /// Indexed `[Δrow + window, Δcol + window]`.
    pub counts: Array2<u64>,
    /// Number of signal pixels for which the offset stays on the idler strip.
    pub acceptance: Array2<f64>,
}

pub fn offset_histogram(frames: &[Frame], geometry: &StripGeometry, window: usize) -> OffsetHistogram {
    let w = window as i64;
    let side = 2 * window + 1;
    let counts = frames
        .par_chunks(4096)
        .map(|chunk| {
            let mut local = Array2::<u64>::zeros((side, side));
            for frame in chunk {
                for &s in &frame.signal {
                    let (ar, ac) = geometry.idler_anchor(s);
                    for &(r, c) in &frame.idler {
                        let dr = r as i64 - ar;
                        let dc = c as i64 - ac;
                        if dr.abs() <= w && dc.abs() <= w {
                            local[[(dr + w) as usize, (dc + w) as usize]] += 1;
                        }
                    }
                }
            }
            local
        })
        .reduce(|| Array2::zeros((side, side)), |a, b| a + b);

    let (sr, sc) = geometry.signal_shape();
    let (ir, ic) = geometry.idler_shape();
    let row_anchor: Vec<i64> = (0..sr).map(|r| geometry.idler_anchor((r, 0)).0).collect();
    let col_anchor: Vec<i64> = (0..sc).map(|c| geometry.idler_anchor((0, c)).1).collect();
    let rows_ok: Vec<f64> = (-w..=w)
        .map(|d| row_anchor.iter().filter(|&&a| (0..ir as i64).contains(&(a + d))).count() as f64)
        .collect();
    let cols_ok: Vec<f64> = (-w..=w)
        .map(|d| col_anchor.iter().filter(|&&a| (0..ic as i64).contains(&(a + d))).count() as f64)
        .collect();
    let acceptance = Array2::from_shape_fn((side, side), |(r, c)| rows_ok[r] * cols_ok[c]);
    OffsetHistogram { window, counts, acceptance }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedAreaEstimate {
    pub m_c: usize,
    pub center: (f64, f64),
    pub sigma: (f64, f64),
    pub amplitude: f64,
    pub background: f64,
    pub background_sd: f64,
}

/// Contour level, in units of σ, bounding the correlated area (1/e²).
pub const CONTOUR_SIGMAS: f64 = 2.0;

pub fn estimate_correlated_area(
    frames: &[Frame],
    geometry: &StripGeometry,
    window: usize,
) -> Result<CorrelatedAreaEstimate> {
    if window < 2 {
        return Err(Error::invalid("window", "needs at least 2 pixels"));
    }
    let hist = offset_histogram(frames, geometry, window);
    fit_correlated_area(&hist)
}

/// Least-squares fit of an elliptical Gaussian peak on a flat background to
/// the acceptance-corrected offset histogram.
pub fn fit_correlated_area(hist: &OffsetHistogram) -> Result<CorrelatedAreaEstimate> {
    let w = hist.window as f64;
    let peak_acceptance = hist.acceptance.iter().cloned().fold(0.0, f64::max);
    if peak_acceptance == 0.0 {
        return Err(Error::FitFailure("window has no geometric acceptance".into()));
    }
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    let side = hist.counts.nrows();
    let mut grid = Array2::<f64>::from_elem((side, side), f64::NAN);
    for ((r, c), &n) in hist.counts.indexed_iter() {
        let a = hist.acceptance[[r, c]];
        if a > 0.0 {
            let y = n as f64 * peak_acceptance / a;
            grid[[r, c]] = y;
            points.push((r as f64 - w, c as f64 - w, y));
        }
    }
    if points.len() < 12 {
        return Err(Error::FitFailure("too few offsets inside the window".into()));
    }

    let mut values: Vec<f64> = points.iter().map(|p| p.2).collect();
    values.sort_by(f64::total_cmp);
    let background0 = values[values.len() / 2];

    // 3×3 box smoothing locates the peak robustly
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    let smoothed = Array2::from_shape_fn((side, side), |(r, c)| {
        let mut acc = 0.0;
        let mut k = 0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                    let v = grid[[rr as usize, cc as usize]];
                    if v.is_finite() {
                        acc += v;
                        k += 1;
                    }
                }
            }
        }
        if k > 0 { acc / k as f64 } else { f64::NAN }
    });
    for ((r, c), &v) in smoothed.indexed_iter() {
        if v > best.0 {
            best = (v, r, c);
        }
    }
    let amplitude0 = (best.0 - background0).max(1e-12);
    let half_area = smoothed
        .iter()
        .filter(|&&v| v.is_finite() && v - background0 > 0.5 * amplitude0)
        .count()
        .max(1) as f64;
    let sigma0 = (half_area / (2.0 * std::f64::consts::PI * std::f64::consts::LN_2)).sqrt().max(0.7);

    let start = SVector::<f64, 6>::from([
        amplitude0,
        best.1 as f64 - w,
        best.2 as f64 - w,
        sigma0.ln(),
        sigma0.ln(),
        background0,
    ]);
    let theta = levenberg_marquardt(&points, start);
    let [amplitude, r0, c0, ln_sr, ln_sc, background]: [f64; 6] = theta.into();
    let (sr, sc) = (ln_sr.exp(), ln_sc.exp());

    let residual_ss: f64 = points.iter().map(|&(x, y, v)| (v - peak_model(&theta, x, y)).powi(2)).sum();
    let background_sd = (residual_ss / (points.len() - 6) as f64).sqrt();

    if !theta.iter().all(|v| v.is_finite()) {
        return Err(Error::FitFailure("fit diverged".into()));
    }
    if amplitude < 3.0 * background_sd {
        return Err(Error::FitFailure(format!(
            "peak amplitude {amplitude:.3} below 3x background sd {background_sd:.3}"
        )));
    }
    if sr < 0.5 || sc < 0.5 || sr > w || sc > w {
        return Err(Error::FitFailure(format!("implausible peak width ({sr:.3}, {sc:.3})")));
    }
    if r0.abs() > w || c0.abs() > w {
        return Err(Error::FitFailure("peak centre outside the window".into()));
    }
    Ok(CorrelatedAreaEstimate {
        m_c: ellipse_pixel_count((r0, c0), (sr, sc), CONTOUR_SIGMAS),
        center: (r0, c0),
        sigma: (sr, sc),
        amplitude,
        background: background.max(0.0),
        background_sd,
    })
}

/// Integer offsets inside `((Δr-r0)/σr)² + ((Δc-c0)/σc)² ≤ k²`.
pub fn ellipse_pixel_count(center: (f64, f64), sigma: (f64, f64), k: f64) -> usize {
    let hr = (center.0.abs() + k * sigma.0).ceil() as i64 + 1;
    let hc = (center.1.abs() + k * sigma.1).ceil() as i64 + 1;
    let mut count = 0;
    for dr in -hr..=hr {
        for dc in -hc..=hc {
            let u = (dr as f64 - center.0) / sigma.0;
            let v = (dc as f64 - center.1) / sigma.1;
            if u * u + v * v <= k * k {
                count += 1;
            }
        }
    }
    count.max(1)
}

fn peak_model(theta: &SVector<f64, 6>, x: f64, y: f64) -> f64 {
    let (sr, sc) = (theta[3].exp(), theta[4].exp());
    let u = (x - theta[1]) / sr;
    let v = (y - theta[2]) / sc;
    theta[5] + theta[0] * (-0.5 * (u * u + v * v)).exp()
}

fn levenberg_marquardt(points: &[(f64, f64, f64)], start: SVector<f64, 6>) -> SVector<f64, 6> {
    let cost = |t: &SVector<f64, 6>| -> f64 { points.iter().map(|&(x, y, v)| (v - peak_model(t, x, y)).powi(2)).sum() };
    let mut theta = start;
    let mut current = cost(&theta);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        let (sr, sc) = (theta[3].exp(), theta[4].exp());
        for &(x, y, v) in points {
            let u = (x - theta[1]) / sr;
            let w = (y - theta[2]) / sc;
            let g = (-0.5 * (u * u + w * w)).exp();
            let a = theta[0];
            let jac = SVector::<f64, 6>::from([g, a * g * u / sr, a * g * w / sc, a * g * u * u, a * g * w * w, 1.0]);
            let r = v - (theta[5] + a * g);
            jtj += jac * jac.transpose();
            jtr += jac * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = theta + step;
            let c = cost(&candidate);
            if c.is_finite() && c < current {
                let rel = (current - c) / current.max(1e-300);
                theta = candidate;
                current = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    return theta;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_is_nearest_first_with_lexicographic_ties() {
        let a = DetectionArea::new(5).unwrap();
        assert_eq!(a.offsets(), &[(0, 0), (-1, 0), (0, -1), (0, 1), (1, 0)]);
        assert_eq!(a.rank(0, 0), Some(0));
        assert_eq!(a.rank(1, 1), None);
        let big = DetectionArea::new(290).unwrap();
        assert_eq!(big.m_d(), 290);
        let mut sorted = big.offsets().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 290);
    }

    #[test]
    fn areas_are_nested() {
        let small = DetectionArea::new(37).unwrap();
        let large = DetectionArea::new(120).unwrap();
        assert_eq!(&large.offsets()[..37], small.offsets());
    }

    #[test]
    fn zero_area_rejected() {
        assert!(DetectionArea::new(0).is_err());
    }

    #[test]
    fn full_coverage_area_contains_every_idler_pixel() {
        let g = StripGeometry::identical(6, 9).unwrap();
        let md = full_coverage_md(&g);
        let area = DetectionArea::new(md).unwrap();
        for sr in 0..6 {
            for sc in 0..9 {
                let (ar, ac) = g.idler_anchor((sr, sc));
                for ir in 0..6i64 {
                    for ic in 0..9i64 {
                        assert!(area.rank(ir - ar, ic - ac).is_some());
                    }
                }
            }
        }
    }

    fn geometry() -> StripGeometry {
        StripGeometry::identical(40, 40).unwrap()
    }

    #[test]
    fn paired_plus_inside_plus_outside() {
        // one signal photocount; idler photocounts in the correlated area, in
        // the wider detection area, and far away
        let frame = Frame::new(0, vec![(20, 20)], vec![(5, 35), (21, 20), (20, 24)]);
        let area = DetectionArea::new(69).unwrap(); // radius ~4.7
        assert!(area.rank(0, 4).is_some());
        let o = pair_frame(&frame, &geometry(), &area);
        assert_eq!(
            o,
            PairingOutcome { pairs: 1, unpaired_signal: 0, unpaired_idler: 1, discarded_signal: 0, discarded_idler: 1 }
        );
    }

    #[test]
    fn signals_without_idlers_are_not_retained() {
        let frame = Frame::new(0, vec![(1, 1), (30, 30)], vec![]);
        let o = pair_frame(&frame, &geometry(), &DetectionArea::new(50).unwrap());
        assert_eq!(o.pairs, 0);
        assert_eq!(o.unpaired_signal + o.discarded_signal, 2);
        assert_eq!(o.discarded_signal, 2);
    }

    #[test]
    fn equidistant_idler_goes_to_first_signal_in_row_major_order() {
        let frame = Frame::new(0, vec![(10, 14), (10, 10)], vec![(10, 12)]);
        let o = pair_frame(&frame, &geometry(), &DetectionArea::new(29).unwrap());
        assert_eq!(o.pairs, 1);
        assert_eq!(o.unpaired_signal, 1);
        assert_eq!(o.unpaired_idler, 0);
    }

    #[test]
    fn nearest_idler_wins() {
        let frame = Frame::new(0, vec![(10, 10)], vec![(10, 12), (11, 10)]);
        let o = pair_frame(&frame, &geometry(), &DetectionArea::new(29).unwrap());
        assert_eq!((o.pairs, o.unpaired_idler), (1, 1));
    }

    #[test]
    fn filter_tallies_and_means() {
        let g = geometry();
        let frames = vec![
            Frame::new(0, vec![(5, 5)], vec![(5, 6)]),
            Frame::new(1, vec![(5, 5), (30, 30)], vec![(5, 5), (35, 5)]),
            Frame::new(2, vec![], vec![(1, 1)]),
        ];
        let h = filter_frames(&frames, &g, 9).unwrap();
        assert_eq!(h.pair_counts, vec![1, 2]);
        assert_eq!(h.total_shots, 3);
        assert_eq!(h.unpaired_counts.counts()[[0, 0]], 3);
        assert!((h.retained_idler_mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(h.retained_counts.total_shots(), 3);
    }

    #[test]
    fn efficiencies_follow_retention_ratio() {
        let g = geometry();
        // half of the idler photocounts sit next to a signal photocount
        let frames: Vec<Frame> = (0..10)
            .map(|k| Frame::new(k, vec![(10, 10)], vec![(10, 11), (35, 35)]))
            .collect();
        let paired = filter_frames(&frames, &g, 13).unwrap();
        let unfiltered = crate::model::histogram_from_frames(&frames, 5).unwrap();
        let eff = effective_efficiencies(&paired, &unfiltered, 0.228, 0.223).unwrap();
        assert!((eff.eta_i_eff - 0.5 * 0.228).abs() < 1e-15);
        assert!((eff.eta_s_eff - 0.223).abs() < 1e-15);
    }

    #[test]
    fn ellipse_count_tracks_area() {
        for s in [3.0, 5.0, 8.0] {
            let n = ellipse_pixel_count((0.0, 0.0), (s, s), 2.0) as f64;
            let area = std::f64::consts::PI * 4.0 * s * s;
            assert!((n / area - 1.0).abs() < 0.1, "sigma {s}: {n} vs {area}");
        }
    }
}
