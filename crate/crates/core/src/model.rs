//! Shared data types: strip geometry, detector parameters, frames,
//! photocount histograms and photon-number distributions.
//!
//! Pixel coordinates are `(row, col)` pairs with row-major linearization.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(row, col)` pixel coordinate.
pub type Pixel = (u32, u32);

/// Affine map from a signal pixel to a real-valued idler-strip position:
/// each axis is shifted by an offset and optionally mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelMapping {
    pub row_offset: f64,
    pub col_offset: f64,
    pub flip_rows: bool,
    pub flip_cols: bool,
}

impl Default for PixelMapping {
    fn default() -> Self {
        Self {
            row_offset: 0.0,
            col_offset: 0.0,
            flip_rows: false,
            flip_cols: false,
        }
    }
}

impl PixelMapping {
    pub fn apply(&self, pixel: Pixel) -> (f64, f64) {
        let r = pixel.0 as f64;
        let c = pixel.1 as f64;
        let row = if self.flip_rows { self.row_offset - r } else { self.row_offset + r };
        let col = if self.flip_cols { self.col_offset - c } else { self.col_offset + c };
        (row, col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryFields", into = "GeometryFields")]
pub struct StripGeometry {
    signal_rows: u32,
    signal_cols: u32,
    idler_rows: u32,
    idler_cols: u32,
    mapping: PixelMapping,
    margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryFields {
    signal_rows: u32,
    signal_cols: u32,
    idler_rows: u32,
    idler_cols: u32,
    #[serde(default)]
    mapping: PixelMapping,
    #[serde(default)]
    margin: f64,
}

impl TryFrom<GeometryFields> for StripGeometry {
    type Error = Error;

    fn try_from(g: GeometryFields) -> Result<Self> {
        StripGeometry::new(
            (g.signal_rows, g.signal_cols),
            (g.idler_rows, g.idler_cols),
            g.mapping,
            g.margin,
        )
    }
}

impl From<StripGeometry> for GeometryFields {
    fn from(g: StripGeometry) -> Self {
        GeometryFields {
            signal_rows: g.signal_rows,
            signal_cols: g.signal_cols,
            idler_rows: g.idler_rows,
            idler_cols: g.idler_cols,
            mapping: g.mapping,
            margin: g.margin,
        }
    }
}

impl StripGeometry {
    /// Builds a geometry, rejecting mappings that send a signal pixel further
    /// than `margin` pixels outside the idler strip.
    pub fn new(
        signal: (u32, u32),
        idler: (u32, u32),
        mapping: PixelMapping,
        margin: f64,
    ) -> Result<Self> {
        if signal.0 == 0 || signal.1 == 0 {
            return Err(Error::invalid("signal strip", "needs at least one pixel"));
        }
        if idler.0 == 0 || idler.1 == 0 {
            return Err(Error::invalid("idler strip", "needs at least one pixel"));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::invalid("margin", format!("{margin} is not a finite value >= 0")));
        }
        if ![mapping.row_offset, mapping.col_offset].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("mapping", "offsets must be finite"));
        }
        let geometry = Self {
            signal_rows: signal.0,
            signal_cols: signal.1,
            idler_rows: idler.0,
            idler_cols: idler.1,
            mapping,
            margin,
        };
        // The map is affine per axis, so the corners bound every image.
        for &r in &[0, signal.0 - 1] {
            for &c in &[0, signal.1 - 1] {
                let (mr, mc) = mapping.apply((r, c));
                let lo = -margin;
                let hi_r = (idler.0 - 1) as f64 + margin;
                let hi_c = (idler.1 - 1) as f64 + margin;
                if mr < lo || mr > hi_r || mc < lo || mc > hi_c {
                    return Err(Error::invalid(
                        "mapping",
                        format!("signal pixel ({r}, {c}) maps to ({mr}, {mc}), outside the idler strip"),
                    ));
                }
            }
        }
        Ok(geometry)
    }

    /// Two equally sized strips with the identity mapping.
    pub fn identical(rows: u32, cols: u32) -> Result<Self> {
        Self::new((rows, cols), (rows, cols), PixelMapping::default(), 0.0)
    }

    pub fn signal_shape(&self) -> (u32, u32) {
        (self.signal_rows, self.signal_cols)
    }

    pub fn idler_shape(&self) -> (u32, u32) {
        (self.idler_rows, self.idler_cols)
    }

    pub fn signal_pixels(&self) -> u32 {
        self.signal_rows * self.signal_cols
    }

    pub fn idler_pixels(&self) -> u32 {
        self.idler_rows * self.idler_cols
    }

    pub fn mapping(&self) -> &PixelMapping {
        &self.mapping
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Real-valued idler position corresponding to a signal pixel.
    pub fn map_to_idler(&self, signal: Pixel) -> (f64, f64) {
        self.mapping.apply(signal)
    }

    /// Idler pixel nearest to the mapped position; may lie off-strip when
    /// the margin is non-zero.
    pub fn idler_anchor(&self, signal: Pixel) -> (i64, i64) {
        let (r, c) = self.map_to_idler(signal);
        (r.round() as i64, c.round() as i64)
    }

    pub fn contains_signal(&self, p: Pixel) -> bool {
        p.0 < self.signal_rows && p.1 < self.signal_cols
    }

    pub fn contains_idler(&self, p: Pixel) -> bool {
        p.0 < self.idler_rows && p.1 < self.idler_cols
    }

    pub fn contains_idler_signed(&self, p: (i64, i64)) -> bool {
        p.0 >= 0 && p.1 >= 0 && p.0 < self.idler_rows as i64 && p.1 < self.idler_cols as i64
    }
}

/// Per-strip detector description: pixel count, efficiency and mean dark
/// count number per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pixels: u32,
    eta: f64,
    dark: f64,
}

impl DetectorParams {
    pub fn new(pixels: u32, eta: f64, dark: f64) -> Result<Self> {
        if pixels == 0 {
            return Err(Error::invalid("pixels", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid("eta", format!("{eta} not in [0, 1]")));
        }
        if !(0.0..1.0).contains(&dark) {
            return Err(Error::invalid("dark", format!("{dark} not in [0, 1)")));
        }
        Ok(Self { pixels, eta, dark })
    }

    /// Parameters with the dark count number given per strip (`D·N`).
    pub fn with_total_dark(pixels: u32, eta: f64, dark_total: f64) -> Result<Self> {
        if pixels == 0 {
            return Err(Error::invalid("pixels", "must be >= 1"));
        }
        Self::new(pixels, eta, dark_total / pixels as f64)
    }

    pub fn pixels(&self) -> u32 {
        self.pixels
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dark(&self) -> f64 {
        self.dark
    }

    pub fn noiseless(&self) -> Self {
        Self { dark: 0.0, ..*self }
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(self.pixels, eta, self.dark)
    }
}

/// Photocount positions recorded in one shot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub shot: u64,
    pub signal: Vec<Pixel>,
    pub idler: Vec<Pixel>,
}

impl Frame {
    pub fn new(shot: u64, signal: Vec<Pixel>, idler: Vec<Pixel>) -> Self {
        Self { shot, signal, idler }
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.signal.len(), self.idler.len())
    }
}

/// Checks that every hit lies on its strip and that no pixel fires twice.
pub fn validate_frame(frame: &Frame, geometry: &StripGeometry) -> Result<()> {
    check_strip(&frame.signal, "signal", |p| geometry.contains_signal(p))?;
    check_strip(&frame.idler, "idler", |p| geometry.contains_idler(p))
}

fn check_strip(hits: &[Pixel], strip: &'static str, inside: impl Fn(Pixel) -> bool) -> Result<()> {
    let mut seen = HashSet::with_capacity(hits.len());
    for &pixel in hits {
        if !inside(pixel) {
            return Err(Error::OutOfBounds { strip, pixel });
        }
        if !seen.insert(pixel) {
            return Err(Error::DuplicatePixel { strip, pixel });
        }
    }
    Ok(())
}

/// Joint signal/idler photocount tally indexed by `(c_s, c_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    counts: Array2<u64>,
    total_shots: u64,
}

impl JointHistogram {
    /// Empty histogram covering `0..=c_max_s` by `0..=c_max_i`.
    pub fn new(c_max_s: usize, c_max_i: usize) -> Self {
        Self {
            counts: Array2::zeros((c_max_s + 1, c_max_i + 1)),
            total_shots: 0,
        }
    }

    /// Wraps a tally matrix; the total is recomputed from the entries.
    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("counts", "histogram needs at least one cell"));
        }
        let total_shots = counts.iter().sum();
        Ok(Self { counts, total_shots })
    }

    pub fn add(&mut self, c_s: usize, c_i: usize) -> Result<()> {
        self.add_many(c_s, c_i, 1)
    }

    pub fn add_many(&mut self, c_s: usize, c_i: usize, n: u64) -> Result<()> {
        let (rows, cols) = self.counts.dim();
        if c_s >= rows || c_i >= cols {
            return Err(Error::CountExceedsBound {
                shot: self.total_shots,
                count: c_s.max(c_i),
                bound: if c_s >= rows { rows - 1 } else { cols - 1 },
            });
        }
        self.counts[[c_s, c_i]] += n;
        self.total_shots += n;
        Ok(())
    }

    /// Entrywise sum of two partial tallies with identical bounds.
    pub fn merge(&mut self, other: &JointHistogram) -> Result<()> {
        if self.counts.dim() != other.counts.dim() {
            return Err(Error::invalid("merge", "histogram bounds differ"));
        }
        self.counts += &other.counts;
        self.total_shots += other.total_shots;
        Ok(())
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total_shots(&self) -> u64 {
        self.total_shots
    }

    pub fn c_max_s(&self) -> usize {
        self.counts.nrows() - 1
    }

    pub fn c_max_i(&self) -> usize {
        self.counts.ncols() - 1
    }

    /// Largest `(c_s, c_i)` with a non-zero tally in each direction.
    pub fn observed_max(&self) -> (usize, usize) {
        let mut max = (0, 0);
        for ((s, i), &n) in self.counts.indexed_iter() {
            if n > 0 {
                max.0 = max.0.max(s);
                max.1 = max.1.max(i);
            }
        }
        max
    }

    /// `f(c_s, c_i) = counts / total_shots`.
    pub fn normalized(&self) -> Result<Array2<f64>> {
        if self.total_shots == 0 {
            return Err(Error::NoFrames);
        }
        let total = self.total_shots as f64;
        Ok(self.counts.mapv(|n| n as f64 / total))
    }

    /// Exact means `(⟨c_s⟩, ⟨c_i⟩)` from integer sums.
    pub fn means(&self) -> Result<(f64, f64)> {
        if self.total_shots == 0 {
            return Err(Error::NoFrames);
        }
        let mut sum_s: u128 = 0;
        let mut sum_i: u128 = 0;
        for ((s, i), &n) in self.counts.indexed_iter() {
            sum_s += s as u128 * n as u128;
            sum_i += i as u128 * n as u128;
        }
        let total = self.total_shots as f64;
        Ok((sum_s as f64 / total, sum_i as f64 / total))
    }

    /// Tally grown or shrunk to new bounds; fails if occupied cells would be cut.
    pub fn resized(&self, c_max_s: usize, c_max_i: usize) -> Result<Self> {
        let mut out = Self::new(c_max_s, c_max_i);
        for ((s, i), &n) in self.counts.indexed_iter() {
            if n > 0 {
                out.add_many(s, i, n)?;
            }
        }
        Ok(out)
    }
}

/// Tallies frame hit counts into a joint histogram bounded by `c_max` in
/// both directions.
pub fn histogram_from_frames(frames: &[Frame], c_max: usize) -> Result<JointHistogram> {
    if frames.is_empty() {
        return Err(Error::NoFrames);
    }
    let mut hist = JointHistogram::new(c_max, c_max);
    for frame in frames {
        let (s, i) = frame.counts();
        if s > c_max || i > c_max {
            return Err(Error::CountExceedsBound {
                shot: frame.shot,
                count: s.max(i),
                bound: c_max,
            });
        }
        hist.add(s, i)?;
    }
    Ok(hist)
}

/// Reconstructed joint photon-number distribution `p(n_s, n_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPhotonDistribution {
    p: Array2<f64>,
    truncation_deficit: f64,
}

impl JointPhotonDistribution {
    /// Accepts non-negative entries summing to one within 1e-9.
    pub fn new(p: Array2<f64>, truncation_deficit: f64) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("p", "distribution needs at least one cell"));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("p", "entries must be finite and non-negative"));
        }
        let sum: f64 = p.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("p", format!("sums to {sum}, not 1")));
        }
        Ok(Self { p, truncation_deficit })
    }

    pub fn delta(n_max_s: usize, n_max_i: usize, at: (usize, usize)) -> Self {
        let mut p = Array2::zeros((n_max_s + 1, n_max_i + 1));
        p[[at.0, at.1]] = 1.0;
        Self { p, truncation_deficit: 0.0 }
    }

    pub fn probabilities(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.p
    }

    pub fn n_max_s(&self) -> usize {
        self.p.nrows() - 1
    }

    pub fn n_max_i(&self) -> usize {
        self.p.ncols() - 1
    }

    /// Estimated probability beyond the photon-number bounds (reported, not
    /// folded into `p`).
    pub fn truncation_deficit(&self) -> f64 {
        self.truncation_deficit
    }

    pub fn means(&self) -> (f64, f64) {
        joint_means(self.p.view())
    }

    pub fn marginal_signal(&self) -> Array1<f64> {
        self.p.sum_axis(ndarray::Axis(1))
    }

    pub fn marginal_idler(&self) -> Array1<f64> {
        self.p.sum_axis(ndarray::Axis(0))
    }
}

pub(crate) fn joint_means(p: ArrayView2<f64>) -> (f64, f64) {
    let mut ms = 0.0;
    let mut mi = 0.0;
    for ((s, i), &v) in p.indexed_iter() {
        ms += s as f64 * v;
        mi += i as f64 * v;
    }
    (ms, mi)
}
