//! Synthetic twin-beam frames: multithermal photon pairs with spatially
//! correlated partners, independent noise photons, losses and dark counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Frame, Pixel, StripGeometry};

/// Redraws allowed for an idler partner that lands off-strip.
pub const MAX_IDLER_REDRAWS: usize = 16;

/// Multithermal field: `modes` equally populated modes with mean photon
/// number `mean_per_mode` each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalSource {
    pub modes: f64,
    pub mean_per_mode: f64,
}

impl ThermalSource {
    pub fn mean(&self) -> f64 {
        self.modes * self.mean_per_mode
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if !(self.modes > 0.0 && self.modes.is_finite()) {
            return Err(Error::invalid(name, format!("modes = {} must be > 0", self.modes)));
        }
        if !(self.mean_per_mode >= 0.0 && self.mean_per_mode.is_finite()) {
            return Err(Error::invalid(
                name,
                format!("mean_per_mode = {} must be >= 0", self.mean_per_mode),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinBeamModel {
    pub pairs: ThermalSource,
    pub signal_noise: ThermalSource,
    pub idler_noise: ThermalSource,
    /// Standard deviations `(row, col)` of the idler displacement, in pixels.
    pub corr_sigma: (f64, f64),
    pub eta_s: f64,
    pub eta_i: f64,
    /// Per-pixel dark count probabilities.
    pub dark_s: f64,
    pub dark_i: f64,
}

impl TwinBeamModel {
    pub fn validate(&self) -> Result<()> {
        self.pairs.validate("pairs")?;
        self.signal_noise.validate("signal_noise")?;
        self.idler_noise.validate("idler_noise")?;
        let (sr, sc) = self.corr_sigma;
        if !(sr > 0.0 && sc > 0.0 && sr.is_finite() && sc.is_finite()) {
            return Err(Error::invalid("corr_sigma", "both widths must be > 0"));
        }
        for (name, eta) in [("eta_s", self.eta_s), ("eta_i", self.eta_i)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::invalid(name, format!("{eta} not in [0, 1]")));
            }
        }
        for (name, d) in [("dark_s", self.dark_s), ("dark_i", self.dark_i)] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(name, format!("{d} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Photon mean per shot impinging on the signal strip.
    pub fn signal_photon_mean(&self) -> f64 {
        self.pairs.mean() + self.signal_noise.mean()
    }

    pub fn idler_photon_mean(&self) -> f64 {
        self.pairs.mean() + self.idler_noise.mean()
    }
}

/// Bookkeeping of photons lost to the geometry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimDiagnostics {
    /// Idler partners dropped after exhausting their redraws.
    pub dropped_idlers: u64,
    /// Detected photons that landed on an already fired pixel.
    pub merged_hits: u64,
}

/// Negative-binomial draw with shape `modes` and mean `modes·mean_per_mode`,
/// realized as a Poisson count with a gamma-distributed intensity.
pub fn sample_multithermal<R: Rng + ?Sized>(modes: f64, mean_per_mode: f64, rng: &mut R) -> u64 {
    if mean_per_mode <= 0.0 {
        return 0;
    }
    let intensity: f64 = Gamma::new(modes, mean_per_mode)
        .expect("positive shape and scale")
        .sample(rng);
    if intensity <= 0.0 {
        return 0;
    }
    let n: f64 = Poisson::new(intensity).expect("positive rate").sample(rng);
    n as u64
}

/// Generates `shots` frames. Each shot draws from its own stream derived from
/// `(seed, shot)`, so the output does not depend on scheduling.
pub fn generate_frames(
    model: &TwinBeamModel,
    geometry: &StripGeometry,
    shots: u64,
    seed: u64,
) -> Result<(Vec<Frame>, SimDiagnostics)> {
    model.validate()?;
    if shots == 0 {
        return Err(Error::invalid("shots", "must be >= 1"));
    }
    let results: Vec<(Frame, SimDiagnostics)> = (0..shots)
        .into_par_iter()
        .map(|shot| simulate_shot(model, geometry, shot, seed))
        .collect();
    let mut diagnostics = SimDiagnostics::default();
    let frames = results
        .into_iter()
        .map(|(frame, d)| {
            diagnostics.dropped_idlers += d.dropped_idlers;
            diagnostics.merged_hits += d.merged_hits;
            frame
        })
        .collect();
    Ok((frames, diagnostics))
}

fn simulate_shot(model: &TwinBeamModel, geometry: &StripGeometry, shot: u64, seed: u64) -> (Frame, SimDiagnostics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot);
    let mut diag = SimDiagnostics::default();
    let (s_rows, s_cols) = geometry.signal_shape();
    let (i_rows, i_cols) = geometry.idler_shape();
    let row_offset = Normal::new(0.0, model.corr_sigma.0).expect("sigma validated");
    let col_offset = Normal::new(0.0, model.corr_sigma.1).expect("sigma validated");

    let mut signal = StripHits::new(s_cols);
    let mut idler = StripHits::new(i_cols);

    let pairs = sample_multithermal(model.pairs.modes, model.pairs.mean_per_mode, &mut rng);
    for _ in 0..pairs {
        let origin: Pixel = (rng.random_range(0..s_rows), rng.random_range(0..s_cols));
        if rng.random::<f64>() < model.eta_s {
            signal.insert(origin, &mut diag);
        }
        let survives = rng.random::<f64>() < model.eta_i;
        let (ar, ac) = geometry.idler_anchor(origin);
        let mut landed = None;
        for _ in 0..MAX_IDLER_REDRAWS {
            let r = ar + row_offset.sample(&mut rng).round() as i64;
            let c = ac + col_offset.sample(&mut rng).round() as i64;
            if geometry.contains_idler_signed((r, c)) {
                landed = Some((r as u32, c as u32));
                break;
            }
        }
        match landed {
            Some(p) if survives => idler.insert(p, &mut diag),
            Some(_) => {}
            None => diag.dropped_idlers += 1,
        }
    }

    let noise_s = sample_multithermal(model.signal_noise.modes, model.signal_noise.mean_per_mode, &mut rng);
    for _ in 0..noise_s {
        let p = (rng.random_range(0..s_rows), rng.random_range(0..s_cols));
        if rng.random::<f64>() < model.eta_s {
            signal.insert(p, &mut diag);
        }
    }
    let noise_i = sample_multithermal(model.idler_noise.modes, model.idler_noise.mean_per_mode, &mut rng);
    for _ in 0..noise_i {
        let p = (rng.random_range(0..i_rows), rng.random_range(0..i_cols));
        if rng.random::<f64>() < model.eta_i {
            idler.insert(p, &mut diag);
        }
    }

    signal.add_dark(model.dark_s, s_rows, s_cols, &mut rng);
    idler.add_dark(model.dark_i, i_rows, i_cols, &mut rng);

    let frame = Frame::new(shot, signal.into_sorted(), idler.into_sorted());
    (frame, diag)
}

/// Fired pixels of one strip; repeated hits merge into one photocount.
struct StripHits {
    cols: u32,
    keys: Vec<u64>,
}

impl StripHits {
    fn new(cols: u32) -> Self {
        Self { cols, keys: Vec::new() }
    }

    fn key(&self, p: Pixel) -> u64 {
        p.0 as u64 * self.cols as u64 + p.1 as u64
    }

    fn insert(&mut self, p: Pixel, diag: &mut SimDiagnostics) {
        let key = self.key(p);
        if self.keys.contains(&key) {
            diag.merged_hits += 1;
        } else {
            self.keys.push(key);
        }
    }

    /// Each pixel not lit by light fires with probability `dark`; drawn as a
    /// binomial count over the dark pixels, placed without repetition.
    fn add_dark<R: Rng>(&mut self, dark: f64, rows: u32, cols: u32, rng: &mut R) {
        if dark <= 0.0 {
            return;
        }
        let total = rows as u64 * cols as u64;
        let free = total - self.keys.len() as u64;
        let fires = Binomial::new(free, dark).expect("dark validated").sample(rng);
        let mut placed = 0;
        while placed < fires {
            let key = rng.random_range(0..total);
            if !self.keys.contains(&key) {
                self.keys.push(key);
                placed += 1;
            }
        }
    }

    fn into_sorted(mut self) -> Vec<Pixel> {
        self.keys.sort_unstable();
        let cols = self.cols as u64;
        self.keys
            .into_iter()
            .map(|k| ((k / cols) as u32, (k % cols) as u32))
            .collect()
    }
}
