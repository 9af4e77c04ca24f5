//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, EtaPairPolicy};
use crate::error::{Error, Result};
use crate::model::{DetectorParams, StripGeometry};
use crate::sim::{ThermalSource, TwinBeamModel};
use crate::sweep::SweepSettings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub eta: f64,
    /// Mean dark count per shot over the whole strip.
    pub dark_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorPair {
    pub signal: DetectorConfig,
    pub idler: DetectorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pairs: ThermalSource,
    pub signal_noise: ThermalSource,
    pub idler_noise: ThermalSource,
    /// Idler displacement widths `[row, col]` in pixels.
    pub corr_sigma: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub md_grid: Vec<usize>,
    pub eta_pair: EtaPairPolicy,
    pub reconstruct: bool,
    pub inflated_dark_total: Option<f64>,
    pub bootstrap_replicates: usize,
    /// Half-width of the offset window used to estimate the correlated area.
    pub correlation_window: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let s = SweepSettings::default();
        Self {
            md_grid: s.md_grid,
            eta_pair: s.eta_pair,
            reconstruct: s.reconstruct,
            inflated_dark_total: s.inflated_dark_total,
            bootstrap_replicates: s.bootstrap_replicates,
            correlation_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub shots: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub geometry: StripGeometry,
    pub detector: DetectorPair,
    pub model: ModelConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub em: EmConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            shots: 100_000,
            out_dir: default_out_dir(),
            geometry: StripGeometry::identical(65, 100).expect("static geometry"),
            detector: DetectorPair {
                signal: DetectorConfig { eta: 0.228, dark_total: 0.2 },
                idler: DetectorConfig { eta: 0.223, dark_total: 0.2 },
            },
            model: ModelConfig {
                pairs: ThermalSource { modes: 10.0, mean_per_mode: 1.2 },
                signal_noise: ThermalSource { modes: 100.0, mean_per_mode: 0.1 },
                idler_noise: ThermalSource { modes: 100.0, mean_per_mode: 0.1 },
                corr_sigma: [4.8, 4.8],
            },
            sweep: SweepConfig::default(),
            em: EmConfig::default(),
        }
    }
}

fn field_error(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => Error::Config {
            field: if section.is_empty() { name.to_string() } else { format!("{section}.{name}") },
            message: reason,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config { field: "shots".into(), message: "must be positive".into() });
        }
        self.signal_detector().map_err(|e| field_error("detector.signal", e))?;
        self.idler_detector().map_err(|e| field_error("detector.idler", e))?;
        self.twin_beam_model()?.validate().map_err(|e| field_error("model", e))?;
        if self.sweep.correlation_window < 2 {
            return Err(Error::Config {
                field: "sweep.correlation_window".into(),
                message: "must be at least 2".into(),
            });
        }
        self.sweep_settings().validate().map_err(|e| field_error("sweep", e))
    }

    pub fn signal_detector(&self) -> Result<DetectorParams> {
        let d = &self.detector.signal;
        DetectorParams::with_total_dark(self.geometry.signal_pixels(), d.eta, d.dark_total)
    }

    pub fn idler_detector(&self) -> Result<DetectorParams> {
        let d = &self.detector.idler;
        DetectorParams::with_total_dark(self.geometry.idler_pixels(), d.eta, d.dark_total)
    }

    pub fn twin_beam_model(&self) -> Result<TwinBeamModel> {
        let s = self.signal_detector()?;
        let i = self.idler_detector()?;
        Ok(TwinBeamModel {
            pairs: self.model.pairs,
            signal_noise: self.model.signal_noise,
            idler_noise: self.model.idler_noise,
            corr_sigma: (self.model.corr_sigma[0], self.model.corr_sigma[1]),
            eta_s: s.eta(),
            eta_i: i.eta(),
            dark_s: s.dark(),
            dark_i: i.dark(),
        })
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            md_grid: self.sweep.md_grid.clone(),
            eta_pair: self.sweep.eta_pair,
            em: self.em,
            reconstruct: self.sweep.reconstruct,
            inflated_dark_total: self.sweep.inflated_dark_total,
            bootstrap_replicates: self.sweep.bootstrap_replicates,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_of(text: &str, offset: usize) -> u64 {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() as u64 + 1
}

/// Parses and validates a configuration; `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}
