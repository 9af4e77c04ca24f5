//! Detection-area sweep: filtered metrics and reconstructions for a grid of
//! area sizes, plus standard-reconstruction baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{
    reconstruct_filtered_cached, reconstruct_standard_cached, EmConfig, EtaPairPolicy,
};
use crate::error::{Error, Result};
use crate::filter::{effective_efficiencies, filter_frames, full_coverage_md, PairedHistogram};
use crate::metrics::{bootstrap, metrics_report, Distribution, MetricsReport};
use crate::model::{histogram_from_frames, DetectorParams, Frame, JointHistogram, JointPhotonDistribution, StripGeometry};
use crate::povm::PovmCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// Strictly increasing detection-area sizes.
    pub md_grid: Vec<usize>,
    pub eta_pair: EtaPairPolicy,
    pub em: EmConfig,
    /// Run the reconstructions, not only the photocount analysis.
    pub reconstruct: bool,
    /// Total dark count per strip for an extra standard baseline.
    pub inflated_dark_total: Option<f64>,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            md_grid: vec![29, 58, 100, 145, 217, 290, 435, 580, 870],
            eta_pair: EtaPairPolicy::Mean,
            em: EmConfig::default(),
            reconstruct: true,
            inflated_dark_total: Some(0.45),
            bootstrap_replicates: 0,
            seed: 1,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        if self.md_grid.is_empty() {
            return Err(Error::invalid("md_grid", "needs at least one detection-area size"));
        }
        if self.md_grid[0] == 0 {
            return Err(Error::invalid("md_grid", "sizes must be positive"));
        }
        if self.md_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("md_grid", "sizes must be strictly increasing"));
        }
        if self.bootstrap_replicates == 1 {
            return Err(Error::invalid("bootstrap_replicates", "use 0 or at least 2"));
        }
        if let Some(d) = self.inflated_dark_total {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::invalid("inflated_dark_total", format!("{d} must be >= 0")));
            }
        }
        self.em.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowLabel {
    Filtered,
    Standard,
    StandardInflated,
}

impl RowLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowLabel::Filtered => "filtered",
            RowLabel::Standard => "standard",
            RowLabel::StandardInflated => "standard-inflated",
        }
    }
}

/// `m_d` column: a pixel count, or `inf` for unfiltered baselines.
mod md_column {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => s.serialize_str(&n.to_string()),
            None => s.serialize_str("inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let text = String::deserialize(d)?;
        if text == "inf" {
            return Ok(None);
        }
        text.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

/// One line of the sweep table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: Option<RowLabel>,
    #[serde(with = "md_column")]
    pub m_d: Option<usize>,
    #[serde(rename = "S_s")]
    pub s_s: Option<f64>,
    #[serde(rename = "S_i")]
    pub s_i: Option<f64>,
    pub eta_s_eff: Option<f64>,
    pub eta_i_eff: Option<f64>,
    pub eta_pair: Option<f64>,
    pub c_mean_s: Option<f64>,
    pub c_mean_i: Option<f64>,
    #[serde(rename = "C_c")]
    pub c_c: Option<f64>,
    #[serde(rename = "R_c")]
    pub r_c: Option<f64>,
    #[serde(rename = "E2_c")]
    pub e2_c: Option<f64>,
    #[serde(rename = "E3_c")]
    pub e3_c: Option<f64>,
    #[serde(rename = "E4_c")]
    pub e4_c: Option<f64>,
    pub tau_c2: Option<f64>,
    pub tau_c3: Option<f64>,
    pub tau_c4: Option<f64>,
    #[serde(rename = "sd_C_c")]
    pub sd_c_c: Option<f64>,
    #[serde(rename = "sd_R_c")]
    pub sd_r_c: Option<f64>,
    pub sd_tau_c2: Option<f64>,
    pub sd_tau_c3: Option<f64>,
    pub sd_tau_c4: Option<f64>,
    pub n_mean: Option<f64>,
    pub n_mean_s: Option<f64>,
    pub n_mean_i: Option<f64>,
    #[serde(rename = "C_n")]
    pub c_n: Option<f64>,
    #[serde(rename = "R_n")]
    pub r_n: Option<f64>,
    #[serde(rename = "E4_n")]
    pub e4_n: Option<f64>,
    pub tau_n2: Option<f64>,
    pub tau_n3: Option<f64>,
    pub tau_n4: Option<f64>,
    pub em_iterations: Option<u64>,
    pub em_converged: Option<bool>,
    pub truncation_deficit: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn new(label: RowLabel, m_d: Option<usize>) -> Self {
        Self { label: Some(label), m_d, ..Default::default() }
    }

    pub fn tau_c(&self, k: usize) -> Option<f64> {
        match k {
            2 => self.tau_c2,
            3 => self.tau_c3,
            4 => self.tau_c4,
            _ => None,
        }
    }

    pub fn tau_n(&self, k: usize) -> Option<f64> {
        match k {
            2 => self.tau_n2,
            3 => self.tau_n3,
            4 => self.tau_n4,
            _ => None,
        }
    }

    /// Keeps the first error of the row.
    fn note<T>(&mut self, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                if self.error.is_none() {
                    self.error = Some(format!("{}: {}", e.category(), e));
                }
                None
            }
        }
    }

    fn set_photocount(&mut self, m: &MetricsReport) {
        self.c_mean_s = Some(m.mean_s);
        self.c_mean_i = Some(m.mean_i);
        self.c_c = Some(m.c);
        self.r_c = Some(m.r);
        self.e2_c = Some(m.e2);
        self.e3_c = Some(m.e3);
        self.e4_c = Some(m.e4);
        self.tau_c2 = Some(m.tau2);
        self.tau_c3 = Some(m.tau3);
        self.tau_c4 = Some(m.tau4);
    }

    fn set_photon_number(&mut self, m: &MetricsReport) {
        self.n_mean = Some(m.mean_avg);
        self.n_mean_s = Some(m.mean_s);
        self.n_mean_i = Some(m.mean_i);
        self.c_n = Some(m.c);
        self.r_n = Some(m.r);
        self.e4_n = Some(m.e4);
        self.tau_n2 = Some(m.tau2);
        self.tau_n3 = Some(m.tau3);
        self.tau_n4 = Some(m.tau4);
    }

    fn set_bootstrap(&mut self, sd: &[f64]) {
        let at = |k: usize| sd.get(k).copied().filter(|v| v.is_finite());
        self.sd_c_c = at(0);
        self.sd_r_c = at(1);
        self.sd_tau_c2 = at(2);
        self.sd_tau_c3 = at(3);
        self.sd_tau_c4 = at(4);
    }
}

/// A reconstructed distribution produced by one sweep row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepDistribution {
    pub label: RowLabel,
    pub m_d: Option<usize>,
    pub distribution: JointPhotonDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub distributions: Vec<SweepDistribution>,
}

impl SweepOutput {
    pub fn row(&self, label: RowLabel, m_d: Option<usize>) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == Some(label) && r.m_d == m_d)
    }
}

/// Everything the sweep needs to know about the data.
pub struct SweepInput<'a> {
    pub frames: &'a [Frame],
    pub geometry: &'a StripGeometry,
    pub signal: DetectorParams,
    pub idler: DetectorParams,
}

enum Task {
    Filtered(usize),
    Baseline(RowLabel, f64, f64),
}

fn photocount_statistic(h: &JointHistogram) -> Result<Vec<f64>> {
    let m = metrics_report(Distribution::Histogram(h), None, None)?;
    Ok(vec![m.c, m.r, m.tau2, m.tau3, m.tau4])
}

/// Runs every grid point and the baselines; rows come out in the order
/// filtered (by `m_d`), standard, inflated standard.
pub fn run_sweep(input: &SweepInput<'_>, settings: &SweepSettings) -> Result<SweepOutput> {
    settings.validate()?;
    if input.frames.is_empty() {
        return Err(Error::NoFrames);
    }
    let bound = input.frames.iter().map(|f| f.signal.len().max(f.idler.len())).max().unwrap_or(0);
    let unfiltered = histogram_from_frames(input.frames, bound)?;
    let cache = PovmCache::new();

    let mut tasks: Vec<Task> = settings.md_grid.iter().map(|&m| Task::Filtered(m)).collect();
    let (ds, di) = (
        input.signal.dark() * input.signal.pixels() as f64,
        input.idler.dark() * input.idler.pixels() as f64,
    );
    tasks.push(Task::Baseline(RowLabel::Standard, ds, di));
    if let Some(d) = settings.inflated_dark_total {
        tasks.push(Task::Baseline(RowLabel::StandardInflated, d, d));
    }

    let results: Vec<(SweepRow, Option<SweepDistribution>)> = tasks
        .par_iter()
        .map(|task| match *task {
            Task::Filtered(m_d) => filtered_row(input, settings, &unfiltered, m_d, &cache),
            Task::Baseline(label, ds, di) => baseline_row(input, settings, &unfiltered, label, ds, di, &cache),
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut distributions = Vec::new();
    for (row, dist) in results {
        rows.push(row);
        distributions.extend(dist);
    }
    Ok(SweepOutput { rows, distributions })
}

fn filtered_row(
    input: &SweepInput<'_>,
    settings: &SweepSettings,
    unfiltered: &JointHistogram,
    m_d: usize,
    cache: &PovmCache,
) -> (SweepRow, Option<SweepDistribution>) {
    let mut row = SweepRow::new(RowLabel::Filtered, Some(m_d));
    let Some(paired) = row.note(filter_frames(input.frames, input.geometry, m_d)) else {
        return (row, None);
    };
    filter_columns(&mut row, &paired);
    let eff = row.note(effective_efficiencies(&paired, unfiltered, input.signal.eta(), input.idler.eta()));
    if let Some(eff) = &eff {
        row.eta_s_eff = Some(eff.eta_s_eff);
        row.eta_i_eff = Some(eff.eta_i_eff);
        row.eta_pair = Some(settings.eta_pair.resolve(eff));
    }
    photocount_columns(&mut row, settings, &paired.retained_counts);

    let mut dist = None;
    if settings.reconstruct {
        if let Some(eta_pair) = row.eta_pair {
            let result = reconstruct_filtered_cached(
                &paired,
                input.signal.eta(),
                input.idler.eta(),
                eta_pair,
                input.geometry.signal_pixels(),
                input.geometry,
                &settings.em,
                cache,
            );
            if let Some(r) = row.note(result) {
                row.em_iterations = Some(r.pairs.iterations.max(r.unpaired.iterations) as u64);
                row.em_converged = Some(r.converged());
                row.truncation_deficit = Some(r.distribution.truncation_deficit());
                if let Some(m) = row.note(metrics_report(Distribution::PhotonNumber(&r.distribution), Some(m_d), None)) {
                    row.set_photon_number(&m);
                }
                dist = Some(SweepDistribution { label: RowLabel::Filtered, m_d: Some(m_d), distribution: r.distribution });
            }
        }
    }
    (row, dist)
}

fn filter_columns(row: &mut SweepRow, paired: &PairedHistogram) {
    if let Some((s, i)) = row.note(crate::metrics::signal_to_noise(paired)) {
        row.s_s = Some(s);
        row.s_i = Some(i);
    }
}

fn photocount_columns(row: &mut SweepRow, settings: &SweepSettings, hist: &JointHistogram) {
    if let Some(m) = row.note(metrics_report(Distribution::Histogram(hist), row.m_d, None)) {
        row.set_photocount(&m);
    }
    if settings.bootstrap_replicates >= 2 {
        let seed = settings.seed ^ (row.m_d.unwrap_or(usize::MAX) as u64).rotate_left(32);
        if let Some(b) = row.note(bootstrap(hist, settings.bootstrap_replicates, seed, photocount_statistic)) {
            row.set_bootstrap(&b.sd);
        }
    }
}

fn baseline_row(
    input: &SweepInput<'_>,
    settings: &SweepSettings,
    unfiltered: &JointHistogram,
    label: RowLabel,
    dark_total_s: f64,
    dark_total_i: f64,
    cache: &PovmCache,
) -> (SweepRow, Option<SweepDistribution>) {
    let mut row = SweepRow::new(label, None);
    if let Some(paired) = row.note(filter_frames(input.frames, input.geometry, full_coverage_md(input.geometry))) {
        filter_columns(&mut row, &paired);
    }
    photocount_columns(&mut row, settings, unfiltered);
    if !settings.reconstruct {
        return (row, None);
    }
    let params = DetectorParams::with_total_dark(input.signal.pixels(), input.signal.eta(), dark_total_s)
        .and_then(|s| Ok((s, DetectorParams::with_total_dark(input.idler.pixels(), input.idler.eta(), dark_total_i)?)));
    let Some((ps, pi)) = row.note(params) else {
        return (row, None);
    };
    let Some(r) = row.note(reconstruct_standard_cached(unfiltered, &ps, &pi, &settings.em, cache)) else {
        return (row, None);
    };
    row.em_iterations = Some(r.iterations as u64);
    row.em_converged = Some(r.converged);
    row.truncation_deficit = Some(r.distribution.truncation_deficit());
    if let Some(m) = row.note(metrics_report(Distribution::PhotonNumber(&r.distribution), None, None)) {
        row.set_photon_number(&m);
    }
    (row, Some(SweepDistribution { label, m_d: None, distribution: r.distribution }))
}

/// One tidy record of the long-format report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub label: RowLabel,
    #[serde(with = "md_column")]
    pub m_d: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub records: Vec<ReportRecord>,
    /// Detection area maximizing the photocount depth from `E_2`.
    pub best_md: Option<usize>,
    pub summary: String,
}

pub fn build_report(rows: &[SweepRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::Schema("sweep table has no rows".into()));
    }
    let mut records = Vec::new();
    for row in rows {
        let label = row.label.ok_or_else(|| Error::Schema("row without a label".into()))?;
        let mut push = |metric: &str, value: Option<f64>, source: &str| {
            if let Some(value) = value {
                records.push(ReportRecord { label, m_d: row.m_d, metric: metric.into(), value, source: source.into() });
            }
        };
        push("S_s", row.s_s, "filter");
        push("S_i", row.s_i, "filter");
        push("eta_s_eff", row.eta_s_eff, "filter");
        push("eta_i_eff", row.eta_i_eff, "filter");
        push("mean_s", row.c_mean_s, "photocount");
        push("mean_i", row.c_mean_i, "photocount");
        push("C", row.c_c, "photocount");
        push("R", row.r_c, "photocount");
        push("tau2", row.tau_c2, "photocount");
        push("tau3", row.tau_c3, "photocount");
        push("tau4", row.tau_c4, "photocount");
        push("mean", row.n_mean, "photon-number");
        push("C", row.c_n, "photon-number");
        push("R", row.r_n, "photon-number");
        push("tau2", row.tau_n2, "photon-number");
        push("tau3", row.tau_n3, "photon-number");
        push("tau4", row.tau_n4, "photon-number");
    }

    let filtered: Vec<&SweepRow> = rows.iter().filter(|r| r.label == Some(RowLabel::Filtered)).collect();
    let candidates: Vec<&SweepRow> = if filtered.is_empty() { rows.iter().collect() } else { filtered };
    let best = candidates
        .iter()
        .filter_map(|r| r.tau_c2.map(|t| (t, *r)))
        .fold(None::<(f64, &SweepRow)>, |acc, (t, r)| match acc {
            Some((bt, _)) if bt >= t => acc,
            _ => Some((t, r)),
        });

    let mut summary = String::new();
    let md_text = |m: Option<usize>| m.map_or("inf".to_string(), |v| v.to_string());
    summary.push_str(&format!("rows: {}\n", rows.len()));
    let best_md = match best {
        Some((tau, row)) => {
            summary.push_str(&format!("best detection area: m_d = {} (tau_c,E2 = {tau:.6})\n", md_text(row.m_d)));
            row.m_d
        }
        None => {
            summary.push_str("best detection area: undetermined (no photocount depth available)\n");
            None
        }
    };
    for row in rows {
        let label = row.label.map_or("?", |l| l.as_str());
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        summary.push_str(&format!(
            "{label:>17} m_d={:>6}  S_s={:>8} C_c={:>8} R_c={:>8} tau_c2={:>8} <n>={:>8} tau_n4={:>8}{}\n",
            md_text(row.m_d),
            fmt(row.s_s),
            fmt(row.c_c),
            fmt(row.r_c),
            fmt(row.tau_c2),
            fmt(row.n_mean),
            fmt(row.tau_n4),
            row.error.as_ref().map_or(String::new(), |e| format!("  [{e}]")),
        ));
    }
    Ok(Report { records, best_md, summary })
}
