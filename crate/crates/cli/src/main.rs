use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use twinrecon::config::{load_config, RunConfig};
use twinrecon::em::{reconstruct_filtered, reconstruct_standard};
use twinrecon::filter::{effective_efficiencies, estimate_correlated_area, filter_frames, offset_histogram};
use twinrecon::io;
use twinrecon::metrics::{metrics_report, Distribution, MetricsReport};
use twinrecon::model::{histogram_from_frames, Frame, JointHistogram};
use twinrecon::sim::generate_frames;
use twinrecon::sweep::{build_report, run_sweep, SweepInput};
use twinrecon::{Error, Result};

#[derive(Parser)]
#[command(name = "twinrecon", version, about = "Twin-beam photocount filtering and photon-number reconstruction")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    Filtered,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate frames from the configured model.
    Simulate,
    /// Estimate the correlated area from the signal-idler offset histogram.
    EstimateArea {
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Half-width of the offset window; configured value when omitted.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Pair photocounts within a detection area.
    Filter {
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Detection-area size; the estimated correlated area when omitted.
        #[arg(long)]
        md: Option<usize>,
    },
    /// Reconstruct the joint photon-number distribution.
    Reconstruct {
        /// Defaults to `both` for frames and `standard` for a histogram.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Photocount histogram for a standard reconstruction without frames.
        #[arg(long, conflicts_with = "frames")]
        histogram: Option<PathBuf>,
        #[arg(long)]
        md: Option<usize>,
    },
    /// Run the detection-area sweep.
    Sweep {
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Summarize a sweep table.
    Report {
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[arg(long)]
        print_defaults: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config { field: "threads".into(), message: "must be positive".into() });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config { field: "threads".into(), message: e.to_string() })?;
    }
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    let out = config.out_dir.clone();
    let frames_path = |p: Option<PathBuf>| p.unwrap_or_else(|| out.join("frames.jsonl"));

    match cli.command {
        Command::Simulate => simulate(&config),
        Command::EstimateArea { frames, window } => {
            let frames = load_frames(&frames_path(frames))?;
            estimate_area(&config, &frames, window.unwrap_or(config.sweep.correlation_window))
        }
        Command::Filter { frames, md } => {
            let frames = load_frames(&frames_path(frames))?;
            filter(&config, &frames, md)
        }
        Command::Reconstruct { mode, frames, histogram, md } => {
            if let Some(h) = histogram {
                if !matches!(mode, None | Some(Mode::Standard)) {
                    return Err(Error::Config {
                        field: "mode".into(),
                        message: "a histogram input supports only the standard mode".into(),
                    });
                }
                return reconstruct_histogram(&config, &io::read_histogram(&h)?, "standard");
            }
            let frames = load_frames(&frames_path(frames))?;
            reconstruct(&config, &frames, mode.unwrap_or(Mode::Both), md)
        }
        Command::Sweep { frames } => {
            let frames = load_frames(&frames_path(frames))?;
            sweep(&config, &frames)
        }
        Command::Report { sweep } => report(&config, &sweep.unwrap_or_else(|| out.join("sweep.csv"))),
        Command::Config { print_defaults } => {
            if !print_defaults {
                config.validate()?;
                print!("{}", config.to_toml());
            } else {
                print!("{}", RunConfig::default().to_toml());
            }
            Ok(())
        }
    }
}

fn load_frames(path: &Path) -> Result<Vec<Frame>> {
    let frames = io::read_frames(path)?;
    if frames.is_empty() {
        return Err(Error::NoFrames);
    }
    Ok(frames)
}

fn unfiltered_histogram(frames: &[Frame]) -> Result<JointHistogram> {
    let bound = frames.iter().map(|f| f.signal.len().max(f.idler.len())).max().unwrap_or(0);
    histogram_from_frames(frames, bound)
}

fn simulate(config: &RunConfig) -> Result<()> {
    let model = config.twin_beam_model()?;
    let (frames, diag) = generate_frames(&model, &config.geometry, config.shots, config.seed)?;
    let path = config.out_dir.join("frames.jsonl");
    io::write_frames(&path, &frames)?;
    let hist = unfiltered_histogram(&frames)?;
    io::write_histogram(&config.out_dir.join("histogram.csv"), &hist)?;
    let (ms, mi) = hist.means()?;
    println!("wrote {} frames to {}", frames.len(), path.display());
    println!("mean photocounts: signal {ms:.4}, idler {mi:.4}");
    println!("dropped idlers: {}, merged hits: {}", diag.dropped_idlers, diag.merged_hits);
    Ok(())
}

fn estimate_area(config: &RunConfig, frames: &[Frame], window: usize) -> Result<()> {
    let est = estimate_correlated_area(frames, &config.geometry, window)?;
    io::write_offsets(&config.out_dir.join("offsets.csv"), &offset_histogram(frames, &config.geometry, window))?;
    io::write_json(&config.out_dir.join("area.json"), &est)?;
    println!("correlated area m_c = {}", est.m_c);
    println!("center ({:.3}, {:.3}), sigma ({:.3}, {:.3})", est.center.0, est.center.1, est.sigma.0, est.sigma.1);
    println!("background {:.4} +- {:.4}", est.background, est.background_sd);
    Ok(())
}

fn area_or_estimate(config: &RunConfig, frames: &[Frame], md: Option<usize>) -> Result<usize> {
    match md {
        Some(m) => Ok(m),
        None => {
            let m = estimate_correlated_area(frames, &config.geometry, config.sweep.correlation_window)?.m_c;
            println!("using estimated correlated area m_d = {m}");
            Ok(m)
        }
    }
}

fn filter(config: &RunConfig, frames: &[Frame], md: Option<usize>) -> Result<()> {
    let m_d = area_or_estimate(config, frames, md)?;
    let paired = filter_frames(frames, &config.geometry, m_d)?;
    let eff = effective_efficiencies(
        &paired,
        &unfiltered_histogram(frames)?,
        config.detector.signal.eta,
        config.detector.idler.eta,
    )?;
    io::write_json(&config.out_dir.join(format!("paired_{m_d}.json")), &paired)?;
    io::write_histogram(&config.out_dir.join(format!("retained_{m_d}.csv")), &paired.retained_counts)?;
    let report = metrics_report(Distribution::Histogram(&paired.retained_counts), Some(m_d), Some(&paired))?;
    println!("m_d = {m_d}: mean pairs {:.4}", paired.mean_pairs);
    println!("effective efficiencies: signal {:.4}, idler {:.4}", eff.eta_s_eff, eff.eta_i_eff);
    print_metrics(&report);
    Ok(())
}

fn print_metrics(r: &MetricsReport) {
    println!("source {}: <s> {:.4} <i> {:.4}", r.source.as_str(), r.mean_s, r.mean_i);
    println!("  C {:.6}  R {:.6}", r.c, r.r);
    println!("  E2 {:.6e}  E3 {:.6e}  E4 {:.6e}", r.e2, r.e3, r.e4);
    println!("  tau2 {:.6}  tau3 {:.6}  tau4 {:.6}", r.tau2, r.tau3, r.tau4);
    if let (Some(s), Some(i)) = (r.s_s, r.s_i) {
        println!("  S_s {s:.4}  S_i {i:.4}");
    }
}

fn reconstruct_histogram(config: &RunConfig, hist: &JointHistogram, tag: &str) -> Result<()> {
    let r = reconstruct_standard(hist, &config.signal_detector()?, &config.idler_detector()?, &config.em)?;
    let path = config.out_dir.join(format!("distribution_{tag}.csv"));
    io::write_distribution(&path, &r.distribution)?;
    println!("standard reconstruction: {} iterations, converged {}", r.iterations, r.converged);
    print_metrics(&metrics_report(Distribution::PhotonNumber(&r.distribution), None, None)?);
    println!("wrote {}", path.display());
    Ok(())
}

fn reconstruct(config: &RunConfig, frames: &[Frame], mode: Mode, md: Option<usize>) -> Result<()> {
    if matches!(mode, Mode::Standard | Mode::Both) {
        reconstruct_histogram(config, &unfiltered_histogram(frames)?, "standard")?;
    }
    if matches!(mode, Mode::Filtered | Mode::Both) {
        let m_d = area_or_estimate(config, frames, md)?;
        let paired = filter_frames(frames, &config.geometry, m_d)?;
        let (eta_s, eta_i) = (config.detector.signal.eta, config.detector.idler.eta);
        let eff = effective_efficiencies(&paired, &unfiltered_histogram(frames)?, eta_s, eta_i)?;
        let eta_pair = config.sweep.eta_pair.resolve(&eff);
        let r = reconstruct_filtered(&paired, eta_s, eta_i, eta_pair, &config.geometry, &config.em)?;
        let path = config.out_dir.join(format!("distribution_filtered_{m_d}.csv"));
        io::write_distribution(&path, &r.distribution)?;
        println!(
            "filtered reconstruction at m_d = {m_d} (eta_pair {eta_pair:.4}): {} + {} iterations, converged {}",
            r.pairs.iterations,
            r.unpaired.iterations,
            r.converged()
        );
        print_metrics(&metrics_report(Distribution::PhotonNumber(&r.distribution), Some(m_d), None)?);
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sweep(config: &RunConfig, frames: &[Frame]) -> Result<()> {
    let input = SweepInput {
        frames,
        geometry: &config.geometry,
        signal: config.signal_detector()?,
        idler: config.idler_detector()?,
    };
    let output = run_sweep(&input, &config.sweep_settings())?;
    let path = config.out_dir.join("sweep.csv");
    io::write_sweep(&path, &output.rows)?;
    for d in &output.distributions {
        let md = d.m_d.map_or("inf".to_string(), |m| m.to_string());
        let name = format!("{}_{md}.csv", d.label.as_str());
        io::write_distribution(&config.out_dir.join("distributions").join(name), &d.distribution)?;
    }
    let failed = output.rows.iter().filter(|r| r.error.is_some()).count();
    println!("wrote {} rows to {} ({failed} with errors)", output.rows.len(), path.display());
    Ok(())
}

fn report(config: &RunConfig, sweep_path: &Path) -> Result<()> {
    let rows = io::read_sweep(sweep_path)?;
    let report = build_report(&rows)?;
    io::write_report(&config.out_dir.join("report.csv"), &report.records)?;
    std::fs::write(config.out_dir.join("summary.txt"), &report.summary)?;
    print!("{}", report.summary);
    Ok(())
}
