//! File formats: frames as JSON lines, histograms, distributions, tables
//! and sweep results as CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::em::edge_mass;
use crate::error::{Error, Result};
use crate::filter::OffsetHistogram;
use crate::model::{Frame, JointHistogram, JointPhotonDistribution};
use crate::povm::PovmTable;
use crate::sweep::{ReportRecord, SweepRow};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    shot: u64,
    s: Vec<[u32; 2]>,
    i: Vec<[u32; 2]>,
}

fn parse_error(origin: &str, line: u64, message: impl ToString) -> Error {
    Error::Parse { path: origin.to_string(), line, message: message.to_string() }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn write_frames_to<W: Write>(mut w: W, frames: &[Frame]) -> Result<()> {
    for f in frames {
        let rec = FrameRecord {
            shot: f.shot,
            s: f.signal.iter().map(|&(r, c)| [r, c]).collect(),
            i: f.idler.iter().map(|&(r, c)| [r, c]).collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads frames; blank lines are skipped.
pub fn read_frames_from<R: BufRead>(r: R, origin: &str) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_error(origin, k as u64 + 1, e))?;
        frames.push(Frame::new(
            rec.shot,
            rec.s.into_iter().map(|[r, c]| (r, c)).collect(),
            rec.i.into_iter().map(|[r, c]| (r, c)).collect(),
        ));
    }
    Ok(frames)
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    write_frames_to(create(path)?, frames)
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    read_frames_from(open(path)?, &path.display().to_string())
}

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str], origin: &str) -> Result<()> {
    let headers = reader.headers().map_err(|e| parse_error(origin, 1, e))?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Schema(format!(
            "{origin}: expected columns {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn read_records<R: Read, T: DeserializeOwned>(r: R, expected: &[&str], origin: &str) -> Result<Vec<(u64, T)>> {
    let mut reader = csv::Reader::from_reader(r);
    check_header(&mut reader, expected, origin)?;
    let mut out = Vec::new();
    for rec in reader.deserialize::<T>() {
        match rec {
            Ok(v) => out.push((out.len() as u64 + 2, v)),
            Err(e) => {
                let line = e.position().map_or(out.len() as u64 + 2, |p| p.line());
                return Err(parse_error(origin, line, e));
            }
        }
    }
    Ok(out)
}

const HISTOGRAM_COLUMNS: [&str; 3] = ["c_s", "c_i", "count"];

#[derive(Serialize, Deserialize)]
struct HistogramCell {
    c_s: usize,
    c_i: usize,
    count: u64,
}

/// Every cell of the histogram, zeros included.
pub fn write_histogram_to<W: Write>(w: W, hist: &JointHistogram) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    writer.write_record(HISTOGRAM_COLUMNS).map_err(csv_io)?;
    for ((c_s, c_i), &count) in hist.counts().indexed_iter() {
        writer.serialize(HistogramCell { c_s, c_i, count }).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_histogram_from<R: Read>(r: R, origin: &str) -> Result<JointHistogram> {
    let cells: Vec<(u64, HistogramCell)> = read_records(r, &HISTOGRAM_COLUMNS, origin)?;
    if cells.is_empty() {
        return Err(Error::Schema(format!("{origin}: histogram has no cells")));
    }
    let rows = cells.iter().map(|(_, c)| c.c_s).max().unwrap_or(0) + 1;
    let cols = cells.iter().map(|(_, c)| c.c_i).max().unwrap_or(0) + 1;
    let mut counts = Array2::<u64>::zeros((rows, cols));
    let mut seen = Array2::<bool>::from_elem((rows, cols), false);
    for (line, cell) in cells {
        if std::mem::replace(&mut seen[[cell.c_s, cell.c_i]], true) {
            return Err(parse_error(origin, line, format!("cell ({}, {}) listed twice", cell.c_s, cell.c_i)));
        }
        counts[[cell.c_s, cell.c_i]] = cell.count;
    }
    JointHistogram::from_counts(counts)
}

pub fn write_histogram(path: &Path, hist: &JointHistogram) -> Result<()> {
    write_histogram_to(create(path)?, hist)
}

pub fn read_histogram(path: &Path) -> Result<JointHistogram> {
    read_histogram_from(open(path)?, &path.display().to_string())
}

const DISTRIBUTION_COLUMNS: [&str; 3] = ["n_s", "n_i", "p"];

#[derive(Deserialize)]
struct DistributionCell {
    n_s: usize,
    n_i: usize,
    p: f64,
}

pub fn write_distribution_to<W: Write>(mut w: W, dist: &JointPhotonDistribution) -> Result<()> {
    writeln!(w, "{}", DISTRIBUTION_COLUMNS.join(","))?;
    for ((n_s, n_i), p) in dist.probabilities().indexed_iter() {
        writeln!(w, "{n_s},{n_i},{p:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

/// The stored truncation deficit is recomputed as the edge mass.
pub fn read_distribution_from<R: Read>(r: R, origin: &str) -> Result<JointPhotonDistribution> {
    let cells: Vec<(u64, DistributionCell)> = read_records(r, &DISTRIBUTION_COLUMNS, origin)?;
    if cells.is_empty() {
        return Err(Error::Schema(format!("{origin}: distribution has no cells")));
    }
    let rows = cells.iter().map(|(_, c)| c.n_s).max().unwrap_or(0) + 1;
    let cols = cells.iter().map(|(_, c)| c.n_i).max().unwrap_or(0) + 1;
    let mut p = Array2::<f64>::zeros((rows, cols));
    for (line, cell) in cells {
        if !(cell.p >= 0.0 && cell.p.is_finite()) {
            return Err(parse_error(origin, line, format!("probability {} is not a finite non-negative number", cell.p)));
        }
        p[[cell.n_s, cell.n_i]] = cell.p;
    }
    let deficit = edge_mass(&p);
    JointPhotonDistribution::new(p, deficit)
}

pub fn write_distribution(path: &Path, dist: &JointPhotonDistribution) -> Result<()> {
    write_distribution_to(create(path)?, dist)
}

pub fn read_distribution(path: &Path) -> Result<JointPhotonDistribution> {
    read_distribution_from(open(path)?, &path.display().to_string())
}

pub fn write_povm(path: &Path, table: &PovmTable) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "c,n,T")?;
    for ((c, n), t) in table.matrix().indexed_iter() {
        writeln!(w, "{c},{n},{t:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Offset counts with the acceptance used to correct them.
pub fn write_offsets(path: &Path, hist: &OffsetHistogram) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "d_row,d_col,count,acceptance")?;
    let h = hist.window as i64;
    for ((a, b), &count) in hist.counts.indexed_iter() {
        writeln!(w, "{},{},{count},{}", a as i64 - h, b as i64 - h, hist.acceptance[[a, b]])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn write_sweep_to<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer.serialize(row).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_sweep_from<R: Read>(r: R, origin: &str) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let expected = sweep_columns();
    check_header(&mut reader, &expected.iter().map(String::as_str).collect::<Vec<_>>(), origin)?;
    let mut rows = Vec::new();
    for rec in reader.deserialize::<SweepRow>() {
        rows.push(rec.map_err(|e| {
            let line = e.position().map_or(rows.len() as u64 + 2, |p| p.line());
            parse_error(origin, line, e)
        })?);
    }
    Ok(rows)
}

/// Header of the sweep table.
pub fn sweep_columns() -> Vec<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.serialize(SweepRow::default()).expect("in-memory write");
    let bytes = writer.into_inner().expect("in-memory write");
    let text = String::from_utf8(bytes).expect("utf-8");
    text.lines().next().unwrap_or("").split(',').map(str::to_string).collect()
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_sweep_to(create(path)?, rows)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_sweep_from(open(path)?, &path.display().to_string())
}

pub fn write_report(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    writer.write_record(["label", "m_d", "metric", "value", "source"]).map_err(csv_io)?;
    for r in records {
        writer.serialize(r).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
