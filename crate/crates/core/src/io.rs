//! CSV file formats: complete snapshots, partial snapshots, reconstructions
//! and color exports.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::colors::ColorBinning;
use crate::error::{Error, Result};
use crate::gmrf::{PartialSnapshot, Snapshot};
use crate::graph::{RoadGraph, RoadId};
use crate::reconstruct::ReconstructionResult;

const ROAD_PREFIX: &str = "road_";

/// Six significant digits, `%g` style: fixed notation for moderate
/// magnitudes, scientific otherwise, trailing zeros removed.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn parse_value(field: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: '{field}' is not a number")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn lookup(g: &RoadGraph, id: &str, line: u64) -> Result<usize> {
    g.index_of(&RoadId::new(id))
        .ok_or_else(|| Error::Structure(format!("line {line}: road '{id}' is not in the network")))
}

/// Complete snapshots, one row each, columns `road_<id>` in label order.
pub fn write_snapshots<W: Write>(w: W, g: &RoadGraph, snapshots: &[Snapshot]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(g.labels().iter().map(|l| format!("{ROAD_PREFIX}{l}")))?;
    for s in snapshots {
        crate::error::ensure_len("snapshot", g.n(), s.len())?;
        // Shortest round-trip representation keeps the moments exact.
        out.write_record(s.0.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads complete snapshots. Columns may come in any order but must cover
/// every road exactly once.
pub fn read_snapshots<R: Read>(r: R, g: &RoadGraph) -> Result<Vec<Snapshot>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let header = rdr.headers()?.clone();
    let mut column_to_vertex = Vec::with_capacity(header.len());
    let mut seen = vec![false; g.n()];
    for name in header.iter() {
        let id = name.strip_prefix(ROAD_PREFIX).ok_or_else(|| {
            Error::Format(format!(
                "snapshot header '{name}' lacks the '{ROAD_PREFIX}' prefix"
            ))
        })?;
        let v = lookup(g, id, 1)?;
        if std::mem::replace(&mut seen[v], true) {
            return Err(Error::Format(format!(
                "road '{id}' appears twice in the header"
            )));
        }
        column_to_vertex.push(v);
    }
    if let Some(v) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!(
            "snapshot file has no column for road '{}'",
            g.label(v)
        )));
    }
    let mut snapshots = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let mut values = vec![0.0; g.n()];
        for (field, &v) in rec.iter().zip(&column_to_vertex) {
            let x = parse_value(field, line)?;
            if !x.is_finite() {
                return Err(Error::Domain(format!("line {line}: non-finite density")));
            }
            values[v] = x;
        }
        snapshots.push(Snapshot(values));
    }
    Ok(snapshots)
}

/// `road_id,value` rows for observed roads only.
pub fn write_partial<W: Write>(w: W, g: &RoadGraph, s: &PartialSnapshot) -> Result<()> {
    crate::error::ensure_len("partial snapshot", g.n(), s.len())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["road_id", "value"])?;
    for (i, v) in s.observed() {
        out.write_record([g.label(i).as_str(), &v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Roads without a row, or with an empty value, are unobserved.
pub fn read_partial<R: Read>(r: R, g: &RoadGraph) -> Result<PartialSnapshot> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(r);
    expect_header(rdr.headers()?, &["road_id", "value"])?;
    let mut values: Vec<Option<f64>> = vec![None; g.n()];
    let mut seen = vec![false; g.n()];
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = rec.get(0).unwrap_or("");
        let v = lookup(g, id, line)?;
        if std::mem::replace(&mut seen[v], true) {
            return Err(Error::Format(format!(
                "line {line}: road '{id}' listed twice"
            )));
        }
        match rec.get(1) {
            None | Some("") => {}
            Some(field) => values[v] = Some(parse_value(field, line)?),
        }
    }
    PartialSnapshot::new(values)
}

fn expect_header(header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Format(format!(
            "expected header '{}', found '{}'",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionRow {
    pub road_id: RoadId,
    pub estimate: f64,
    pub observed: bool,
}

/// `road_id,estimate,observed` with six significant digits.
pub fn write_reconstruction<W: Write>(
    w: W,
    g: &RoadGraph,
    result: &ReconstructionResult,
) -> Result<()> {
    crate::error::ensure_len("reconstruction", g.n(), result.estimates.len())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["road_id", "estimate", "observed"])?;
    for (i, v) in result.estimates.iter().enumerate() {
        let flag = if result.is_observed(i) { "1" } else { "0" };
        out.write_record([g.label(i).as_str(), &format_g6(*v), flag])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reconstruction<R: Read>(r: R) -> Result<Vec<ReconstructionRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    expect_header(rdr.headers()?, &["road_id", "estimate", "observed"])?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let observed = match rec.get(2) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(Error::Format(format!(
                    "line {line}: observed flag must be 0 or 1, got {:?}",
                    other.unwrap_or("")
                )))
            }
        };
        rows.push(ReconstructionRow {
            road_id: RoadId::new(rec.get(0).unwrap_or("")),
            estimate: parse_value(rec.get(1).unwrap_or(""), line)?,
            observed,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColorRow {
    pub road_id: RoadId,
    pub value: f64,
    pub bin_index: usize,
    pub color: String,
}

pub fn color_rows(rows: &[ReconstructionRow], binning: &ColorBinning) -> Result<Vec<ColorRow>> {
    binning.validate()?;
    rows.iter()
        .map(|r| {
            let (bin_index, color) = binning.color(r.estimate)?;
            Ok(ColorRow {
                road_id: r.road_id.clone(),
                value: r.estimate,
                bin_index,
                color: color.to_owned(),
            })
        })
        .collect()
}

/// `road_id,value,bin_index,color`.
pub fn write_colors<W: Write>(w: W, rows: &[ColorRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["road_id", "value", "bin_index", "color"])?;
    for r in rows {
        out.write_record([
            r.road_id.as_str(),
            &format_g6(r.value),
            &r.bin_index.to_string(),
            &r.color,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: impl AsRef<Path>) -> Result<File> {
    Ok(File::open(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
