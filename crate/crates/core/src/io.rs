//! On-disk formats used by the command line tool.
//!
//! Measurement series are CSV with a `trajectory,t,<components...>` header
//! and one row per snapshot. Metadata is JSON. Eigenvectors are a small
//! little-endian binary file:
//!
//! ```text
//! magic   b"KFXI"
//! version u32 (= 1)
//! count   u64   number of eigenvectors
//! len     u64   entries per eigenvector
//! data    count * len * (re: f64, im: f64), eigenvector-major
//! ```
//!
//! Raw field snapshots use the same header idea (`b"KFFD"`, version,
//! trajectory count, grid size) followed, per trajectory, by its index and
//! state count (u64 each) and then `t, v[..], w[..]` per state as f64.
//!
//! Floats are written with the shortest representation that parses back to
//! the same value, so files round-trip exactly and reruns are byte-identical.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dictionary::AnyDictionary;
use crate::edmd::KoopmanDecomposition;
use crate::error::{Error, Result};
use crate::fhn::{FieldState, Trajectory};
use crate::fusion::{FusionModel, IntrinsicSamples, MatchedPair};
use crate::interp::FallbackPolicy;
use crate::measurements::{MeasurementSeries, WhitenTransform};
use crate::points::PointSet;

pub const FORMAT_VERSION: u32 = 1;
const EIGENVECTOR_MAGIC: &[u8; 4] = b"KFXI";
const FIELDS_MAGIC: &[u8; 4] = b"KFFD";

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let r = BufReader::new(File::open(path).map_err(|e| with_path(e, path))?);
    Ok(serde_json::from_reader(r)?)
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_series_csv(path: &Path, series: &MeasurementSeries<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend(series.components.iter().cloned());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..series.len() {
        record.clear();
        record.push(series.trajectory[i].to_string());
        record.push(series.time[i].to_string());
        record.extend(series.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a series written by [`write_series_csv`]. The sampling interval is
/// the first time step found inside a trajectory unless `dt` is given.
pub fn read_series_csv(path: &Path, label: &str, dt: Option<f64>) -> Result<MeasurementSeries<f64>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path).map_err(|e| with_path(e, path))?));
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() < 3 || header[0] != "trajectory" || header[1] != "t" {
        return Err(Error::Format(format!(
            "{}: header must start with 'trajectory,t' followed by at least one component",
            path.display()
        )));
    }
    let mut series = MeasurementSeries::new(label, header[2..].to_vec(), 0.0);
    let mut values = Vec::with_capacity(header.len() - 2);
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("{} row {}: {what}", path.display(), line + 2));
        if rec.len() != header.len() {
            return Err(bad("wrong number of fields"));
        }
        let traj: usize = rec[0].trim().parse().map_err(|_| bad("trajectory is not an integer"))?;
        let t: f64 = rec[1].trim().parse().map_err(|_| bad("time is not a number"))?;
        values.clear();
        for f in rec.iter().skip(2) {
            let v: f64 = f.trim().parse().map_err(|_| bad("value is not a number"))?;
            if !v.is_finite() {
                return Err(bad("non-finite value"));
            }
            values.push(v);
        }
        series.push(traj, t, &values)?;
    }
    if series.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    series.dt = match dt {
        Some(dt) => dt,
        None => (1..series.len())
            .find(|&i| series.trajectory[i] == series.trajectory[i - 1])
            .map(|i| series.time[i] - series.time[i - 1])
            .unwrap_or(0.0),
    };
    Ok(series)
}

/// Eigenvalue table row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueRow {
    pub index: usize,
    pub mu_re: f64,
    pub mu_im: f64,
    pub lambda_re: f64,
    pub lambda_im: f64,
}

pub fn eigenvalue_rows(dec: &KoopmanDecomposition<f64>) -> Vec<EigenvalueRow> {
    dec.mu
        .iter()
        .zip(&dec.lambda)
        .enumerate()
        .map(|(index, (m, l))| EigenvalueRow { index, mu_re: m.re, mu_im: m.im, lambda_re: l.re, lambda_im: l.im })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DecompositionMeta {
    format_version: u32,
    dt: f64,
    svd_rank_used: usize,
    eigenvalues: String,
    eigenvectors: String,
    dictionary: String,
}

pub fn write_eigenvectors(path: &Path, xi: &[Vec<Complex<f64>>]) -> Result<()> {
    let len = xi.first().map_or(0, Vec::len);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EIGENVECTOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(xi.len() as u64).to_le_bytes())?;
    w.write_all(&(len as u64).to_le_bytes())?;
    for v in xi {
        if v.len() != len {
            return Err(Error::DimensionMismatch { expected: len, found: v.len() });
        }
        for z in v {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_eigenvectors(path: &Path) -> Result<Vec<Vec<Complex<f64>>>> {
    let mut bytes = Vec::new();
    File::open(path).map_err(|e| with_path(e, path))?.read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != EIGENVECTOR_MAGIC {
        return Err(bad("not an eigenvector file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if count.checked_mul(len).and_then(|n| n.checked_mul(16)) != Some(body.len()) {
        return Err(bad("size does not match header"));
    }
    let f = |i: usize| f64::from_le_bytes(body[8 * i..8 * i + 8].try_into().unwrap());
    Ok((0..count)
        .map(|k| (0..len).map(|j| Complex::new(f(2 * (k * len + j)), f(2 * (k * len + j) + 1))).collect())
        .collect())
}

/// Writes `eigenvalues.csv`, `eigenvectors.bin`, `dictionary.json` and
/// `decomposition.json` into `dir`.
pub fn write_decomposition(dir: &Path, dec: &KoopmanDecomposition<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("eigenvalues.csv"))?;
    for row in eigenvalue_rows(dec) {
        w.serialize(row)?;
    }
    w.flush()?;
    write_eigenvectors(&dir.join("eigenvectors.bin"), &dec.xi)?;
    write_json(&dir.join("dictionary.json"), &dec.dictionary)?;
    write_json(
        &dir.join("decomposition.json"),
        &DecompositionMeta {
            format_version: FORMAT_VERSION,
            dt: dec.dt,
            svd_rank_used: dec.svd_rank_used,
            eigenvalues: "eigenvalues.csv".into(),
            eigenvectors: "eigenvectors.bin".into(),
            dictionary: "dictionary.json".into(),
        },
    )
}

pub fn read_decomposition(dir: &Path) -> Result<KoopmanDecomposition<f64>> {
    let meta: DecompositionMeta = read_json(&dir.join("decomposition.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported decomposition format version {}", meta.format_version)));
    }
    let mut r = csv::Reader::from_path(dir.join(&meta.eigenvalues))?;
    let rows: Vec<EigenvalueRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let xi = read_eigenvectors(&dir.join(&meta.eigenvectors))?;
    let dictionary: AnyDictionary<f64> = read_json(&dir.join(&meta.dictionary))?;
    if rows.len() != xi.len() {
        return Err(Error::Format("eigenvalue and eigenvector counts differ".into()));
    }
    Ok(KoopmanDecomposition {
        mu: rows.iter().map(|r| Complex::new(r.mu_re, r.mu_im)).collect(),
        lambda: rows.iter().map(|r| Complex::new(r.lambda_re, r.lambda_im)).collect(),
        xi,
        dictionary,
        dt: meta.dt,
        svd_rank_used: meta.svd_rank_used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MatchedFile {
    format_version: u32,
    decaying: MatchedPair<f64>,
    oscillatory: MatchedPair<f64>,
    coordinate_scale: f64,
    trust_threshold: f64,
    fallback: FallbackPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransformsFile {
    tilde: WhitenTransform<f64>,
    hat: WhitenTransform<f64>,
}

/// Model directory layout: `matched.json`, `transforms.json`,
/// `samples.csv` (`phi1,angle,<target components>`), and the two
/// decompositions under `tilde/` and `hat/`.
pub fn write_fusion_model(dir: &Path, model: &FusionModel<f64>, target_components: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_decomposition(&dir.join("tilde"), &model.tilde)?;
    write_decomposition(&dir.join("hat"), &model.hat)?;
    write_json(
        &dir.join("matched.json"),
        &MatchedFile {
            format_version: FORMAT_VERSION,
            decaying: model.decaying,
            oscillatory: model.oscillatory,
            coordinate_scale: model.coordinate_scale,
            trust_threshold: model.trust_threshold,
            fallback: model.interpolant.fallback,
        },
    )?;
    write_json(&dir.join("transforms.json"), &TransformsFile { tilde: model.whiten_tilde.clone(), hat: model.whiten_hat.clone() })?;
    if target_components.len() != model.target_dim() {
        return Err(Error::DimensionMismatch { expected: model.target_dim(), found: target_components.len() });
    }
    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    let mut header = vec!["phi1".to_string(), "angle".to_string()];
    header.extend(target_components.iter().cloned());
    w.write_record(&header)?;
    for (c, v) in model.samples.coords.rows().zip(model.samples.values.rows()) {
        w.write_record(c.iter().chain(v).map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a model directory; returns the model and the target component
/// names.
pub fn read_fusion_model(dir: &Path) -> Result<(FusionModel<f64>, Vec<String>)> {
    for part in ["matched.json", "transforms.json", "samples.csv", "tilde", "hat"] {
        if !dir.join(part).exists() {
            return Err(Error::Format(format!("model directory {} lacks '{part}'", dir.display())));
        }
    }
    let matched: MatchedFile = read_json(&dir.join("matched.json"))?;
    if matched.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {}", matched.format_version)));
    }
    let transforms: TransformsFile = read_json(&dir.join("transforms.json"))?;
    let mut r = csv::Reader::from_path(dir.join("samples.csv"))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "phi1" || header[1] != "angle" {
        return Err(Error::Format("samples.csv must start with 'phi1,angle'".into()));
    }
    let mut coords = PointSet::new(2);
    let mut values = PointSet::new(header.len() - 2);
    for rec in r.records() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("samples.csv holds a non-numeric field".into()))?;
        if row.len() != header.len() {
            return Err(Error::Format("samples.csv row has the wrong number of fields".into()));
        }
        coords.push(&row[..2])?;
        values.push(&row[2..])?;
    }
    let model = FusionModel::assemble(
        read_decomposition(&dir.join("tilde"))?,
        read_decomposition(&dir.join("hat"))?,
        transforms.tilde,
        transforms.hat,
        matched.decaying,
        matched.oscillatory,
        IntrinsicSamples { coords, values },
        matched.coordinate_scale,
        matched.trust_threshold,
        matched.fallback,
    )?;
    Ok((model, header[2..].to_vec()))
}

pub fn write_fields(path: &Path, trajectories: &[Trajectory<f64>]) -> Result<()> {
    let n = trajectories.first().and_then(|t| t.states.first()).map_or(0, |s| s.v.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELDS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(trajectories.len() as u64).to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    for tr in trajectories {
        w.write_all(&(tr.index as u64).to_le_bytes())?;
        w.write_all(&(tr.states.len() as u64).to_le_bytes())?;
        for s in &tr.states {
            s.validate(n)?;
            for x in std::iter::once(&s.t).chain(&s.v).chain(&s.w) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(k)?)?;
        self.pos += k;
        Some(s)
    }

    fn u64(&mut self) -> Option<usize> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?) as usize)
    }
}

pub fn read_fields(path: &Path) -> Result<Vec<Trajectory<f64>>> {
    let mut bytes = Vec::new();
    File::open(path).map_err(|e| with_path(e, path))?.read_to_end(&mut bytes)?;
    let bad = || Error::Format(format!("{}: truncated or malformed field file", path.display()));
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4) != Some(FIELDS_MAGIC.as_slice()) {
        return Err(Error::Format(format!("{}: not a field file", path.display())));
    }
    let version = u32::from_le_bytes(c.take(4).ok_or_else(bad)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported format version {version}", path.display())));
    }
    let count = c.u64().ok_or_else(bad)?;
    let n = c.u64().ok_or_else(bad)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let index = c.u64().ok_or_else(bad)?;
        let states = c.u64().ok_or_else(bad)?;
        let mut tr = Trajectory { index, states: Vec::new() };
        for _ in 0..states {
            let raw = c.take(8 * (2 * n + 1)).ok_or_else(bad)?;
            let f = |i: usize| f64::from_le_bytes(raw[8 * i..8 * i + 8].try_into().unwrap());
            tr.states.push(FieldState { t: f(0), v: (1..=n).map(f).collect(), w: (n + 1..=2 * n).map(f).collect() });
        }
        out.push(tr);
    }
    if c.pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}
