//! File formats: JSON Lines for events, CSV for matrices and series, JSON
//! for reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use visitlift::visit_engine::{FlightWindow, Impression, VisitSeries};

use crate::error::{CliError, CliResult};

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::schema(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> CliResult<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CliError::schema(path, 0, e))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| CliError::schema(path, e.line(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::schema(path, 0, e))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Impressions from JSON Lines, or CSV when the extension is `.csv`.
pub fn read_impressions(path: &Path) -> CliResult<Vec<Impression>> {
    if path.extension().is_some_and(|e| e == "csv") {
        let mut rdr = csv::Reader::from_reader(open(path)?);
        rdr.deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| CliError::schema(path, i + 2, e)))
            .collect()
    } else {
        read_jsonl(path)
    }
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        CliError::schema(path, line, e)
    }
}

/// Device rows: `device_id`, feature columns, `exposed` (0/1), and an
/// optional trailing `fts` (assigned first-seen day).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub exposed: Vec<bool>,
    pub fts: Option<Vec<i64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn read_features(path: &Path) -> CliResult<FeatureTable> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let header: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    let has_fts = header.last().is_some_and(|h| h == "fts");
    let exposed_col = header.len().saturating_sub(if has_fts { 2 } else { 1 });
    if header.first().map(String::as_str) != Some("device_id") || header.get(exposed_col).map(String::as_str) != Some("exposed") {
        return Err(CliError::schema(path, 1, "header must be device_id,<features>,exposed[,fts]"));
    }
    let mut t = FeatureTable {
        names: header[1..exposed_col].to_vec(),
        fts: has_fts.then(Vec::new),
        ..FeatureTable::default()
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let num = |s: &str| -> CliResult<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::schema(path, line, format!("`{s}` is not a finite number")))
        };
        t.ids.push(rec[0].to_string());
        t.rows.push((1..exposed_col).map(|c| num(&rec[c])).collect::<CliResult<_>>()?);
        t.exposed.push(match &rec[exposed_col] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(CliError::schema(path, line, format!("exposed flag `{other}`"))),
        });
        if let Some(fts) = t.fts.as_mut() {
            let s = &rec[exposed_col + 1];
            fts.push(s.parse().map_err(|_| CliError::schema(path, line, format!("fts `{s}`")))?);
        }
    }
    Ok(t)
}

pub fn write_features(path: &Path, t: &FeatureTable) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["device_id".to_string()];
    header.extend(t.names.iter().cloned());
    header.push("exposed".to_string());
    if t.fts.is_some() {
        header.push("fts".to_string());
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for i in 0..t.len() {
        let mut rec = vec![t.ids[i].clone()];
        rec.extend(t.rows[i].iter().map(|x| x.to_string()));
        rec.push(if t.exposed[i] { "1" } else { "0" }.to_string());
        if let Some(fts) = &t.fts {
            rec.push(fts[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<i64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `series.csv` (device_id, day_index, weight; non-zero days only)
/// and `activity.csv` (device_id, first_seen, first_impression,
/// last_impression).
pub fn write_series(series_path: &Path, activity_path: &Path, series: &[VisitSeries]) -> CliResult<()> {
    let mut w = csv_writer(series_path)?;
    w.write_record(["device_id", "day_index", "weight"]).map_err(csv_err(series_path))?;
    for s in series {
        let m = s.flight.margin as i64;
        for (o, v) in s.counts().iter().enumerate() {
            if *v != 0.0 {
                w.write_record([s.device_id.clone(), (o as i64 - m).to_string(), v.to_string()])
                    .map_err(csv_err(series_path))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(series_path, e))?;
    let mut w = csv_writer(activity_path)?;
    w.write_record(["device_id", "first_seen", "first_impression", "last_impression"])
        .map_err(csv_err(activity_path))?;
    for s in series {
        w.write_record([
            s.device_id.clone(),
            opt(s.first_seen),
            opt(s.first_impression),
            opt(s.last_impression),
        ])
        .map_err(csv_err(activity_path))?;
    }
    w.flush().map_err(|e| CliError::io(activity_path, e))
}

/// Inverse of [`write_series`]; devices come back sorted by id.
pub fn read_series(series_path: &Path, activity_path: &Path, flight: FlightWindow) -> CliResult<Vec<VisitSeries>> {
    let mut activity: BTreeMap<String, [Option<i64>; 3]> = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(open(activity_path)?);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(activity_path))?;
        if rec.len() != 4 {
            return Err(CliError::schema(activity_path, i + 2, "expected 4 columns"));
        }
        let mut vals = [None; 3];
        for (c, v) in vals.iter_mut().enumerate() {
            let s = &rec[c + 1];
            if !s.is_empty() {
                *v = Some(s.parse().map_err(|_| CliError::schema(activity_path, i + 2, format!("day `{s}`")))?);
            }
        }
        if activity.insert(rec[0].to_string(), vals).is_some() {
            return Err(CliError::schema(activity_path, i + 2, format!("duplicate device `{}`", &rec[0])));
        }
    }
    let mut counts: BTreeMap<String, Vec<f64>> = activity.keys().map(|k| (k.clone(), vec![0.0; flight.series_len()])).collect();
    let mut rdr = csv::Reader::from_reader(open(series_path)?);
    let m = flight.margin as i64;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(series_path))?;
        let line = i + 2;
        let row = counts
            .get_mut(&rec[0])
            .ok_or_else(|| CliError::schema(series_path, line, format!("device `{}` missing from activity", &rec[0])))?;
        let day: i64 = rec[1].parse().map_err(|_| CliError::schema(series_path, line, "day_index"))?;
        let w: f64 = rec[2].parse().map_err(|_| CliError::schema(series_path, line, "weight"))?;
        if flight.in_series(day) {
            row[(day + m) as usize] += w;
        }
    }
    counts
        .into_iter()
        .map(|(id, values)| {
            let [fs, first, last] = activity[&id];
            Ok(VisitSeries::from_counts(id, flight, values)?.with_activity(fs, first, last))
        })
        .collect()
}

/// Generic CSV writer for serializable rows.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
