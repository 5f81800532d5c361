//! Region time-series ingestion.
//!
//! A scan file is UTF-8 comma-separated text: one header row of region
//! names, then one row per time point with one numeric cell per region.
//! A dataset directory holds such files plus `scans.csv` with the columns
//! `subject_id,scan_id,label,file`, where `label` is a class name and `file`
//! is relative to the directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const DATASET_MANIFEST: &str = "scans.csv";

/// One scan's region-averaged signals, `M` time points × `N` regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    pub scan_id: String,
    pub label: usize,
    /// Row-major `M×N`.
    pub values: Vec<f64>,
    pub region_names: Vec<String>,
    time_points: usize,
}

/// Identity of a scan as listed in a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanMeta {
    pub subject_id: String,
    pub scan_id: String,
    pub label: usize,
}

impl RoiTimeSeries {
    pub fn new(
        subject_id: impl Into<String>,
        scan_id: impl Into<String>,
        label: usize,
        values: Vec<f64>,
        time_points: usize,
        regions: usize,
    ) -> Result<Self> {
        if regions < 2 {
            return Err(Error::Data(format!("need at least 2 regions, got {regions}")));
        }
        if time_points == 0 || values.len() != time_points * regions {
            return Err(Error::dim(format!(
                "{} values do not form {time_points}×{regions}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at time point {}, region {}",
                i / regions,
                i % regions
            )));
        }
        Ok(RoiTimeSeries {
            subject_id: subject_id.into(),
            scan_id: scan_id.into(),
            label,
            values,
            region_names: (0..regions).map(|r| format!("r{r}")).collect(),
            time_points,
        })
    }

    pub fn with_region_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.regions() {
            return Err(Error::dim("region name count does not match region count"));
        }
        self.region_names = names;
        Ok(self)
    }

    pub fn time_points(&self) -> usize {
        self.time_points
    }

    pub fn regions(&self) -> usize {
        self.values.len() / self.time_points
    }

    pub fn get(&self, t: usize, region: usize) -> f64 {
        self.values[t * self.regions() + region]
    }

    pub fn meta(&self) -> ScanMeta {
        ScanMeta {
            subject_id: self.subject_id.clone(),
            scan_id: self.scan_id.clone(),
            label: self.label,
        }
    }
}

/// Ordered class names; a class's index is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::config("need at least two classes"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::config(format!("duplicate class name {n}")));
            }
        }
        Ok(LabelMap { names })
    }

    /// `class0`, `class1`, … as written by the synthetic generator.
    pub fn numbered(classes: usize) -> Self {
        LabelMap {
            names: (0..classes).map(|c| format!("class{c}")).collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn ingest_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

fn split_row(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Parses a scan file. Line and column numbers in errors are 1-based.
pub fn load_timeseries(path: &Path, meta: &ScanMeta) -> Result<RoiTimeSeries> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| ingest_err(path, 1, 1, "empty file"))?;
    let names: Vec<String> = split_row(header).into_iter().map(String::from).collect();
    let n = names.len();
    if n < 2 {
        return Err(ingest_err(path, 1, 1, format!("need at least 2 regions, header has {n}")));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let cells = split_row(line);
        if cells.len() != n {
            return Err(ingest_err(
                path,
                idx + 1,
                cells.len().min(n) + 1,
                format!("row has {} cells, header has {n}", cells.len()),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| ingest_err(path, idx + 1, c + 1, format!("cell {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(ingest_err(path, idx + 1, c + 1, format!("cell {cell:?} is not finite")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(ingest_err(path, 2, 1, "no time points after header"));
    }
    RoiTimeSeries::new(&meta.subject_id, &meta.scan_id, meta.label, values, rows, n)?.with_region_names(names)
}

pub fn write_timeseries(path: &Path, ts: &RoiTimeSeries) -> Result<()> {
    let n = ts.regions();
    let mut out = ts.region_names.join(",");
    out.push('\n');
    for row in ts.values.chunks(n) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            // `{}` prints the shortest representation that reparses exactly.
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn scan_file_name(ts: &RoiTimeSeries) -> String {
    let safe = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect()
    };
    format!("{}__{}.csv", safe(&ts.subject_id), safe(&ts.scan_id))
}

/// Writes every scan plus the `scans.csv` manifest into `dir`.
pub fn write_dataset(dir: &Path, scans: &[RoiTimeSeries], labels: &LabelMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("subject_id,scan_id,label,file\n");
    for ts in scans {
        let file = scan_file_name(ts);
        write_timeseries(&dir.join(&file), ts)?;
        writeln!(manifest, "{},{},{},{}", ts.subject_id, ts.scan_id, labels.name(ts.label), file).unwrap();
    }
    fs::write(dir.join(DATASET_MANIFEST), manifest)?;
    Ok(())
}

/// Loads every scan listed in `dir/scans.csv`, in manifest order.
pub fn load_dataset(dir: &Path, labels: &LabelMap) -> Result<Vec<RoiTimeSeries>> {
    let manifest_path: PathBuf = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells = split_row(line);
        if cells.len() != 4 {
            return Err(ingest_err(&manifest_path, idx + 1, 1, "expected subject_id,scan_id,label,file"));
        }
        let label = labels
            .index_of(cells[2])
            .ok_or_else(|| ingest_err(&manifest_path, idx + 1, 3, format!("unknown class {:?}", cells[2])))?;
        let meta = ScanMeta {
            subject_id: cells[0].to_string(),
            scan_id: cells[1].to_string(),
            label,
        };
        out.push(load_timeseries(&dir.join(cells[3]), &meta)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no scans", manifest_path.display())));
    }
    Ok(out)
}

/// Class names appearing in a dataset manifest, sorted.
pub fn manifest_class_names(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(DATASET_MANIFEST))?;
    let mut names: Vec<String> = text
        .lines()
        .skip(1)
        .filter_map(|l| split_row(l).get(2).map(|s| s.to_string()))
        .filter(|s| !s.is_empty())
        .collect();
    names.sort();
    names.dedup();
    Ok(names)
}
