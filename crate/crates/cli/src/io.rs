//! File formats: JSONL datasets, commented CSV tables and pretty JSON documents.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use fscl_core::synth::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub origin_id: usize,
    pub features: Vec<f64>,
    pub y: usize,
    pub s: Option<usize>,
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes through a sibling temp file and renames, so readers never see a partial file.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents).map_err(|e| CliError::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = Vec::new();
    for i in 0..data.len() {
        let record = Record {
            origin_id: i,
            features: data.features[i].clone(),
            y: data.targets[i],
            s: data.sensitive[i],
        };
        serde_json::to_writer(&mut out, &record).expect("record serializes");
        out.push(b'\n');
    }
    write_file(path, &out)
}

/// Records come back ordered by `origin_id`, which must run `0..n` without gaps.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut records = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| {
            CliError::Data(format!("{}:{}: {e}", path.display(), line_no + 1))
        })?;
        records.push(record);
    }
    records.sort_by_key(|r| r.origin_id);
    if let Some(gap) = records.iter().enumerate().find(|(i, r)| r.origin_id != *i) {
        return Err(CliError::Data(format!(
            "{}: origin ids must run 0..n, found {} at position {}",
            path.display(),
            gap.1.origin_id,
            gap.0
        )));
    }
    let dim = records.first().map_or(0, |r| r.features.len());
    if let Some(r) = records.iter().find(|r| r.features.len() != dim) {
        return Err(CliError::Data(format!(
            "{}: record {} has {} features, expected {dim}",
            path.display(),
            r.origin_id,
            r.features.len()
        )));
    }
    Ok(Dataset {
        features: records.iter().map(|r| r.features.clone()).collect(),
        targets: records.iter().map(|r| r.y).collect(),
        sensitive: records.iter().map(|r| r.s).collect(),
    })
}

/// CSV table whose first lines are `# key: value` comments: schema first, then config echo.
pub struct CommentedCsv {
    header: Vec<(String, String)>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    footer: Vec<(String, String)>,
}

impl CommentedCsv {
    pub fn new(schema: &str, columns: Vec<String>) -> Self {
        Self {
            header: vec![("schema".into(), schema.into())],
            columns,
            rows: Vec::new(),
            footer: Vec::new(),
        }
    }

    pub fn comment(mut self, key: &str, value: impl Into<String>) -> Self {
        self.header.push((key.into(), value.into()));
        self
    }

    pub fn footer(&mut self, key: &str, value: impl Into<String>) {
        self.footer.push((key.into(), value.into()));
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.header {
            writeln!(out, "# {k}: {v}").expect("write to vec");
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.columns).expect("write to vec");
            for row in &self.rows {
                w.write_record(row).expect("write to vec");
            }
            w.flush().expect("write to vec");
        }
        for (k, v) in &self.footer {
            writeln!(out, "# {k}: {v}").expect("write to vec");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}
