//! CSV writers. Column sets are fixed per file kind; see docs/file-formats.md.

use std::io::Write;
use std::path::Path;

use solman::lsmo::TrainReport;

use crate::error::{CliError, CliResult};

/// Buffered CSV document: optional `#` comment lines, a header, then rows.
pub struct Table {
    comments: Vec<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { comments: Vec::new(), header: header.iter().map(|s| s.as_ref().to_owned()).collect(), rows: Vec::new() }
    }

    pub fn comment(&mut self, line: impl Into<String>) {
        self.comments.push(line.into());
    }

    pub fn row(&mut self, fields: Vec<String>) {
        debug_assert_eq!(fields.len(), self.header.len());
        self.rows.push(fields);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::new();
        for c in &self.comments {
            writeln!(out, "# {c}").expect("writing to memory");
        }
        let mut w = csv::Writer::from_writer(out);
        let fail = |e: csv::Error| CliError::Io(format!("csv: {e}"));
        w.write_record(&self.header).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r).map_err(fail)?;
        }
        w.into_inner().map_err(|e| CliError::Io(format!("csv: {e}")))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// `epoch,loss,capacity,kl_0,...` with one row per epoch.
pub fn curves_table(report: &TrainReport) -> Table {
    let channels = report.kl.first().map_or(0, Vec::len);
    let mut header = vec!["epoch".to_string(), "loss".into(), "capacity".into()];
    header.extend((0..channels).map(|c| format!("kl_{c}")));
    let mut t = Table::new(&header);
    for (e, (loss, kl)) in report.loss.iter().zip(&report.kl).enumerate() {
        let mut row = vec![e.to_string(), num(*loss), num(report.capacity[e])];
        row.extend(kl.iter().map(|k| num(*k)));
        t.row(row);
    }
    t
}

/// Reads back a curves CSV: (loss, summed KL, capacity) per epoch.
pub fn read_curves(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.get(0) != Some("epoch") || header.get(1) != Some("loss") || header.get(2) != Some("capacity") {
        return Err(bad("not a curves file (expected epoch,loss,capacity,kl_*)".into()));
    }
    let (mut loss, mut kl, mut cap) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |j: usize| -> CliResult<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("row {}: column {} is not a number", i + 1, header.get(j).unwrap_or("?"))))
        };
        loss.push(field(1)?);
        cap.push(field(2)?);
        let mut k = 0.0;
        for j in 3..header.len() {
            k += field(j)?;
        }
        kl.push(k);
    }
    Ok((loss, kl, cap))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
