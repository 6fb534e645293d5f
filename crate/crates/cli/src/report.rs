//! Reports: an aligned text table at the given path plus line-delimited JSON
//! records next to it (same stem, `.jsonl`).

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::CliResult;
use crate::io;

pub struct Table {
    pub title: String,
    pub notes: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out.push_str(&line(&self.columns));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn records_path(report: &Path) -> PathBuf {
    report.with_extension("jsonl")
}

pub fn write(report: &Path, table: &Table, records: &[Value]) -> CliResult<()> {
    io::atomic_write(report, table.render().as_bytes())?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("json value serializes"));
        text.push('\n');
    }
    io::atomic_write(&records_path(report), text.as_bytes())
}

pub fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let t = Table {
            title: "T".into(),
            notes: vec!["n".into()],
            columns: vec!["a".into(), "bbb".into()],
            rows: vec![vec!["xxxx".into(), "1".into()]],
        };
        assert_eq!(t.render(), "T\n# n\na     bbb\n----  ---\nxxxx  1\n");
    }

    #[test]
    fn writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        let t = Table { title: "T".into(), notes: vec![], columns: vec!["a".into()], rows: vec![] };
        write(&p, &t, &[serde_json::json!({"k": 1})]).unwrap();
        assert!(p.exists());
        assert_eq!(std::fs::read_to_string(records_path(&p)).unwrap(), "{\"k\":1}\n");
    }
}
