//! Fixed-decimal formatting, aligned text tables and CSV output.
//!
//! Parameters print in thousands and operations in billions, both with two
//! decimals; PSNR uses two decimals and SSIM four.

use std::path::PathBuf;

use crate::{CliError, Result};

pub fn fmt_k(count: u64) -> String {
    format!("{:.2}", count as f64 / 1e3)
}

pub fn fmt_g(ops: u64) -> String {
    format!("{:.2}", ops as f64 / 1e9)
}

pub fn fmt_pct(p: f64) -> String {
    format!("{p:.2}")
}

pub fn fmt_psnr(db: f64) -> String {
    format!("{db:.2}")
}

pub fn fmt_ssim(s: f64) -> String {
    format!("{s:.4}")
}

/// Rows of preformatted cells with a header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let err = |source| CliError::Csv { path: PathBuf::from("<report>"), source };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(err)?;
        for row in &self.rows {
            w.write_record(row).map_err(err)?;
        }
        w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
    }
}
