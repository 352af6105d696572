//! Degraded datasets on disk: per-image HR, LR and bicubic PNGs listed in a
//! `manifest.csv`.

use std::path::{Path, PathBuf};

use lsk_core::imaging::{load_png, rgb_to_y, PlaneF};

use crate::{CliError, Result};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub stem: String,
    pub hr: String,
    pub lr: String,
    pub bicubic: String,
    pub width: usize,
    pub height: usize,
    pub scale: usize,
}

/// Y planes of one manifest entry on `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub hr: PlaneF,
    pub lr: PlaneF,
    pub bicubic: PlaneF,
}

pub fn file_names(stem: &str, scale: usize) -> (String, String, String) {
    (
        format!("{stem}_hr.png"),
        format!("{stem}_lr_x{scale}.png"),
        format!("{stem}_bicubic_x{scale}.png"),
    )
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(CliError::io(dir))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(CliError::io(dir))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Luminance of a PNG; gray images pass through unchanged.
pub fn load_y(path: &Path) -> Result<PlaneF> {
    Ok(rgb_to_y(&load_png(path)?))
}

pub fn manifest_bytes(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |source| CliError::Csv { path: PathBuf::from(MANIFEST), source };
    w.write_record(["stem", "hr", "lr", "bicubic", "width", "height", "scale"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.stem.as_str(),
            &r.hr,
            &r.lr,
            &r.bicubic,
            &r.width.to_string(),
            &r.height.to_string(),
            &r.scale.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{} has no {MANIFEST}; run `lsk degrade` on it first",
            dir.display()
        )));
    }
    let csv_err = |source| CliError::Csv { path: path.clone(), source };
    let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|_| CliError::Usage(format!("{}: bad number `{}`", path.display(), field(i))))
        };
        rows.push(ManifestRow {
            stem: field(0),
            hr: field(1),
            lr: field(2),
            bicubic: field(3),
            width: num(4)?,
            height: num(5)?,
            scale: num(6)?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} lists no images", path.display())));
    }
    Ok(rows)
}

/// Loads a degraded dataset and its common scale factor.
pub fn load_dataset(dir: &Path) -> Result<(usize, Vec<Sample>)> {
    let rows = read_manifest(dir)?;
    let scale = rows[0].scale;
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        if row.scale != scale {
            return Err(CliError::Usage(format!("{}: mixed scales {scale} and {}", dir.display(), row.scale)));
        }
        let hr = load_y(&dir.join(&row.hr))?;
        if (hr.width, hr.height) != (row.width, row.height) {
            return Err(CliError::Usage(format!("{}: size differs from the manifest", row.hr)));
        }
        samples.push(Sample {
            hr,
            lr: load_y(&dir.join(&row.lr))?,
            bicubic: load_y(&dir.join(&row.bicubic))?,
            stem: row.stem,
        });
    }
    Ok((scale, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (hr, lr, bicubic) = file_names("a,b", 3);
        let rows = vec![ManifestRow { stem: "a,b".into(), hr, lr, bicubic, width: 9, height: 6, scale: 3 }];
        std::fs::write(dir.path().join(MANIFEST), manifest_bytes(&rows).unwrap()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), rows);
    }

    #[test]
    fn missing_manifest_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(CliError::Usage(_))));
        assert!(list_pngs(dir.path()).unwrap().is_empty());
        assert!(matches!(list_pngs(&dir.path().join("nope")), Err(CliError::Io { .. })));
    }
}
