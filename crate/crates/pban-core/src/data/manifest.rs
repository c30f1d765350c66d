//! Dataset manifests: CSV with header `sr_path,hr_path,mos`, one image
//! pair per row. Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{PbanError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub sr_path: PathBuf,
    pub hr_path: PathBuf,
    pub mos: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

pub const MANIFEST_HEADER: &str = "sr_path,hr_path,mos";

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| PbanError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Parses manifest text; error locations cite 1-based data row numbers.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| PbanError::Format("manifest is empty".into()))?
        .trim_end_matches('\r');
    if header != MANIFEST_HEADER {
        return Err(PbanError::Format(format!(
            "manifest line 1: expected header \"{MANIFEST_HEADER}\", got \"{header}\""
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(PbanError::Parse {
                location: format!("manifest row {row}"),
                msg: format!("expected 3 comma-separated fields, got {}", fields.len()),
            });
        }
        let resolve = |field: &str, what: &str| -> Result<PathBuf> {
            if field.is_empty() {
                return Err(PbanError::Parse {
                    location: format!("manifest row {row}"),
                    msg: format!("{what} is empty"),
                });
            }
            let p = Path::new(field);
            Ok(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
        };
        let mos: f64 = fields[2].trim().parse().map_err(|_| PbanError::Parse {
            location: format!("manifest row {row}"),
            msg: format!("mos \"{}\" is not a number", fields[2]),
        })?;
        if !mos.is_finite() {
            return Err(PbanError::Parse {
                location: format!("manifest row {row}"),
                msg: format!("mos {mos} is not finite"),
            });
        }
        records.push(Record {
            sr_path: resolve(fields[0], "sr_path")?,
            hr_path: resolve(fields[1], "hr_path")?,
            mos,
        });
    }
    Ok(Manifest { records })
}
