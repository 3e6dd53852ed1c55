//! Phenotype table parsing.
//!
//! UTF-8 CSV with header `subject_id,site,diagnosis,series_path`, one row per
//! subject. Relative `series_path` entries are interpreted relative to the
//! table's parent directory by the callers that load series.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::types::SubjectRecord;

#[derive(Debug, Deserialize)]
struct RawRow {
    subject_id: String,
    site: i64,
    diagnosis: i64,
    series_path: String,
}

/// Parses a phenotype CSV into subject records.
///
/// `declared_sites`, when given, bounds the valid site indices; a row with
/// `site >= declared_sites` is rejected. Duplicate subject ids and diagnoses
/// outside {0, 1} are rejected in any case.
pub fn load_phenotype_table(
    path: impl AsRef<Path>,
    declared_sites: Option<usize>,
) -> Result<Vec<SubjectRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::format(path, e.to_string()),
    })?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<RawRow>().enumerate() {
        let line = i + 2; // 1-based, after header
        let row = row.map_err(|e| Error::format(path, format!("row {line}: {e}")))?;
        if !seen.insert(row.subject_id.clone()) {
            return Err(Error::Domain(format!(
                "duplicate subject_id \"{}\" at row {line}",
                row.subject_id
            )));
        }
        if row.site < 0 {
            return Err(Error::Domain(format!(
                "row {line}: site index must be >= 0, got {}",
                row.site
            )));
        }
        if let Some(n) = declared_sites {
            if row.site as usize >= n {
                return Err(Error::Domain(format!(
                    "row {line}: unknown site index {} (declared sites: 0..{})",
                    row.site,
                    n - 1
                )));
            }
        }
        if !(row.diagnosis == 0 || row.diagnosis == 1) {
            return Err(Error::Domain(format!(
                "row {line}: diagnosis must be 0 or 1, got {}",
                row.diagnosis
            )));
        }
        records.push(SubjectRecord {
            subject_id: row.subject_id,
            site: row.site as usize,
            diagnosis: row.diagnosis as u8,
            series_path: row.series_path.into(),
        });
    }
    Ok(records)
}

/// Writes records back out in the phenotype CSV schema.
pub fn save_phenotype_table(records: &[SubjectRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    w.write_record(["subject_id", "site", "diagnosis", "series_path"])
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for r in records {
        w.write_record([
            r.subject_id.as_str(),
            &r.site.to_string(),
            &r.diagnosis.to_string(),
            &r.series_path.to_string_lossy(),
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
