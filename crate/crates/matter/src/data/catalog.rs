//! Catalog manifests: which raster belongs to which region and timestamp,
//! with per-image cloud fraction and valid-coverage fraction.
//!
//! Manifest format: UTF-8 text, one entry per line,
//! `region_id<TAB>timestamp<TAB>cloud<TAB>coverage<TAB>path`.
//! Blank lines and lines starting with `#` are skipped. Relative paths are
//! resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Defaults for [`filter_catalog`]: drop images with more than 20% cloud or
/// less than 80% coverage, keep at most 100 per region.
pub const MAX_CLOUD: f32 = 0.20;
pub const MIN_COVERAGE: f32 = 0.80;
pub const MAX_PER_REGION: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogEntry {
    pub region_id: String,
    /// Epoch seconds; only ordering within a region matters.
    pub timestamp: i64,
    /// Cloud fraction in [0, 1].
    pub cloud: f32,
    /// Valid-coverage fraction in [0, 1].
    pub coverage: f32,
    pub path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<CatalogEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::data(format!(
                "{}:{}: expected 5 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::data(format!("{}:{}: bad {what}: {line}", path.display(), lineno + 1))
        };
        let region_id = fields[0].to_string();
        if region_id.is_empty() {
            return Err(bad("region id"));
        }
        let timestamp: i64 = fields[1].parse().map_err(|_| bad("timestamp"))?;
        let cloud: f32 = fields[2].parse().map_err(|_| bad("cloud fraction"))?;
        let coverage: f32 = fields[3].parse().map_err(|_| bad("coverage fraction"))?;
        if !(0.0..=1.0).contains(&cloud) || !cloud.is_finite() {
            return Err(bad("cloud fraction (must be in [0,1])"));
        }
        if !(0.0..=1.0).contains(&coverage) || !coverage.is_finite() {
            return Err(bad("coverage fraction (must be in [0,1])"));
        }
        let raw = Path::new(fields[4]);
        let resolved = if raw.is_absolute() { raw.to_path_buf() } else { base.join(raw) };
        entries.push(CatalogEntry { region_id, timestamp, cloud, coverage, path: resolved });
    }
    Ok(entries)
}

/// Paths are written as given in the entries.
pub fn write_manifest(path: &Path, entries: &[CatalogEntry]) -> Result<()> {
    let mut out = String::from("# region_id\ttimestamp\tcloud\tcoverage\tpath\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.region_id,
            e.timestamp,
            e.cloud,
            e.coverage,
            e.path.display()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Quality filter and per-region cap. Keeps entries with cloud <= max_cloud
/// and coverage >= min_coverage, then the earliest max_per_region per region.
/// Output is sorted by (region, timestamp, path) and the filter is
/// idempotent.
pub fn filter_catalog(
    entries: &[CatalogEntry],
    max_cloud: f32,
    min_coverage: f32,
    max_per_region: usize,
) -> Vec<CatalogEntry> {
    let mut kept: Vec<CatalogEntry> = entries
        .iter()
        .filter(|e| e.cloud <= max_cloud && e.coverage >= min_coverage)
        .cloned()
        .collect();
    kept.sort_by(|a, b| {
        (&a.region_id, a.timestamp, &a.path).cmp(&(&b.region_id, b.timestamp, &b.path))
    });
    let mut out: Vec<CatalogEntry> = Vec::with_capacity(kept.len());
    let mut run = 0usize;
    for e in kept {
        if out.last().map(|p: &CatalogEntry| p.region_id == e.region_id).unwrap_or(false) {
            run += 1;
        } else {
            run = 0;
        }
        if run < max_per_region {
            out.push(e);
        }
    }
    out
}
