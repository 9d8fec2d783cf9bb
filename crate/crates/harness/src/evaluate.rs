//! BD-rate tables from campaign reports and external reference curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use asc_core::metrics::{bd_psnr, bd_rate, RdmRecord, REPORT_HEADER};
use asc_core::{AscError, Result};

use crate::config::Scheme;

fn csv_err(path: &Path, e: csv::Error) -> AscError {
    AscError::Data(format!("{}: {e}", path.display()))
}

/// Scheme reports found in `dir`, keyed by scheme name.
pub fn read_reports(dir: &Path) -> Result<BTreeMap<String, Vec<RdmRecord>>> {
    let mut out = BTreeMap::new();
    for path in files_matching(dir, "rd_", ".csv")? {
        let name = stem_between(&path, "rd_", ".csv");
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let header = r.headers().map_err(|e| csv_err(&path, e))?.clone();
        if header.iter().ne(REPORT_HEADER) {
            return Err(AscError::Data(format!("{} has an unexpected header", path.display())));
        }
        let recs = r
            .deserialize()
            .collect::<std::result::Result<Vec<RdmRecord>, _>>()
            .map_err(|e| csv_err(&path, e))?;
        out.insert(name, recs);
    }
    Ok(out)
}

pub(crate) fn files_matching(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| AscError::Config(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(suffix))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub(crate) fn stem_between(path: &Path, prefix: &str, suffix: &str) -> String {
    let n = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    n[prefix.len()..n.len() - suffix.len()].to_string()
}

#[derive(Debug, Deserialize)]
struct ExternalRow {
    #[serde(rename = "R")]
    r: f64,
    psnr: f64,
    #[serde(default)]
    snr_db: Option<f64>,
}

/// A reference curve supplied from outside the campaign.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalCurve {
    pub name: String,
    /// `(snr_db, R, psnr)`; a missing SNR applies the point at every SNR.
    pub points: Vec<(Option<f64>, f64, f64)>,
}

impl ExternalCurve {
    pub fn at(&self, snr_db: f64) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.0.is_none_or(|s| s == snr_db))
            .map(|p| (p.1, p.2))
            .collect()
    }
}

/// Reads a CSV with `R` and `psnr` columns (and optionally `snr_db`). Rates
/// must be positive and, per SNR, strictly increasing in file order.
pub fn ingest_external_curve(path: &Path) -> Result<ExternalCurve> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ExternalRow>, _>>()
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        return Err(AscError::Data(format!("{} holds no points", path.display())));
    }
    let mut last: BTreeMap<Option<u64>, f64> = BTreeMap::new();
    for row in &rows {
        if !(row.r > 0.0) || !row.psnr.is_finite() {
            return Err(AscError::Data(format!("{}: invalid point ({}, {})", path.display(), row.r, row.psnr)));
        }
        let key = row.snr_db.map(f64::to_bits);
        if last.get(&key).is_some_and(|prev| row.r <= *prev) {
            return Err(AscError::Data(format!("{}: rates are not increasing", path.display())));
        }
        last.insert(key, row.r);
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("external");
    Ok(ExternalCurve {
        name: name.strip_prefix("external_").unwrap_or(name).to_string(),
        points: rows.into_iter().map(|r| (r.snr_db, r.r, r.psnr)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdRow {
    pub reference: String,
    pub scheme: String,
    pub scope: String,
    pub snr_db: f64,
    pub bd_rate_pct: f64,
    pub bd_psnr_db: f64,
    pub status: String,
}

fn group(recs: &[RdmRecord]) -> BTreeMap<(String, u64), Vec<(f64, f64)>> {
    let mut g: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in recs {
        let e = g.entry((r.scope.clone(), r.snr_db.to_bits())).or_default();
        if r.cbr_total.is_finite() && r.psnr.is_finite() {
            e.push((r.cbr_total, r.psnr));
        }
    }
    g
}

fn compare(reference: &str, scheme: &str, scope: &str, snr_db: f64, a: &[(f64, f64)], b: &[(f64, f64)]) -> BdRow {
    let (rate, psnr) = (bd_rate(a, b), bd_psnr(a, b));
    let status = match (&rate, &psnr) {
        (Ok(_), Ok(_)) => "ok".to_string(),
        (Err(e), _) | (_, Err(e)) => e.to_string(),
    };
    BdRow {
        reference: reference.into(),
        scheme: scheme.into(),
        scope: scope.into(),
        snr_db,
        bd_rate_pct: rate.unwrap_or(f64::NAN),
        bd_psnr_db: psnr.unwrap_or(f64::NAN),
        status,
    }
}

/// BD-rate (on `R + M`) and BD-PSNR of every scheme and external curve
/// against the baseline, per scope and SNR. Writes `bd_rate.csv`.
pub fn evaluate_reports(dir: &Path) -> Result<Vec<BdRow>> {
    let reports = read_reports(dir)?;
    let base_name = Scheme::Baseline.name();
    let Some(base) = reports.get(base_name) else {
        return Err(AscError::Data(format!("no rd_{base_name}.csv in {}", dir.display())));
    };
    let externals = files_matching(dir, "external_", ".csv")?
        .iter()
        .map(|p| ingest_external_curve(p))
        .collect::<Result<Vec<_>>>()?;
    let base = group(base);
    let mut rows = Vec::new();
    for ((scope, snr_bits), a) in &base {
        let snr_db = f64::from_bits(*snr_bits);
        for (name, recs) in reports.iter().filter(|(n, _)| n.as_str() != base_name) {
            if let Some(b) = group(recs).get(&(scope.clone(), *snr_bits)) {
                rows.push(compare(base_name, name, scope, snr_db, a, b));
            }
        }
        for ext in &externals {
            let b = ext.at(snr_db);
            rows.push(compare(base_name, &format!("external:{}", ext.name), scope, snr_db, a, &b));
        }
    }
    let path = dir.join("bd_rate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn external_curves_must_increase_in_rate() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("external_bpg.csv");
        std::fs::write(&ok, "R,psnr\n0.01,20\n0.02,22\n0.04,24\n0.08,25\n").unwrap();
        let c = ingest_external_curve(&ok).unwrap();
        assert_eq!(c.name, "bpg");
        assert_eq!(c.at(10.0).len(), 4);
        let bad = dir.path().join("b.csv");
        std::fs::write(&bad, "R,psnr\n0.02,20\n0.01,22\n").unwrap();
        assert!(matches!(ingest_external_curve(&bad), Err(AscError::Data(_))));
        std::fs::write(&bad, "rate,psnr\n0.02,20\n").unwrap();
        assert!(matches!(ingest_external_curve(&bad), Err(AscError::Data(_))));
    }
}
