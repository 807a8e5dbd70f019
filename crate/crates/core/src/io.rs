//! Readers for microdata and collapsed histogram files.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use log::warn;

use crate::error::{BunchingError, Result};
use crate::pe_baseline::Histogram;
use crate::sample::Observation;

fn data_error<T>(msg: String) -> Result<T> {
    Err(BunchingError::Data(msg))
}

/// Reads observations from CSV with a header naming `y`, optional
/// covariates `x1, x2, ...` and an optional weight column `t`.
pub fn read_microdata<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let y_col = match headers.iter().position(|h| h == "y") {
        Some(c) => c,
        None => return data_error("missing column `y`".into()),
    };
    let t_col = headers.iter().position(|h| h == "t");
    let mut x_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()).map(|d| (d, c)))
        .collect();
    x_cols.sort_unstable();
    for (expected, &(d, _)) in (1..).zip(&x_cols) {
        if d != expected {
            return data_error(format!("covariate columns must be x1..xd without gaps, missing x{expected}"));
        }
    }

    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let cell = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| BunchingError::Data(format!("row {row}: cannot parse {name}={raw:?}")))
        };
        let y = cell(y_col, "y")?;
        if !y.is_finite() {
            return data_error(format!("row {row}: y must be finite, got {y}"));
        }
        let x = x_cols
            .iter()
            .map(|&(d, c)| cell(c, &format!("x{d}")))
            .collect::<Result<Vec<_>>>()?;
        let t = match t_col {
            Some(c) => cell(c, "t")?,
            None => 1.0,
        };
        let obs = Observation::new(y, x, t).map_err(|e| BunchingError::Data(format!("row {row}: {e}")))?;
        out.push(obs);
    }
    if out.is_empty() {
        return data_error("no observations".into());
    }
    Ok(out)
}

pub fn ingest_microdata(path: &Path) -> Result<Vec<Observation>> {
    read_microdata(File::open(path)?)
}

/// Reads `(bin_center, share)` pairs; a non-numeric first row is taken as a
/// header. Shares are renormalized to sum to one.
pub fn read_histogram<R: Read>(reader: R, window: (f64, f64), n_obs: Option<usize>) -> Result<Histogram> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut centers = Vec::new();
    let mut shares = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return data_error(format!("line {}: expected two columns", i + 1));
        }
        let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
        match parsed {
            (Ok(c), Ok(s)) => {
                centers.push(c);
                shares.push(s);
            }
            _ if i == 0 => continue,
            _ => return data_error(format!("line {}: cannot parse {:?}", i + 1, record.as_slice())),
        }
    }
    if centers.len() < 2 {
        return data_error("histogram needs at least two bins".into());
    }
    let mesh = centers[1] - centers[0];
    for (j, w) in centers.windows(2).enumerate() {
        let tol = 1e-9 * mesh.abs() + 4.0 * f64::EPSILON * w[1].abs();
        if ((w[1] - w[0]) - mesh).abs() > tol {
            return data_error(format!("bin centers are not equispaced at bin {}", j + 2));
        }
    }
    let total: f64 = shares.iter().sum();
    if !(total > 0.0) {
        return data_error("shares must have positive total".into());
    }
    if (total - 1.0).abs() > 1e-6 {
        warn!("histogram shares sum to {total}; renormalizing");
    }
    let shares = shares.iter().map(|s| s / total).collect();
    Histogram::new(centers, shares, window, n_obs)
}

pub fn ingest_histogram(path: &Path, window: (f64, f64), n_obs: Option<usize>) -> Result<Histogram> {
    read_histogram(File::open(path)?, window, n_obs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y_only_defaults() {
        let obs = read_microdata("y\n1.5\n2.0\n".as_bytes()).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].t, 1.0);
        assert!(obs[0].x.is_empty());
    }

    #[test]
    fn all_columns_populated() {
        let obs = read_microdata("t,x1,y\n0.5,-0.2,3.0\n".as_bytes()).unwrap();
        assert_eq!(obs[0], Observation { y: 3.0, x: vec![-0.2], t: 0.5 });
        let obs = read_microdata("y,x2,x1\n1,20,10\n".as_bytes()).unwrap();
        assert_eq!(obs[0].x, vec![10.0, 20.0]);
    }

    #[test]
    fn bad_cells_name_the_row() {
        let err = read_microdata("y\n1.0\nabc\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(err.is_data_error());
        let err = read_microdata("y\ninf\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
        assert!(read_microdata("z\n1\n".as_bytes()).unwrap_err().to_string().contains("`y`"));
        assert!(read_microdata("y,x2\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn histogram_roundtrip() {
        let h = read_histogram("bin_center,share\n0.5,0.25\n1.5,0.25\n2.5,0.25\n3.5,0.25\n".as_bytes(), (1.0, 3.0), None)
            .unwrap();
        assert_eq!(h.shares, vec![0.25; 4]);
        assert_eq!(h.mesh, 1.0);
        assert_eq!(h.window, 1..3);
    }

    #[test]
    fn histogram_is_renormalized() {
        let h = read_histogram("0.5,0.24975\n1.5,0.24975\n2.5,0.24975\n3.5,0.24975\n".as_bytes(), (1.0, 3.0), None)
            .unwrap();
        assert!((h.shares.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ragged_histogram_is_rejected() {
        let err = read_histogram("0.5,0.25\n1.5,0.25\n2.6,0.25\n3.5,0.25\n".as_bytes(), (1.0, 3.0), None).unwrap_err();
        assert!(err.is_data_error());
    }

    #[test]
    fn files_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,t\n1,1\n2,0\n").unwrap();
        assert_eq!(ingest_microdata(&path).unwrap().len(), 2);
        assert!(ingest_microdata(&dir.path().join("missing.csv")).unwrap_err().is_data_error());
    }
}
