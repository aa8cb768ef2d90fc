//! On-disk dataset directory format.
//!
//! A dataset directory contains:
//!   params.json   - n, p, m, lambda, mu, d, seed
//!   sigma.csv     - one +-1 integer per line, n lines
//!   layer_<k>.edges - one "i j" 0-based pair per line, i < j, ascending
//!   B.csv         - n lines of p comma-separated reals
//!
//! Floats are printed in shortest round-trip form, so a load after a save
//! reproduces the covariate matrix bit-exactly. The latent direction `u`
//! is an in-memory diagnostic and is not persisted.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CommunityAssignment, CovariateMatrix, Dataset, LayerGraph, ModelError, ModelParams,
};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at {path}:{line}: {detail}")]
    Malformed { what: &'static str, path: String, line: usize, detail: String },

    #[error("params.json: {0}")]
    Params(#[from] serde_json::Error),

    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path, source: std::io::Error) -> StorageError {
    StorageError::Io { path: path.display().to_string(), source }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    n: usize,
    p: usize,
    m: usize,
    lambda: Vec<f64>,
    mu: f64,
    d: Vec<f64>,
    seed: u64,
}

/// Write a dataset directory, creating it if needed.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), StorageError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let pf = ParamsFile {
        n: ds.params.n,
        p: ds.params.p,
        m: ds.params.m,
        lambda: ds.params.lambda.clone(),
        mu: ds.params.mu,
        d: ds.params.d.clone(),
        seed: ds.seed,
    };
    let path = dir.join("params.json");
    let json = serde_json::to_string_pretty(&pf)?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;

    let path = dir.join("sigma.csv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
    for &s in &ds.sigma.0 {
        writeln!(w, "{s}").map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    for g in &ds.layers {
        let path = dir.join(format!("layer_{}.edges", g.layer_index));
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
        for &(i, j) in &g.edges {
            writeln!(w, "{i} {j}").map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }

    let path = dir.join("B.csv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
    for i in 0..ds.n() {
        let row: Vec<String> = ds.covariates.b.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Load a dataset directory. The latent direction `u` is not persisted,
/// so the loaded covariates carry `u = None`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, StorageError> {
    let path = dir.join("params.json");
    let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let pf: ParamsFile = serde_json::from_str(&raw)?;
    let params = ModelParams::new(pf.lambda, pf.mu, pf.d, pf.n, pf.p)?;

    let path = dir.join("sigma.csv");
    let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut sigma = Vec::with_capacity(params.n);
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        let v: i8 = line.trim().parse().map_err(|_| StorageError::Malformed {
            what: "sigma",
            path: path.display().to_string(),
            line: ln + 1,
            detail: format!("expected +-1, got {line:?}"),
        })?;
        if v != 1 && v != -1 {
            return Err(StorageError::Malformed {
                what: "sigma",
                path: path.display().to_string(),
                line: ln + 1,
                detail: format!("expected +-1, got {v}"),
            });
        }
        sigma.push(v);
    }
    if sigma.len() != params.n {
        return Err(StorageError::Malformed {
            what: "sigma",
            path: path.display().to_string(),
            line: sigma.len(),
            detail: format!("expected {} lines, got {}", params.n, sigma.len()),
        });
    }

    let mut layers = Vec::with_capacity(params.m);
    for k in 1..=params.m {
        let path = dir.join(format!("layer_{k}.edges"));
        let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut edges = Vec::new();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(&path, e))?;
            let malformed = |detail: String| StorageError::Malformed {
                what: "edge list",
                path: path.display().to_string(),
                line: ln + 1,
                detail,
            };
            let mut it = line.split_whitespace();
            let i: u32 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| malformed(format!("bad line {line:?}")))?;
            let j: u32 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| malformed(format!("bad line {line:?}")))?;
            if i >= j || (j as usize) >= params.n {
                return Err(malformed(format!("pair ({i}, {j}) violates i < j < n")));
            }
            edges.push((i, j));
        }
        layers.push(LayerGraph::from_edges(k, params.n, edges));
    }

    let path = dir.join("B.csv");
    let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut b = Array2::zeros((params.n, params.p));
    let mut rows = 0usize;
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        let malformed = |detail: String| StorageError::Malformed {
            what: "B matrix",
            path: path.display().to_string(),
            line: ln + 1,
            detail,
        };
        if ln >= params.n {
            return Err(malformed("too many rows".into()));
        }
        let mut cols = 0usize;
        for (q, tok) in line.split(',').enumerate() {
            if q >= params.p {
                return Err(malformed("too many columns".into()));
            }
            b[[ln, q]] = tok
                .trim()
                .parse()
                .map_err(|_| malformed(format!("bad float {tok:?}")))?;
            cols += 1;
        }
        if cols != params.p {
            return Err(malformed(format!("expected {} columns, got {cols}", params.p)));
        }
        rows += 1;
    }
    if rows != params.n {
        return Err(StorageError::Malformed {
            what: "B matrix",
            path: path.display().to_string(),
            line: rows,
            detail: format!("expected {} rows, got {rows}", params.n),
        });
    }

    Ok(Dataset::from_parts(
        params,
        CommunityAssignment(sigma),
        layers,
        CovariateMatrix { b, u: None },
        pf.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_dataset;

    #[test]
    fn round_trip_is_exact() {
        let params =
            ModelParams::new(vec![1.0, 0.5], 0.7, vec![3.0, 2.5], 40, 25).unwrap();
        let ds = sample_dataset(&params, 123);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.params, ds.params);
        assert_eq!(back.sigma, ds.sigma);
        for (a, b) in back.layers.iter().zip(&ds.layers) {
            assert_eq!(a.edges, b.edges);
        }
        // Bit-exact covariates via shortest round-trip float printing.
        assert_eq!(back.covariates.b, ds.covariates.b);
        assert_eq!(back.seed, ds.seed);
        assert!(back.covariates.u.is_none());
    }

    #[test]
    fn params_json_keys() {
        let params = ModelParams::new(vec![0.4], 0.1, vec![2.0], 10, 8).unwrap();
        let ds = sample_dataset(&params, 1);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let raw = fs::read_to_string(dir.path().join("params.json")).unwrap();
        let pos: Vec<usize> = ["\"n\"", "\"p\"", "\"m\"", "\"lambda\"", "\"mu\"", "\"d\"", "\"seed\""]
            .iter()
            .map(|k| raw.find(k).unwrap_or_else(|| panic!("missing key {k}")))
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "key order {pos:?}");
    }

    #[test]
    fn rejects_bad_sigma() {
        let params = ModelParams::new(vec![0.4], 0.1, vec![2.0], 10, 8).unwrap();
        let ds = sample_dataset(&params, 1);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("sigma.csv"), "1\n2\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(StorageError::Malformed { what: "sigma", .. })
        ));
    }
}
