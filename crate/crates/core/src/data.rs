//! Synthetic datasets, CSV ingestion, view splitting and stratified splits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Test,
}

/// Labeled feature matrix with stable per-sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<u64>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, ids: Vec<u64>, classes: usize, split: Split) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() || y.len() != ids.len() {
            return Err(Error::contract(format!(
                "dataset with features {:?}, {} labels and {} ids",
                x.shape(),
                y.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let unique: HashSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::contract("sample ids are not unique"));
        }
        Ok(Dataset { x, y, ids, classes, split })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `index` as a new dataset (same class count and split tag).
    pub fn select(&self, index: &[usize]) -> Dataset {
        Dataset {
            x: self.x.gather_rows(index),
            y: index.iter().map(|&i| self.y[i]).collect(),
            ids: index.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Same rows restricted to columns `lo..hi`.
    pub fn columns(&self, lo: usize, hi: usize) -> Dataset {
        let d = hi - lo;
        let mut data = Vec::with_capacity(self.len() * d);
        for i in 0..self.len() {
            data.extend_from_slice(&self.x.row(i)[lo..hi]);
        }
        Dataset {
            x: Tensor::matrix(self.len(), d, data),
            ..self.clone()
        }
    }
}

/// `k` classes of `n_per` points each. Class means are uniform on the unit
/// sphere; points are `mean + spread * N(0, I)`. Ids run `0..k*n_per` in
/// class-major order.
pub fn gen_clusters(k: usize, n_per: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || d < 2 || n_per == 0 {
        return Err(Error::contract(format!(
            "gen_clusters needs k >= 2, d >= 2 and n_per >= 1 (got k={k}, d={d}, n_per={n_per})"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::contract(format!("spread must be finite and non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(k);
    while means.len() < k {
        let m: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            means.push(m.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
        }
    }
    let n = k * n_per;
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per {
            for &mu in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + spread * z);
            }
            y.push(c);
        }
    }
    Dataset::new(Tensor::matrix(n, d, data), y, (0..n as u64).collect(), k, Split::Full)
}

/// Two column-disjoint views of one dataset sharing labels and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoViewDataset {
    pub view_a: Dataset,
    pub view_b: Dataset,
}

/// `view_a` takes the first `d_a` columns, `view_b` the rest.
pub fn split_views(ds: &Dataset, d_a: usize) -> Result<TwoViewDataset> {
    let d = ds.dim();
    if d_a == 0 || d_a >= d {
        return Err(Error::contract(format!("view split needs 1 <= d_a < {d}, got {d_a}")));
    }
    Ok(TwoViewDataset {
        view_a: ds.columns(0, d_a),
        view_b: ds.columns(d_a, d),
    })
}

impl TwoViewDataset {
    /// Column-wise concatenation of the two views.
    pub fn reassemble(&self) -> Dataset {
        let (a, b) = (&self.view_a, &self.view_b);
        let mut data = Vec::with_capacity(a.len() * (a.dim() + b.dim()));
        for i in 0..a.len() {
            data.extend_from_slice(a.x.row(i));
            data.extend_from_slice(b.x.row(i));
        }
        Dataset {
            x: Tensor::matrix(a.len(), a.dim() + b.dim(), data),
            ..a.clone()
        }
    }
}

/// Stratified split: within each class a seeded shuffle sends
/// `round(fraction * count)` samples (at least one, at most `count - 1`) to
/// the test side. Both sides keep the original row order.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::contract(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rows = Vec::new();
    for c in 0..ds.classes {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::contract(format!("class {c} has fewer than 2 samples")));
        }
        rows.shuffle(&mut rng);
        let n_test = ((test_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        test_rows.extend_from_slice(&rows[..n_test]);
    }
    let in_test: HashSet<usize> = test_rows.iter().copied().collect();
    let train_idx: Vec<usize> = (0..ds.len()).filter(|i| !in_test.contains(i)).collect();
    let test_idx: Vec<usize> = (0..ds.len()).filter(|i| in_test.contains(i)).collect();
    let mut train = ds.select(&train_idx);
    let mut test = ds.select(&test_idx);
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}

/// Writes `label,f0,...` with every feature in 17 significant digits.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_io)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.y[i].to_string()];
        rec.extend(ds.x.row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            detail: format!("{other:?}"),
        },
    }
}

/// Reads a dataset written by [`save_csv`] (or by hand in the same format).
/// Ids are row positions; the class count is one more than the largest
/// label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(1, e))?,
        None => return Err(Error::Parse { line: 1, detail: "empty file".into() }),
    };
    let d = header.len().saturating_sub(1);
    let header_ok = d >= 1
        && &header[0] == "label"
        && header.iter().skip(1).enumerate().all(|(j, h)| h == format!("f{j}"));
    if !header_ok {
        return Err(Error::Parse {
            line: 1,
            detail: "header must be label,f0,...,f{d-1}".into(),
        });
    }
    let mut y = Vec::new();
    let mut data = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_error(0, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                detail: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            detail: format!("label {:?} is not a non-negative integer", &rec[0]),
        })?;
        y.push(label);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                detail: format!("f{j} value {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    detail: format!("f{j} value {cell:?} is not finite"),
                });
            }
            data.push(v);
        }
    }
    if y.is_empty() {
        return Err(Error::Parse { line: 2, detail: "no data rows".into() });
    }
    let n = y.len();
    let classes = y.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(Tensor::matrix(n, d, data), y, (0..n as u64).collect(), classes, Split::Full)
}

fn parse_error(line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse { line, detail: e.to_string() }
}
