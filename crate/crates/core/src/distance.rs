//! Best-match subsequence distance and the shapelet transform.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::shapelet::Shapelet;

/// Location and value of the closest window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMatch {
    /// Mean squared difference at the best alignment.
    pub distance: f64,
    /// Zero-based start of the best window in the longer sequence. Ties go to
    /// the earliest window.
    pub offset: usize,
}

/// Slide `shorter` along `longer` and return the window with the smallest mean
/// squared difference.
pub fn best_match(shorter: &[f64], longer: &[f64]) -> Result<BestMatch> {
    if shorter.is_empty() || longer.is_empty() {
        return Err(Error::Contract("dist of an empty sequence".into()));
    }
    if shorter.len() > longer.len() {
        return Err(Error::Contract(format!(
            "dist expects |shorter| <= |longer|, got {} > {}",
            shorter.len(),
            longer.len()
        )));
    }
    let len = shorter.len();
    let inv = 1.0 / len as f64;
    let mut best = BestMatch {
        distance: f64::INFINITY,
        offset: 0,
    };
    for (offset, window) in longer.windows(len).enumerate() {
        let mut acc = 0.0;
        for (a, b) in window.iter().zip(shorter) {
            let d = a - b;
            acc += d * d;
        }
        let distance = acc * inv;
        if distance < best.distance {
            best = BestMatch { distance, offset };
        }
    }
    Ok(best)
}

pub fn dist(shorter: &[f64], longer: &[f64]) -> Result<f64> {
    best_match(shorter, longer).map(|m| m.distance)
}

/// An `M x k` matrix of series-to-shapelet distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedDataset {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TransformedDataset {
    pub fn from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows in transformed dataset".into()));
        }
        let n = rows.len();
        Ok(Self {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let data = (0..self.rows)
            .flat_map(|r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    /// CSV with header `d_1,...,d_k` and one row per instance.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.cols).map(|j| format!("d_{j}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..self.rows {
            let row: Vec<String> = self.row(r).iter().map(|x| x.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let bad = |message: String| Error::Artifact {
            path: origin.to_string(),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols = if header.trim().is_empty() {
            0
        } else {
            header.split(',').count()
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = if cols == 0 {
                Vec::new()
            } else {
                line.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| bad(format!("line {}: bad number `{t}`", i + 2)))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            if row.len() != cols {
                return Err(bad(format!("line {}: expected {cols} columns", i + 2)));
            }
            rows.push(row);
        }
        Self::from_rows(rows, cols)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Distance of every instance to every shapelet, on the shapelet's channel.
pub fn transform(dataset: &Dataset, shapelets: &[Shapelet]) -> Result<TransformedDataset> {
    for (j, s) in shapelets.iter().enumerate() {
        if s.variable >= dataset.variables() {
            return Err(Error::Config(format!(
                "shapelet {j} targets variable {} but the dataset has {}",
                s.variable,
                dataset.variables()
            )));
        }
        if s.values.is_empty() || s.values.len() > dataset.series_len() {
            return Err(Error::Config(format!(
                "shapelet {j} has length {} but series have length {}",
                s.values.len(),
                dataset.series_len()
            )));
        }
    }
    let rows = dataset
        .instances()
        .par_iter()
        .map(|inst| {
            shapelets
                .iter()
                .map(|s| dist(&s.values, inst.channel(s.variable)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    TransformedDataset::from_rows(rows, shapelets.len())
}

/// Best-match location of each shapelet in each instance, for plotting.
pub fn match_locations(dataset: &Dataset, shapelets: &[Shapelet]) -> Result<Vec<Vec<BestMatch>>> {
    dataset
        .instances()
        .par_iter()
        .map(|inst| {
            shapelets
                .iter()
                .map(|s| best_match(&s.values, inst.channel(s.variable)))
                .collect()
        })
        .collect()
}
