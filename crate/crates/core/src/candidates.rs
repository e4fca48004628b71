//! Sliding-window shapelet candidates and fixed-grid resampling.
//!
//! Candidates of every length and every variable share one pool. Each carries
//! its provenance plus a z-normalized view linearly resampled onto `G` points
//! so the encoder sees a single input shape.

use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;

use crate::data::{z_normalize, Dataset, Subsequence};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_RATIOS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_GRID: usize = 32;
pub const DEFAULT_CELL_CAP: usize = 20;
pub const MIN_CANDIDATE_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Position in the candidate list.
    pub id: usize,
    pub subsequence: Subsequence,
    pub length_ratio: f64,
    pub grid: Vec<f64>,
}

impl Candidate {
    pub fn len(&self) -> usize {
        self.subsequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsequence.is_empty()
    }

    pub fn variable(&self) -> usize {
        self.subsequence.variable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateConfig {
    pub ratios: Vec<f64>,
    /// `None` selects `max(1, N / 50)`.
    pub stride: Option<usize>,
    pub per_cell_cap: usize,
    pub grid_len: usize,
    pub seed: u64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS.to_vec(),
            stride: None,
            per_cell_cap: DEFAULT_CELL_CAP,
            grid_len: DEFAULT_GRID,
            seed: 0,
        }
    }
}

pub fn default_stride(series_len: usize) -> usize {
    (series_len / 50).max(1)
}

/// Window length for a ratio, or `None` when it would fall below the minimum.
pub fn window_len(ratio: f64, series_len: usize) -> Option<usize> {
    let len = (ratio * series_len as f64).round() as usize;
    (len >= MIN_CANDIDATE_LEN && len <= series_len).then_some(len)
}

pub fn generate_candidates(dataset: &Dataset, config: &CandidateConfig) -> Result<Vec<Candidate>> {
    if config.ratios.is_empty() {
        return Err(Error::Config("no length ratios given".into()));
    }
    if let Some(r) = config.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("length ratio {r} outside (0, 1]")));
    }
    if config.per_cell_cap == 0 {
        return Err(Error::Config("per-cell candidate cap must be positive".into()));
    }
    if config.grid_len < 2 {
        return Err(Error::Config("grid length must be at least 2".into()));
    }
    let n = dataset.series_len();
    let stride = config.stride.unwrap_or_else(|| default_stride(n));
    if stride == 0 {
        return Err(Error::Config("candidate stride must be positive".into()));
    }

    let mut lengths = Vec::new();
    for (ri, &ratio) in config.ratios.iter().enumerate() {
        match window_len(ratio, n) {
            Some(len) => lengths.push((ri, ratio, len)),
            None => log::warn!(
                "length ratio {ratio} gives fewer than {MIN_CANDIDATE_LEN} points for series of length {n}; skipped"
            ),
        }
    }

    let per_instance: Vec<Vec<(Subsequence, f64)>> = (0..dataset.len())
        .into_par_iter()
        .map(|m| {
            let mut out = Vec::new();
            for v in 0..dataset.variables() {
                for &(ri, ratio, len) in &lengths {
                    let count = (n - len) / stride + 1;
                    let starts: Vec<usize> = if count > config.per_cell_cap {
                        let mut rng = rng_for(config.seed, &[m as u64, v as u64, ri as u64]);
                        let mut picked = index::sample(&mut rng, count, config.per_cell_cap).into_vec();
                        picked.sort_unstable();
                        picked.into_iter().map(|i| i * stride).collect()
                    } else {
                        (0..count).map(|i| i * stride).collect()
                    };
                    for start in starts {
                        let sub = Subsequence::extract(dataset, m, v, start, len)
                            .expect("window inside series");
                        out.push((sub, ratio));
                    }
                }
            }
            out
        })
        .collect();

    let candidates = per_instance
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(id, (subsequence, length_ratio))| {
            let mut normalized = subsequence.values.clone();
            z_normalize(&mut normalized);
            Candidate {
                id,
                grid: resample_to_grid(&normalized, config.grid_len),
                subsequence,
                length_ratio,
            }
        })
        .collect();
    Ok(candidates)
}

/// Left index and right-hand weight of each output point of a linear
/// interpolation from `from` to `to` uniformly spaced points.
pub fn interpolation_weights(from: usize, to: usize) -> Vec<(usize, f64)> {
    assert!(from >= 1 && to >= 1);
    if from == 1 {
        return vec![(0, 0.0); to];
    }
    if to == 1 {
        return vec![(0, 0.0)];
    }
    let scale = (from - 1) as f64 / (to - 1) as f64;
    (0..to)
        .map(|i| {
            if i == to - 1 {
                return (from - 1, 0.0);
            }
            let t = i as f64 * scale;
            let lo = (t.floor() as usize).min(from - 2);
            (lo, t - lo as f64)
        })
        .collect()
}

fn interpolate(values: &[f64], to: usize) -> Vec<f64> {
    interpolation_weights(values.len(), to)
        .into_iter()
        .map(|(lo, w)| {
            if w == 0.0 {
                values[lo]
            } else {
                values[lo] * (1.0 - w) + values[lo + 1] * w
            }
        })
        .collect()
}

/// Linear interpolation onto `grid_len` uniform points. Endpoints are exact.
pub fn resample_to_grid(values: &[f64], grid_len: usize) -> Vec<f64> {
    assert!(values.len() >= 2 && grid_len >= 2, "resampling needs at least 2 points");
    interpolate(values, grid_len)
}

/// Inverse of [`resample_to_grid`]: interpolate back to `target_len` points.
pub fn restore_from_grid(grid: &[f64], target_len: usize) -> Vec<f64> {
    assert!(grid.len() >= 2 && target_len >= 2, "restoring needs at least 2 points");
    interpolate(grid, target_len)
}

/// Provenance dump: `id,instance,variable,start,length,ratio`.
pub fn candidates_to_csv(dataset: &Dataset, candidates: &[Candidate]) -> String {
    let mut out = String::from("id,instance,variable,start,length,ratio\n");
    for c in candidates {
        let s = &c.subsequence;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.id,
            dataset.instance(s.instance).id(),
            s.variable,
            s.start,
            s.len(),
            c.length_ratio
        )
        .unwrap();
    }
    out
}
