//! Training objectives: triplet, diversity, reconstruction, and smooth DBI.
//!
//! Each loss is built on an autodiff [`Graph`]; cluster assignments and
//! representative choices enter as plain indices and are never differentiated.

use serde::Serialize;

use crate::cluster::EPS;
use crate::error::{Error, Result};
use crate::nn::graph::smooth_max_weights;
use crate::nn::{Graph, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 50.0;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Softmax-weighted average of `values`, a smooth stand-in for the maximum.
pub fn smooth_max(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("smooth max of an empty vector".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("smooth max temperature must be positive, got {alpha}")));
    }
    Ok(smooth_max_weights(values, alpha).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletParams {
    pub margin: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for TripletParams {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Row indices into an embedding matrix: one anchor, its positives and negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct TripletTerms {
    pub loss: Var,
    pub d_ap: f64,
    pub d_an: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    /// The anchor coincides with every negative, so the ratio is meaningless.
    pub degenerate: bool,
}

fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            left.push(i);
            right.push(j);
        }
    }
    (left, right)
}

/// Mean squared distance between `rows[0]` repeated and every row of `others`.
fn mean_sq_to(g: &mut Graph, emb: Var, anchor: usize, others: &[usize]) -> Result<Var> {
    let a = g.select_rows(emb, &vec![anchor; others.len()])?;
    let b = g.select_rows(emb, others)?;
    let diff = g.sub(a, b)?;
    let d = g.row_sum_squares(diff)?;
    g.mean(d)
}

/// Smooth max of pairwise squared distances within `rows`; zero for one row.
fn intra_spread(g: &mut Graph, emb: Var, rows: &[usize], alpha: f64) -> Result<Var> {
    let (l, r) = pair_indices(rows.len());
    if l.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let left: Vec<usize> = l.iter().map(|&i| rows[i]).collect();
    let right: Vec<usize> = r.iter().map(|&i| rows[i]).collect();
    let a = g.select_rows(emb, &left)?;
    let b = g.select_rows(emb, &right)?;
    let diff = g.sub(a, b)?;
    let d = g.row_sum_squares(diff)?;
    g.smooth_max(d, alpha)
}

/// Cluster-wise triplet loss on rows of the `[B, E]` embedding matrix `emb`:
/// `ln((D_AP + margin) / (D_AN + eps)) + beta (D_pos + D_neg)`.
pub fn triplet_loss(g: &mut Graph, emb: Var, batch: &TripletBatch, params: TripletParams) -> Result<TripletTerms> {
    if batch.positives.is_empty() || batch.negatives.is_empty() {
        return Err(Error::Contract("triplet loss needs at least one positive and one negative".into()));
    }
    let ap = mean_sq_to(g, emb, batch.anchor, &batch.positives)?;
    let an = mean_sq_to(g, emb, batch.anchor, &batch.negatives)?;
    let pos = intra_spread(g, emb, &batch.positives, params.alpha)?;
    let neg = intra_spread(g, emb, &batch.negatives, params.alpha)?;

    let num = g.add_scalar(ap, params.margin);
    let den = g.add_scalar(an, EPS);
    let ratio = g.div(num, den)?;
    let log_ratio = g.ln(ratio);
    let intra = g.add(pos, neg)?;
    let intra = g.scale(intra, params.beta);
    let loss = g.add(log_ratio, intra)?;

    let item = |v: Var| g.value(v).item();
    let d_an = item(an);
    Ok(TripletTerms {
        loss,
        d_ap: item(ap),
        d_an,
        d_pos: item(pos),
        d_neg: item(neg),
        degenerate: d_an <= EPS,
    })
}

/// Diversity loss over `Y` representatives (rows of `reps`) with the sizes of
/// the clusters they stand for:
/// `exp(-sum_i [ln size_i + ln(sum_{j != i} |r_i - r_j|^2 + eps)])`.
pub fn diversity_loss(g: &mut Graph, reps: Var, sizes: &[usize]) -> Result<Var> {
    let y = sizes.len();
    if y < 2 {
        return Err(Error::Config(format!("diversity loss needs at least 2 representatives, got {y}")));
    }
    if g.value(reps).shape().first() != Some(&y) {
        return Err(Error::Contract(format!(
            "{} sizes for representatives of shape {:?}",
            y,
            g.value(reps).shape()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Contract("cluster sizes must be positive".into()));
    }
    // Slot s of representative i pairs it with its s-th other representative,
    // laid out slot-major so a row mean collapses the slots.
    let mut left = Vec::with_capacity(y * (y - 1));
    let mut right = Vec::with_capacity(y * (y - 1));
    for s in 0..y - 1 {
        for i in 0..y {
            left.push(i);
            right.push(if s < i { s } else { s + 1 });
        }
    }
    let a = g.select_rows(reps, &left)?;
    let b = g.select_rows(reps, &right)?;
    let diff = g.sub(a, b)?;
    let d = g.row_sum_squares(diff)?;
    let d = g.reshape(d, vec![y - 1, y])?;
    let per_rep = g.mean_rows(d)?;
    let per_rep = g.scale(per_rep, (y - 1) as f64);
    let per_rep = g.add_scalar(per_rep, EPS);
    let logs = g.ln(per_rep);
    let dist_term = g.sum(logs);
    let size_term: f64 = sizes.iter().map(|&s| (s as f64).ln()).sum();
    let exponent = g.add_scalar(dist_term, size_term);
    let exponent = g.scale(exponent, -1.0);
    Ok(g.exp(exponent))
}

/// Batch mean of squared L2 distances between matching rows.
pub fn reconstruction_loss(g: &mut Graph, original: Var, decoded: Var) -> Result<Var> {
    let (a, b) = (g.value(original).shape(), g.value(decoded).shape());
    if a != b || a.len() != 2 {
        return Err(Error::Contract(format!("reconstruction shapes {a:?} and {b:?} differ")));
    }
    let diff = g.sub(original, decoded)?;
    let d = g.row_sum_squares(diff)?;
    g.mean(d)
}

/// Smooth Davies-Bouldin index of the `[n, d]` points under fixed `labels`.
pub fn dbi_loss(g: &mut Graph, points: Var, labels: &[usize], clusters: usize, alpha: f64) -> Result<Var> {
    if clusters < 2 {
        return Err(Error::Config("the Davies-Bouldin index needs at least 2 clusters".into()));
    }
    let shape = g.value(points).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "{} labels for points of shape {shape:?}",
            labels.len()
        )));
    }
    let dim = shape[1];
    let mut members = vec![Vec::new(); clusters];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| Error::Contract(format!("label {l} out of range")))?
            .push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCluster { cluster: empty });
    }
    let mut centroids = Vec::with_capacity(clusters);
    let mut diameters = Vec::with_capacity(clusters);
    for m in &members {
        let rows = g.select_rows(points, m)?;
        let c = g.mean_rows(rows)?;
        let c = g.reshape(c, vec![1, dim])?;
        let rep = g.select_rows(c, &vec![0; m.len()])?;
        let diff = g.sub(rows, rep)?;
        let sq = g.row_sum_squares(diff)?;
        let dist = g.sqrt(sq);
        diameters.push(g.mean(dist)?);
        centroids.push(c);
    }
    let cents = g.concat(&centroids);
    let cents = g.reshape(cents, vec![clusters, dim])?;
    let diam = g.concat(&diameters);
    let diam = g.reshape(diam, vec![clusters, 1])?;

    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 0..clusters {
        for j in (0..clusters).filter(|&j| j != i) {
            left.push(i);
            right.push(j);
        }
    }
    let ca = g.select_rows(cents, &left)?;
    let cb = g.select_rows(cents, &right)?;
    let cdiff = g.sub(ca, cb)?;
    let sep = g.row_sum_squares(cdiff)?;
    let sep = g.sqrt(sep);
    let sep = g.add_scalar(sep, EPS);
    let da = g.select_rows(diam, &left)?;
    let db = g.select_rows(diam, &right)?;
    let spread = g.add(da, db)?;
    let spread = g.reshape(spread, vec![left.len()])?;
    let ratios = g.div(spread, sep)?;
    let ratios = g.reshape(ratios, vec![clusters, clusters - 1])?;

    let mut worst = Vec::with_capacity(clusters);
    for i in 0..clusters {
        let row = g.select_rows(ratios, &[i])?;
        let row = g.reshape(row, vec![clusters - 1])?;
        worst.push(g.smooth_max(row, alpha)?);
    }
    let worst = g.concat(&worst);
    g.mean(worst)
}

/// Values of the four objectives for one batch or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub triplet: f64,
    pub diversity: f64,
    pub dbi: f64,
}

impl LossParts {
    pub fn total(&self, lambda: f64) -> f64 {
        overall_loss(self, lambda)
    }
}

/// `reconstruction + lambda * triplet + diversity + dbi`.
pub fn overall_loss(parts: &LossParts, lambda: f64) -> f64 {
    let triplet = if lambda == 0.0 { 0.0 } else { lambda * parts.triplet };
    parts.reconstruction + triplet + parts.diversity + parts.dbi
}

/// Graph form of [`overall_loss`]; absent terms contribute nothing.
pub fn overall_loss_graph(
    g: &mut Graph,
    reconstruction: Var,
    triplet: Option<Var>,
    diversity: Option<Var>,
    dbi: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    let mut total = reconstruction;
    if let Some(t) = triplet.filter(|_| lambda != 0.0) {
        let t = g.scale(t, lambda);
        total = g.add(total, t)?;
    }
    for term in [diversity, dbi].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossParts,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,L_recon,L_triplet,L_div,L_dbi,L_total";

pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for e in log {
        let p = &e.parts;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, p.reconstruction, p.triplet, p.diversity, p.dbi, e.total
        ));
    }
    out
}

pub fn loss_log_from_csv(text: &str, origin: &str) -> Result<Vec<EpochLoss>> {
    let bad = |message: String| Error::Artifact {
        path: origin.to_string(),
        message,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOSS_LOG_HEADER) {
        return Err(bad("missing loss log header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("line {}: expected 6 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{s}`", i + 2)));
            Ok(EpochLoss {
                epoch: f[0].parse().map_err(|_| bad(format!("line {}: bad epoch", i + 2)))?,
                parts: LossParts {
                    reconstruction: num(f[1])?,
                    triplet: num(f[2])?,
                    diversity: num(f[3])?,
                    dbi: num(f[4])?,
                },
                total: num(f[5])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_max_examples() {
        assert_eq!(smooth_max(&[0.7, 0.7, 0.7], 50.0).unwrap(), 0.7);
        assert!((smooth_max(&[1.0, 2.0], 50.0).unwrap() - 2.0).abs() < 1e-10);
        assert!((smooth_max(&[0.3, 0.9, 0.1], 50.0).unwrap() - 0.9).abs() < 1e-6);
        assert!(smooth_max(&[], 1.0).is_err());
        assert!(smooth_max(&[1.0], 0.0).is_err());
    }

    fn embed(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.param(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn triplet_with_zero_positive_distance() {
        let mut g = Graph::new();
        let e = embed(&mut g, &[vec![0.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]]);
        let batch = TripletBatch {
            anchor: 0,
            positives: vec![1],
            negatives: vec![2],
        };
        let params = TripletParams { beta: 0.0, ..Default::default() };
        let t = triplet_loss(&mut g, e, &batch, params).unwrap();
        assert!((g.value(t.loss).item() - (1.0f64 / (4.0 + EPS)).ln()).abs() < 1e-12);
        assert!(!t.degenerate);
    }

    #[test]
    fn triplet_degenerate_flag() {
        let mut g = Graph::new();
        let e = embed(&mut g, &vec![vec![1.0, 1.0]; 4]);
        let batch = TripletBatch {
            anchor: 0,
            positives: vec![1],
            negatives: vec![2, 3],
        };
        let t = triplet_loss(&mut g, e, &batch, TripletParams::default()).unwrap();
        assert!(t.degenerate);
        assert!((g.value(t.loss).item() - (1.0 / EPS).ln()).abs() < 1e-6);
    }

    #[test]
    fn triplet_needs_both_sides() {
        let mut g = Graph::new();
        let e = embed(&mut g, &[vec![1.0], vec![2.0]]);
        let batch = TripletBatch {
            anchor: 0,
            positives: vec![],
            negatives: vec![1],
        };
        assert!(matches!(
            triplet_loss(&mut g, e, &batch, TripletParams::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn diversity_unit_case() {
        let mut g = Graph::new();
        let r = embed(&mut g, &[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let d = diversity_loss(&mut g, r, &[1, 1]).unwrap();
        assert!((g.value(d).item() - 1.0).abs() < 1e-7);
        let r = embed(&mut g, &[vec![0.0]]);
        assert!(matches!(diversity_loss(&mut g, r, &[3]), Err(Error::Config(_))));
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let x = embed(&mut g, &[vec![0.0, 0.0]]);
        let y = embed(&mut g, &[vec![1.0, 1.0]]);
        let l = reconstruction_loss(&mut g, x, y).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l = reconstruction_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let z = embed(&mut g, &[vec![1.0, 1.0, 1.0]]);
        assert!(reconstruction_loss(&mut g, x, z).is_err());
    }

    #[test]
    fn dbi_examples() {
        let mut g = Graph::new();
        let p = embed(&mut g, &[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]]);
        let l = dbi_loss(&mut g, p, &[0, 0, 1, 1], 2, 50.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let p = embed(&mut g, &[vec![-1.0, 0.0], vec![1.0, 0.0], vec![2.0, 1.0], vec![2.0, -1.0]]);
        let l = dbi_loss(&mut g, p, &[0, 0, 1, 1], 2, 50.0).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-6);

        assert!(matches!(
            dbi_loss(&mut g, p, &[0, 0, 0, 0], 2, 50.0),
            Err(Error::EmptyCluster { cluster: 1 })
        ));
        assert!(matches!(dbi_loss(&mut g, p, &[0, 0, 0, 0], 1, 50.0), Err(Error::Config(_))));
    }

    #[test]
    fn overall_examples() {
        let parts = LossParts {
            reconstruction: 1.0,
            triplet: 1.0,
            diversity: 1.0,
            dbi: 1.0,
        };
        assert!((overall_loss(&parts, 0.01) - 3.01).abs() < 1e-15);
        let inf = LossParts {
            triplet: f64::INFINITY,
            ..parts
        };
        assert_eq!(overall_loss(&inf, 0.0), 3.0);
    }

    #[test]
    fn loss_log_round_trip() {
        let log = vec![
            EpochLoss {
                epoch: 0,
                parts: LossParts {
                    reconstruction: 0.25,
                    triplet: -1.5,
                    diversity: 1e-9,
                    dbi: 0.0,
                },
                total: 0.235,
            },
            EpochLoss {
                epoch: 1,
                parts: LossParts::default(),
                total: 0.0,
            },
        ];
        let text = loss_log_csv(&log);
        assert!(text.starts_with("epoch,L_recon,L_triplet,L_div,L_dbi,L_total\n"));
        assert_eq!(loss_log_from_csv(&text, "log").unwrap(), log);
    }

    proptest! {
        #[test]
        fn smooth_max_bounds_and_shift(
            v in prop::collection::vec(-5.0f64..5.0, 1..12),
            alpha in 0.01f64..100.0,
            c in -10.0f64..10.0,
        ) {
            let s = smooth_max(&v, alpha).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s <= max + 1e-12 && s >= mean - 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((smooth_max(&shifted, alpha).unwrap() - (s + c)).abs() < 1e-9);
            let rev: Vec<f64> = v.iter().rev().copied().collect();
            prop_assert!((smooth_max(&rev, alpha).unwrap() - s).abs() < 1e-12);
        }
    }
}
