//! K-means, the Davies-Bouldin index, and external agreement indices.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Added to centroid separations before dividing.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    /// Sum of squared distances of points to their centroid.
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Build from fixed labels, computing centroids, sizes, and inertia.
    pub fn from_labels(points: &[Vec<f64>], labels: Vec<usize>, clusters: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Contract("one label per point required".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= clusters) {
            return Err(Error::Contract(format!("label {bad} out of range for {clusters} clusters")));
        }
        let dim = points.first().map_or(0, Vec::len);
        let (centroids, sizes) = centroids_of(points, &labels, clusters, dim);
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyCluster { cluster: empty });
        }
        let inertia = inertia_of(points, &labels, &centroids);
        Ok(Self {
            labels,
            centroids,
            sizes,
            inertia,
        })
    }

    /// Point indices grouped by cluster, ascending within each.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(points: &[Vec<f64>], labels: &[usize], clusters: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; clusters];
    let mut sizes = vec![0usize; clusters];
    for (p, &l) in points.iter().zip(labels) {
        sizes[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&sizes) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, sizes)
}

fn inertia_of(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn plus_plus_init(points: &[Vec<f64>], clusters: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// Give each empty cluster the point farthest from the centroid of the
/// currently largest cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], clusters: usize) {
    let dim = points[0].len();
    loop {
        let (centroids, sizes) = centroids_of(points, labels, clusters, dim);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..clusters).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let mut far = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            if labels[i] == largest {
                let d = sq_dist(p, &centroids[largest]);
                if d > far.0 {
                    far = (d, i);
                }
            }
        }
        labels[far.1] = empty;
    }
}

/// k-means++ seeded Lloyd iterations. Returns the assignment and the inertia
/// after every centroid update.
pub fn kmeans_traced(
    points: &[Vec<f64>],
    clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(ClusterAssignment, Vec<f64>)> {
    if clusters == 0 {
        return Err(Error::Config("k-means needs at least one cluster".into()));
    }
    if points.len() < clusters {
        return Err(Error::Config(format!(
            "k-means with {clusters} clusters needs at least that many points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("points of different dimension".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "k-means input".into(),
        });
    }
    let mut rng = rng_for(seed, &[0x6b6d]);
    let mut centroids = plus_plus_init(points, clusters, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, clusters);
        let changed = next != labels;
        labels = next;
        let (c, _) = centroids_of(points, &labels, clusters, dim);
        centroids = c;
        trace.push(inertia_of(points, &labels, &centroids));
        if !changed {
            break;
        }
    }
    let assignment = ClusterAssignment::from_labels(points, labels, clusters)?;
    Ok((assignment, trace))
}

pub fn kmeans(points: &[Vec<f64>], clusters: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    kmeans_traced(points, clusters, seed, max_iters).map(|(a, _)| a)
}

/// Run `restarts` independently seeded k-means in parallel and keep the
/// lowest inertia (earliest restart on ties). Returns the winning restart index.
pub fn kmeans_best_of(
    points: &[Vec<f64>],
    clusters: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<(ClusterAssignment, usize)> {
    let runs: Vec<ClusterAssignment> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| kmeans(points, clusters, crate::rng::derive_seed(seed, &[r as u64]), max_iters))
        .collect::<Result<_>>()?;
    let (best, _) = runs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, a)| if a.inertia < acc.1 { (i, a.inertia) } else { acc });
    Ok((runs[best].clone(), best))
}

/// Per-cluster diameters `A_i` and the pairwise ratio matrix
/// `R_ij = (A_i + A_j) / (M_ij + EPS)`.
pub fn dbi_ratios(points: &[Vec<f64>], assignment: &ClusterAssignment) -> Result<Vec<Vec<f64>>> {
    let c = assignment.clusters();
    if c < 2 {
        return Err(Error::Config("the Davies-Bouldin index needs at least 2 clusters".into()));
    }
    if let Some(empty) = assignment.sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster { cluster: empty });
    }
    let mut diam = vec![0.0; c];
    for (p, &l) in points.iter().zip(&assignment.labels) {
        diam[l] += sq_dist(p, &assignment.centroids[l]).sqrt();
    }
    for (d, &n) in diam.iter_mut().zip(&assignment.sizes) {
        *d /= n as f64;
    }
    let mut r = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            if i != j {
                let sep = sq_dist(&assignment.centroids[i], &assignment.centroids[j]).sqrt();
                r[i][j] = (diam[i] + diam[j]) / (sep + EPS);
            }
        }
    }
    Ok(r)
}

/// Hard-max Davies-Bouldin index.
pub fn dbi_exact(points: &[Vec<f64>], assignment: &ClusterAssignment) -> Result<f64> {
    let r = dbi_ratios(points, assignment)?;
    let c = r.len();
    let total: f64 = (0..c)
        .map(|i| (0..c).filter(|&j| j != i).map(|j| r[i][j]).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNorm {
    /// `I / ((H(a) + H(b)) / 2)`.
    #[default]
    Arithmetic,
    /// `I / sqrt(H(a) H(b))`.
    Geometric,
}

fn contingency(pred: &[usize], truth: &[usize]) -> (BTreeMap<(usize, usize), usize>, BTreeMap<usize, usize>, BTreeMap<usize, usize>) {
    let mut joint = BTreeMap::new();
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_insert(0) += 1;
        *a.entry(p).or_insert(0) += 1;
        *b.entry(t).or_insert(0) += 1;
    }
    (joint, a, b)
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Whether two labelings induce the same set partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter().zip(b).all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNorm) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "label lists differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("NMI of empty labelings".into()));
    }
    let n = pred.len() as f64;
    let (joint, a, b) = contingency(pred, truth);
    let (ha, hb) = (entropy(&a, n), entropy(&b, n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if same_partition(pred, truth) { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / n * (n * c / (a[&p] as f64 * b[&t] as f64)).ln()
        })
        .sum();
    let denom = match norm {
        NmiNorm::Arithmetic => 0.5 * (ha + hb),
        NmiNorm::Geometric => (ha * hb).sqrt(),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Normalized mutual information, arithmetic-mean normalization.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNorm::default())
}

fn pairs(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Fraction of point pairs on which the two partitions agree.
pub fn rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "label lists differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Contract("the Rand index needs at least 2 points".into()));
    }
    let (joint, a, b) = contingency(pred, truth);
    let total = pairs(pred.len());
    let same_both: f64 = joint.values().map(|&c| pairs(c)).sum();
    let same_a: f64 = a.values().map(|&c| pairs(c)).sum();
    let same_b: f64 = b.values().map(|&c| pairs(c)).sum();
    Ok((total + 2.0 * same_both - same_a - same_b) / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(raw: &[(f64, f64)]) -> Vec<Vec<f64>> {
        raw.iter().map(|&(x, y)| vec![x, y]).collect()
    }

    #[test]
    fn separated_pairs() {
        let p = pts(&[(0.0, 0.0), (9.0, 9.0), (0.1, 0.0), (9.1, 9.0)]);
        let a = kmeans(&p, 2, 1, 100).unwrap();
        assert_eq!(a.labels[0], a.labels[2]);
        assert_eq!(a.labels[1], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[1]);
    }

    #[test]
    fn identical_points_repair() {
        let p = vec![vec![1.0, 1.0]; 5];
        let a = kmeans(&p, 2, 3, 100).unwrap();
        assert_eq!(a.inertia, 0.0);
        let mut sizes = a.sizes.clone();
        sizes.sort();
        assert_eq!(sizes, vec![1, 4]);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(kmeans(&pts(&[(0.0, 0.0)]), 2, 0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn dbi_examples() {
        let p = pts(&[(0.0, 0.0), (0.0, 0.0), (10.0, 0.0), (10.0, 0.0)]);
        let a = ClusterAssignment::from_labels(&p, vec![0, 0, 1, 1], 2).unwrap();
        assert!(dbi_exact(&p, &a).unwrap().abs() < 1e-12);

        // diameters 1 and 1, centroids 2 apart
        let p = pts(&[(-1.0, 0.0), (1.0, 0.0), (1.0, 1.0), (1.0, -1.0)]);
        let a = ClusterAssignment::from_labels(&p, vec![0, 0, 1, 1], 2).unwrap();
        assert_eq!(a.centroids, vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let p = pts(&[(-1.0, 0.0), (1.0, 0.0), (2.0, 1.0), (2.0, -1.0)]);
        let a = ClusterAssignment::from_labels(&p, vec![0, 0, 1, 1], 2).unwrap();
        assert!((dbi_exact(&p, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dbi_needs_two_clusters() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let a = ClusterAssignment::from_labels(&p, vec![0, 0], 1).unwrap();
        assert!(dbi_exact(&p, &a).is_err());
        assert!(matches!(
            ClusterAssignment::from_labels(&p, vec![0, 0], 2),
            Err(Error::EmptyCluster { cluster: 1 })
        ));
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        // I = (2/3) ln 2, H = ln 3 and ln 2
        let v = nmi(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((v - 0.5158).abs() < 1e-3, "{v}");
        let g = nmi_with(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 1], NmiNorm::Geometric).unwrap();
        let expected = (2.0 / 3.0) * 2f64.ln() / (3f64.ln() * 2f64.ln()).sqrt();
        assert!((g - expected).abs() < 1e-12);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn rand_index_examples() {
        assert_eq!(rand_index(&[0, 1, 1, 2], &[5, 6, 6, 7]).unwrap(), 1.0);
        assert!((rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(rand_index(&[0, 0, 0], &[4, 4, 4]).unwrap(), 1.0);
        assert!(rand_index(&[0], &[0]).is_err());
    }

    fn labels(max: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0..max, 2..30)
    }

    proptest! {
        #[test]
        fn indices_symmetric_and_permutation_invariant(a in labels(4), seed in 0u64..1000) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, x)| (x + (i as u64 * seed % 3) as usize) % 4).collect();
            let perm = |l: &[usize]| l.iter().map(|x| (x + 1) % 4).collect::<Vec<_>>();
            let n1 = nmi(&a, &b).unwrap();
            prop_assert!((n1 - nmi(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((n1 - nmi(&perm(&a), &b).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&n1));
            let r1 = rand_index(&a, &b).unwrap();
            prop_assert!((r1 - rand_index(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((r1 - rand_index(&a, &perm(&b)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn inertia_non_increasing(raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..40), c in 2usize..4, seed in 0u64..50) {
            let p = pts(&raw);
            let (_, trace) = kmeans_traced(&p, c, seed, 100).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }

        #[test]
        fn dbi_translation_and_scale_invariant(
            raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 6..30),
            shift in -10.0f64..10.0, scale in 0.1f64..10.0,
        ) {
            let p = pts(&raw);
            let a = kmeans(&p, 3, 1, 100).unwrap();
            let d = dbi_exact(&p, &a).unwrap();
            prop_assume!(a.centroids.iter().enumerate().all(|(i, c)| a.centroids[i + 1..].iter().all(|o| sq_dist(c, o) > 1e-6)));
            let moved: Vec<Vec<f64>> = p.iter().map(|v| v.iter().map(|x| scale * x + shift).collect()).collect();
            let b = ClusterAssignment::from_labels(&moved, a.labels.clone(), 3).unwrap();
            let d2 = dbi_exact(&moved, &b).unwrap();
            prop_assert!((d - d2).abs() < 1e-6 * d.max(1.0));
        }
    }
}
