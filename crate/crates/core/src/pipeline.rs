//! End-to-end: joint autoencoder training, diversity ranking, shapelet
//! emission, and clustering in the transformed space.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::candidates::{generate_candidates, restore_from_grid, Candidate, CandidateConfig, DEFAULT_CELL_CAP, DEFAULT_RATIOS};
use crate::cluster::{dbi_exact, kmeans, kmeans_best_of, nmi, rand_index, sq_dist, ClusterAssignment};
use crate::data::Dataset;
use crate::distance::{transform, TransformedDataset};
use crate::error::{Error, Result};
use crate::losses::{
    dbi_loss, diversity_loss, overall_loss, overall_loss_graph, reconstruction_loss, triplet_loss, EpochLoss, LossParts,
    TripletBatch, TripletParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_MARGIN,
};
use crate::nn::{sgd_step, ArchConfig, Autoencoder, Graph, Tensor, Var};
use crate::rng::{derive_seed, rng_for};
use crate::shapelet::{Provenance, Shapelet};

pub const DEFAULT_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Gradient steps per epoch.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Number of shapelets to emit.
    pub k: usize,
    pub ratios: Vec<f64>,
    pub alpha: f64,
    pub margin: f64,
    pub beta: f64,
    pub arch: ArchConfig,
    pub stride: Option<usize>,
    pub per_cell_cap: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Clusters for the in-training DBI term.
    pub dbi_clusters: usize,
    /// Candidates embedded when refreshing the provisional shapelets.
    pub provisional_pool: usize,
    pub seed: u64,
    pub use_triplet: bool,
    pub use_diversity: bool,
    pub use_dbi: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batches_per_epoch: 16,
            batch_size: 10,
            learning_rate: 0.001,
            lambda: DEFAULT_LAMBDA,
            k: 5,
            ratios: DEFAULT_RATIOS.to_vec(),
            alpha: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            beta: DEFAULT_BETA,
            arch: ArchConfig::default(),
            stride: None,
            per_cell_cap: DEFAULT_CELL_CAP,
            positives: 4,
            negatives: 4,
            dbi_clusters: 2,
            provisional_pool: 256,
            seed: 0,
            use_triplet: true,
            use_diversity: true,
            use_dbi: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("shapelet count k must be at least 1".into());
        }
        if self.batches_per_epoch == 0 {
            return bad("batches per epoch must be positive".into());
        }
        if self.positives == 0 || self.negatives == 0 {
            return bad("need at least one positive and one negative per batch".into());
        }
        if self.batch_size < 1 + self.positives + self.negatives {
            return bad(format!(
                "batch size {} cannot hold 1 anchor, {} positives and {} negatives",
                self.batch_size, self.positives, self.negatives
            ));
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("alpha", self.alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("margin", self.margin), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.dbi_clusters < 2 {
            return bad("in-training DBI needs at least 2 clusters".into());
        }
        if self.provisional_pool < self.k {
            return bad("provisional pool must hold at least k candidates".into());
        }
        self.arch.validate()
    }

    fn candidate_config(&self) -> CandidateConfig {
        CandidateConfig {
            ratios: self.ratios.clone(),
            stride: self.stride,
            per_cell_cap: self.per_cell_cap,
            grid_len: self.arch.grid_len,
            seed: derive_seed(self.seed, &[1]),
        }
    }

    fn triplet_params(&self) -> TripletParams {
        TripletParams {
            margin: self.margin,
            beta: self.beta,
            alpha: self.alpha,
        }
    }
}

/// A candidate chosen by the diversity ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub id: usize,
    pub cluster_size: usize,
    pub spread: f64,
}

/// Cluster `embeddings` into `k` groups, take the member nearest each
/// centroid, and order those by descending cluster size, then descending
/// summed distance to the other representatives, then ascending id.
pub fn rank_by_diversity(embeddings: &[Vec<f64>], ids: &[usize], k: usize, seed: u64) -> Result<Vec<Ranked>> {
    if ids.len() != embeddings.len() {
        return Err(Error::Contract("one id per embedding required".into()));
    }
    if k == 0 || k > embeddings.len() {
        return Err(Error::Config(format!(
            "cannot select {k} shapelets from {} candidates",
            embeddings.len()
        )));
    }
    let assignment = kmeans(embeddings, k, seed, KMEANS_MAX_ITERS)?;
    let mut reps = Vec::with_capacity(k);
    for (c, members) in assignment.members().iter().enumerate() {
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = sq_dist(&embeddings[a], &assignment.centroids[c]);
                let db = sq_dist(&embeddings[b], &assignment.centroids[c]);
                da.total_cmp(&db).then(ids[a].cmp(&ids[b]))
            })
            .expect("clusters are non-empty");
        reps.push((best, assignment.sizes[c]));
    }
    let mut ranked: Vec<Ranked> = reps
        .iter()
        .map(|&(i, size)| Ranked {
            id: ids[i],
            cluster_size: size,
            spread: reps
                .iter()
                .filter(|&&(j, _)| j != i)
                .map(|&(j, _)| sq_dist(&embeddings[i], &embeddings[j]).sqrt())
                .sum(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.cluster_size
            .cmp(&a.cluster_size)
            .then(b.spread.total_cmp(&a.spread))
            .then(a.id.cmp(&b.id))
    });
    Ok(ranked)
}

#[derive(Debug, Clone)]
pub struct Discovery {
    pub shapelets: Vec<Shapelet>,
    pub loss_log: Vec<EpochLoss>,
    pub candidate_count: usize,
    pub model: Autoencoder,
}

struct Pools {
    by_variable: Vec<Vec<usize>>,
}

impl Pools {
    fn new(candidates: &[Candidate], variables: usize) -> Self {
        let mut by_variable = vec![Vec::new(); variables];
        for c in candidates {
            by_variable[c.variable()].push(c.id);
        }
        Self { by_variable }
    }
}

/// Anchor plus its nearest same-variable candidates as positives and a
/// sample from the farthest quartile as negatives.
fn sample_triplet(
    candidates: &[Candidate],
    pools: &Pools,
    positives: usize,
    negatives: usize,
    rng: &mut crate::rng::Rng,
) -> Option<Vec<usize>> {
    let anchor = rng.random_range(0..candidates.len());
    let pool = &pools.by_variable[candidates[anchor].variable()];
    let mut others: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&id| id != anchor)
        .map(|&id| (sq_dist(&candidates[anchor].grid, &candidates[id].grid), id))
        .collect();
    if others.len() < positives + negatives {
        return None;
    }
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut rows = vec![anchor];
    rows.extend(others[..positives].iter().map(|&(_, id)| id));
    let quartile = (others.len() / 4).max(negatives).min(others.len() - positives);
    let far = &others[others.len() - quartile..];
    let mut picked = index::sample(rng, far.len(), negatives).into_vec();
    picked.sort_unstable();
    rows.extend(picked.into_iter().map(|i| far[i].1));
    Some(rows)
}

fn grads_for(grads: &crate::nn::Gradients, vars: &[Var], params: &[Tensor]) -> Vec<Vec<f64>> {
    vars.iter().zip(params).map(|(v, t)| grads.get_or_zeros(*v, t.len())).collect()
}

/// Distances from each decoded grid row to each provisional shapelet grid,
/// as a differentiable `[B, k]` matrix.
fn provisional_transform(g: &mut Graph, decoded: Var, provisional: &[Vec<f64>]) -> Result<Var> {
    let shape = g.value(decoded).shape().to_vec();
    let (b, len) = (shape[0], shape[1]);
    let k = provisional.len();
    let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let x = g.select_rows(decoded, &rows)?;
    let s: Vec<f64> = (0..b).flat_map(|_| provisional.iter().flatten().copied()).collect();
    let s = g.constant(Tensor::new(vec![b * k, len], s)?);
    let diff = g.sub(x, s)?;
    let d = g.row_sum_squares(diff)?;
    let d = g.scale(d, 1.0 / len as f64);
    g.reshape(d, vec![b, k])
}

fn nearest_to_centroids(points: &[Vec<f64>], a: &ClusterAssignment) -> Vec<usize> {
    a.members()
        .iter()
        .enumerate()
        .map(|(c, m)| {
            *m.iter()
                .min_by(|&&x, &&y| sq_dist(&points[x], &a.centroids[c]).total_cmp(&sq_dist(&points[y], &a.centroids[c])))
                .expect("non-empty cluster")
        })
        .collect()
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    candidates: &'a [Candidate],
    pools: Pools,
    model: Autoencoder,
    provisional: Vec<Vec<f64>>,
}

impl Trainer<'_> {
    fn step(&mut self, epoch: usize, batch: usize) -> Result<Option<LossParts>> {
        let cfg = self.config;
        let mut rng = rng_for(cfg.seed, &[3, epoch as u64, batch as u64]);
        let Some(rows) = sample_triplet(self.candidates, &self.pools, cfg.positives, cfg.negatives, &mut rng) else {
            return Ok(None);
        };
        let b = rows.len();
        let grids: Vec<Vec<f64>> = rows.iter().map(|&id| self.candidates[id].grid.clone()).collect();

        let mut g = Graph::new();
        let p = self.model.register(&mut g);
        let x = g.constant(Tensor::from_rows(&grids)?);
        let (emb, _) = self.model.encode_graph(&mut g, &p, x)?;
        let decoded = self.model.decode_graph(&mut g, &p, emb)?;
        let recon = reconstruction_loss(&mut g, x, decoded)?;
        let mut parts = LossParts {
            reconstruction: g.value(recon).item(),
            ..Default::default()
        };

        let triplet = if cfg.use_triplet {
            let tb = TripletBatch {
                anchor: 0,
                positives: (1..=cfg.positives).collect(),
                negatives: (1 + cfg.positives..b).collect(),
            };
            let t = triplet_loss(&mut g, emb, &tb, cfg.triplet_params())?;
            (!t.degenerate).then(|| {
                parts.triplet = g.value(t.loss).item();
                t.loss
            })
        } else {
            None
        };

        let diversity = if cfg.use_diversity {
            let values = g.value(emb).rows();
            let y = cfg.k.clamp(2, b);
            let a = kmeans(&values, y, derive_seed(cfg.seed, &[6, epoch as u64, batch as u64]), KMEANS_MAX_ITERS)?;
            let reps = nearest_to_centroids(&values, &a);
            let r = g.select_rows(emb, &reps)?;
            let d = diversity_loss(&mut g, r, &a.sizes)?;
            parts.diversity = g.value(d).item();
            Some(d)
        } else {
            None
        };

        let dbi = if cfg.use_dbi {
            let features = provisional_transform(&mut g, decoded, &self.provisional)?;
            let values = g.value(features).rows();
            let c = cfg.dbi_clusters.min(b - 1);
            let seed = derive_seed(cfg.seed, &[7, epoch as u64, batch as u64]);
            match kmeans(&values, c, seed, KMEANS_MAX_ITERS)
                .and_then(|a| dbi_loss(&mut g, features, &a.labels, c, cfg.alpha))
            {
                Ok(d) if g.value(d).item().is_finite() => {
                    parts.dbi = g.value(d).item();
                    Some(d)
                }
                Ok(_) | Err(Error::EmptyCluster { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };

        let total = overall_loss_graph(&mut g, recon, triplet, diversity, dbi, cfg.lambda)?;
        if !g.value(total).item().is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at epoch {epoch}, batch {batch}"),
            });
        }
        let grads = g.backward(total)?;
        let grads = grads_for(&grads, &p.0, self.model.params());
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient at epoch {epoch}, batch {batch}"),
            });
        }
        sgd_step(self.model.params_mut(), &grads, cfg.learning_rate)?;
        Ok(Some(parts))
    }

    /// Re-rank a random subsample of candidates and decode the top k.
    fn refresh_provisional(&mut self, epoch: usize) -> Result<()> {
        let cfg = self.config;
        let mut rng = rng_for(cfg.seed, &[4, epoch as u64]);
        let n = self.candidates.len();
        let mut ids = index::sample(&mut rng, n, cfg.provisional_pool.min(n)).into_vec();
        ids.sort_unstable();
        let grids: Vec<Vec<f64>> = ids.iter().map(|&i| self.candidates[i].grid.clone()).collect();
        let emb = self.model.encode(&grids)?;
        let ranked = rank_by_diversity(&emb, &ids, cfg.k, derive_seed(cfg.seed, &[5, epoch as u64]))?;
        let chosen: Vec<Vec<f64>> = ranked
            .iter()
            .map(|r| emb[ids.binary_search(&r.id).expect("ranked id from pool")].clone())
            .collect();
        self.provisional = self.model.decode(&chosen)?;
        Ok(())
    }
}

/// Map a decoded grid back to its source candidate's length and scale.
pub fn restore_shapelet(grid: &[f64], source: &Candidate) -> Vec<f64> {
    let mut values = restore_from_grid(grid, source.len());
    let raw = &source.subsequence.values;
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-10 {
        values.iter_mut().for_each(|v| *v = mean);
    } else {
        values.iter_mut().for_each(|v| *v = *v * std + mean);
    }
    values
}

/// Train the autoencoder on the dataset's candidates and emit `k` shapelets.
/// Labels are never read.
pub fn discover_shapelets(dataset: &Dataset, config: &TrainConfig) -> Result<Discovery> {
    config.validate()?;
    let candidates = generate_candidates(dataset, &config.candidate_config())?;
    if candidates.is_empty() {
        return Err(Error::Config("no shapelet candidates: every length ratio is too short".into()));
    }
    if candidates.len() < config.k {
        return Err(Error::Config(format!(
            "only {} candidates for k = {}",
            candidates.len(),
            config.k
        )));
    }
    let model = Autoencoder::init(config.arch.clone(), derive_seed(config.seed, &[2]))?;
    let mut rng = rng_for(config.seed, &[4, u64::MAX]);
    let initial: Vec<Vec<f64>> = index::sample(&mut rng, candidates.len(), config.k)
        .into_iter()
        .map(|i| candidates[i].grid.clone())
        .collect();
    let mut trainer = Trainer {
        config,
        candidates: &candidates,
        pools: Pools::new(&candidates, dataset.variables()),
        model,
        provisional: initial,
    };

    let mut loss_log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = LossParts::default();
        let mut steps = 0usize;
        for batch in 0..config.batches_per_epoch {
            if let Some(p) = trainer.step(epoch, batch)? {
                sum.reconstruction += p.reconstruction;
                sum.triplet += p.triplet;
                sum.diversity += p.diversity;
                sum.dbi += p.dbi;
                steps += 1;
            }
        }
        let n = steps.max(1) as f64;
        let parts = LossParts {
            reconstruction: sum.reconstruction / n,
            triplet: sum.triplet / n,
            diversity: sum.diversity / n,
            dbi: sum.dbi / n,
        };
        log::debug!("epoch {epoch}: {parts:?}");
        loss_log.push(EpochLoss {
            epoch,
            parts,
            total: overall_loss(&parts, config.lambda),
        });
        if config.use_dbi {
            trainer.refresh_provisional(epoch)?;
        }
    }

    let model = trainer.model;
    let grids: Vec<Vec<f64>> = candidates.iter().map(|c| c.grid.clone()).collect();
    let embeddings = model.encode(&grids)?;
    let ids: Vec<usize> = candidates.iter().map(|c| c.id).collect();
    let ranked = rank_by_diversity(&embeddings, &ids, config.k, derive_seed(config.seed, &[5, u64::MAX]))?;
    let chosen: Vec<Vec<f64>> = ranked.iter().map(|r| embeddings[r.id].clone()).collect();
    let decoded = model.decode(&chosen)?;
    let shapelets = ranked
        .iter()
        .zip(decoded)
        .map(|(r, grid)| {
            let c = &candidates[r.id];
            let values = restore_shapelet(&grid, c);
            Shapelet {
                length: values.len(),
                values,
                variable: c.variable(),
                provenance: Some(Provenance {
                    candidate: c.id,
                    instance: c.subsequence.instance,
                    variable: c.variable(),
                    start: c.subsequence.start,
                    length: c.len(),
                }),
                cluster_size_at_selection: r.cluster_size,
                embedding: embeddings[r.id].clone(),
            }
        })
        .collect();
    Ok(Discovery {
        shapelets,
        loss_log,
        candidate_count: candidates.len(),
        model,
    })
}

/// Evaluation summary for one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nmi: Option<f64>,
    pub ri: Option<f64>,
    pub dbi: Option<f64>,
    pub inertia: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Artifact {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub transformed: TransformedDataset,
    pub assignment: ClusterAssignment,
    pub metrics: Metrics,
}

/// Shapelet-transform the dataset and cluster it with best-of-`restarts` k-means.
pub fn cluster_dataset(
    dataset: &Dataset,
    shapelets: &[Shapelet],
    clusters: usize,
    seed: u64,
    restarts: usize,
) -> Result<Clustering> {
    if shapelets.is_empty() {
        return Err(Error::Config("cannot cluster an empty shapelet transform".into()));
    }
    let transformed = transform(dataset, shapelets)?;
    let points = transformed.to_rows();
    let (assignment, _) = kmeans_best_of(&points, clusters, seed, KMEANS_MAX_ITERS, restarts)?;
    let truth = dataset.label_indices();
    let (nmi, ri) = match &truth {
        Some(t) => (Some(nmi(&assignment.labels, t)?), Some(rand_index(&assignment.labels, t)?)),
        None => (None, None),
    };
    let dbi = if clusters >= 2 {
        Some(dbi_exact(&points, &assignment)?)
    } else {
        None
    };
    let metrics = Metrics {
        nmi,
        ri,
        dbi,
        inertia: assignment.inertia,
        seed,
        restarts: restarts.max(1),
    };
    Ok(Clustering {
        transformed,
        assignment,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeriesInstance;

    fn blobs(sizes: &[usize], centers: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (&n, c) in sizes.iter().zip(centers) {
            for i in 0..n {
                let t = i as f64 * 0.37;
                out.push(vec![c[0] + 0.1 * t.sin(), c[1] + 0.1 * t.cos()]);
            }
        }
        out
    }

    #[test]
    fn larger_blob_ranks_first() {
        let e = blobs(&[3, 10], &[[0.0, 0.0], [20.0, 5.0]]);
        let ids: Vec<usize> = (0..e.len()).collect();
        let r = rank_by_diversity(&e, &ids, 2, 0).unwrap();
        assert!(r[0].id >= 3 && r[0].cluster_size == 10);
        assert!(r[1].id < 3 && r[1].cluster_size == 3);
    }

    #[test]
    fn identical_embeddings_rank_stably() {
        let e = vec![vec![1.0, 2.0]; 6];
        let ids: Vec<usize> = (10..16).collect();
        let a = rank_by_diversity(&e, &ids, 3, 4).unwrap();
        let b = rank_by_diversity(&e, &ids, 3, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].cluster_size >= w[1].cluster_size));
    }

    #[test]
    fn too_many_shapelets() {
        let e = vec![vec![0.0]; 2];
        assert!(matches!(rank_by_diversity(&e, &[0, 1], 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn prototypes_separate_perfectly() {
        let proto = [vec![0.0, 1.0, 0.0, -1.0, 0.0, 1.0], vec![3.0, 3.0, -3.0, -3.0, 3.0, 3.0]];
        let instances: Vec<TimeSeriesInstance> = (0..8)
            .map(|i| TimeSeriesInstance::new(format!("{i}"), vec![proto[i % 2].clone()]).unwrap())
            .collect();
        let labels = (0..8).map(|i| (i % 2).to_string()).collect();
        let ds = Dataset::new(instances, Some(labels)).unwrap();
        let shapelets: Vec<Shapelet> = proto.iter().map(|p| Shapelet::new(p.clone(), 0)).collect();
        let c = cluster_dataset(&ds, &shapelets, 2, 0, 10).unwrap();
        assert_eq!(c.metrics.nmi, Some(1.0));
        assert_eq!(c.metrics.ri, Some(1.0));
        assert!(matches!(cluster_dataset(&ds, &[], 2, 0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn restore_undoes_normalization() {
        let values = vec![2.0, 4.0, 6.0, 4.0];
        let ds = Dataset::new(
            vec![
                TimeSeriesInstance::new("a", vec![values.clone()]).unwrap(),
                TimeSeriesInstance::new("b", vec![values.clone()]).unwrap(),
            ],
            None,
        )
        .unwrap();
        let config = CandidateConfig {
            ratios: vec![1.0],
            grid_len: 4,
            ..Default::default()
        };
        let c = &generate_candidates(&ds, &config).unwrap()[0];
        let restored = restore_shapelet(&c.grid, c);
        for (r, v) in restored.iter().zip(&values) {
            assert!((r - v).abs() < 1e-12);
        }
    }
}
