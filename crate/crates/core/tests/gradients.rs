//! Analytic gradients of every objective and of the autoencoder against
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapeclust::losses::{dbi_loss, DEFAULT_ALPHA, diversity_loss, reconstruction_loss, triplet_loss, TripletBatch, TripletParams};
use shapeclust::nn::gradcheck::{check_gradients, rel_err};
use shapeclust::nn::graph::{Graph, Tensor, Var};
use shapeclust::nn::model::{ArchConfig, Autoencoder, ParamVars};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn triplet_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = random_tensor(&mut rng, vec![9, 3], 1.0);
        let batch = TripletBatch {
            anchor: 0,
            positives: vec![1, 2, 3, 4],
            negatives: vec![5, 6, 7, 8],
        };
        let params = TripletParams {
            alpha: 5.0,
            ..Default::default()
        };
        let r = check_gradients(&[emb], STEP, |g, v| Ok(triplet_loss(g, v[0], &batch, params)?.loss)).unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn smooth_max_losses_at_default_temperature() {
    let fine = 1e-5;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let emb = random_tensor(&mut rng, vec![9, 3], 1.0);
        let batch = TripletBatch {
            anchor: 0,
            positives: vec![1, 2, 3, 4],
            negatives: vec![5, 6, 7, 8],
        };
        let r = check_gradients(&[emb], fine, |g, v| {
            Ok(triplet_loss(g, v[0], &batch, TripletParams::default())?.loss)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "triplet seed {seed}: {r:?}");
        let points = random_tensor(&mut rng, vec![12, 2], 2.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let r = check_gradients(&[points], fine, |g, v| dbi_loss(g, v[0], &labels, 3, DEFAULT_ALPHA)).unwrap();
        assert!(r.max_rel_err < TOL, "dbi seed {seed}: {r:?}");
    }
}

#[test]
fn diversity_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let y = 2 + seed as usize % 4;
        let reps = random_tensor(&mut rng, vec![y, 3], 1.0);
        let sizes: Vec<usize> = (0..y).map(|_| rng.random_range(1..5)).collect();
        let r = check_gradients(&[reps], STEP, |g, v| diversity_loss(g, v[0], &sizes)).unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn reconstruction_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = random_tensor(&mut rng, vec![4, 8], 1.0);
        let y = random_tensor(&mut rng, vec![4, 8], 1.0);
        let r = check_gradients(&[x, y], STEP, |g, v| reconstruction_loss(g, v[0], v[1])).unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn dbi_gradients_with_fixed_assignment() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let clusters = 2 + seed as usize % 3;
        let n = 12;
        let points = random_tensor(&mut rng, vec![n, 2], 2.0);
        let labels: Vec<usize> = (0..n).map(|i| i % clusters).collect();
        let r = check_gradients(&[points], STEP, |g, v| dbi_loss(g, v[0], &labels, clusters, 5.0)).unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        grid_len: 8,
        channels: 3,
        kernel: 2,
        depth: 3,
        embedding_dim: 2,
        leaky_slope: 0.01,
    }
}

/// Central-difference check that skips coordinates whose perturbation crosses
/// an activation kink, detected by central differences that change with the step.
/// Returns (max relative error, checked, skipped).
fn check_piecewise<F>(inputs: &[Tensor], f: F) -> (f64, usize, usize)
where
    F: Fn(&mut Graph, &[Var]) -> shapeclust::Result<Var>,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut work = inputs.to_vec();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[t].len());
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            let mut central = |h: f64| {
                work[t].data_mut()[i] = orig + h;
                let up = eval(&work);
                work[t].data_mut()[i] = orig - h;
                let down = eval(&work);
                work[t].data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            };
            let (wide, narrow) = (central(STEP), central(STEP / 2.0));
            if rel_err(wide, narrow) > TOL / 10.0 {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic[i], wide));
            checked += 1;
        }
    }
    (worst, checked, skipped)
}

#[test]
fn autoencoder_gradients() {
    let arch = tiny_arch();
    for seed in 0..INSTANCES {
        let model = Autoencoder::init(arch.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = random_tensor(&mut rng, vec![5, arch.grid_len], 1.0);
        let mut inputs = model.params().to_vec();
        inputs.push(x);
        let n = model.params().len();
        let batch = TripletBatch {
            anchor: 0,
            positives: vec![1, 2],
            negatives: vec![3, 4],
        };
        let (worst, checked, skipped) = check_piecewise(&inputs, |g, v| {
            let p = ParamVars(v[..n].to_vec());
            let (emb, _) = model.encode_graph(g, &p, v[n])?;
            let dec = model.decode_graph(g, &p, emb)?;
            let recon = reconstruction_loss(g, v[n], dec)?;
            let t = triplet_loss(g, emb, &batch, TripletParams::default())?;
            let t = g.scale(t.loss, 0.01);
            g.add(recon, t)
        });
        assert!(worst < TOL, "seed {seed}: rel err {worst}");
        assert!(skipped * 20 <= checked + skipped, "seed {seed}: {skipped} kinks");
    }
}

#[test]
fn smooth_autoencoder_gradients() {
    let arch = ArchConfig {
        leaky_slope: 1.0,
        ..tiny_arch()
    };
    for seed in 0..INSTANCES {
        let model = Autoencoder::init(arch.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut inputs = model.params().to_vec();
        inputs.push(random_tensor(&mut rng, vec![3, arch.grid_len], 1.0));
        let n = model.params().len();
        let r = check_gradients(&inputs, STEP, |g, v| {
            let p = ParamVars(v[..n].to_vec());
            let (emb, _) = model.encode_graph(g, &p, v[n])?;
            let dec = model.decode_graph(g, &p, emb)?;
            reconstruction_loss(g, v[n], dec)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}
