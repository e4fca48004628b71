//! Encoder structure and optimizer behavior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapeclust::losses::reconstruction_loss;
use shapeclust::nn::graph::{Graph, Tensor};
use shapeclust::nn::model::{sgd_step, ArchConfig, Autoencoder};

#[test]
fn encoder_layers_are_causal() {
    let model = Autoencoder::init(ArchConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = model.encoder_activations(&[x.clone()]).unwrap();
    for t in [0, 7, 16, 31] {
        let mut y = x.clone();
        y[t] += 0.5;
        let moved = model.encoder_activations(&[y]).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            let (c, g) = (a.shape()[1], a.shape()[2]);
            for ch in 0..c {
                for s in 0..t {
                    assert_eq!(a.data()[ch * g + s], b.data()[ch * g + s], "position {s} saw step {t}");
                }
            }
        }
    }
}

#[test]
fn last_step_sees_the_whole_grid() {
    let model = Autoencoder::init(ArchConfig::default(), 5).unwrap();
    let x = vec![0.0; 32];
    let base = model.encode(&[x.clone()]).unwrap();
    for t in 0..32 {
        let mut y = x.clone();
        y[t] = 1.0;
        assert_ne!(model.encode(&[y]).unwrap(), base, "step {t} is outside the receptive field");
    }
}

#[test]
fn sgd_decreases_reconstruction_on_a_fixed_batch() {
    let arch = ArchConfig {
        channels: 8,
        embedding_dim: 4,
        ..Default::default()
    };
    let mut model = Autoencoder::init(arch, 2).unwrap();
    let batch: Vec<Vec<f64>> = (0..6)
        .map(|i| (0..32).map(|t| ((t as f64) * 0.2 + i as f64).sin()).collect())
        .collect();
    let loss_and_grads = |model: &Autoencoder| {
        let mut g = Graph::new();
        let p = model.register(&mut g);
        let x = g.constant(Tensor::from_rows(&batch).unwrap());
        let (emb, _) = model.encode_graph(&mut g, &p, x).unwrap();
        let dec = model.decode_graph(&mut g, &p, emb).unwrap();
        let loss = reconstruction_loss(&mut g, x, dec).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs: Vec<Vec<f64>> = p
            .0
            .iter()
            .zip(model.params())
            .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
            .collect();
        (g.value(loss).item(), gs)
    };
    let (first, _) = loss_and_grads(&model);
    let mut prev = first;
    for _ in 0..50 {
        let (loss, grads) = loss_and_grads(&model);
        assert!(loss <= prev + 1e-9, "{loss} > {prev}");
        prev = loss;
        sgd_step(model.params_mut(), &grads, 1e-3).unwrap();
    }
    assert!(prev < 0.9 * first, "{first} -> {prev}");
}
