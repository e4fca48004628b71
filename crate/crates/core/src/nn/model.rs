//! Causal dilated convolutional encoder and its mirrored decoder.
//!
//! Encoder: `depth` causal conv layers (dilations 1, 2, 4, ...) with leaky
//! rectifiers and residual connections after the first, then a linear head on
//! the final time step. Decoder: linear lift from the embedding to a
//! `[channels, G]` feature map, the conv stack with dilations reversed, and a
//! 1x1 conv down to one output channel.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub grid_len: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Configured depth; see [`ArchConfig::effective_depth`].
    pub depth: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            grid_len: 32,
            channels: 40,
            kernel: 3,
            depth: 10,
            embedding_dim: 16,
            leaky_slope: 0.01,
        }
    }
}

impl ArchConfig {
    /// `min(depth, ceil(log2 G) + 1)`: enough layers for the receptive field to
    /// cover the grid, no more.
    pub fn effective_depth(&self) -> usize {
        let covering = (self.grid_len.max(2) as f64).log2().ceil() as usize + 1;
        self.depth.min(covering).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_len < 2 || self.channels == 0 || self.kernel == 0 || self.depth == 0 || self.embedding_dim == 0 {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k, e, g) = (self.channels, self.kernel, self.embedding_dim, self.grid_len);
        let depth = self.effective_depth();
        let mut shapes = Vec::new();
        for l in 0..depth {
            let cin = if l == 0 { 1 } else { c };
            shapes.push((format!("enc.conv{l}.weight"), vec![c, cin, k]));
            shapes.push((format!("enc.conv{l}.bias"), vec![c]));
        }
        shapes.push(("enc.head.weight".into(), vec![e, c]));
        shapes.push(("enc.head.bias".into(), vec![e]));
        shapes.push(("dec.lift.weight".into(), vec![c * g, e]));
        shapes.push(("dec.lift.bias".into(), vec![c * g]));
        for l in 0..depth {
            shapes.push((format!("dec.conv{l}.weight"), vec![c, c, k]));
            shapes.push((format!("dec.conv{l}.bias"), vec![c]));
        }
        shapes.push(("dec.out.weight".into(), vec![1, c, 1]));
        shapes.push(("dec.out.bias".into(), vec![1]));
        shapes
    }
}

/// All trainable tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    arch: ArchConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameters registered on one graph, in the model's order.
pub struct ParamVars(pub Vec<Var>);

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    arch: ArchConfig,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Autoencoder {
    /// Kaiming-uniform weights and biases with fan-in scaling: both drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, &[0x1417]);
        let shapes = arch.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        let mut fan_in = 1;
        for (name, shape) in &shapes {
            if name.ends_with("weight") {
                fan_in = shape[1..].iter().product::<usize>().max(1);
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Self {
            arch,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    /// Every parameter zero.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        Ok(Self {
            arch,
            params: shapes.iter().map(|(_, s)| Tensor::zeros(s.clone())).collect(),
            names: shapes.into_iter().map(|(n, _)| n).collect(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.params.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Register parameters as constants (inference only).
    pub fn register_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.params.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Encoder on a `[B, G]` batch, giving `[B, E]`. Also returns each conv
    /// layer's `[B, C, G]` activations.
    pub fn encode_graph(&self, g: &mut Graph, p: &ParamVars, batch: Var) -> Result<(Var, Vec<Var>)> {
        let shape = g.value(batch).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.arch.grid_len {
            return Err(Error::Contract(format!(
                "encoder expects [B, {}], got {shape:?}",
                self.arch.grid_len
            )));
        }
        let depth = self.arch.effective_depth();
        let mut h = g.reshape(batch, vec![shape[0], 1, shape[1]])?;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let conv = g.conv1d(h, p.0[2 * l], p.0[2 * l + 1], 1 << l)?;
            let act = g.leaky_relu(conv, self.arch.leaky_slope);
            h = if l == 0 { act } else { g.add(act, h)? };
            layers.push(h);
        }
        let last = g.last_step(h)?;
        let emb = g.linear(last, p.0[2 * depth], p.0[2 * depth + 1])?;
        Ok((emb, layers))
    }

    /// Decoder on `[B, E]`, giving `[B, G]`.
    pub fn decode_graph(&self, g: &mut Graph, p: &ParamVars, emb: Var) -> Result<Var> {
        let shape = g.value(emb).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.arch.embedding_dim {
            return Err(Error::Contract(format!(
                "decoder expects [B, {}], got {shape:?}",
                self.arch.embedding_dim
            )));
        }
        let depth = self.arch.effective_depth();
        let base = 2 * depth + 2;
        let (c, gl) = (self.arch.channels, self.arch.grid_len);
        let lifted = g.linear(emb, p.0[base], p.0[base + 1])?;
        let mut h = g.reshape(lifted, vec![shape[0], c, gl])?;
        h = g.leaky_relu(h, self.arch.leaky_slope);
        for l in 0..depth {
            let w = p.0[base + 2 + 2 * l];
            let b = p.0[base + 3 + 2 * l];
            let conv = g.conv1d(h, w, b, 1 << (depth - 1 - l))?;
            let act = g.leaky_relu(conv, self.arch.leaky_slope);
            h = g.add(act, h)?;
        }
        let out = g.conv1d(h, p.0[base + 2 + 2 * depth], p.0[base + 3 + 2 * depth], 1)?;
        g.reshape(out, vec![shape[0], gl])
    }

    fn check_finite(g: &Graph, v: Var, context: &str) -> Result<()> {
        if g.value(v).data().iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    fn encode_chunk(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.register_frozen(&mut g);
        let x = g.constant(Tensor::from_rows(rows)?);
        let (emb, layers) = self.encode_graph(&mut g, &p, x)?;
        for (l, v) in layers.iter().enumerate() {
            Self::check_finite(&g, *v, &format!("encoder layer {l}"))?;
        }
        Self::check_finite(&g, emb, "encoder head")?;
        Ok(g.value(emb).rows())
    }

    fn decode_chunk(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.register_frozen(&mut g);
        let e = g.constant(Tensor::from_rows(rows)?);
        let out = self.decode_graph(&mut g, &p, e)?;
        Self::check_finite(&g, out, "decoder output")?;
        Ok(g.value(out).rows())
    }

    /// Embed every grid view. Chunks run in parallel; each row's result does
    /// not depend on how rows are chunked.
    pub fn encode(&self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<Vec<Vec<f64>>> = batch
            .par_chunks(64)
            .map(|c| self.encode_chunk(c))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn decode(&self, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<Vec<Vec<f64>>> = embeddings
            .par_chunks(64)
            .map(|c| self.decode_chunk(c))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Per-layer encoder activations `[B, C, G]` for inspection.
    pub fn encoder_activations(&self, batch: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.register_frozen(&mut g);
        let x = g.constant(Tensor::from_rows(batch)?);
        let (_, layers) = self.encode_graph(&mut g, &p, x)?;
        Ok(layers.iter().map(|v| g.value(*v).clone()).collect())
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let bad = |message: String| Error::Artifact {
            path: origin.to_string(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", ck.version)));
        }
        let mut model = Self::zeros(ck.arch)?;
        if ck.params.len() != model.params.len() {
            return Err(bad(format!(
                "{} tensors, architecture needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for ((slot, name), saved) in model.params.iter_mut().zip(&model.names).zip(ck.params) {
            if &saved.name != name || saved.shape != slot.shape() {
                return Err(bad(format!("tensor {} does not match {name}", saved.name)));
            }
            *slot = Tensor::new(saved.shape, saved.data)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Plain gradient descent: `w <- w - lr * g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Contract("gradient shape does not match parameter".into()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            grid_len: 8,
            channels: 3,
            kernel: 3,
            depth: 10,
            embedding_dim: 4,
            leaky_slope: 0.01,
        }
    }

    #[test]
    fn effective_depth_covers_grid() {
        assert_eq!(ArchConfig::default().effective_depth(), 6);
        assert_eq!(tiny().effective_depth(), 4);
        let shallow = ArchConfig { depth: 2, ..ArchConfig::default() };
        assert_eq!(shallow.effective_depth(), 2);
    }

    #[test]
    fn zero_weights_give_bias_embeddings() {
        let mut m = Autoencoder::zeros(tiny()).unwrap();
        let head_bias = 2 * m.arch().effective_depth() + 1;
        m.params_mut()[head_bias].data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let out_bias = m.params().len() - 1;
        m.params_mut()[out_bias].data_mut()[0] = 0.75;
        let batch = vec![vec![1.0; 8], (0..8).map(|x| x as f64).collect()];
        for e in m.encode(&batch).unwrap() {
            assert_eq!(e, vec![0.5, -1.0, 2.0, 0.25]);
        }
        for d in m.decode(&[vec![3.0; 4]]).unwrap() {
            assert_eq!(d, vec![0.75; 8]);
        }
    }

    #[test]
    fn batching_does_not_change_outputs() {
        let m = Autoencoder::init(tiny(), 3).unwrap();
        let batch: Vec<Vec<f64>> = (0..5).map(|i| (0..8).map(|t| ((i * 8 + t) as f64).sin()).collect()).collect();
        let together = m.encode(&batch).unwrap();
        for (row, expected) in batch.iter().zip(&together) {
            let alone = m.encode(std::slice::from_ref(row)).unwrap();
            for (a, b) in alone[0].iter().zip(expected) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let dec = m.decode(&together).unwrap();
        let one = m.decode(&together[2..3]).unwrap();
        for (a, b) in one[0].iter().zip(&dec[2]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Autoencoder::init(tiny(), 11).unwrap();
        let back = Autoencoder::from_json(&m.to_json(), "mem").unwrap();
        assert_eq!(back, m);
        let batch = vec![vec![0.3; 8]];
        assert_eq!(back.encode(&batch).unwrap(), m.encode(&batch).unwrap());
    }

    #[test]
    fn checkpoint_rejects_other_arch() {
        let m = Autoencoder::init(tiny(), 11).unwrap();
        let text = m.to_json().replace("\"channels\":3", "\"channels\":4");
        assert!(Autoencoder::from_json(&text, "mem").is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = vec![Tensor::scalar(1.0)];
        sgd_step(&mut p, &[vec![2.0]], 0.001).unwrap();
        assert!((p[0].item() - 0.998).abs() < 1e-15);
        let before = p[0].item();
        sgd_step(&mut p, &[vec![0.0]], 0.5).unwrap();
        assert_eq!(p[0].item(), before);
        assert!(sgd_step(&mut p, &[vec![0.0, 1.0]], 0.5).is_err());
    }
}
