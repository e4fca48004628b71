//! A small define-by-run reverse-mode differentiation graph over dense `f64`
//! tensors.
//!
//! Every forward evaluation builds a fresh [`Graph`]. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward pass is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stack equal-length rows into an `[rows, cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Split along the first axis.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let n = self.shape.first().copied().unwrap_or(0);
        if n == 0 {
            return Vec::new();
        }
        self.data.chunks(self.data.len() / n).map(<[f64]>::to_vec).collect()
    }

    fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Handle to a node of one particular graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    LeakyRelu(usize, f64),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SelectRows(usize, Vec<usize>),
    RowSumSquares(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    SmoothMax(usize, f64),
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        dilation: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    LastStep(usize),
    Interpolate(usize, Vec<(usize, f64)>),
    WindowDist {
        shapelet: usize,
        window: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every node that needs them.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros-free `None` when the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        assert_eq!(var.graph, self.graph, "variable from another graph");
        self.grads[var.index].as_deref()
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached nodes.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Contract(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable used with a graph that did not create it");
        v.index
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A trainable leaf; gradients are tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn unary(&mut self, a: Var, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let ai = self.idx(a);
        let x = self.val(ai);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        let needs = self.needs(&[ai]);
        self.push(value, op(ai), needs)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        op: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (x, y) = (self.val(ai), self.val(bi));
        if x.shape != y.shape {
            return Err(shape_err(name, format!("{:?} vs {:?}", x.shape, y.shape)));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        };
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(value, op(ai, bi), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |i| Op::Scale(i, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar, |v| v + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln, f64::ln)
    }

    /// Square root with gradient taken as zero at the origin.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |i| Op::LeakyRelu(i, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.val(ai).data.iter().sum();
        let needs = self.needs(&[ai]);
        self.push(Tensor::scalar(s), Op::Sum(ai), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let x = self.val(ai);
        if x.data.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let m = x.data.iter().sum::<f64>() / x.data.len() as f64;
        let needs = self.needs(&[ai]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ai), needs))
    }

    /// Average of the rows of an `[n, d]` tensor, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let x = self.val(ai);
        if x.shape.len() != 2 || x.shape[0] == 0 {
            return Err(shape_err("mean_rows", format!("needs non-empty [n, d], got {:?}", x.shape)));
        }
        let (n, d) = (x.shape[0], x.shape[1]);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&x.data[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let needs = self.needs(&[ai]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(ai), needs))
    }

    /// Gather rows (first-axis slices), repetition allowed.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ai = self.idx(a);
        let x = self.val(ai);
        if x.shape.is_empty() {
            return Err(shape_err("select_rows", "scalar input".into()));
        }
        let n = x.shape[0];
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("select_rows", format!("row {bad} of {n}")));
        }
        let w = x.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&x.data[r * w..(r + 1) * w]);
        }
        let mut shape = x.shape.clone();
        shape[0] = rows.len();
        let needs = self.needs(&[ai]);
        Ok(self.push(Tensor { shape, data }, Op::SelectRows(ai, rows.to_vec()), needs))
    }

    /// Squared L2 norm of each row of `[n, d]`, giving `[n]`.
    pub fn row_sum_squares(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let x = self.val(ai);
        if x.shape.len() != 2 {
            return Err(shape_err("row_sum_squares", format!("needs [n, d], got {:?}", x.shape)));
        }
        let d = x.shape[1];
        let out: Vec<f64> = (0..x.shape[0])
            .map(|r| x.data[r * d..(r + 1) * d].iter().map(|v| v * v).sum())
            .collect();
        let needs = self.needs(&[ai]);
        Ok(self.push(Tensor::vector(out), Op::RowSumSquares(ai), needs))
    }

    /// Flatten and join into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let data: Vec<f64> = idx.iter().flat_map(|&i| self.val(i).data.iter().copied()).collect();
        let needs = self.needs(&idx);
        self.push(Tensor::vector(data), Op::Concat(idx), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ai = self.idx(a);
        let value = Tensor::new(shape, self.val(ai).data.clone())?;
        let needs = self.needs(&[ai]);
        Ok(self.push(value, Op::Reshape(ai), needs))
    }

    /// Softmax-weighted average `sum v e^(a v) / sum e^(a v)`, evaluated with a
    /// max shift.
    pub fn smooth_max(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let ai = self.idx(a);
        let v = &self.val(ai).data;
        if v.is_empty() {
            return Err(shape_err("smooth_max", "empty input".into()));
        }
        let (y, _) = smooth_max_weights(v, alpha);
        let needs = self.needs(&[ai]);
        Ok(self.push(Tensor::scalar(y), Op::SmoothMax(ai, alpha), needs))
    }

    /// Causal dilated 1-D convolution: input `[B, Cin, L]`, weight
    /// `[Cout, Cin, K]`, bias `[Cout]`. Output position `t` reads inputs at
    /// `t - (K-1-k)*dilation` for tap `k`; taps before the start read zero.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (ii, wi, bi) = (self.idx(input), self.idx(weight), self.idx(bias));
        let (x, w, b) = (self.val(ii), self.val(wi), self.val(bi));
        if x.shape.len() != 3 || w.shape.len() != 3 || b.shape != [w.shape[0]] || w.shape[1] != x.shape[1] {
            return Err(shape_err(
                "conv1d",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape, w.shape, b.shape),
            ));
        }
        if dilation == 0 {
            return Err(shape_err("conv1d", "dilation must be positive".into()));
        }
        let (bs, cin, len) = (x.shape[0], x.shape[1], x.shape[2]);
        let (cout, k) = (w.shape[0], w.shape[2]);
        let mut out = vec![0.0; bs * cout * len];
        for n in 0..bs {
            for o in 0..cout {
                let y = &mut out[(n * cout + o) * len..(n * cout + o + 1) * len];
                y.iter_mut().for_each(|v| *v = b.data[o]);
                for c in 0..cin {
                    let xr = &x.data[(n * cin + c) * len..(n * cin + c + 1) * len];
                    for tap in 0..k {
                        let shift = (k - 1 - tap) * dilation;
                        if shift >= len {
                            continue;
                        }
                        let wv = w.data[(o * cin + c) * k + tap];
                        for (yv, xv) in y[shift..].iter_mut().zip(&xr[..len - shift]) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[ii, wi, bi]);
        Ok(self.push(
            Tensor {
                shape: vec![bs, cout, len],
                data: out,
            },
            Op::Conv1d {
                input: ii,
                weight: wi,
                bias: bi,
                dilation,
            },
            needs,
        ))
    }

    /// Affine map of rows: input `[B, Din]`, weight `[Dout, Din]`, bias `[Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ii, wi, bi) = (self.idx(input), self.idx(weight), self.idx(bias));
        let (x, w, b) = (self.val(ii), self.val(wi), self.val(bi));
        if x.shape.len() != 2 || w.shape.len() != 2 || w.shape[1] != x.shape[1] || b.shape != [w.shape[0]] {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape, w.shape, b.shape),
            ));
        }
        let (bs, din, dout) = (x.shape[0], x.shape[1], w.shape[0]);
        let mut out = vec![0.0; bs * dout];
        for n in 0..bs {
            let xr = &x.data[n * din..(n + 1) * din];
            for o in 0..dout {
                let wr = &w.data[o * din..(o + 1) * din];
                out[n * dout + o] = b.data[o] + wr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        let needs = self.needs(&[ii, wi, bi]);
        Ok(self.push(
            Tensor {
                shape: vec![bs, dout],
                data: out,
            },
            Op::Linear {
                input: ii,
                weight: wi,
                bias: bi,
            },
            needs,
        ))
    }

    /// Final time step of `[B, C, L]`, giving `[B, C]`.
    pub fn last_step(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let x = self.val(ai);
        if x.shape.len() != 3 {
            return Err(shape_err("last_step", format!("needs [B, C, L], got {:?}", x.shape)));
        }
        let (bs, c, len) = (x.shape[0], x.shape[1], x.shape[2]);
        let data = (0..bs * c).map(|r| x.data[r * len + len - 1]).collect();
        let needs = self.needs(&[ai]);
        Ok(self.push(
            Tensor {
                shape: vec![bs, c],
                data,
            },
            Op::LastStep(ai),
            needs,
        ))
    }

    /// Linear interpolation of each row of `[B, Lin]` onto `weights.len()`
    /// points, where `weights[i] = (lo, w)` gives `x[lo](1-w) + x[lo+1] w`.
    pub fn interpolate(&mut self, a: Var, weights: Vec<(usize, f64)>) -> Result<Var> {
        let ai = self.idx(a);
        let x = self.val(ai);
        if x.shape.len() != 2 {
            return Err(shape_err("interpolate", format!("needs [B, L], got {:?}", x.shape)));
        }
        let (bs, lin) = (x.shape[0], x.shape[1]);
        if weights.iter().any(|&(lo, w)| lo >= lin || (w != 0.0 && lo + 1 >= lin)) {
            return Err(shape_err("interpolate", "weights index past the input".into()));
        }
        let lout = weights.len();
        let mut data = Vec::with_capacity(bs * lout);
        for n in 0..bs {
            let r = &x.data[n * lin..(n + 1) * lin];
            for &(lo, w) in &weights {
                data.push(if w == 0.0 { r[lo] } else { r[lo] * (1.0 - w) + r[lo + 1] * w });
            }
        }
        let needs = self.needs(&[ai]);
        Ok(self.push(
            Tensor {
                shape: vec![bs, lout],
                data,
            },
            Op::Interpolate(ai, weights),
            needs,
        ))
    }

    /// Best-match distance of a `[L]` sequence against a constant longer
    /// series. The winning alignment is fixed at evaluation time and the
    /// gradient flows through that window only.
    pub fn window_dist(&mut self, shapelet: Var, series: &[f64]) -> Result<Var> {
        let si = self.idx(shapelet);
        let s = &self.val(si).data;
        let m = crate::distance::best_match(s, series)?;
        let needs = self.needs(&[si]);
        Ok(self.push(
            Tensor::scalar(m.distance),
            Op::WindowDist {
                shapelet: si,
                window: series[m.offset..m.offset + s.len()].to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Contract(
                "backward on a value that was not produced by this graph's forward pass".into(),
            ));
        }
        let root = loss.index;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].needs_grad {
                return;
            }
            let len = nodes[target].value.len();
            let buf = grads[target].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (x, z) = (&nodes[*a].value.data, &nodes[*b].value.data);
                acc(*a, &mut |d| {
                    for ((d, g), z) in d.iter_mut().zip(g).zip(z) {
                        *d += g * z;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (x, z) = (&nodes[*a].value.data, &nodes[*b].value.data);
                acc(*a, &mut |d| {
                    for ((d, g), z) in d.iter_mut().zip(g).zip(z) {
                        *d += g / z;
                    }
                });
                acc(*b, &mut |d| {
                    for (((d, g), x), z) in d.iter_mut().zip(g).zip(x).zip(z) {
                        *d -= g * x / (z * z);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::AddScalar(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Exp(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }),
            Op::Ln(a) => {
                let x = &nodes[*a].value.data;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    if *y > 0.0 {
                        *d += g * 0.5 / y;
                    }
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let x = &nodes[*a].value.data;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += if *x > 0.0 { *g } else { g * slope };
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanRows(a) => {
                let shape = &nodes[*a].value.shape;
                let (n, dim) = (shape[0], shape[1]);
                acc(*a, &mut |d| {
                    for r in 0..n {
                        for (d, g) in d[r * dim..(r + 1) * dim].iter_mut().zip(g) {
                            *d += g / n as f64;
                        }
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let w = nodes[*a].value.row_len();
                acc(*a, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, g) in d[r * w..(r + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                            *d += g;
                        }
                    }
                });
            }
            Op::RowSumSquares(a) => {
                let x = &nodes[*a].value;
                let dim = x.shape[1];
                acc(*a, &mut |d| {
                    for (r, g) in g.iter().enumerate() {
                        for (d, x) in d[r * dim..(r + 1) * dim].iter_mut().zip(&x.data[r * dim..(r + 1) * dim]) {
                            *d += 2.0 * g * x;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |d| d.iter_mut().zip(slice).for_each(|(d, g)| *d += g));
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::SmoothMax(a, alpha) => {
                let v = &nodes[*a].value.data;
                let (out, p) = smooth_max_weights(v, *alpha);
                acc(*a, &mut |d| {
                    for ((d, p), v) in d.iter_mut().zip(&p).zip(v) {
                        *d += g[0] * p * (1.0 + alpha * (v - out));
                    }
                });
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            } => {
                let (x, w) = (&nodes[*input].value, &nodes[*weight].value);
                let (bs, cin, len) = (x.shape[0], x.shape[1], x.shape[2]);
                let (cout, k) = (w.shape[0], w.shape[2]);
                acc(*bias, &mut |d| {
                    for n in 0..bs {
                        for (o, d) in d.iter_mut().enumerate() {
                            *d += g[(n * cout + o) * len..(n * cout + o + 1) * len].iter().sum::<f64>();
                        }
                    }
                });
                acc(*weight, &mut |d| {
                    for n in 0..bs {
                        for o in 0..cout {
                            let gr = &g[(n * cout + o) * len..(n * cout + o + 1) * len];
                            for c in 0..cin {
                                let xr = &x.data[(n * cin + c) * len..(n * cin + c + 1) * len];
                                for tap in 0..k {
                                    let shift = (k - 1 - tap) * dilation;
                                    if shift >= len {
                                        continue;
                                    }
                                    let s: f64 = gr[shift..].iter().zip(&xr[..len - shift]).map(|(a, b)| a * b).sum();
                                    d[(o * cin + c) * k + tap] += s;
                                }
                            }
                        }
                    }
                });
                acc(*input, &mut |d| {
                    for n in 0..bs {
                        for o in 0..cout {
                            let gr = &g[(n * cout + o) * len..(n * cout + o + 1) * len];
                            for c in 0..cin {
                                let dr = &mut d[(n * cin + c) * len..(n * cin + c + 1) * len];
                                for tap in 0..k {
                                    let shift = (k - 1 - tap) * dilation;
                                    if shift >= len {
                                        continue;
                                    }
                                    let wv = w.data[(o * cin + c) * k + tap];
                                    for (dv, gv) in dr[..len - shift].iter_mut().zip(&gr[shift..]) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (&nodes[*input].value, &nodes[*weight].value);
                let (bs, din, dout) = (x.shape[0], x.shape[1], w.shape[0]);
                acc(*bias, &mut |d| {
                    for n in 0..bs {
                        for (d, g) in d.iter_mut().zip(&g[n * dout..(n + 1) * dout]) {
                            *d += g;
                        }
                    }
                });
                acc(*weight, &mut |d| {
                    for n in 0..bs {
                        let xr = &x.data[n * din..(n + 1) * din];
                        for o in 0..dout {
                            let gv = g[n * dout + o];
                            for (d, x) in d[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *d += gv * x;
                            }
                        }
                    }
                });
                acc(*input, &mut |d| {
                    for n in 0..bs {
                        let dr = &mut d[n * din..(n + 1) * din];
                        for o in 0..dout {
                            let gv = g[n * dout + o];
                            for (d, w) in dr.iter_mut().zip(&w.data[o * din..(o + 1) * din]) {
                                *d += gv * w;
                            }
                        }
                    }
                });
            }
            Op::LastStep(a) => {
                let len = nodes[*a].value.shape[2];
                acc(*a, &mut |d| {
                    for (r, g) in g.iter().enumerate() {
                        d[r * len + len - 1] += g;
                    }
                });
            }
            Op::Interpolate(a, weights) => {
                let lin = nodes[*a].value.shape[1];
                let lout = weights.len();
                acc(*a, &mut |d| {
                    for (n, gr) in g.chunks(lout).enumerate() {
                        let dr = &mut d[n * lin..(n + 1) * lin];
                        for (&(lo, w), gv) in weights.iter().zip(gr) {
                            if w == 0.0 {
                                dr[lo] += gv;
                            } else {
                                dr[lo] += gv * (1.0 - w);
                                dr[lo + 1] += gv * w;
                            }
                        }
                    }
                });
            }
            Op::WindowDist { shapelet, window } => {
                let s = &nodes[*shapelet].value.data;
                let scale = 2.0 / s.len() as f64;
                acc(*shapelet, &mut |d| {
                    for ((d, sv), tv) in d.iter_mut().zip(s).zip(window) {
                        *d += g[0] * scale * (sv - tv);
                    }
                });
            }
        }
    }
}

/// Value and softmax weights of the smooth maximum.
pub(crate) fn smooth_max_weights(v: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| (alpha * (x - max)).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.into_iter().map(|w| w / z).collect();
    let y = max + p.iter().zip(v).map(|(p, v)| p * (v - max)).sum::<f64>();
    (y, p)
}
