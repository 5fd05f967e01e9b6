//! Dense feed-forward substrate: matrices, ReLU layers with optional
//! per-unit gates, analytic backprop, softmax cross-entropy and SGD with
//! classical momentum. Everything is `f64`.

use rand::Rng as _;

use crate::error::{input, shape, Error, Result};
use crate::par::{self, Exec};
use crate::rng::Rng;

/// Row count above which products are split across threads.
const PAR_ROWS: usize = 256;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Stack equal-length rows. An empty slice yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a 0-column matrix has no meaningful rows here.
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · otherᵀ`, i.e. `out[r][c] = <self.row(r), other.row(c)>`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        self.matmul_t_with(other, Exec::default())
    }

    pub fn matmul_t_with(&self, other: &Matrix, exec: Exec) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape(format!(
                "cannot multiply {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        let exec = if self.rows >= PAR_ROWS { exec } else { Exec::Sequential };
        par::for_each_chunk(exec, &mut out.data, other.rows, |r, dst| {
            let a = self.row(r);
            for (c, d) in dst.iter_mut().enumerate() {
                *d = dot(a, other.row(c));
            }
        });
        Ok(out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape(format!(
                "cannot multiply ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for b in 0..self.rows {
            let lhs = self.row(b);
            let rhs = other.row(b);
            for (o, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[o * other.cols..(o + 1) * other.cols];
                for (d, &x) in dst.iter_mut().zip(rhs) {
                    *d += a * x;
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Affine map `x ↦ W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weights: Matrix {
                rows: output,
                cols: input,
                data,
            },
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with(x, Exec::default())
    }

    pub fn forward_with(&self, x: &Matrix, exec: Exec) -> Result<Matrix> {
        let mut z = x.matmul_t_with(&self.weights, exec)?;
        for row in z.data.chunks_exact_mut(self.bias.len().max(1)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Gradients given the layer input and `∂L/∂z`; also returns `∂L/∂x`.
    pub fn backward(&self, x: &Matrix, grad_z: &Matrix) -> Result<(LinearGrad, Matrix)> {
        if grad_z.cols != self.output_dim() || grad_z.rows != x.rows {
            return Err(shape(format!(
                "upstream gradient {}x{} for a layer with output {} and batch {}",
                grad_z.rows,
                grad_z.cols,
                self.output_dim(),
                x.rows
            )));
        }
        let weights = grad_z.t_matmul(x)?;
        let mut bias = vec![0.0; self.output_dim()];
        for row in grad_z.iter_rows() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let grad_x = grad_z.matmul(&self.weights)?;
        Ok((LinearGrad { weights, bias }, grad_x))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Per-layer unit gates; `gates[l].len()` equals layer `l`'s width.
pub type Gates = [Vec<f64>];

/// ReLU feature extractor. Every layer, including the last, is
/// `h_l = relu(W_l h_{l-1} + b_l) ⊙ a_l` where `a_l` is an optional gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is what layer `l` consumed (`inputs[0]` is the batch).
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    /// Gated outputs; the last one is the feature matrix.
    pub post: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LinearGrad>,
    /// `∂L/∂a_l` summed over the batch. Empty when no gates were given.
    pub gates: Vec<Vec<f64>>,
}

impl Network {
    /// `widths` are the hidden widths; the last one is the feature width.
    pub fn new(input_dim: usize, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.is_empty() || input_dim == 0 || widths.contains(&0) {
            return Err(input("a network needs at least one layer and non-zero widths"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(Linear::init(prev, w, rng));
            prev = w;
        }
        Ok(Network { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(input("a network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(shape(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    l + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Linear::output_dim).collect()
    }

    fn check_gates(&self, gates: Option<&Gates>) -> Result<()> {
        if let Some(g) = gates {
            if g.len() != self.layers.len() {
                return Err(shape(format!(
                    "{} gate vectors for {} layers",
                    g.len(),
                    self.layers.len()
                )));
            }
            for (l, (v, layer)) in g.iter().zip(&self.layers).enumerate() {
                if v.len() != layer.output_dim() {
                    return Err(shape(format!(
                        "gate {l} has {} entries, layer width is {}",
                        v.len(),
                        layer.output_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols != self.input_dim() {
            return Err(shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols,
                self.input_dim()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::Numeric("input batch".into()));
        }
        Ok(())
    }

    fn layer_out(z: &Matrix, gate: Option<&[f64]>) -> Matrix {
        let mut h = z.clone();
        match gate {
            Some(g) => {
                for row in h.data.chunks_exact_mut(g.len().max(1)) {
                    for (v, a) in row.iter_mut().zip(g) {
                        *v = relu(*v) * a;
                    }
                }
            }
            None => h.data.iter_mut().for_each(|v| *v = relu(*v)),
        }
        h
    }

    pub fn forward(&self, batch: &Matrix, gates: Option<&Gates>) -> Result<(Matrix, ForwardCache)> {
        self.check_batch(batch)?;
        self.check_gates(gates)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut x = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_with(&x, Exec::Sequential)?;
            let h = Self::layer_out(&z, gates.map(|g| g[l].as_slice()));
            cache.inputs.push(x);
            cache.pre.push(z);
            x = h.clone();
            cache.post.push(h);
        }
        Ok((x, cache))
    }

    /// Forward pass without retaining intermediates.
    pub fn features(&self, batch: &Matrix, gates: Option<&Gates>) -> Result<Matrix> {
        self.features_with(batch, gates, Exec::default())
    }

    pub fn features_with(&self, batch: &Matrix, gates: Option<&Gates>, exec: Exec) -> Result<Matrix> {
        self.check_batch(batch)?;
        self.check_gates(gates)?;
        let mut x = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_with(&x, exec)?;
            x = Self::layer_out(&z, gates.map(|g| g[l].as_slice()));
        }
        Ok(x)
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix, gates: Option<&Gates>) -> Result<NetGrads> {
        self.check_gates(gates)?;
        if cache.pre.len() != self.layers.len() {
            return Err(shape("cache does not match network depth"));
        }
        let last = &cache.post[self.layers.len() - 1];
        if upstream.rows != last.rows || upstream.cols != last.cols {
            return Err(shape(format!(
                "upstream gradient {}x{} for features {}x{}",
                upstream.rows, upstream.cols, last.rows, last.cols
            )));
        }
        let n = self.layers.len();
        let mut layer_grads = Vec::with_capacity(n);
        let mut gate_grads = Vec::new();
        let mut g_post = upstream.clone();
        for l in (0..n).rev() {
            let z = &cache.pre[l];
            let width = z.cols;
            let mut g_z = g_post.clone();
            if let Some(g) = gates {
                let gate = &g[l];
                let mut ga = vec![0.0; width];
                for (b, row) in g_z.data.chunks_exact_mut(width).enumerate() {
                    let zr = z.row(b);
                    for i in 0..width {
                        ga[i] += row[i] * relu(zr[i]);
                        row[i] = if zr[i] > 0.0 { row[i] * gate[i] } else { 0.0 };
                    }
                }
                gate_grads.push(ga);
            } else {
                for (gv, zv) in g_z.data.iter_mut().zip(&z.data) {
                    if *zv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let (lg, g_in) = self.layers[l].backward(&cache.inputs[l], &g_z)?;
            layer_grads.push(lg);
            g_post = g_in;
        }
        layer_grads.reverse();
        gate_grads.reverse();
        Ok(NetGrads {
            layers: layer_grads,
            gates: gate_grads,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Linear::is_finite)
    }
}

/// Row-wise softmax with the max-logit shift.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(logits.cols.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its
/// gradient with respect to the logits.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    if logits.rows == 0 {
        return Err(input("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols) {
        return Err(input(format!("label {bad} out of range for {} classes", logits.cols)));
    }
    let n = logits.rows as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, (&y, src)) in grad
        .data
        .chunks_exact_mut(logits.cols)
        .zip(labels.iter().zip(logits.iter_rows()))
    {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - src[y];
        for (g, &v) in row.iter_mut().zip(src) {
            *g = (v - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// One momentum step on a flat parameter slice:
/// `v ← μ v + g`, `p ← p − η v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(shape(format!(
            "sgd step over {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with classical momentum. Velocity buffers are addressed by a
/// caller-chosen slot and created on first use.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(input(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(input(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if self.velocity.len() <= slot {
            self.velocity.resize_with(slot + 1, Vec::new);
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.resize(params.len(), 0.0);
        }
        sgd_step(params, grads, v, self.learning_rate, self.momentum)
    }

    /// Step a linear layer using slots `slot` (weights) and `slot + 1` (bias).
    pub fn step_linear(&mut self, slot: usize, layer: &mut Linear, grad: &LinearGrad) -> Result<()> {
        self.step(slot, layer.weights.data_mut(), grad.weights.data())?;
        self.step(slot + 1, &mut layer.bias, &grad.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_relu() {
        let layer = Linear {
            weights: Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let x = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        let (f, _) = net.forward(&x, None).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_gate_annihilates() {
        let mut rng = stream(3, 0);
        let net = Network::new(4, &[5, 3], &mut rng).unwrap();
        let x = random_matrix(6, 4, &mut rng);
        let gates = vec![vec![1.0; 5], vec![0.0; 3]];
        let (f, _) = net.forward(&x, Some(&gates)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gates_are_transparent() {
        let mut rng = stream(11, 0);
        let net = Network::new(4, &[7, 5], &mut rng).unwrap();
        let x = random_matrix(9, 4, &mut rng);
        let ones = vec![vec![1.0; 7], vec![1.0; 5]];
        let (a, ca) = net.forward(&x, None).unwrap();
        let (b, cb) = net.forward(&x, Some(&ones)).unwrap();
        assert_eq!(a, b);
        let up = random_matrix(9, 5, &mut rng);
        let ga = net.backward(&ca, &up, None).unwrap();
        let gb = net.backward(&cb, &up, Some(&ones)).unwrap();
        assert_eq!(ga.layers, gb.layers);
        assert_eq!(net.features(&x, Some(&ones)).unwrap(), a);
    }

    #[test]
    fn scalar_linear_derivative() {
        let layer = Linear {
            weights: Matrix::new(1, 1, vec![0.5]).unwrap(),
            bias: vec![0.0],
        };
        let x = Matrix::new(1, 1, vec![2.0]).unwrap();
        let up = Matrix::new(1, 1, vec![1.0]).unwrap();
        let (g, gx) = layer.backward(&x, &up).unwrap();
        assert_eq!(g.weights.data(), &[2.0]);
        assert_eq!(g.bias, vec![1.0]);
        assert_eq!(gx.data(), &[0.5]);
    }

    #[test]
    fn closed_gate_blocks_outgoing_gradients() {
        let mut rng = stream(5, 0);
        let net = Network::new(3, &[4, 2], &mut rng).unwrap();
        let x = random_matrix(8, 3, &mut rng);
        let gates = vec![vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 1.0]];
        let (_, cache) = net.forward(&x, Some(&gates)).unwrap();
        let up = random_matrix(8, 2, &mut rng);
        let g = net.backward(&cache, &up, Some(&gates)).unwrap();
        for o in 0..2 {
            assert_eq!(g.layers[1].weights.get(o, 1), 0.0);
        }
        assert!(g.layers[0].weights.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(g.layers[0].bias[1], 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut rng = stream(1, 0);
        let net = Network::new(3, &[2], &mut rng).unwrap();
        let bad = Matrix::zeros(2, 4);
        assert!(matches!(net.forward(&bad, None), Err(Error::Shape(_))));
        let x = Matrix::zeros(2, 3);
        assert!(matches!(net.forward(&x, Some(&[vec![1.0; 3]])), Err(Error::Shape(_))));
        let nan = Matrix::new(1, 3, vec![0.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(net.forward(&nan, None), Err(Error::Numeric(_))));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn xent_uniform_and_dominant() {
        let l = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let (loss, _) = softmax_xent(&l, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let l = Matrix::new(1, 2, vec![1000.0, 0.0]).unwrap();
        let (loss, grad) = softmax_xent(&l, &[0]).unwrap();
        assert!(loss.is_finite() && loss < 1e-300);
        assert!(grad.is_finite());

        assert!(matches!(softmax_xent(&l, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_rows_normalised() {
        let mut rng = stream(9, 0);
        let l = random_matrix(20, 7, &mut rng);
        let p = softmax(&l);
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_recurrences() {
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p[0], -0.1);

        let mut s = SgdState::new(1.0, 0.9).unwrap();
        let mut p = [0.0];
        s.step(0, &mut p, &[1.0]).unwrap();
        assert_eq!(p[0], -1.0);
        s.step(0, &mut p, &[1.0]).unwrap();
        assert_eq!(p[0], -2.9);

        let mut s = SgdState::new(0.3, 0.5).unwrap();
        let mut p = [1.25, -4.0];
        s.step(0, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [1.25, -4.0]);

        assert!(SgdState::new(0.1, 1.0).is_err());
        assert!(SgdState::new(0.0, 0.5).is_err());
        assert!(sgd_step(&mut [0.0], &[1.0, 2.0], &mut [0.0], 0.1, 0.0).is_err());
    }

    #[test]
    fn matmul_policies_agree() {
        let mut rng = stream(2, 0);
        let a = random_matrix(300, 6, &mut rng);
        let b = random_matrix(4, 6, &mut rng);
        assert_eq!(
            a.matmul_t_with(&b, Exec::Sequential).unwrap(),
            a.matmul_t_with(&b, Exec::Parallel).unwrap()
        );
    }
}
