use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix2D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Parameters of a fully connected network.
///
/// All weights and biases live in one flat vector so that optimizers,
/// finite-difference probes and perturbations `T ± α·w` can treat the whole
/// network as a single point in parameter space. Layer `l` stores its weight
/// (`out × in`, row-major) followed by its bias (`out`). Hidden layers use
/// their activation tag; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    dims: Vec<usize>,
    hidden_activation: Vec<Activation>,
    data: Vec<f64>,
}

/// Intermediate values from [`MlpParams::forward`] needed for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `layer_inputs[l]` is the input to layer `l`; the first entry is the batch.
    layer_inputs: Vec<Matrix2D>,
    out_dim: usize,
}

impl MlpParams {
    /// All-zero parameters for the layer sizes `dims = [input, hidden.., output]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
        }
        let n = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Ok(MlpParams {
            dims: dims.to_vec(),
            hidden_activation: vec![Activation::Tanh; dims.len() - 2],
            data: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        for l in 0..p.num_layers() {
            let (fan_in, fan_out) = (p.dims[l], p.dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.weight_mut(l) {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(p)
    }

    pub fn with_hidden_activation(mut self, act: Activation) -> Self {
        self.hidden_activation.fill(act);
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Same architecture, different parameter values.
    pub fn with_flat(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::shape("MlpParams::with_flat", self.data.len(), data.len()));
        }
        Ok(MlpParams {
            dims: self.dims.clone(),
            hidden_activation: self.hidden_activation.clone(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            dims: self.dims.clone(),
            hidden_activation: self.hidden_activation.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    fn offset(&self, layer: usize) -> usize {
        self.dims[..=layer].windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer_range(&self, layer: usize) -> (usize, usize, usize) {
        let start = self.offset(layer);
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        (start, start + o * i, start + o * i + o)
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let (a, b, _) = self.layer_range(layer);
        &self.data[a..b]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let (a, b, _) = self.layer_range(layer);
        &mut self.data[a..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b, c) = self.layer_range(layer);
        &self.data[b..c]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b, c) = self.layer_range(layer);
        &mut self.data[b..c]
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.hidden_activation[layer]
        }
    }

    pub fn forward(&self, batch: &Matrix2D) -> Result<(Matrix2D, MlpCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape("mlp forward", self.input_dim(), batch.cols()));
        }
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut x = batch.clone();
        for l in 0..self.num_layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let w = Matrix2D::from_vec(o, i, self.weight(l).to_vec())?;
            let mut z = x.matmul_t(&w)?;
            let bias = self.bias(l);
            let act = self.activation(l);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                    *v = act.apply(*v + b);
                }
            }
            layer_inputs.push(std::mem::replace(&mut x, z));
        }
        Ok((
            x,
            MlpCache {
                layer_inputs,
                out_dim: self.output_dim(),
            },
        ))
    }

    /// Gradients of `sum(output ⊙ grad_out)` with respect to the parameters
    /// and to the batch that produced `cache`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix2D) -> Result<(MlpParams, Matrix2D)> {
        let n = cache.layer_inputs.first().map_or(0, Matrix2D::rows);
        if cache.layer_inputs.len() != self.num_layers() || cache.out_dim != self.output_dim() {
            return Err(Error::shape(
                "mlp backward (cache)",
                format!("{:?}", self.dims),
                "cache from a different network",
            ));
        }
        if grad_out.shape() != (n, self.output_dim()) {
            return Err(Error::shape(
                "mlp backward (grad_out)",
                format!("{n}x{}", self.output_dim()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let mut grads = self.zeros_like();
        let mut delta = grad_out.clone();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let input = &cache.layer_inputs[l];
            {
                let gw = grads.weight_mut(l);
                for r in 0..n {
                    let d = delta.row(r);
                    let x = input.row(r);
                    for (oo, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        for (g, &xv) in gw[oo * i..(oo + 1) * i].iter_mut().zip(x) {
                            *g += dv * xv;
                        }
                    }
                }
            }
            {
                let gb = grads.bias_mut(l);
                for r in 0..n {
                    for (g, &dv) in gb.iter_mut().zip(delta.row(r)) {
                        *g += dv;
                    }
                }
            }
            let w = Matrix2D::from_vec(o, i, self.weight(l).to_vec())?;
            let mut dx = delta.matmul(&w)?;
            if l > 0 {
                let act = self.activation(l - 1);
                for (g, &y) in dx.data_mut().iter_mut().zip(input.data()) {
                    *g *= act.derivative_from_output(y);
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::matrix::dot;
    use crate::rng::{stream, Stream};

    /// Straightforward re-evaluation, one row and one unit at a time.
    fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..p.num_layers() {
            let (i, o) = (p.dims[l], p.dims[l + 1]);
            let w = p.weight(l);
            let b = p.bias(l);
            let last = l + 1 == p.num_layers();
            a = (0..o)
                .map(|k| {
                    let z = dot(&w[k * i..(k + 1) * i], &a) + b[k];
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
        }
        a
    }

    fn random_net(dims: &[usize], seed: u64) -> MlpParams {
        let mut rng = stream(seed, Stream::Init);
        let mut p = MlpParams::init(dims, &mut rng).unwrap();
        for b in 0..p.num_layers() {
            for v in p.bias_mut(b) {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix2D {
        let mut rng = stream(seed, Stream::Data);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix2D::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut p = MlpParams::zeros(&[4, 5, 3]).unwrap();
        p.bias_mut(1).copy_from_slice(&[0.1, -0.2, 0.3]);
        let (out, _) = p.forward(&random_batch(6, 4, 1)).unwrap();
        for r in 0..6 {
            assert_eq!(out.row(r), &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut p = MlpParams::zeros(&[3, 3]).unwrap();
        p.weight_mut(0).copy_from_slice(Matrix2D::identity(3).data());
        let b = random_batch(5, 3, 2);
        assert_eq!(p.forward(&b).unwrap().0, b);
    }

    #[test]
    fn forward_matches_naive_evaluation() {
        let p = random_net(&[4, 6, 3], 7);
        let b = random_batch(3, 4, 7);
        let (out, _) = p.forward(&b).unwrap();
        for r in 0..3 {
            let expect = naive_forward(&p, b.row(r));
            for (x, y) in out.row(r).iter().zip(&expect) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::zeros(&[4, 2]).unwrap();
        assert!(matches!(p.forward(&Matrix2D::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_zero_grad_out() {
        let p = random_net(&[3, 4, 2], 3);
        let (_, cache) = p.forward(&random_batch(5, 3, 3)).unwrap();
        let (g, dx) = p.backward(&cache, &Matrix2D::zeros(5, 2)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_layer_weight_grad() {
        let p = random_net(&[3, 2], 4);
        let b = random_batch(4, 3, 4);
        let g_out = random_batch(4, 2, 5);
        let (_, cache) = p.forward(&b).unwrap();
        let (g, _) = p.backward(&cache, &g_out).unwrap();
        let expect = g_out.transpose().matmul(&b).unwrap();
        for (x, y) in g.weight(0).iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_mismatched_grad() {
        let p = random_net(&[3, 2], 4);
        let (_, cache) = p.forward(&random_batch(4, 3, 4)).unwrap();
        assert!(p.backward(&cache, &Matrix2D::zeros(4, 3)).is_err());
        assert!(p.backward(&cache, &Matrix2D::zeros(3, 2)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = random_net(&[4, 5, 3], 11);
        let b = random_batch(3, 4, 11);
        let g_out = random_batch(3, 3, 12);
        let objective = |q: &MlpParams, x: &Matrix2D| -> f64 {
            let (out, _) = q.forward(x).unwrap();
            dot(out.data(), g_out.data())
        };
        let (_, cache) = p.forward(&b).unwrap();
        let (g, dx) = p.backward(&cache, &g_out).unwrap();
        let eps = 1e-6;
        for k in 0..p.num_params() {
            let mut plus = p.clone();
            plus.flat_mut()[k] += eps;
            let mut minus = p.clone();
            minus.flat_mut()[k] -= eps;
            let fd = (objective(&plus, &b) - objective(&minus, &b)) / (2.0 * eps);
            let a = g.flat()[k];
            assert!(
                (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-6),
                "param {k}: {a} vs {fd}"
            );
        }
        for k in 0..b.data().len() {
            let mut plus = b.clone();
            plus.data_mut()[k] += eps;
            let mut minus = b.clone();
            minus.data_mut()[k] -= eps;
            let fd = (objective(&p, &plus) - objective(&p, &minus)) / (2.0 * eps);
            let a = dx.data()[k];
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-6));
        }
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = stream(9, Stream::Init);
        let p = MlpParams::init(&[10, 6], &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(p.weight(0).iter().all(|w| w.abs() <= limit));
        assert!(p.bias(0).iter().all(|&b| b == 0.0));
    }
}
