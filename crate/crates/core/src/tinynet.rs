//! Small fully connected ReLU networks with explicit backprop and Adam.
//!
//! Activations are `features x batch` matrices (one sample per column), so a
//! layer computes `W x + b` with `W` of shape `out x in`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Weight matrix and bias of one affine layer. Also used to hold gradients
/// and optimizer moments of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: DMatrix::zeros(outputs, inputs), bias: DVector::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Per-layer gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Dense>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self { layers: net.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect() }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

/// Values saved by [`DenseNet::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

impl Cache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.ncols())
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        // row-major weights, then bias
        for r in 0..l.weight.nrows() {
            out.extend(l.weight.row(r).iter());
        }
        out.extend(l.bias.iter());
    }
    out
}

impl DenseNet {
    /// He-uniform weights (half-width `sqrt(6 / fan_in)`), zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit));
                Dense { weight, bias: DVector::zeros(fan_out) }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(invalid(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(invalid(format!("layer {i} bias has {} entries, expected {}", l.bias.len(), l.outputs())));
            }
        }
        Ok(Self { layers })
    }

    /// Rebuilds a network from the flat layout produced by [`Self::to_flat`].
    pub fn from_flat(layer_sizes: &[usize], params: &[f64]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(invalid(format!("expected {expected} parameters, got {}", params.len())));
        }
        let mut it = params.iter().copied();
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let weight = DMatrix::from_row_iterator(w[1], w[0], it.by_ref().take(w[0] * w[1]));
                let bias = DVector::from_iterator(w[1], it.by_ref().take(w[1]));
                Dense { weight, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs()];
        sizes.extend(self.layers.iter().map(Dense::outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layer_sizes())
    }

    /// Weights of each layer in row-major order followed by its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Output only; no cache is kept.
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = self.affine(0, x);
        for l in 1..self.layers.len() {
            h.apply(|v| *v = v.max(0.0));
            h = self.affine(l, &h);
        }
        h
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
        if x.nrows() != self.input_dim() {
            return Err(invalid(format!("batch has {} features, network expects {}", x.nrows(), self.input_dim())));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut h = x.clone();
        for l in 0..n {
            let z = self.affine(l, &h);
            inputs.push(h);
            h = z.clone();
            if l + 1 < n {
                h.apply(|v| *v = v.max(0.0));
            }
            pre_activations.push(z);
        }
        Ok((h, Cache { inputs, pre_activations }))
    }

    /// Gradients of a scalar loss whose gradient with respect to the outputs
    /// is `upstream`. Returns parameter gradients and the input gradient.
    pub fn backward(&self, cache: &Cache, upstream: &DMatrix<f64>) -> Result<(NetGrads, DMatrix<f64>)> {
        let (grads, input) = self.backprop(cache, upstream, true)?;
        Ok((grads, input.expect("input gradient requested")))
    }

    /// Like [`DenseNet::backward`] but skips the input gradient.
    pub fn backward_params(&self, cache: &Cache, upstream: &DMatrix<f64>) -> Result<NetGrads> {
        Ok(self.backprop(cache, upstream, false)?.0)
    }

    fn backprop(
        &self,
        cache: &Cache,
        upstream: &DMatrix<f64>,
        want_input: bool,
    ) -> Result<(NetGrads, Option<DMatrix<f64>>)> {
        let n = self.layers.len();
        if cache.inputs.len() != n || cache.pre_activations.len() != n {
            return Err(invalid(format!("cache holds {} layers, network has {n}", cache.inputs.len())));
        }
        for (l, (layer, input)) in self.layers.iter().zip(&cache.inputs).enumerate() {
            if input.nrows() != layer.inputs() || cache.pre_activations[l].nrows() != layer.outputs() {
                return Err(invalid(format!("cache does not match layer {l} shape")));
            }
        }
        if upstream.nrows() != self.output_dim() || upstream.ncols() != cache.batch_size() {
            return Err(invalid(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                self.output_dim(),
                cache.batch_size()
            )));
        }
        let mut grads = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for l in (0..n).rev() {
            if l + 1 < n {
                delta.zip_apply(&cache.pre_activations[l], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let weight = matmul(&delta, false, &cache.inputs[l], true);
            let bias = delta.column_sum();
            grads.push(Dense { weight, bias });
            if l > 0 || want_input {
                delta = matmul(&self.layers[l].weight, true, &delta, false);
            }
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, want_input.then_some(delta)))
    }

    fn affine(&self, l: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let layer = &self.layers[l];
        let mut z = &layer.weight * x;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        z
    }
}

/// `op(a) * op(b)` where `op` optionally transposes, without materialising
/// the transpose.
fn matmul(a: &DMatrix<f64>, trans_a: bool, b: &DMatrix<f64>, trans_b: bool) -> DMatrix<f64> {
    let (m, k) = if trans_a { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    let (kb, n) = if trans_b { (b.ncols(), b.nrows()) } else { (b.nrows(), b.ncols()) };
    assert_eq!(k, kb, "inner dimensions differ");
    let mut c = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // column-major storage: element (i, j) lives at i + j * nrows
    let strides = |x: &DMatrix<f64>, t: bool| if t { (x.nrows() as isize, 1) } else { (1, x.nrows() as isize) };
    let (rsa, csa) = strides(a, trans_a);
    let (rsb, csb) = strides(b, trans_b);
    // SAFETY: the pointers cover matrices whose shapes and strides match the
    // dimensions passed, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(invalid("need at least input and output sizes"));
    }
    if layer_sizes.contains(&0) {
        return Err(invalid(format!("layer sizes must be positive: {layer_sizes:?}")));
    }
    Ok(())
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        let zeros = NetGrads::zeros_like(net).layers;
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &NetGrads) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(invalid("gradient layer count does not match network"));
        }
        for (l, (g, p)) in grads.layers.iter().zip(&net.layers).enumerate() {
            if g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len() {
                return Err(invalid(format!("gradient shape mismatch at layer {l}")));
            }
            if let Some(i) = g.weight.iter().position(|v| !v.is_finite()) {
                let (r, c) = (i % g.weight.nrows(), i / g.weight.nrows());
                return Err(Error::Numeric(format!("non-finite gradient at layer {l} weight[{r},{c}]")));
            }
            if let Some(i) = g.bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at layer {l} bias[{i}]")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for (l, g) in grads.layers.iter().enumerate() {
            let p = &mut net.layers[l];
            let (m, v) = (&mut self.first[l], &mut self.second[l]);
            update(p.weight.as_mut_slice(), g.weight.as_slice(), m.weight.as_mut_slice(), v.weight.as_mut_slice());
            update(p.bias.as_mut_slice(), g.bias.as_slice(), m.bias.as_mut_slice(), v.bias.as_mut_slice());
        }
        Ok(())
    }
}
