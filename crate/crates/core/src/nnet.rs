//! Tiny dense networks with hand-written backpropagation and Adam.
//!
//! Weights are stored per layer as `out_dim x in_dim` row-major matrices.
//! Everything is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer shapes the offline grid and the online policy draw from.
pub const SUPPORTED_HIDDEN: [&[usize]; 7] = [&[], &[4], &[8], &[16], &[4, 4], &[8, 8], &[16, 16]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Gelu => z * std_normal_cdf(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Gelu => std_normal_cdf(z) + z * std_normal_pdf(z),
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Softmax,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        activation: Activation,
        output_head: OutputHead,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation,
            output_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_HIDDEN.contains(&self.hidden_dims.as_slice()) {
            return Err(Error::config(
                "hidden_dims",
                format!("unsupported hidden shape {:?}", self.hidden_dims),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("mlp", "input and output dims must be positive"));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` for each layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub layers: Vec<DenseLayer>,
}

impl ParameterSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_dims()
                .into_iter()
                .map(|(i, o)| DenseLayer::zeros(i, o))
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: rand::Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for layer in &mut p.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Flat view: for each layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Usage(format!(
                "flat vector has {} values, network has {}",
                flat.len(),
                self.n_params()
            )));
        }
        for (p, &v) in self.values_mut().zip(flat) {
            *p = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn check_shapes(&self, spec: &MlpSpec) -> Result<()> {
        let dims = spec.layer_dims();
        let ok = dims.len() == self.layers.len()
            && dims
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| l.in_dim == i && l.out_dim == o && l.weights.len() == i * o && l.biases.len() == o);
        if ok {
            Ok(())
        } else {
            Err(Error::Usage("parameter shapes do not match network spec".into()))
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }
}

/// Intermediate values from [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Cache {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn forward(spec: &MlpSpec, params: &ParameterSet, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
    if x.len() != spec.input_dim {
        return Err(Error::Usage(format!(
            "input has length {}, network expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite network input".into()));
    }
    params.check_shapes(spec)?;

    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut a = x.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.affine(&a);
        inputs.push(std::mem::take(&mut a));
        a = if i + 1 < n {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
    }
    let output = match spec.output_head {
        OutputHead::Softmax => softmax(&a),
        OutputHead::Linear => a,
    };
    Ok((output.clone(), Cache { inputs, pre, output }))
}

fn check_cache(spec: &MlpSpec, params: &ParameterSet, cache: &Cache) -> Result<()> {
    params.check_shapes(spec)?;
    let ok = cache.inputs.len() == params.layers.len()
        && cache.pre.len() == params.layers.len()
        && cache.output.len() == spec.output_dim
        && cache
            .inputs
            .iter()
            .zip(&cache.pre)
            .zip(&params.layers)
            .all(|((x, z), l)| x.len() == l.in_dim && z.len() == l.out_dim);
    if ok {
        Ok(())
    } else {
        Err(Error::Usage("cache does not come from a matching forward pass".into()))
    }
}

/// Adds the parameter gradient for cotangent `grad_logits` (with respect to
/// the pre-head outputs) into `grads` and returns the input gradient.
pub fn accumulate_backward_logits(
    spec: &MlpSpec,
    params: &ParameterSet,
    cache: &Cache,
    grad_logits: &[f64],
    grads: &mut ParameterSet,
) -> Result<Vec<f64>> {
    check_cache(spec, params, cache)?;
    grads.check_shapes(spec)?;
    if grad_logits.len() != spec.output_dim {
        return Err(Error::Usage("cotangent length differs from output dim".into()));
    }

    let mut delta = grad_logits.to_vec();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let g = &mut grads.layers[i];
        let input = &cache.inputs[i];
        for (o, &d) in delta.iter().enumerate() {
            g.biases[o] += d;
            let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gw, &xi) in row.iter_mut().zip(input) {
                *gw += d * xi;
            }
        }
        let mut back = vec![0.0; layer.in_dim];
        for (o, &d) in delta.iter().enumerate() {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (b, &w) in back.iter_mut().zip(row) {
                *b += w * d;
            }
        }
        if i > 0 {
            for (b, &z) in back.iter_mut().zip(&cache.pre[i - 1]) {
                *b *= spec.activation.derivative(z);
            }
        }
        delta = back;
    }
    Ok(delta)
}

/// Maps a cotangent on the network output to one on the logits.
pub fn head_cotangent(spec: &MlpSpec, cache: &Cache, grad_output: &[f64]) -> Vec<f64> {
    match spec.output_head {
        OutputHead::Linear => grad_output.to_vec(),
        OutputHead::Softmax => {
            let p = &cache.output;
            let dot: f64 = p.iter().zip(grad_output).map(|(a, b)| a * b).sum();
            p.iter().zip(grad_output).map(|(pi, gi)| pi * (gi - dot)).collect()
        }
    }
}

/// Exact gradients of `<grad_output, f(x)>` with respect to the parameters
/// and the input.
pub fn backward(
    spec: &MlpSpec,
    params: &ParameterSet,
    cache: &Cache,
    grad_output: &[f64],
) -> Result<(ParameterSet, Vec<f64>)> {
    if grad_output.len() != spec.output_dim {
        return Err(Error::Usage("cotangent length differs from output dim".into()));
    }
    check_cache(spec, params, cache)?;
    let grad_logits = head_cotangent(spec, cache, grad_output);
    let mut grads = ParameterSet::zeros(spec);
    let dx = accumulate_backward_logits(spec, params, cache, &grad_logits, &mut grads)?;
    Ok((grads, dx))
}

/// A network spec together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParameterSet,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let params = ParameterSet::zeros(&spec);
        Self { spec, params }
    }

    pub fn init<R: rand::Rng>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = ParameterSet::init(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
        forward(&self.spec, &self.params, x)
    }

    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, cache: &Cache, grad_output: &[f64]) -> Result<(ParameterSet, Vec<f64>)> {
        backward(&self.spec, &self.params, cache, grad_output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub timestep: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            timestep: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        let n = params.n_params();
        if grads.n_params() != n || self.m.len() != n || self.v.len() != n {
            return Err(Error::Usage(
                "Adam state, parameters and gradients differ in size".into(),
            ));
        }
        self.timestep += 1;
        let t = self.timestep as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn spec(hidden: &[usize], act: Activation, head: OutputHead, out: usize) -> MlpSpec {
        MlpSpec::new(8, hidden, out, act, head)
    }

    #[test]
    fn zero_net_outputs() {
        let s = spec(&[16, 16], Activation::Tanh, OutputHead::Softmax, 4);
        let net = Mlp::zeros(s);
        assert_eq!(net.output(&[0.3; 8]).unwrap(), vec![0.25; 4]);
        let s = spec(&[8], Activation::Gelu, OutputHead::Linear, 3);
        assert_eq!(Mlp::zeros(s).output(&[0.7; 8]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_layer_identity_row() {
        let s = spec(&[], Activation::Tanh, OutputHead::Linear, 1);
        let mut net = Mlp::zeros(s);
        net.params.layers[0].weights[0] = 1.0;
        let mut x = [0.0; 8];
        x[0] = 0.5;
        x[3] = 0.9;
        assert_eq!(net.output(&x).unwrap(), vec![0.5]);
    }

    #[test]
    fn linear_input_gradient_is_transpose() {
        let s = spec(&[], Activation::Tanh, OutputHead::Linear, 3);
        let net = Mlp::init(s, &mut seed::rng(3, &[]));
        let (_, cache) = net.forward(&[0.1; 8]).unwrap();
        let g = [0.5, -1.0, 2.0];
        let (_, dx) = net.backward(&cache, &g).unwrap();
        let w = &net.params.layers[0].weights;
        for k in 0..8 {
            let expected: f64 = (0..3).map(|o| w[o * 8 + k] * g[o]).sum();
            assert_eq!(dx[k], expected);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let s = spec(&[4, 4], Activation::Gelu, OutputHead::Linear, 2);
        let net = Mlp::init(s, &mut seed::rng(5, &[]));
        let (_, cache) = net.forward(&[0.4; 8]).unwrap();
        let (g, dx) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let s = spec(&[4], Activation::Tanh, OutputHead::Softmax, 4);
        let net = Mlp::zeros(s.clone());
        assert!(matches!(net.output(&[f64::NAN; 8]), Err(Error::Numeric(_))));
        assert!(matches!(net.output(&[0.0; 7]), Err(Error::Usage(_))));
        let other = Mlp::zeros(spec(&[8], Activation::Tanh, OutputHead::Softmax, 4));
        let (_, cache) = other.forward(&[0.0; 8]).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0; 4]), Err(Error::Usage(_))));
        assert!(spec(&[3], Activation::Tanh, OutputHead::Softmax, 4).validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let s = spec(&[4], Activation::Tanh, OutputHead::Softmax, 4);
        let mut net = Mlp::init(s.clone(), &mut seed::rng(1, &[]));
        let before = net.params.clone();
        let mut adam = AdamState::new(s.n_params(), 0.0025);
        adam.step(&mut net.params, &ParameterSet::zeros(&s)).unwrap();
        assert_eq!(net.params, before);
        assert_eq!(adam.timestep, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        // At t=1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let s = spec(&[], Activation::Tanh, OutputHead::Linear, 1);
        let mut params = ParameterSet::zeros(&s);
        let mut grads = ParameterSet::zeros(&s);
        let gs = [0.3, -2.0, 1e-3, 5.0, -0.7, 0.01, 1.0, -1.0, 0.2];
        grads.set_flat(&gs).unwrap();
        let lr = 0.0025;
        let mut adam = AdamState::new(s.n_params(), lr);
        adam.step(&mut params, &grads).unwrap();
        for (p, g) in params.values().zip(gs) {
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
            assert!((p + lr * g.signum()).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let s = spec(&[8, 8], Activation::Gelu, OutputHead::Softmax, 4);
        let run = || {
            let mut net = Mlp::init(s.clone(), &mut seed::rng(9, &[]));
            let mut adam = AdamState::new(s.n_params(), 0.0025);
            for _ in 0..2 {
                let (_, cache) = net.forward(&[0.2; 8]).unwrap();
                let (g, _) = net.backward(&cache, &[1.0, 0.0, -1.0, 0.5]).unwrap();
                adam.step(&mut net.params, &g).unwrap();
            }
            (net.params.to_flat(), adam)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(sa, sb);
    }

    #[test]
    fn adam_shape_mismatch() {
        let s = spec(&[4], Activation::Tanh, OutputHead::Softmax, 4);
        let mut params = ParameterSet::zeros(&s);
        let grads = ParameterSet::zeros(&spec(&[8], Activation::Tanh, OutputHead::Softmax, 4));
        let mut adam = AdamState::new(s.n_params(), 0.01);
        assert!(matches!(adam.step(&mut params, &grads), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_is_strictly_positive_and_normalized() {
        let p = softmax(&[800.0, -800.0, 0.0, 1.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[0.3, -0.1, 2.0, 1.0]);
        assert!(q.iter().all(|&v| v > 0.0));
    }
}
