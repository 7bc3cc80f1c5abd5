//! Fully-connected ReLU networks.
//!
//! Hidden layers use ReLU, the output layer is affine. Gradients are computed
//! by hand in reverse mode; the ReLU subgradient at zero is zero.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// One affine layer, weights stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::ShapeMismatch(format!(
                "layer {outputs}x{inputs} given {} weights",
                weights.len()
            )));
        }
        if biases.len() != outputs {
            return Err(Error::ShapeMismatch(format!(
                "layer with {outputs} outputs given {} biases",
                biases.len()
            )));
        }
        Ok(Self { inputs, outputs, weights, biases })
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.inputs..(row + 1) * self.inputs]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(self.biases[i], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Pre- and post-activation values recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[k]` the output of layer `k-1`
    /// after its nonlinearity.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        if layers
            .iter()
            .any(|l| l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()))
        {
            return Err(Error::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(Self { layers })
    }

    /// He-initialised network with the given layer widths (`dims[0]` is the
    /// input dimension).
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need input and output dimensions");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let last = k + 2 == dims.len();
                let scale = if last { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (scale / inputs as f64).sqrt()).expect("finite std");
                let weights = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
                Layer { inputs, outputs, weights, biases: vec![0.0; outputs] }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if k < last {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = vec![x.to_vec()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(activations.last().expect("non-empty"));
            let mut a = z.clone();
            if k < last {
                relu_in_place(&mut a);
            }
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(Trace { activations, pre_activations })
    }

    /// Gradients of `upstream · forward(x)` with respect to every parameter
    /// and to `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let trace = self.forward_trace(x)?;
        self.backward_from_trace(&trace, upstream)
    }

    pub fn backward_from_trace(&self, trace: &Trace, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let input = self.accumulate_backward(trace, upstream, &mut grads, 1.0)?;
        grads.input = input;
        Ok(grads)
    }

    /// Adds `scale · ∂(upstream · output)` into `grads` and returns the input
    /// gradient, also multiplied by `scale`.
    pub fn accumulate_backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k < last {
                for (d, z) in delta.iter_mut().zip(&trace.pre_activations[k]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.activations[k];
            let g = &mut grads.layers[k];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[i] += d;
                let row = &mut g.weights[i * layer.inputs..(i + 1) * layer.inputs];
                for (w, &a) in row.iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            let mut next = vec![0.0; layer.inputs];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, &w) in next.iter_mut().zip(layer.row(i)) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Writes the `MLPv1` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "MLPv1 {}", self.layers.len()).unwrap();
        for layer in &self.layers {
            writeln!(out, "{} {}", layer.outputs, layer.inputs).unwrap();
            for i in 0..layer.outputs {
                write_row(&mut out, layer.row(i));
            }
            write_row(&mut out, &layer.biases);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let mut parts = header.split(' ');
        if parts.next() != Some("MLPv1") {
            return Err(Error::VersionMismatch(format!("unexpected header `{header}`")));
        }
        let n_layers: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("bad layer count in `{header}`")))?;
        if parts.next().is_some() || n_layers == 0 {
            return Err(Error::Malformed(format!("bad header `{header}`")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let dims = lines
                .next()
                .ok_or_else(|| Error::Malformed(format!("missing dimensions of layer {k}")))?;
            let dims = parse_row(dims)?;
            if dims.len() != 2 || dims.iter().any(|d| d.fract() != 0.0 || *d < 1.0) {
                return Err(Error::Malformed(format!("bad dimensions line for layer {k}")));
            }
            let (outputs, inputs) = (dims[0] as usize, dims[1] as usize);
            let mut weights = Vec::with_capacity(inputs * outputs);
            for i in 0..outputs {
                let row = lines
                    .next()
                    .ok_or_else(|| Error::Malformed(format!("layer {k} truncated at row {i}")))?;
                let row = parse_row(row)?;
                if row.len() != inputs {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {k} row {i} has {} entries, expected {inputs}",
                        row.len()
                    )));
                }
                weights.extend(row);
            }
            let biases = lines
                .next()
                .ok_or_else(|| Error::Malformed(format!("layer {k} missing biases")))?;
            let biases = parse_row(biases)?;
            layers.push(Layer::new(inputs, outputs, weights, biases)?);
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(Error::Malformed("trailing content after last layer".into()));
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn write_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // 17 significant digits round-trip every f64.
        write!(out, "{v:.16e}").unwrap();
    }
    out.push('\n');
}

fn parse_row(line: &str) -> Result<Vec<f64>> {
    line.split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Malformed(format!("bad number `{t}`")))
        })
        .collect()
}

/// Per-layer gradient, shape-congruent with [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients for every parameter of an [`Mlp`], plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], biases: vec![0.0; l.outputs] })
                .collect(),
            input: vec![0.0; mlp.input_dim()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
        for v in &mut self.input {
            *v *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += factor * y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += factor * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn congruent(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self
                .layers
                .iter()
                .zip(&mlp.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len())
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(mlp: &Mlp, learning_rate: f64) -> Self {
        let n = mlp.parameter_count();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.congruent(mlp) {
            return Err(Error::ShapeMismatch("gradient does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::TrainingFault("non-finite gradient".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let params = mlp
            .layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()));
        for (((p, g), m), v) in params
            .zip(grads.values())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
