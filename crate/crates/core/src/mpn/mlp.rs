//! Dense layers and small multilayer perceptrons with hand-written reverse
//! passes. Batches are row-major `Array2` values, one sample per row.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Logistic,
    Tanh,
}

/// Affine map `y = x W^T + b`, `W` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((n_out, n_in), |_| rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

/// Perceptron with rectified hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: OutputActivation,
}

/// Intermediate values kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl MlpTrace {
    /// Which hidden rectifiers were active, layer by layer.
    pub fn active_units(&self) -> impl Iterator<Item = bool> + '_ {
        self.inputs[1..].iter().flat_map(|h| h.iter().map(|&v| v > 0.0))
    }
}

impl Mlp {
    /// Builds layers for `dims = [in, hidden.., out]`.
    pub fn glorot<R: Rng>(dims: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Self { layers, output }
    }

    pub fn zeros(dims: &[usize], output: OutputActivation) -> Self {
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, output }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.n_in(), l.n_out()))
                .collect(),
            output: self.output,
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    /// Whether consecutive layer dimensions chain.
    pub fn is_chained(&self) -> bool {
        !self.layers.is_empty()
            && self
                .layers
                .windows(2)
                .all(|w| w[0].n_out() == w[1].n_in())
            && self
                .layers
                .iter()
                .all(|l| l.bias.len() == l.n_out())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            h = layer.forward(&h);
        }
        self.finish(h)
    }

    pub fn forward_traced(&self, x: Array2<f64>) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = self.layers[0].forward(&x);
        inputs.push(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            let next = layer.forward(&h);
            inputs.push(h);
            h = next;
        }
        MlpTrace {
            inputs,
            output: self.finish(h),
        }
    }

    fn finish(&self, mut h: Array2<f64>) -> Array2<f64> {
        match self.output {
            OutputActivation::Identity => {}
            OutputActivation::Logistic => h.mapv_inplace(logistic),
            OutputActivation::Tanh => h.mapv_inplace(f64::tanh),
        }
        h
    }

    /// Reverse pass: accumulates into `grad` and returns `dL/dinput`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = d_out.clone();
        match self.output {
            OutputActivation::Identity => {}
            OutputActivation::Logistic => {
                d.zip_mut_with(&trace.output, |g, &p| *g *= p * (1.0 - p))
            }
            OutputActivation::Tanh => d.zip_mut_with(&trace.output, |g, &y| *g *= 1.0 - y * y),
        }
        for k in (0..self.layers.len()).rev() {
            let x = &trace.inputs[k];
            let dx = self.layers[k].backward(x, &d, &mut grad.layers[k]);
            if k > 0 {
                // x is relu(z) of the previous layer: the mask is x > 0.
                d = dx;
                d.zip_mut_with(x, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            } else {
                d = dx;
            }
        }
        d
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
