//! Minimal dense ReLU networks with Adam, sized for the Q-network and the
//! shaping regressor. Everything runs on the calling thread so results are
//! bit-reproducible for a given seed.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dense {
    /// `in × out`
    w: Array2<f32>,
    b: Array1<f32>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let w = Array2::from_shape_simple_fn((inputs, outputs), || rng.random_range(-bound..bound));
        let b = Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..bound));
        Self { w, b }
    }

    fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut z = x.dot(&self.w);
        z += &self.b;
        z
    }
}

/// Feed-forward network with ReLU hidden layers and a linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Parameter-shaped gradient (or optimizer moment) storage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grads {
    w: Vec<Array2<f32>>,
    b: Vec<Array1<f32>>,
}

impl Grads {
    fn zeros_like(net: &Mlp) -> Self {
        Self {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        }
    }

    fn norm(&self) -> f32 {
        let sq: f32 = self.w.iter().map(|g| g.iter().map(|v| v * v).sum::<f32>()).sum::<f32>()
            + self.b.iter().map(|g| g.iter().map(|v| v * v).sum::<f32>()).sum::<f32>();
        sq.sqrt()
    }

    fn scale(&mut self, factor: f32) {
        for g in &mut self.w {
            g.mapv_inplace(|v| v * factor);
        }
        for g in &mut self.b {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
pub struct Tape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f32>>,
    pub output: Array2<f32>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            h = layer.forward(h.view());
        }
        h
    }

    pub fn forward_one(&self, x: &[f32]) -> Vec<f32> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(view).into_raw_vec_and_offset().0
    }

    pub fn forward_tape(&self, x: ArrayView2<f32>) -> Tape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            inputs.push(h.clone());
            h = layer.forward(h.view());
        }
        Tape { inputs, output: h }
    }

    /// Gradients given dLoss/dOutput for the batch recorded in `tape`.
    pub fn backward(&self, tape: &Tape, grad_out: Array2<f32>) -> Grads {
        let mut grads = Grads::zeros_like(self);
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            let input = &tape.inputs[i];
            grads.w[i] = input.t().dot(&delta);
            grads.b[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut upstream = delta.dot(&self.layers[i].w.t());
                // ReLU derivative from the stored post-activation
                Zip::from(&mut upstream).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = upstream;
            }
        }
        grads
    }

    pub fn copy_from(&mut self, other: &Mlp) {
        self.layers.clone_from(&other.layers);
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

fn relu(v: f32) -> f32 {
    v.max(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip, if any.
    pub max_grad_norm: Option<f32>,
    m: Grads,
    v: Grads,
    t: u64,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            t: 0,
        }
    }

    pub fn with_grad_clip(mut self, max_norm: f32) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn step(&mut self, net: &mut Mlp, mut grads: Grads) {
        if let Some(max) = self.max_grad_norm {
            let norm = grads.norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.w)
                .and(&mut self.m.w[i])
                .and(&mut self.v.w[i])
                .and(&grads.w[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
            Zip::from(&mut layer.b)
                .and(&mut self.m.b[i])
                .and(&mut self.v.b[i])
                .and(&grads.b[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}
