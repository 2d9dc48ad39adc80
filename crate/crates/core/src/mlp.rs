//! Dense feed-forward classifier: ReLU hidden layers, softmax output.

use rand::Rng;
use thiserror::Error;

/// Hidden widths of the deployed architecture.
pub const HIDDEN_WIDTHS: [usize; 4] = [32, 128, 256, 64];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MlpError {
    #[error("input has {got} values, layer expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("layer {layer} expects {expected} inputs but previous layer has {got} outputs")]
    Chain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: {what}")]
    Shape { layer: usize, what: String },
    #[error("network has no layers")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                let row = &self.w[i * self.cols..(i + 1) * self.cols];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                acc + self.b[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Pre-activations and activations of every layer for one input.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[k+1]` the output of layer `k`
    /// (softmax probabilities for the last layer).
    pub acts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Mlp {
    /// Layer sizes `dims[0] -> dims[1] -> ...`, all weights zero.
    pub fn zeros(dims: &[usize]) -> Self {
        Mlp {
            layers: dims.windows(2).map(|d| Layer::zeros(d[1], d[0])).collect(),
        }
    }

    /// He-normal weights (Box-Muller from `rng`), zero biases.
    pub fn he_init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Mlp::zeros(dims);
        for layer in &mut net.layers {
            let std = (2.0 / layer.cols as f64).sqrt();
            for w in &mut layer.w {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *w = z * std;
            }
        }
        net
    }

    /// The deployed shape: `inputs -> 32 -> 128 -> 256 -> 64 -> classes`.
    pub fn standard_dims(inputs: usize, classes: usize) -> Vec<usize> {
        let mut d = vec![inputs];
        d.extend(HIDDEN_WIDTHS);
        d.push(classes);
        d
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.first().map(|l| vec![l.cols]).unwrap_or_default();
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.layers.is_empty() {
            return Err(MlpError::Empty);
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.w.len() != l.rows * l.cols {
                return Err(MlpError::Shape {
                    layer: k,
                    what: format!("{} weights for {}x{}", l.w.len(), l.rows, l.cols),
                });
            }
            if l.b.len() != l.rows {
                return Err(MlpError::Shape {
                    layer: k,
                    what: format!("{} biases for {} rows", l.b.len(), l.rows),
                });
            }
            if k > 0 && self.layers[k - 1].rows != l.cols {
                return Err(MlpError::Chain {
                    layer: k,
                    expected: l.cols,
                    got: self.layers[k - 1].rows,
                });
            }
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace, MlpError> {
        if x.len() != self.input_dim() {
            return Err(MlpError::InputDim {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&acts[k]);
            let a = if k == last {
                softmax(&z)
            } else {
                z.iter().copied().map(relu).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(Trace { acts, pre })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        let mut t = self.trace(x)?;
        Ok(t.pre.pop().expect("non-empty network"))
    }

    /// Class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        let mut t = self.trace(x)?;
        Ok(t.acts.pop().expect("non-empty network"))
    }

    /// Weighted cross-entropy of one sample and its gradient with respect
    /// to every weight and bias.
    pub fn loss_and_grad(
        &self,
        x: &[f64],
        label: usize,
        weight: f64,
    ) -> Result<(f64, Mlp), MlpError> {
        let t = self.trace(x)?;
        let probs = t.acts.last().expect("output layer");
        let p = probs[label];
        let loss = if p.is_nan() {
            f64::NAN
        } else {
            -weight * p.max(f64::MIN_POSITIVE).ln()
        };
        let mut grad = Mlp::zeros(&self.dims());
        // dL/dz for the softmax layer
        let mut delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| weight * (p - if i == label { 1.0 } else { 0.0 }))
            .collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &t.acts[k];
            let g = &mut grad.layers[k];
            for i in 0..layer.rows {
                g.b[i] = delta[i];
                let row = &mut g.w[i * layer.cols..(i + 1) * layer.cols];
                for (gw, v) in row.iter_mut().zip(input) {
                    *gw = delta[i] * v;
                }
            }
            if k == 0 {
                break;
            }
            let below = &t.pre[k - 1];
            delta = (0..layer.cols)
                .map(|j| {
                    if below[j] <= 0.0 {
                        return 0.0;
                    }
                    (0..layer.rows)
                        .map(|i| layer.w[i * layer.cols + j] * delta[i])
                        .sum()
                })
                .collect();
        }
        Ok((loss, grad))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter `idx` in the flat order: per layer, weights then biases.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.w.len() {
                return &mut l.w[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.w.len() {
                return l.w[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += scale * other`, layer by layer.
    pub fn axpy(&mut self, scale: f64, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += scale * y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += scale * y;
            }
        }
    }
}
