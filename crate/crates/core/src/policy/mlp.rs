use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::rng::SimRng;
use crate::types::FeatureMatrix;

/// Fully connected layer, `outputs × inputs` row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, limit: f64, rng: &mut SimRng) -> Self {
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *slot = self.bias[o] + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn validate(&self) -> Result<()> {
        ensure_dims("dense weights", self.inputs * self.outputs, self.weights.len())?;
        ensure_dims("dense bias", self.outputs, self.bias.len())?;
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(())
    }
}

/// Feed-forward policy `f_θ(x)`: two ReLU hidden layers, each followed by
/// inverted dropout, then a single sigmoid output unit.
///
/// The first layer sees the features with a constant 1 appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    input_dim: usize,
    dropout: f64,
    layers: [Dense; 3],
}

/// Per-row activations retained for a backward pass.
#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    /// Pre-activations of both hidden layers, `rows × (h1 + h2)`.
    pre: Vec<f64>,
    /// Post-dropout activations, same layout.
    post: Vec<f64>,
    /// Dropout multipliers (0 or 1/(1-p)), same layout; empty when inactive.
    masks: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

impl MlpPolicy {
    pub const DEFAULT_WIDTHS: [usize; 2] = [32, 16];
    pub const DEFAULT_DROPOUT: f64 = 0.1;

    /// He-uniform hidden weights, small output weights, zero biases.
    pub fn new(input_dim: usize, widths: [usize; 2], dropout: f64, rng: &mut SimRng) -> Result<Self> {
        Self::check_shape(input_dim, widths, dropout)?;
        let fan0 = input_dim + 1;
        let l1 = Dense::uniform(fan0, widths[0], (6.0 / fan0 as f64).sqrt(), rng);
        let l2 = Dense::uniform(widths[0], widths[1], (6.0 / widths[0] as f64).sqrt(), rng);
        let l3 = Dense::uniform(widths[1], 1, 0.1 * (6.0 / (widths[1] + 1) as f64).sqrt(), rng);
        Ok(Self {
            input_dim,
            dropout,
            layers: [l1, l2, l3],
        })
    }

    /// All weights and biases zero; outputs σ(0) = 0.5 everywhere.
    pub fn zeros(input_dim: usize, widths: [usize; 2], dropout: f64) -> Result<Self> {
        Self::check_shape(input_dim, widths, dropout)?;
        Ok(Self {
            input_dim,
            dropout,
            layers: [
                Dense::zeros(input_dim + 1, widths[0]),
                Dense::zeros(widths[0], widths[1]),
                Dense::zeros(widths[1], 1),
            ],
        })
    }

    /// Assembles a network from explicit layers, checking that shapes chain.
    pub fn from_layers(input_dim: usize, dropout: f64, layers: [Dense; 3]) -> Result<Self> {
        Self::check_shape(input_dim, [layers[0].outputs, layers[1].outputs], dropout)?;
        ensure_dims("layer 1 inputs", input_dim + 1, layers[0].inputs)?;
        ensure_dims("layer 2 inputs", layers[0].outputs, layers[1].inputs)?;
        ensure_dims("layer 3 inputs", layers[1].outputs, layers[2].inputs)?;
        ensure_dims("output width", 1, layers[2].outputs)?;
        for l in &layers {
            l.validate()?;
        }
        Ok(Self {
            input_dim,
            dropout,
            layers,
        })
    }

    fn check_shape(input_dim: usize, widths: [usize; 2], dropout: f64) -> Result<()> {
        if input_dim == 0 || widths.contains(&0) {
            return Err(Error::InvalidConfig("network layers must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn with_dropout(mut self, dropout: f64) -> Result<Self> {
        Self::check_shape(self.input_dim, self.widths(), dropout)?;
        self.dropout = dropout;
        Ok(self)
    }

    pub fn widths(&self) -> [usize; 2] {
        [self.layers[0].outputs, self.layers[1].outputs]
    }

    pub fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Flattened parameters: for each layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dims("network parameter vector", self.param_count(), params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Forward pass over every row. With `dropout_rng`, hidden units are
    /// dropped and survivors rescaled by `1/(1-p)`; otherwise the network runs
    /// in inference mode.
    pub(crate) fn forward(&self, x: &FeatureMatrix, mut dropout_rng: Option<&mut SimRng>) -> Result<MlpCache> {
        ensure_dims("network input", self.input_dim, x.cols())?;
        let [h1, h2] = self.widths();
        let width = h1 + h2;
        let n = x.rows();
        let train = self.dropout > 0.0 && dropout_rng.is_some();
        let keep_scale = 1.0 / (1.0 - self.dropout);
        let mut pre = vec![0.0; n * width];
        let mut post = vec![0.0; n * width];
        let mut masks = if train { vec![0.0; n * width] } else { Vec::new() };
        let mut logits = Vec::with_capacity(n);
        let mut input = vec![1.0; self.input_dim + 1];
        let mut z3 = [0.0];
        for i in 0..n {
            input[..self.input_dim].copy_from_slice(x.row(i));
            let base = i * width;
            let (pre1, pre2) = pre[base..base + width].split_at_mut(h1);
            self.layers[0].forward_into(&input, pre1);
            {
                let post1 = &mut post[base..base + h1];
                for u in 0..h1 {
                    let mut v = pre1[u].max(0.0);
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        if train {
                            let m = if rng.random::<f64>() < self.dropout { 0.0 } else { keep_scale };
                            masks[base + u] = m;
                            v *= m;
                        }
                    }
                    post1[u] = v;
                }
            }
            let (post1, post2) = post[base..base + width].split_at_mut(h1);
            self.layers[1].forward_into(post1, pre2);
            for u in 0..h2 {
                let mut v = pre2[u].max(0.0);
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    if train {
                        let m = if rng.random::<f64>() < self.dropout { 0.0 } else { keep_scale };
                        masks[base + h1 + u] = m;
                        v *= m;
                    }
                }
                post2[u] = v;
            }
            self.layers[2].forward_into(post2, &mut z3);
            logits.push(z3[0]);
        }
        Ok(MlpCache {
            pre,
            post,
            masks,
            logits,
        })
    }

    /// Reverse-mode accumulation of `Σ_j coeff_j · ∂z_j/∂θ` through both
    /// hidden layers, reusing the activations (and dropout masks) in `cache`.
    pub(crate) fn backward(&self, x: &FeatureMatrix, cache: &MlpCache, coeffs: &[f64]) -> Vec<f64> {
        let [h1, h2] = self.widths();
        let width = h1 + h2;
        let fan0 = self.input_dim + 1;
        let [l1, l2, l3] = &self.layers;
        let mut g1w = vec![0.0; l1.weights.len()];
        let mut g1b = vec![0.0; h1];
        let mut g2w = vec![0.0; l2.weights.len()];
        let mut g2b = vec![0.0; h2];
        let mut g3w = vec![0.0; h2];
        let mut g3b = 0.0;
        let mut d2 = vec![0.0; h2];
        let mut d1 = vec![0.0; h1];
        let masked = !cache.masks.is_empty();
        for (i, &g) in coeffs.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let base = i * width;
            let post1 = &cache.post[base..base + h1];
            let post2 = &cache.post[base + h1..base + width];
            let pre1 = &cache.pre[base..base + h1];
            let pre2 = &cache.pre[base + h1..base + width];
            g3b += g;
            for u in 0..h2 {
                g3w[u] += g * post2[u];
                let mut d = if pre2[u] > 0.0 { g * l3.weights[u] } else { 0.0 };
                if masked {
                    d *= cache.masks[base + h1 + u];
                }
                d2[u] = d;
            }
            d1.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..h2 {
                let d = d2[u];
                if d == 0.0 {
                    continue;
                }
                g2b[u] += d;
                let row = &l2.weights[u * h1..(u + 1) * h1];
                let grow = &mut g2w[u * h1..(u + 1) * h1];
                for v in 0..h1 {
                    grow[v] += d * post1[v];
                    d1[v] += d * row[v];
                }
            }
            let xr = x.row(i);
            for v in 0..h1 {
                let mut d = if pre1[v] > 0.0 { d1[v] } else { 0.0 };
                if masked {
                    d *= cache.masks[base + v];
                }
                if d == 0.0 {
                    continue;
                }
                g1b[v] += d;
                let grow = &mut g1w[v * fan0..(v + 1) * fan0];
                for (f, &xv) in xr.iter().enumerate() {
                    grow[f] += d * xv;
                }
                grow[fan0 - 1] += d;
            }
        }
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(g1w);
        out.extend(g1b);
        out.extend(g2w);
        out.extend(g2b);
        out.extend(g3w);
        out.push(g3b);
        out
    }
}
