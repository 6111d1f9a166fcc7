//! Feature extractor `h_w : ℝ^d → ℝ^2` with hand-written reverse mode.
//!
//! Hidden layers use `tanh`, the output layer is linear. Batches are row-major
//! `n × d` matrices. A network may pass one input column through unchanged:
//! that column skips the layers and is appended as the last feature. A [`GradientTape`] records the activations of one forward
//! pass and is tied to the exact parameter state that produced it.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden widths between the input and the 2-D output.
pub const HIDDEN_WIDTHS: [usize; 3] = [100, 50, 50];
pub const FEATURE_DIM: usize = 2;
pub const DEFAULT_L2: f64 = 1e-2;

static NEXT_STATE: AtomicU64 = AtomicU64::new(1);

fn fresh_state() -> u64 {
    NEXT_STATE.fetch_add(1, Ordering::Relaxed)
}

/// One affine layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: DMatrix::zeros(self.weights.nrows(), self.weights.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureNet {
    pub id: String,
    layers: Vec<Layer>,
    pub l2_coeff: f64,
    /// Input column appended unchanged to the features.
    #[serde(default)]
    passthrough: Option<usize>,
    #[serde(skip, default = "fresh_state")]
    state: u64,
}

impl PartialEq for FeatureNet {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.layers == other.layers
            && self.l2_coeff == other.l2_coeff
            && self.passthrough == other.passthrough
    }
}

/// Activations cached by [`FeatureNet::forward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    activations: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
    state: u64,
}

impl GradientTape {
    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

/// Gradients with the same shape as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<Layer>,
}

impl NetGradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn add_assign(&mut self, other: &NetGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

/// `[input_dim, 100, 50, 50, 2]` network with `1/√fan_in` normal initialization.
pub fn init_net(input_dim: usize, seed: u64) -> FeatureNet {
    let mut dims = vec![input_dim.max(1)];
    dims.extend_from_slice(&HIDDEN_WIDTHS);
    dims.push(FEATURE_DIM);
    FeatureNet::with_dims(&dims, seed, DEFAULT_L2)
}

/// Like [`init_net`], but input column `keep` bypasses the layers.
pub fn init_net_passthrough(input_dim: usize, keep: usize, seed: u64) -> Result<FeatureNet> {
    if input_dim < 2 || keep >= input_dim {
        return Err(Error::DimensionMismatch(format!("pass-through column {keep} of {input_dim}")));
    }
    let mut net = init_net(input_dim - 1, seed);
    net.passthrough = Some(keep);
    Ok(net)
}

impl FeatureNet {
    pub fn with_dims(dims: &[usize], seed: u64, l2_coeff: f64) -> FeatureNet {
        assert!(dims.len() >= 2, "a network needs an input and an output width");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite scale");
                Layer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)),
                    bias: DVector::from_fn(fan_out, |_, _| normal.sample(&mut rng)),
                }
            })
            .collect();
        FeatureNet {
            id: "net0".into(),
            layers,
            l2_coeff,
            passthrough: None,
            state: fresh_state(),
        }
    }

    /// Builds a network from explicit layers. Every layer but the last is
    /// followed by `tanh`.
    pub fn from_layers(layers: Vec<Layer>, l2_coeff: f64) -> Result<FeatureNet> {
        if layers.is_empty() {
            return Err(Error::DimensionMismatch("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch(format!("layer {i} bias length")));
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(Error::DimensionMismatch(format!("layer {i} input width")));
            }
        }
        Ok(FeatureNet {
            id: "net0".into(),
            layers,
            l2_coeff,
            passthrough: None,
            state: fresh_state(),
        })
    }

    /// Test configuration with `h(x) = x`: a single linear identity layer.
    pub fn identity(dim: usize) -> FeatureNet {
        FeatureNet::from_layers(
            vec![Layer {
                weights: DMatrix::identity(dim, dim),
                bias: DVector::zeros(dim),
            }],
            0.0,
        )
        .expect("identity layer is consistent")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols() + self.passthrough.is_some() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows() + self.passthrough.is_some() as usize
    }

    pub fn passthrough(&self) -> Option<usize> {
        self.passthrough
    }

    /// Widths of the layer stack, excluding any pass-through column.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::LengthMismatch(params.len(), self.num_params()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        self.state = fresh_state();
        Ok(())
    }

    /// Squared L2 norm of all parameters.
    pub fn param_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.norm_squared() + l.bias.norm_squared())
            .sum()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, GradientTape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, batch has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(match self.passthrough {
            Some(j) => x.clone().remove_column(j),
            None => x.clone(),
        });
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].clone() * layer.weights.transpose();
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(layer.bias[j]);
            }
            if i != last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        let mut out = activations.last().expect("pushed above").clone();
        if let Some(j) = self.passthrough {
            let w = out.ncols();
            out = out.insert_column(w, 0.0);
            out.set_column(w, &x.column(j));
        }
        Ok((
            out.clone(),
            GradientTape {
                activations,
                output: out,
                state: self.state,
            },
        ))
    }

    /// Features only.
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Gradients of `Σ_i ⟨upstream_i, h(x_i)⟩` with `l2_coeff · w` folded into
    /// the parameter gradients.
    pub fn backward(
        &self,
        tape: &GradientTape,
        upstream: &DMatrix<f64>,
    ) -> Result<(NetGradients, DMatrix<f64>)> {
        self.backward_with_decay(tape, upstream, true)
    }

    pub(crate) fn backward_with_decay(
        &self,
        tape: &GradientTape,
        upstream: &DMatrix<f64>,
        decay: bool,
    ) -> Result<(NetGradients, DMatrix<f64>)> {
        if tape.state != self.state
            || tape.activations.len() != self.layers.len() + 1
            || upstream.nrows() != tape.batch_size()
            || upstream.ncols() != self.output_dim()
        {
            return Err(Error::TapeMismatch);
        }
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut delta = match self.passthrough {
            Some(_) => upstream.columns(0, upstream.ncols() - 1).into_owned(),
            None => upstream.clone(),
        };
        for i in (0..self.layers.len()).rev() {
            let input = &tape.activations[i];
            grads[i].weights = delta.transpose() * input;
            grads[i].bias = DVector::from_iterator(
                delta.ncols(),
                delta.column_iter().map(|c| c.sum()),
            );
            let mut back = &delta * &self.layers[i].weights;
            if i > 0 {
                // input to layer i is a tanh output
                back.zip_apply(input, |d, a| *d *= 1.0 - a * a);
            }
            delta = back;
        }
        if decay && self.l2_coeff != 0.0 {
            for (g, l) in grads.iter_mut().zip(&self.layers) {
                g.weights += &l.weights * self.l2_coeff;
                g.bias += &l.bias * self.l2_coeff;
            }
        }
        if let Some(j) = self.passthrough {
            delta = delta.insert_column(j, 0.0);
            delta.set_column(j, &upstream.column(upstream.ncols() - 1));
        }
        Ok((NetGradients { layers: grads }, delta))
    }

    /// Input Jacobian `∂h/∂x` at one point, `output_dim × input_dim`.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let batch = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let (_, tape) = self.forward(&batch)?;
        let out = self.output_dim();
        let mut jac = DMatrix::zeros(out, x.len());
        for c in 0..out {
            let mut up = DMatrix::zeros(1, out);
            up[(0, c)] = 1.0;
            let (_, g) = self.backward_with_decay(&tape, &up, false)?;
            jac.row_mut(c).copy_from(&g.row(0));
        }
        Ok(jac)
    }
}
