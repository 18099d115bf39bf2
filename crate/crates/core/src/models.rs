//! Multi-layer perceptron classifiers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::math;
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of an MLP: `input_dim → hidden_widths… → num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: &[usize], num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths: hidden_widths.to_vec(),
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(param_err("input_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(param_err(
                "num_classes",
                format!("need at least 2, got {}", self.num_classes),
            ));
        }
        if self.hidden_widths.contains(&0) {
            return Err(param_err("hidden_widths", "widths must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Parameters of an MLP with ReLU between affine layers.
///
/// Parameters are stored as `[W0, b0, W1, b1, …]` with `W` of shape
/// `fan_in × fan_out`, so a batch `x` (rows are samples) maps to `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Network {
    /// Glorot-uniform weights seeded by `MlpSpec::seed`, zero biases.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| param_err("init", format!("{e}")))?;
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], w)?.with_requires_grad(true));
            params.push(Tensor::zeros(&[fan_out]).with_requires_grad(true));
        }
        Ok(Self { spec, params })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        let mut checked = Vec::with_capacity(params.len());
        for (k, p) in params.into_iter().enumerate() {
            let (fan_in, fan_out) = dims[k / 2];
            let want = if k % 2 == 0 {
                vec![fan_in, fan_out]
            } else {
                vec![fan_out]
            };
            if p.shape() != want.as_slice() {
                return Err(Error::Dimension {
                    op: "from_params",
                    lhs: want,
                    rhs: p.shape().to_vec(),
                });
            }
            checked.push(p.with_requires_grad(true));
        }
        Ok(Self { spec, params: checked })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// `layer{k}.weight` / `layer{k}.bias`, aligned with [`Network::params`].
    pub fn param_names(&self) -> Vec<String> {
        (0..self.params.len())
            .map(|k| format!("layer{}.{}", k / 2, if k % 2 == 0 { "weight" } else { "bias" }))
            .collect()
    }

    /// Freezes (or unfreezes) every parameter.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.set_requires_grad(trainable);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Records the forward pass on `tape`; `x` must be `n × input_dim`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Forward> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        let bound: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let layers = bound.len() / 2;
        let mut h = x;
        for k in 0..layers {
            let z = tape.matmul(h, bound[2 * k])?;
            h = tape.add_row(z, bound[2 * k + 1])?;
            if k + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(Forward {
            logits: h,
            params: bound,
        })
    }

    /// Copies the tape gradients of a previous [`Network::forward`] into the
    /// parameters (accumulating).
    pub fn pull_grads(&mut self, tape: &Tape, fwd: &Forward) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&fwd.params) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Logits for `x` without recording anything reusable.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.detach());
        let frozen = Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::detach).collect(),
        };
        let fwd = frozen.forward(&mut tape, xv)?;
        Ok(tape.to_tensor(fwd.logits))
    }
}

/// Number of scalar parameters.
pub fn param_count(net: &Network) -> usize {
    net.params.iter().map(Tensor::numel).sum()
}
