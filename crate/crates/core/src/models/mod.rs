//! Classifier architectures, initialization and checkpoint persistence.

mod arch;
mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensorcore::{Graph, NodeId, Tensor, TensorError};

pub use arch::ArchSpec;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input batch shape {got:?} does not match [N, {expected:?}]")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Trainable,
    /// Parameters enter every graph as stop-gradient constants.
    FrozenTeacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f64> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f64> {
    arch: ArchSpec,
    params: Vec<Param<T>>,
    mode: ModelMode,
}

/// Fresh model with fan-in scaled uniform weights (`bound = sqrt(6 / fan_in)`)
/// and zero biases.
pub fn build_model<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<Model<T>, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch
        .param_layout()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data = match fan_in {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect()
                }
                None => vec![T::zero(); n],
            };
            Param {
                name,
                value: Tensor::from_parts(shape, data),
            }
        })
        .collect();
    Ok(Model {
        arch: arch.clone(),
        params,
        mode: ModelMode::Trainable,
    })
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from named parameters, checking them against `arch`.
    pub fn from_params(arch: ArchSpec, params: Vec<Param<T>>) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = arch.param_layout();
        if layout.len() != params.len() {
            return Err(ModelError::InvalidArch(format!(
                "{arch} expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(ModelError::ParamShape {
                    name: p.name.clone(),
                    expected: shape.clone(),
                    got: p.value.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            arch,
            params,
            mode: ModelMode::Trainable,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn frozen(mut self) -> Self {
        self.mode = ModelMode::FrozenTeacher;
        self
    }

    pub fn trainable(mut self) -> Self {
        self.mode = ModelMode::Trainable;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Overwrites parameter values in order; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::InvalidArch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(ModelError::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers parameters in `g`. They are differentiable leaves only when
    /// `track` is set and the model is trainable.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Vec<NodeId> {
        let track = track && self.mode == ModelMode::Trainable;
        self.params
            .iter()
            .map(|p| {
                if track {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Logits `[N, C]` for a batch node, using parameters bound by [`Model::bind`].
    pub fn forward(&self, g: &mut Graph<T>, params: &[NodeId], x: NodeId) -> Result<NodeId, ModelError> {
        let input = self.arch.input_shape();
        let shape = g.try_value(x)?.shape();
        if shape.len() != input.len() + 1 || shape[1..] != input[..] {
            return Err(ModelError::InputShape {
                expected: input,
                got: shape.to_vec(),
            });
        }
        match &self.arch {
            ArchSpec::Mlp { widths } => {
                let layers = widths.len() - 1;
                let mut h = x;
                for l in 0..layers {
                    h = g.affine(h, params[2 * l], params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
            ArchSpec::SmallCnn { channels, .. } => {
                let mut h = x;
                for l in 0..channels.len() {
                    let stride = if l == 0 { 1 } else { 2 };
                    h = g.conv2d(h, params[2 * l], params[2 * l + 1], stride, 1)?;
                    h = g.relu(h)?;
                }
                h = g.flatten(h)?;
                let k = 2 * channels.len();
                Ok(g.affine(h, params[k], params[k + 1])?)
            }
        }
    }

    /// Binds parameters (tracked iff trainable) and runs the forward pass.
    pub fn forward_logits(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId, ModelError> {
        let params = self.bind(g, true);
        self.forward(g, &params, x)
    }

    /// Plain logits for a batch, outside any caller graph.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let z = self.forward(&mut g, &params, xn)?;
        Ok(g.value(z).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            mode: self.mode,
        }
    }
}
