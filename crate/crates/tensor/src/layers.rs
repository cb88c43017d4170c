//! Declarative layer stacks.

use std::fmt;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Logistic,
}

/// One layer of a [`Sequential`] stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
    },
    MaxPool2d,
    /// Nearest-neighbour 2× upsampling.
    Upsample2d,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Activation(Activation),
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
            } => {
                if in_channels == 0 || filters == 0 || kernel == 0 || kernel % 2 == 0 {
                    return Err(TensorError::InvalidLayer(format!(
                        "conv2d needs positive sizes and an odd kernel: {self}"
                    )));
                }
            }
            LayerSpec::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                return Err(TensorError::InvalidLayer(format!("dense needs positive sizes: {self}")));
            }
            _ => {}
        }
        Ok(())
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
            } => write!(f, "conv2d({in_channels}->{filters},{kernel}x{kernel})"),
            LayerSpec::MaxPool2d => write!(f, "maxpool2d(2x2)"),
            LayerSpec::Upsample2d => write!(f, "upsample2d(2x)"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs}->{outputs})"),
            LayerSpec::Activation(Activation::Relu) => write!(f, "relu"),
            LayerSpec::Activation(Activation::Logistic) => write!(f, "logistic"),
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A feed-forward stack of layers with owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    name: String,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
}

/// Output of [`Sequential::forward`]: the result plus the parameter leaves in
/// parameter order, needed to pull gradients back after `backward`.
pub struct ForwardPass {
    pub output: Var,
    pub param_vars: Vec<Var>,
}

impl Sequential {
    /// Builds the stack and initializes weights: Kaiming-uniform for layers
    /// followed by a relu, Xavier-uniform otherwise; biases start at zero.
    pub fn new(name: &str, layers: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if !layer.has_params() {
                continue;
            }
            let followed_by_relu = matches!(layers.get(i + 1), Some(LayerSpec::Activation(Activation::Relu)));
            let (wshape, fan_in, fan_out, bias_len) = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    filters,
                    kernel,
                } => (
                    vec![filters, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    filters * kernel * kernel,
                    filters,
                ),
                LayerSpec::Dense { inputs, outputs } => (vec![outputs, inputs], inputs, outputs, outputs),
                _ => unreachable!(),
            };
            let bound = if followed_by_relu {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } as f32;
            let n: usize = wshape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            params.push(Param {
                name: format!("{name}.{i}.weight"),
                tensor: Tensor::new(wshape, data)?.with_requires_grad(true),
            });
            params.push(Param {
                name: format!("{name}.{i}.bias"),
                tensor: Tensor::zeros(vec![bias_len]).with_requires_grad(true),
            });
        }
        Ok(Self {
            name: name.to_string(),
            layers,
            params,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Human-readable architecture string, e.g. for manifests.
    pub fn architecture(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" > ")
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(trainable);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<ForwardPass> {
        let param_vars: Vec<Var> = self.params.iter().map(|p| g.param(&p.tensor)).collect();
        let mut x = input;
        let mut next_param = 0;
        for layer in &self.layers {
            x = match layer {
                LayerSpec::Conv2d { .. } => {
                    let (w, b) = (param_vars[next_param], param_vars[next_param + 1]);
                    next_param += 2;
                    g.conv2d(x, w, b)?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (param_vars[next_param], param_vars[next_param + 1]);
                    next_param += 2;
                    g.dense(x, w, b)?
                }
                LayerSpec::MaxPool2d => g.maxpool2d(x)?,
                LayerSpec::Upsample2d => g.upsample2d(x)?,
                LayerSpec::Flatten => g.flatten(x)?,
                LayerSpec::Activation(Activation::Relu) => g.relu(x),
                LayerSpec::Activation(Activation::Logistic) => g.logistic(x),
            };
        }
        Ok(ForwardPass { output: x, param_vars })
    }

    /// Adds the graph gradients of this stack's parameter leaves into the
    /// parameter tensors. Frozen parameters are left untouched.
    pub fn accumulate_grads(&mut self, g: &Graph, param_vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(param_vars) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}
