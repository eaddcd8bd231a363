use nalgebra::DVector;

use super::{all_finite, Parameterized, RealMatrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`
    SmoothRelu,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::SmoothRelu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::SmoothRelu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::SmoothRelu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SmoothRelu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer computing `act(x W + b)` for row-vector inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: RealMatrix,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations recorded by [`MlpModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<RealMatrix>,
    pre: Vec<RealMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: RealMatrix,
    pub bias: DVector<f64>,
}

/// Gradients for every parameter of an [`MlpModel`], layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    pub layers: Vec<DenseGrad>,
}

impl GradientTape {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: RealMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn grad_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }

    /// All gradient entries flattened in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grad_slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.grad_slices().iter().all(|s| all_finite(s))
    }

    pub fn mirrors(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.weight.shape() == l.weight.shape() && g.bias.len() == l.bias.len()
            })
    }
}

impl MlpModel {
    /// Random network with the given layer widths, `widths[0]` being the
    /// input width. Hidden layers use `hidden`, the last layer `output`.
    pub fn new(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output width"));
        }
        if widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let activation = if i + 1 == n_layers { output } else { hidden };
                let gain = if activation == Activation::Identity { 1.0 } else { 2.0 };
                let std = (gain / w[0] as f64).sqrt();
                Dense {
                    weight: RealMatrix::from_fn(w[0], w[1], |_, _| std * rng.normal()),
                    bias: DVector::zeros(w[1]),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_width() {
                return Err(Error::Dimension {
                    context: "layer bias",
                    expected: l.output_width(),
                    actual: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].output_width() != l.input_width() {
                return Err(Error::Dimension {
                    context: "layer chaining",
                    expected: layers[i - 1].output_width(),
                    actual: l.input_width(),
                });
            }
            if !all_finite(l.weight.as_slice()) || !all_finite(l.bias.as_slice()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    /// Width of the last layer's output.
    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Dense::output_width))
            .collect()
    }

    fn check_input(&self, batch: &RealMatrix) -> Result<()> {
        if batch.ncols() != self.input_width() {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.input_width(),
                actual: batch.ncols(),
            });
        }
        Ok(())
    }

    fn affine(layer: &Dense, input: &RealMatrix) -> RealMatrix {
        let mut pre = input * &layer.weight;
        for (j, mut col) in pre.column_iter_mut().enumerate() {
            col.add_scalar_mut(layer.bias[j]);
        }
        pre
    }

    /// Forward pass that keeps what [`MlpModel::backward`] needs.
    pub fn forward(&self, batch: &RealMatrix) -> Result<(RealMatrix, ForwardCache)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let pre = Self::affine(layer, &x);
            let out = pre.map(|v| layer.activation.apply(v));
            inputs.push(x);
            pre_acts.push(pre);
            x = out;
        }
        Ok((
            x,
            ForwardCache {
                inputs,
                pre: pre_acts,
            },
        ))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, batch: &RealMatrix) -> Result<RealMatrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut pre = Self::affine(layer, &x);
            pre.apply(|v| *v = layer.activation.apply(*v));
            x = pre;
        }
        Ok(x)
    }

    /// Chain rule from `output_grad = dL/d(output)` back to every parameter.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &RealMatrix) -> Result<GradientTape> {
        Ok(self.backward_with_input(cache, output_grad)?.0)
    }

    /// Like [`MlpModel::backward`], also returning `dL/d(input)`.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        output_grad: &RealMatrix,
    ) -> Result<(GradientTape, RealMatrix)> {
        if cache.pre.len() != self.layers.len() || cache.inputs.len() != self.layers.len() {
            return Err(Error::invalid("forward cache does not belong to this model"));
        }
        if output_grad.ncols() != self.feature_dim() {
            return Err(Error::Dimension {
                context: "mlp output gradient",
                expected: self.feature_dim(),
                actual: output_grad.ncols(),
            });
        }
        let n = cache.inputs[0].nrows();
        if output_grad.nrows() != n {
            return Err(Error::Dimension {
                context: "mlp output gradient rows",
                expected: n,
                actual: output_grad.nrows(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[i];
            let mut delta = upstream;
            delta.zip_apply(pre, |d, p| *d *= layer.activation.derivative(p));
            let weight = cache.inputs[i].transpose() * &delta;
            let bias = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            upstream = &delta * layer.weight.transpose();
            grads.push(DenseGrad { weight, bias });
        }
        grads.reverse();
        Ok((GradientTape { layers: grads }, upstream))
    }

    /// Applies one optimizer update from `tape`.
    pub fn apply_gradients(
        &mut self,
        tape: &GradientTape,
        optimizer: &mut impl super::Optimizer,
    ) -> Result<()> {
        if !tape.mirrors(self) {
            return Err(Error::invalid("gradient tape does not mirror the model"));
        }
        let grads = tape.grad_slices();
        optimizer.step(self.param_slices_mut(), &grads)
    }
}

impl Parameterized for MlpModel {
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer {i} weight"), l.weight.as_mut_slice()),
                    (format!("layer {i} bias"), l.bias.as_mut_slice()),
                ]
            })
            .collect()
    }
}
