use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Activation, Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Fully connected network: `sizes[0]` inputs, `sizes[last]` outputs, `activation` after
/// every hidden layer and a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpArch {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes, activation })
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation of weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (l, w) in self.sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let weights = (0..w[0] * w[1])
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias = (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect();
            p.push(
                format!("l{l}.weight"),
                Tensor::new(vec![w[0], w[1]], weights).unwrap(),
            )
            .unwrap();
            p.push(format!("l{l}.bias"), Tensor::new(vec![w[1]], bias).unwrap())
                .unwrap();
        }
        p
    }

    pub fn zeros(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (l, w) in self.sizes.windows(2).enumerate() {
            p.push(format!("l{l}.weight"), Tensor::zeros(vec![w[0], w[1]]))
                .unwrap();
            p.push(format!("l{l}.bias"), Tensor::zeros(vec![w[1]]))
                .unwrap();
        }
        p
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.zeros().layout();
        let got = params.layout();
        if expected.entries().len() != got.entries().len()
            || expected
                .entries()
                .iter()
                .zip(got.entries())
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::Layout(format!(
                "parameters do not match architecture {:?}",
                self.sizes
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `vars` are the bound parameters in layout order.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != 2 * self.num_layers() {
            return Err(Error::Layout(format!(
                "{} parameter handles for {} layers",
                vars.len(),
                self.num_layers()
            )));
        }
        let width = tape.value(input).cols();
        if width != self.input_width() {
            return Err(Error::dim(
                "forward_mlp",
                format!(
                    "input width {width}, first layer expects {}",
                    self.input_width()
                ),
            ));
        }
        let mut h = input;
        for l in 0..self.num_layers() {
            let step = |tape: &mut Tape| -> Result<Var> {
                let z = tape.matmul(h, vars[2 * l])?;
                let z = tape.add_bias(z, vars[2 * l + 1])?;
                match self.layer_activation(l) {
                    Activation::Identity => Ok(z),
                    act => tape.activation(z, act),
                }
            };
            h = step(tape).map_err(|e| at_layer(e, l))?;
        }
        Ok(h)
    }

    /// Forward pass without recording a graph. Produces the same bits as [`MlpArch::forward`].
    pub fn eval(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        let (rows, width) = input.dims2();
        if width != self.input_width() {
            return Err(Error::dim(
                "forward_mlp",
                format!(
                    "input width {width}, first layer expects {}",
                    self.input_width()
                ),
            ));
        }
        let tensors = params.tensors();
        if tensors.len() != 2 * self.num_layers() {
            return Err(Error::Layout(
                "parameter count does not match architecture".into(),
            ));
        }
        let mut h = input.values().to_vec();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = tensors[2 * l].values();
            let b = tensors[2 * l + 1].values();
            if w.len() != fan_in * fan_out || b.len() != fan_out {
                return Err(Error::Layout(format!(
                    "layer {l} parameters have wrong shape"
                )));
            }
            let mut z = vec![0.0; rows * fan_out];
            gemm(rows, fan_in, fan_out, &h, false, w, false, &mut z, false);
            for row in z.chunks_mut(fan_out) {
                row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
            }
            let act = self.layer_activation(l);
            if act != Activation::Identity {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "forward_mlp",
                    format!("layer {l}: activation {i} is {}", z[i]),
                ));
            }
            h = z;
        }
        Tensor::new(vec![rows, self.output_width()], h)
    }
}

fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op: "forward_mlp",
            detail: format!("layer {layer} ({op}): {detail}"),
        },
        other => other,
    }
}
