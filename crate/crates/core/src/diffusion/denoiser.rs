use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{time_embedding, TIME_EMBED_DIM};
use crate::concepts::EMBED_DIM;
use crate::error::{Error, Result};
use crate::numgrad::{Activation, MlpArch, ParamSet, Tape, Tensor, Var};

pub const DATA_DIM: usize = 2;

/// Anything that predicts the added noise `eps` from `(x_t, t, condition)`.
pub trait NoisePredictor {
    fn params(&self) -> &ParamSet;

    /// Records the prediction on `tape`; `vars` are this predictor's parameters bound to
    /// the same tape (tracked or frozen).
    fn predict_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_t: Var,
        t: &[usize],
        conds: &[&[f64]],
    ) -> Result<Var>;

    /// Graph-free prediction; bit-identical to [`NoisePredictor::predict_tape`].
    fn predict(&self, x_t: &Tensor, t: &[usize], conds: &[&[f64]]) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 128, 128, 64],
            activation: Activation::Silu,
        }
    }
}

impl DenoiserArch {
    pub fn mlp(&self) -> Result<MlpArch> {
        let mut sizes = vec![DATA_DIM + TIME_EMBED_DIM + EMBED_DIM];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(DATA_DIM);
        MlpArch::new(sizes, self.activation)
    }
}

/// Conditional noise predictor `eps(x_t, c, t)` over the input `[x_t | t-embedding | c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub arch: DenoiserArch,
    mlp: MlpArch,
    pub params: ParamSet,
}

/// `[t-embedding | condition]` rows, the constant part of the network input.
fn aux_inputs(t: &[usize], conds: &[&[f64]]) -> Result<Tensor> {
    if t.len() != conds.len() {
        return Err(Error::dim(
            "denoiser",
            format!("{} timesteps for {} conditions", t.len(), conds.len()),
        ));
    }
    let mut values = Vec::with_capacity(t.len() * (TIME_EMBED_DIM + EMBED_DIM));
    for (&ti, c) in t.iter().zip(conds) {
        if c.len() != EMBED_DIM {
            return Err(Error::dim(
                "denoiser",
                format!("condition of dim {}", c.len()),
            ));
        }
        values.extend_from_slice(&time_embedding(ti));
        values.extend_from_slice(c);
    }
    Tensor::new(vec![t.len(), TIME_EMBED_DIM + EMBED_DIM], values)
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Result<Self> {
        let mlp = arch.mlp()?;
        let params = mlp.init(rng);
        Ok(Self { arch, mlp, params })
    }

    pub fn zeros(arch: DenoiserArch) -> Result<Self> {
        let mlp = arch.mlp()?;
        let params = mlp.zeros();
        Ok(Self { arch, mlp, params })
    }

    pub fn from_params(arch: DenoiserArch, params: ParamSet) -> Result<Self> {
        let mlp = arch.mlp()?;
        mlp.check_params(&params)?;
        Ok(Self { arch, mlp, params })
    }

    pub fn mlp(&self) -> &MlpArch {
        &self.mlp
    }

    /// Flat parameter indices of the first-layer weights that read the condition
    /// embedding, i.e. the only parameters through which a concept enters the network.
    pub fn conditioning_indices(&self) -> std::ops::Range<usize> {
        let layout = self.params.layout();
        let first = &layout.entries()[0];
        let width = first.shape[1];
        let row = DATA_DIM + TIME_EMBED_DIM;
        first.offset + row * width..first.offset + (row + EMBED_DIM) * width
    }
}

impl NoisePredictor for DenoiserNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn predict_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_t: Var,
        t: &[usize],
        conds: &[&[f64]],
    ) -> Result<Var> {
        let aux = tape.constant(aux_inputs(t, conds)?);
        let input = tape.concat_cols(&[x_t, aux])?;
        self.mlp.forward(tape, vars, input)
    }

    fn predict(&self, x_t: &Tensor, t: &[usize], conds: &[&[f64]]) -> Result<Tensor> {
        let aux = aux_inputs(t, conds)?;
        let input = Tensor::concat_cols(&[x_t, &aux])?;
        self.mlp.eval(&self.params, &input)
    }
}
