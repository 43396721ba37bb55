//! Neural building blocks on top of the tape.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumError, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl FromStr for Activation {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(NumError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        })
    }
}

impl Activation {
    pub fn apply<F: Real>(self, tape: &mut Tape<F>, x: Var) -> Result<Var, NumError> {
        match self {
            Self::Relu => tape.relu(x),
            Self::Tanh => tape.tanh(x),
            Self::Identity => Ok(x),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Self::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }
}

/// One `(weight, bias, activation)` triple already on the tape.
pub type LayerVars = (Var, Var, Activation);

/// Sequential affine + activation layers.
pub fn mlp_forward<F: Real>(tape: &mut Tape<F>, x: Var, layers: &[LayerVars]) -> Result<Var, NumError> {
    let mut h = x;
    for &(w, b, act) in layers {
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = act.apply(tape, z)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, NumError> {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, gain, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn param_count(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, tape: &mut Tape<F>, x: Var) -> Result<Var, NumError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_bias(z, b)
    }
}

/// Multi-layer perceptron whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, NumError> {
        if sizes.len() < 2 {
            return Err(NumError::Config(format!("MLP needs at least two sizes, got {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, win) in sizes.windows(2).enumerate() {
            let act = if i + 2 == sizes.len() { output } else { hidden };
            let lin = Linear::new(store, &format!("{prefix}.{i}"), win[0], win[1], act.gain(), rng)?;
            layers.push((lin, act));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.fan_out
    }

    /// `Σ (fan_in + 1)·fan_out` over layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(l, _)| l.param_count()).sum()
    }

    pub fn last(&self) -> &Linear {
        &self.layers.last().unwrap().0
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, tape: &mut Tape<F>, x: Var) -> Result<Var, NumError> {
        let xin = tape.value(x).cols();
        if xin != self.input_dim() {
            return Err(NumError::Dimension(format!(
                "MLP expects {} inputs, got {xin}",
                self.input_dim()
            )));
        }
        let vars: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|(l, a)| (tape.param(store, l.weight), tape.param(store, l.bias), *a))
            .collect();
        mlp_forward(tape, x, &vars)
    }
}

/// Pre-norm transformer block: attention and feed-forward sublayers, each residual.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub ln1_gain: ParamId,
    pub ln1_shift: ParamId,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2_gain: ParamId,
    pub ln2_shift: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ff_act: Activation,
    pub heads: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl AttentionBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ff_width: usize,
        ff_act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, NumError> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(NumError::Config(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            ln1_gain: store.add(format!("{prefix}.ln1.gain"), Tensor::filled(&[d_model], F::one()))?,
            ln1_shift: store.add(format!("{prefix}.ln1.shift"), Tensor::zeros(&[d_model]))?,
            qkv: Linear::new(store, &format!("{prefix}.qkv"), d_model, 3 * d_model, 1.0, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d_model, d_model, 1.0, rng)?,
            ln2_gain: store.add(format!("{prefix}.ln2.gain"), Tensor::filled(&[d_model], F::one()))?,
            ln2_shift: store.add(format!("{prefix}.ln2.shift"), Tensor::zeros(&[d_model]))?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), d_model, ff_width, ff_act.gain(), rng)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), ff_width, d_model, 1.0, rng)?,
            ff_act,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        let d = self.qkv.fan_in;
        4 * d + self.qkv.param_count() + self.out.param_count() + self.ff1.param_count() + self.ff2.param_count()
    }

    pub fn vars<F: Real>(&self, store: &ParamStore<F>, tape: &mut Tape<F>) -> BlockVars {
        BlockVars {
            ln1_gain: tape.param(store, self.ln1_gain),
            ln1_shift: tape.param(store, self.ln1_shift),
            w_qkv: tape.param(store, self.qkv.weight),
            b_qkv: tape.param(store, self.qkv.bias),
            w_out: tape.param(store, self.out.weight),
            b_out: tape.param(store, self.out.bias),
            ln2_gain: tape.param(store, self.ln2_gain),
            ln2_shift: tape.param(store, self.ln2_shift),
            w_ff1: tape.param(store, self.ff1.weight),
            b_ff1: tape.param(store, self.ff1.bias),
            w_ff2: tape.param(store, self.ff2.weight),
            b_ff2: tape.param(store, self.ff2.bias),
            ff_act: self.ff_act,
        }
    }
}

/// Attention-block weights already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_shift: Var,
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub ln2_gain: Var,
    pub ln2_shift: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
    pub ff_act: Activation,
}

/// One pre-norm block over `[B·T, d]` token rows with a per-row presence mask.
///
/// No positional information is added, so the block is permutation-equivariant
/// over the tokens of each sample.
pub fn mha_forward<F: Real>(
    tape: &mut Tape<F>,
    tokens: Var,
    p: &BlockVars,
    heads: usize,
    mask: &[bool],
    per_sample: usize,
) -> Result<Var, NumError> {
    let d = tape.value(tokens).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NumError::Config(format!("d_model {d} not divisible by {heads} heads")));
    }
    let eps = F::of(LN_EPS);
    let h = tape.layer_norm(tokens, p.ln1_gain, p.ln1_shift, eps)?;
    let qkv = tape.matmul(h, p.w_qkv)?;
    let qkv = tape.add_bias(qkv, p.b_qkv)?;
    let att = tape.attention(qkv, mask, per_sample, heads)?;
    let o = tape.matmul(att, p.w_out)?;
    let o = tape.add_bias(o, p.b_out)?;
    let x = tape.add(tokens, o)?;
    let h2 = tape.layer_norm(x, p.ln2_gain, p.ln2_shift, eps)?;
    let f = mlp_forward(
        tape,
        h2,
        &[(p.w_ff1, p.b_ff1, p.ff_act), (p.w_ff2, p.b_ff2, Activation::Identity)],
    )?;
    tape.add(x, f)
}
