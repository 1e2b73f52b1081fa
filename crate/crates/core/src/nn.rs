//! Layer building blocks shared by both sub-networks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named, ordered access to a model's learnable tensors. The order is the
/// binding order used by `bind_with` and the checkpoint layout.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf, in order.
    fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.param(t)).collect()
    }
}

/// Fan-in scaled uniform init, bound `sqrt(6 / fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: fan_in_uniform(rng, &[inputs, outputs], inputs),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.weight.data_mut().iter_mut().for_each(|w| *w *= factor);
        self
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    /// `x [n, in] -> [n, out]`
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row_bias(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub pad: usize,
}

impl Conv {
    /// Stride-1 convolution; 3x3 kernels are padded to keep the extent.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, kernel: usize) -> Self {
        let fan_in = inputs * kernel * kernel;
        Self {
            weight: fan_in_uniform(rng, &[outputs, inputs, kernel, kernel], fan_in),
            bias: Tensor::zeros(&[outputs]),
            pad: kernel / 2,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub pad: usize,
}

impl ConvVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), 1, self.pad)
    }
}

/// Hands out bound variables in parameter order.
pub struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn take_var(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::invalid("too few bound parameters"))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn linear(&mut self) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: self.take_var()?,
            bias: self.take_var()?,
        })
    }

    pub fn conv(&mut self, pad: usize) -> Result<ConvVars> {
        Ok(ConvVars {
            weight: self.take_var()?,
            bias: self.take_var()?,
            pad,
        })
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.vars.len() {
            return Err(Error::invalid(format!(
                "bound {} parameters, model uses {}",
                self.vars.len(),
                self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn push_linear<'a>(out: &mut Vec<&'a Tensor>, l: &'a Linear) {
    out.push(&l.weight);
    out.push(&l.bias);
}

pub(crate) fn push_linear_mut<'a>(out: &mut Vec<&'a mut Tensor>, l: &'a mut Linear) {
    out.push(&mut l.weight);
    out.push(&mut l.bias);
}

pub(crate) fn push_conv<'a>(out: &mut Vec<&'a Tensor>, c: &'a Conv) {
    out.push(&c.weight);
    out.push(&c.bias);
}

pub(crate) fn push_conv_mut<'a>(out: &mut Vec<&'a mut Tensor>, c: &'a mut Conv) {
    out.push(&mut c.weight);
    out.push(&mut c.bias);
}

pub(crate) fn layer_names(out: &mut Vec<String>, prefix: &str) {
    out.push(format!("{prefix}.weight"));
    out.push(format!("{prefix}.bias"));
}
