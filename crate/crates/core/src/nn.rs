//! Parameterised layers on top of the tape.

use put_tensor::{Bound, ParamId, Params, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f32).sqrt();
        Self {
            w: params.add(format!("{name}.w"), uniform(rng, &[fin, fout], bound)),
            b: params.add(format!("{name}.b"), uniform(rng, &[fout], bound)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, bound[self.w], Some(bound[self.b]))?)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    padding: usize,
}

impl Conv2d {
    pub fn new(params: &mut Params, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f32).sqrt();
        Self {
            w: params.add(format!("{name}.w"), uniform(rng, &[cout, cin, kernel, kernel], bound)),
            b: params.add(format!("{name}.b"), uniform(rng, &[cout], bound)),
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, bound[self.w], Some(bound[self.b]), 1, self.padding)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, bound[self.gamma], bound[self.beta], 1e-5)?)
    }
}

/// `x + conv(relu(conv(relu(x))))`
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    pub fn new(params: &mut Params, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv2d::new(params, &format!("{name}.c1"), channels, channels, 3, rng),
            c2: Conv2d::new(params, &format!("{name}.c2"), channels, channels, 3, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = self.c1.forward(tape, bound, h)?;
        let h = tape.relu(h)?;
        let h = self.c2.forward(tape, bound, h)?;
        Ok(tape.add(x, h)?)
    }
}
