use rand::Rng;

use super::params::{BoundParams, ParamBundle};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b`, `W: [out, in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    name: String,
    input: usize,
    output: usize,
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                rng.gen_range(-bound..bound)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn num_params(&self) -> usize {
        self.output * (self.input + 1)
    }

    /// Uniform fan-in initialization, `±1/√in` for both weight and bias.
    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut impl Rng) -> Result<()> {
        self.init_scaled(bundle, rng, 1.0, 1.0)
    }

    pub fn init_scaled(
        &self,
        bundle: &mut ParamBundle,
        rng: &mut impl Rng,
        weight_scale: f64,
        bias_scale: f64,
    ) -> Result<()> {
        let bound = 1.0 / (self.input.max(1) as f64).sqrt();
        bundle.insert(
            self.weight_name(),
            uniform(&[self.output, self.input], bound * weight_scale, rng),
        )?;
        bundle.insert(
            self.bias_name(),
            uniform(&[self.output], bound * bias_scale, rng),
        )
    }

    pub(crate) fn check_input(&self, tape: &Tape, x: NodeId) -> Result<()> {
        if tape.shape(x) != [self.input] {
            return Err(Error::contract(format!(
                "layer `{}` expects input width {}, got shape {:?}",
                self.name,
                self.input,
                tape.shape(x)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
        self.check_input(tape, x)?;
        let w = params.get(&self.weight_name())?;
        let b = params.get(&self.bias_name())?;
        let y = tape.matvec(w, x)?;
        tape.add(y, b)
    }
}
