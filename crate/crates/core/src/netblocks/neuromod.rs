use rand::Rng;

use super::linear::Linear;
use super::params::{BoundParams, ParamBundle};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Hidden width of every attenuator network.
pub const ATTENUATOR_HIDDEN: usize = 16;

/// Two-layer network `sigmoid(L₂ relu(L₁ m))`, reshaped to the tensor it
/// attenuates. Every output element lies in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Attenuator {
    hidden: Linear,
    out: Linear,
    target_shape: Vec<usize>,
}

impl Attenuator {
    pub fn new(name: &str, input: usize, target_shape: &[usize]) -> Self {
        let n = target_shape.iter().product();
        Self {
            hidden: Linear::new(format!("{name}.l0"), input, ATTENUATOR_HIDDEN),
            out: Linear::new(format!("{name}.l1"), ATTENUATOR_HIDDEN, n),
            target_shape: target_shape.to_vec(),
        }
    }

    pub fn input(&self) -> usize {
        self.hidden.input()
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.target_shape
    }

    pub fn layers(&self) -> [&Linear; 2] {
        [&self.hidden, &self.out]
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.out.num_params()
    }

    /// Output weights start near zero and the output bias at zero, so the
    /// initial attenuation is close to 0.5 everywhere.
    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut impl Rng) -> Result<()> {
        self.hidden.init(bundle, rng)?;
        self.out.init_scaled(bundle, rng, 0.01, 0.0)
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, m: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(tape, params, m)?;
        let h = tape.relu(h)?;
        let z = self.out.forward(tape, params, h)?;
        let s = tape.sigmoid(z)?;
        tape.reshape(s, &self.target_shape)
    }
}

/// Which part of the layer input conditions the attenuators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulationSource {
    /// The whole layer input.
    LayerInput,
    /// A contiguous slice of the layer input.
    Slice { start: usize, len: usize },
}

/// Fixed attenuation values used in place of the attenuator networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PinnedAttenuation {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `y = (u_β(m) ⊙ W) x + (v_γ(m) ⊙ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuromodLinear {
    base: Linear,
    weight_attenuator: Attenuator,
    bias_attenuator: Attenuator,
    modulation: ModulationSource,
    pinned: Option<PinnedAttenuation>,
}

impl NeuromodLinear {
    pub fn new(name: &str, input: usize, output: usize, modulation: ModulationSource) -> Self {
        let m = match modulation {
            ModulationSource::LayerInput => input,
            ModulationSource::Slice { len, .. } => len,
        };
        Self {
            base: Linear::new(name, input, output),
            weight_attenuator: Attenuator::new(&format!("{name}.att_w"), m, &[output, input]),
            bias_attenuator: Attenuator::new(&format!("{name}.att_b"), m, &[output]),
            modulation,
            pinned: None,
        }
    }

    pub fn base(&self) -> &Linear {
        &self.base
    }

    pub fn weight_attenuator(&self) -> &Attenuator {
        &self.weight_attenuator
    }

    pub fn bias_attenuator(&self) -> &Attenuator {
        &self.bias_attenuator
    }

    pub fn modulation(&self) -> ModulationSource {
        self.modulation
    }

    pub fn num_params(&self) -> usize {
        self.base.num_params()
            + self.weight_attenuator.num_params()
            + self.bias_attenuator.num_params()
    }

    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut impl Rng) -> Result<()> {
        self.base.init(bundle, rng)?;
        self.weight_attenuator.init(bundle, rng)?;
        self.bias_attenuator.init(bundle, rng)
    }

    /// Test hook: replace both attenuator outputs with fixed tensors.
    pub fn pin_attenuation(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if weight.shape() != [self.base.output(), self.base.input()]
            || bias.shape() != [self.base.output()]
        {
            return Err(Error::contract(
                "pinned attenuation does not match the layer shape",
            ));
        }
        self.pinned = Some(PinnedAttenuation { weight, bias });
        Ok(())
    }

    pub fn pin_ones(&mut self) {
        let (o, i) = (self.base.output(), self.base.input());
        self.pinned = Some(PinnedAttenuation {
            weight: Tensor::ones(&[o, i]),
            bias: Tensor::ones(&[o]),
        });
    }

    pub fn unpin(&mut self) {
        self.pinned = None;
    }

    /// Select the modulation input from the layer input.
    pub fn modulation_input(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self.modulation {
            ModulationSource::LayerInput => Ok(x),
            ModulationSource::Slice { start, len } => tape.slice(x, start, len),
        }
    }

    /// Attenuated forward pass with an explicit modulation input `m`.
    pub fn forward_modulated(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: NodeId,
        m: NodeId,
    ) -> Result<NodeId> {
        self.base.check_input(tape, x)?;
        let (u, v) = match &self.pinned {
            Some(p) => (
                tape.constant(p.weight.clone()),
                tape.constant(p.bias.clone()),
            ),
            None => {
                if tape.shape(m) != [self.weight_attenuator.input()] {
                    return Err(Error::contract(format!(
                        "layer `{}` expects modulation width {}, got {:?}",
                        self.base.name(),
                        self.weight_attenuator.input(),
                        tape.shape(m)
                    )));
                }
                (
                    self.weight_attenuator.forward(tape, params, m)?,
                    self.bias_attenuator.forward(tape, params, m)?,
                )
            }
        };
        let w = params.get(&self.base.weight_name())?;
        let b = params.get(&self.base.bias_name())?;
        let w = tape.mul(u, w)?;
        let b = tape.mul(v, b)?;
        let y = tape.matvec(w, x)?;
        tape.add(y, b)
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
        self.base.check_input(tape, x)?;
        let m = self.modulation_input(tape, x)?;
        self.forward_modulated(tape, params, x, m)
    }
}

/// Plain or neuromodulated fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Dense {
    Plain(Linear),
    Neuromod(NeuromodLinear),
}

/// Which fully connected layer a model is assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Plain,
    Neuromodulated,
}

impl Dense {
    pub fn new(kind: LayerKind, name: &str, input: usize, output: usize) -> Self {
        match kind {
            LayerKind::Plain => Dense::Plain(Linear::new(name, input, output)),
            LayerKind::Neuromodulated => Dense::Neuromod(NeuromodLinear::new(
                name,
                input,
                output,
                ModulationSource::LayerInput,
            )),
        }
    }

    pub fn base(&self) -> &Linear {
        match self {
            Dense::Plain(l) => l,
            Dense::Neuromod(n) => n.base(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Dense::Plain(l) => l.num_params(),
            Dense::Neuromod(n) => n.num_params(),
        }
    }

    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut impl Rng) -> Result<()> {
        match self {
            Dense::Plain(l) => l.init(bundle, rng),
            Dense::Neuromod(n) => n.init(bundle, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
        match self {
            Dense::Plain(l) => l.forward(tape, params, x),
            Dense::Neuromod(n) => n.forward(tape, params, x),
        }
    }

    pub fn pin_ones(&mut self) {
        if let Dense::Neuromod(n) = self {
            n.pin_ones();
        }
    }
}
