use super::LatentDynamics;
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Hand-checkable substrate: identity encoder and `x' = x + gain ⊙ a` with
/// a policy branch that always proposes zero.
#[derive(Clone, Copy, Debug)]
pub struct LinearToy {
    pub gain: NodeId,
    width: usize,
}

impl LinearToy {
    pub fn new(tape: &mut Tape, gain: Tensor, requires_grad: bool) -> Result<Self> {
        if gain.shape().len() != 1 {
            return Err(Error::contract("toy gain must be a vector"));
        }
        let width = gain.numel();
        Ok(Self {
            gain: tape.leaf(gain, requires_grad),
            width,
        })
    }

    /// Unit gain, the pinned dynamics `x + a`.
    pub fn unit(tape: &mut Tape, width: usize) -> Self {
        Self::new(tape, Tensor::ones(&[width]), false).expect("vector gain")
    }
}

impl LatentDynamics for LinearToy {
    fn latent_width(&self) -> usize {
        self.width
    }

    fn action_width(&self) -> usize {
        self.width
    }

    fn step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        _goal: Option<NodeId>,
        action: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let proposal = tape.constant(Tensor::zeros(&[self.width]));
        let a = action.unwrap_or(proposal);
        let moved = tape.mul(self.gain, a)?;
        Ok((proposal, tape.add(x, moved)?))
    }
}
