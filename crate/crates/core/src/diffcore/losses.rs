use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

fn check_pair(tape: &Tape, pred: NodeId, target: NodeId, what: &str) -> Result<()> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::contract(format!(
            "{what}: prediction {:?} and target {:?} differ in shape",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    Ok(())
}

/// Mean over elements of the Huber penalty of `pred - target`:
/// `0.5 r²` for `|r| ≤ δ`, `δ (|r| − δ/2)` beyond.
pub fn huber(tape: &mut Tape, pred: NodeId, target: NodeId, delta: f64) -> Result<NodeId> {
    check_pair(tape, pred, target, "huber")?;
    if !(delta > 0.0) {
        return Err(Error::contract(format!(
            "huber: delta must be positive, got {delta}"
        )));
    }
    let r = tape.sub(pred, target)?;
    let e = tape.huber_elem(r, delta)?;
    tape.mean(e)
}

/// Mean of squared elementwise differences.
pub fn mse(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    check_pair(tape, pred, target, "mse")?;
    let r = tape.sub(pred, target)?;
    let sq = tape.mul(r, r)?;
    tape.mean(sq)
}
