//! Network building blocks: plain and neuromodulated fully connected layers,
//! the convolutional image encoder and named parameter bundles.

mod conv;
mod linear;
mod neuromod;
mod params;

pub use conv::{image_to_chw, ConvEncoder, ConvEncoderSpec, ConvLayerSpec};
pub use linear::Linear;
pub use neuromod::{
    Attenuator, Dense, LayerKind, ModulationSource, NeuromodLinear, PinnedAttenuation,
    ATTENUATOR_HIDDEN,
};
pub(crate) use params::hex;
pub use params::{BoundParams, ParamBundle};
