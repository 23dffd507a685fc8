//! Deformation parameterizations: the free-form field and the
//! convolutional encoder-decoder, plus the Adam optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod convnet;
pub mod freeform;
pub mod layers;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use convnet::{
    convnet_backward, convnet_forward, update_running_stats, ActivationCache, ConvNetConfig,
    ConvNetParameters, Mode,
};
pub use freeform::{freeform_apply, FreeFormModel};

use crate::error::Result;

/// Fresh Adam state for the trainable tensors of a network.
pub fn adam_for(params: &ConvNetParameters, config: AdamConfig) -> AdamState {
    let lengths: Vec<usize> = params.trainable().iter().map(|t| t.data.len()).collect();
    AdamState::new(config, &lengths)
}

/// Applies one Adam update to every trainable tensor of `params`.
pub fn adam_step(params: &mut ConvNetParameters, grads: &ConvNetParameters, state: &mut AdamState) -> Result<()> {
    let g: Vec<&[f64]> = grads.trainable().into_iter().map(|t| t.data.as_slice()).collect();
    let mut p: Vec<&mut [f64]> = params
        .trainable_mut()
        .into_iter()
        .map(|t| t.data.as_mut_slice())
        .collect();
    state.step(&mut p, &g)
}
