//! Toy transformer encoders: frame encoder (also the co-encoder), causal
//! text encoder, temporal encoder, reconstructor and content discriminator.

mod config;
mod forward;
mod params;

pub use config::EncoderConfig;
pub use forward::{
    attend, patch_embed, patchify, stack_masks, validate_caption, Forward, GateMode, SpatialOutput, EOS_ID, SOS_ID,
};
pub use params::{
    sharing_groups, BlockIds, DiscriminatorIds, GateIds, LinearIds, ModelParams, NormIds, ParamEntry, ParamGroup,
    ParamId, ParamStore, SpatialIds, TemporalIds, TextIds, TAU_INIT, TAU_MAX, TAU_MIN,
};
