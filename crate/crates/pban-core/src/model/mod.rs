//! Model assembly: configuration, parameter registry, and forward passes.

pub mod config;
pub mod features;
pub mod net;
pub mod params;

pub use config::{AttentionMode, PBANConfig, Variant};
pub use features::{dump_features, PATCH_SIZE};
pub use net::{
    apply_bn_updates, attention_apply, attention_weights, Forward, RunMode, BN_EPS, BN_MOMENTUM,
    STAGE_LABELS, VARIANCE_EPS,
};
pub use params::{
    branch_has_key, branches, enumerate, init_weights, is_trainable, param_count, tie_branches,
    verify_weights, Init, NamedWeights, ParamCount, ParamSpec, MODULATION_BIAS_INIT,
};
