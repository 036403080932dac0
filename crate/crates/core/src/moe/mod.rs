//! Gate, experts and sparse dispatch.

pub mod expert;
pub mod gate;
pub mod layer;
pub mod pairing;

pub use expert::{count_parameters, count_parameters_for_sizes, expert_forward, ExpertParams};
pub use gate::{gate_forward, GateOutput, GateParams};
pub use layer::moe_layer_forward;
pub use pairing::{build_paired_spec, ExpertRatios, PairedExpertSpec};
