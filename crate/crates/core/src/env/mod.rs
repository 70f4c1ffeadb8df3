//! Concrete environments.

mod block;
mod hadamard;
mod tabular;

pub use block::{
    build_block_env, BlockEnvConfig, BlockLatent, BlockMdpEnv, BlockState, JitterKind, StateKind,
    NUM_ACTIONS as BLOCK_ACTIONS,
};
pub use hadamard::sylvester_hadamard;
pub use tabular::{FeatureSupport, SafetyMdp, TabularState};
