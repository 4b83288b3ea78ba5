//! Temporal prompt engineering: the transmission-order MDP, action masking, PPO and
//! baseline policies.

pub mod env;
pub mod ppo;
pub mod rollout;

pub use env::*;
pub use ppo::*;
pub use rollout::*;
