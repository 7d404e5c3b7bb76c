//! WNet, TNet and ENet: config schedules, construction, forward pass and
//! receptive-field audit.

mod config;
mod network;
mod rf;

pub use config::{NetKind, NetworkConfig, Stage, CONFIG_FORMAT};
pub use network::{Forward, ForwardOptions, NamedBatchNorm, Network, Param, PRELU_INIT};
pub use rf::{receptive_field, receptive_field_of, trunk_layers, RfLayer};
