pub mod autodiff;
pub mod cascade;
pub mod commands;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod render;
pub mod tensor;
pub mod train;
pub mod volume;
