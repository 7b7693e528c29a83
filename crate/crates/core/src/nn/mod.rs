//! Small neural-network toolkit on top of candle tensors.

pub mod conv;
pub mod fused;
pub mod layers;
pub mod params;

pub use layers::{mish, mse, sigmoid, silu, Conv1d, Conv2d, ConvTranspose2x, GroupNorm, Linear};
pub use params::{Init, ParamStore, Params};
