//! Parameter storage, layers and the optimizer.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Conv2d, DoubleConv, DownBlock, Linear, Upsample, LEAKY_SLOPE};
pub use params::ParamStore;
