//! Minimal neural-network toolkit on top of candle tensors.

pub mod conv;
pub mod functional;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::Mode;
pub use params::{Init, ParamStore};

/// Keeps gradient tensors attached to the graph so that they can themselves
/// be differentiated. Must run before the first backward pass of the calling
/// thread; gradient matching depends on it.
pub fn enable_higher_order_grads() {
    std::env::set_var("CANDLE_GRAD_DO_NOT_DETACH", "1");
}
