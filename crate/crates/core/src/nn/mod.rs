//! Minimal CPU building blocks for the refiner, the regressor and the
//! frozen feature extractor: layers with hand-written backward passes and
//! an Adam optimizer.
//!
//! Single samples flow through the layers as `C × H × W` arrays; batching is
//! a loop that accumulates parameter gradients. Everything is generic over
//! `f32` (training) and `f64` (gradient checks).

mod adam;
mod layers;
mod real;

pub use adam::{Adam, AdamConfig};
pub use layers::{relu, relu_backward_inplace, Conv2d, Linear, MaxPool2, Param};
pub use real::Real;
