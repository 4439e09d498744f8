//! Real-world image super-resolution toolkit.
//!
//! Building blocks for synthesizing realistic LR/HR training pairs
//! (blur, noise, downsampling, JPEG simulation, stage shuffling),
//! estimating blur kernels from single LR images, and training,
//! evaluating, and uint8-quantizing a tiny fixed-operator SR network.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability; the `ipsr` binary wraps the same entry points.

pub mod imgcore;
pub mod filters;
pub mod degrade;
pub mod metrics;
pub mod kernest;
pub mod srnet;
pub mod cli;

pub use imgcore::PlanarImage;
pub use filters::Kernel2D;
