//! Sparse and ternary neural networks through entropy-constrained trained
//! ternarization.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! * [`tensor`]: a minimal dense tensor container plus reference conv/FC
//!   kernels that every other module treats as ground truth.
//! * [`scaling`]: the compound model-scaling solver (`a·b²·c² ≈ 2`) and the
//!   built-in MicroNet-style architecture descriptor it applies to.
//! * [`quant`]: entropy-constrained ternary assignment: per-layer centroids
//!   `{w_n, 0, w_p}`, assignment costs with an information term, the
//!   `λ = γ·δ·λ_max` schedule, and a magnitude-threshold baseline mode.
//! * [`train`]: dual-model training with straight-through gradients and
//!   periodic reassignment, demonstrated on a built-in MLP and a synthetic
//!   two-moons dataset.
//! * [`storage`]: bit-exact dual-mask serialization of ternary layers,
//!   half-precision centroids, fractional parameter counting, and sparse
//!   forward kernels.
//! * [`accounting`]: adds/multiplies/FLOP and parameter reports per layer
//!   and per model, with an optional tree-adder accumulation model.
//!
//! All randomized paths take explicit 64-bit seeds and use the generator in
//! [`rng`], so results are reproducible run to run.

pub mod accounting;
pub mod error;
pub mod quant;
pub mod rng;
pub mod scaling;
pub mod storage;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
