//! Stand-alone compiler and functional simulator for the Versatile Tensor
//! Accelerator (VTA).
//!
//! The crate is organised as a pipeline over a JSON intermediate
//! representation:
//!
//! * [`ir`]: parse/validate/render the VTA IR and hold the hardware config.
//! * [`blocking`]: block-matrix decomposition and expansion of matrix-level
//!   GEMM/ALU operations into atomic block operations.
//! * [`partition`]: SRAM overflow detection and the four GEMM offload
//!   strategies plus the ALU strategy.
//! * [`codegen`]: DRAM layout, lowering of a partitioned program to a linear
//!   VTA instruction stream, stream statistics, and artifact serialization.
//! * [`simulator`]: functional execution of an instruction stream against a
//!   modeled DRAM/SRAM machine.
//! * [`oracle`]: independent dense reference semantics and bit-exact
//!   comparison (kept deliberately separate from the compiler-side code).
//! * [`chain`]: multi-layer network execution with host-side reshaping.

pub mod blocking;
pub mod chain;
pub mod codegen;
pub mod ir;
pub mod matrix;
pub mod oracle;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod simulator;

pub use ir::{IrProgram, PaddedProgram, VtaConfig};
pub use matrix::{Mat, Tensor3};
