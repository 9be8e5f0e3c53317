//! Scheduling and simulation of low-precision convolutions on Tensor-Core
//! GPUs: im2col lowering with duplicate elimination, warp-level output
//! packing, tiled layouts, an analytic execution simulator and a
//! diversity-aware simulated-annealing auto-tuner.

pub mod conv;
pub mod cost_model;
pub mod error;
pub mod experiment;
pub mod explorer;
pub mod layout;
pub mod schedule;
pub mod sim;
pub mod tensor;
pub mod warp;
mod workload;

pub use conv::{ConvConfig, DuplicateMap, GemmShape, SourceSlot};
pub use error::{Error, ErrorCategory, Result};
pub use layout::{LayoutDesc, LayoutKind};
pub use schedule::{KnobSpace, MachineModel, OptFlags, ScheduleConfig, Violation};
pub use sim::{CostBreakdown, Measurement};
pub use tensor::Tensor4;
pub use workload::{SmemUsage, Workload};
