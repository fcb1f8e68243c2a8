//! Boundary-delineation segmentation toolkit.
//!
//! A self-contained CPU implementation of a lightweight boundary-delineation
//! segmentation network for longitudinal vessel ultrasound, built on a minimal
//! reverse-mode tensor engine. The crate is organised as:
//!
//! - [`tensor`] — dense N-d tensors, forward operators and reverse-mode
//!   differentiation, plus a finite-difference gradient checker.
//! - [`model`] — the network itself: inverted-residual encoder, multi-scale
//!   fusion, pyramid pooling, coarse segmentation head and point-based
//!   boundary refinement; parameter/FLOP accounting and checkpoint I/O.
//! - [`losses`] — cross entropy, point cross entropy, lovász-softmax and the
//!   staged combination used for training.
//! - [`metrics`] — Dice, mIoU and Boundary IoU plus report serialization.
//! - [`data`] — synthetic vessel-image corpus generator, augmentation
//!   pipeline, PGM I/O and corpus layout on disk.
//!
//! Everything is deterministic given a seed; see the individual modules for
//! the exact guarantees.

pub mod data;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use labels::LabelMap;
pub use model::{BdNet, Checkpoint, ModelConfig, PointSet, Prediction};
pub use tensor::{Element, Tensor, TensorError};
