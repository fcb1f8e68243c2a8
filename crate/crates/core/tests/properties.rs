//! Property-based invariants across modules.

use bdnet_core::labels::LabelMap;
use bdnet_core::metrics::{biou, confusion, dice, miou};
use bdnet_core::tensor::Tensor;
use bdnet_core::data::{parse_pgm_roundtrip_helper as _unused, };

fn main() {}
