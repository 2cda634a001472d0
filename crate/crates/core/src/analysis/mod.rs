//! Closed-form parameter and compute accounting, and the leakage oracle.

pub mod cost;
pub mod leakage;
pub mod params;

pub use cost::{count_flops, CostItem, CostReport, MaskingMode, OpClass, Part};
pub use leakage::{verify_no_leakage, LeakageReport, TrialOutcome};
pub use params::{count_params, ParamCount};
