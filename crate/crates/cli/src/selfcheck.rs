//! The gradient-check command.

use ctxnet_core::gradcheck::suite::{block_suite, op_suite};
use ctxnet_core::gradcheck::GradcheckReport;
use ctxnet_core::OpKind;

use crate::error::Result;

pub const TRIALS_PER_OP: usize = 20;

/// One report per op (the worst of its trials), then one per block.
pub fn run(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradcheckReport>> {
    let mut reports = op_suite(TRIALS_PER_OP, seed, fault)?;
    reports.extend(block_suite(seed, fault)?);
    Ok(reports)
}
