//! Per-pair PSNR/SSIM over a paired directory.

use std::path::Path;

use ctxnet_core::data::{read_image, scan_dataset, DatasetLayout};
use ctxnet_core::metrics::MetricReport;

use crate::error::Result;
use crate::infer::Model;

/// What is compared against each target.
pub enum Source<'a> {
    Model { model: &'a Model, tile: Option<usize> },
    /// The degraded input itself.
    Input,
    /// The target itself; every row is a perfect score.
    Target,
}

pub fn evaluate(source: &Source<'_>, data_root: &Path) -> Result<MetricReport> {
    let scan = scan_dataset(data_root, DatasetLayout::PairedDirs)?;
    let mut report = MetricReport::default();
    for entry in &scan.pairs {
        let target = read_image(&entry.target)?;
        let output = match source {
            Source::Model { model, tile } => model.enhance(&read_image(&entry.input)?, *tile)?,
            Source::Input => read_image(&entry.input)?,
            Source::Target => target.clone(),
        };
        report.push(entry.id.clone(), &output, &target)?;
    }
    Ok(report)
}
