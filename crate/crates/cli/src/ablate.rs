//! Trains and evaluates the four architecture variants under one config.

use std::fmt;
use std::path::Path;

use ctxnet_core::Variant;

use crate::config::RunConfig;
use crate::error::{io, Result};
use crate::eval::{evaluate, Source};
use crate::infer::Model;
use crate::train::{train, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,global_context,local_context,psnr,ssim\n");
        for r in &self.rows {
            let (gc, lc) = r.variant.flags();
            out.push_str(&format!("{},{gc},{lc},{},{}\n", r.variant.name(), r.psnr, r.ssim));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} {:^4} {:^4} {:>9} {:>7}", "variant", "GC", "LC", "PSNR(dB)", "SSIM")?;
        for r in &self.rows {
            let (gc, lc) = r.variant.flags();
            let mark = |b: bool| if b { "x" } else { "-" };
            writeln!(
                f,
                "{:<9} {:^4} {:^4} {:>9.3} {:>7.4}",
                r.variant.name(),
                mark(gc),
                mark(lc),
                r.psnr,
                r.ssim
            )?;
        }
        Ok(())
    }
}

/// Each variant trains into `<output_dir>/<variant>` with the same seed and
/// schedule, then is scored on `eval_root` (or the training pairs).
pub fn ablate(config: &RunConfig) -> Result<AblationTable> {
    let eval_root = config.eval_root.clone().unwrap_or_else(|| config.data_root.clone());
    let mut table = AblationTable::default();
    for variant in Variant::ALL {
        let mut cfg = config.clone();
        cfg.network = cfg.network.with_variant(variant);
        cfg.output_dir = config.output_dir.join(variant.name());
        log::info!("ablation: training `{}`", variant.name());
        let summary = train(&cfg, &TrainOptions::default())?;
        let model = Model::load(&summary.final_checkpoint)?;
        let report = evaluate(&Source::Model { model: &model, tile: None }, &eval_root)?;
        let (psnr, ssim) = report.mean().unwrap_or((f64::NAN, f64::NAN));
        table.rows.push(AblationRow {
            variant,
            psnr,
            ssim,
            final_loss: summary.losses.last().map(|r| r.loss),
        });
    }
    write_table(&table, &config.output_dir)?;
    Ok(table)
}

fn write_table(table: &AblationTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join("ablation.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| io(&path, e))
}
