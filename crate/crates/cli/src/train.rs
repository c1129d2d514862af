//! Training loop: sample, forward, L1 loss, backward, Adam step.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ctxnet_core::data::{load_pairs, scan_dataset, BatchSampler, DatasetLayout, Prefetcher};
use ctxnet_core::optim::Adam;
use ctxnet_core::{ContextNet, Tape};

use crate::checkpoint::{sidecar_path, Checkpoint};
use crate::config::RunConfig;
use crate::error::{io, Error, Result};

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.cen";

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many completed iterations instead of `total_iters`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub iterations: u64,
    /// Rows logged by this invocation.
    pub losses: Vec<LossRow>,
}

pub fn checkpoint_path(output_dir: &Path, iteration: u64) -> PathBuf {
    output_dir.join(format!("checkpoint-{iteration:08}.cen"))
}

fn save(config: &RunConfig, path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, config.to_text()).map_err(|e| io(&side, e))
}

fn format_row(r: &LossRow) -> String {
    format!("{},{:e},{}\n", r.iteration, r.lr, r.loss)
}

/// Keeps the rows of an earlier run that precede `start`.
fn previous_rows(path: &Path, start: u64) -> Result<String> {
    let mut kept = String::from("iteration,lr,loss\n");
    if start == 0 || !path.exists() {
        return Ok(kept);
    }
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    for line in text.lines().skip(1) {
        let it = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if matches!(it, Some(i) if i < start) {
            let _ = writeln!(kept, "{line}");
        }
    }
    Ok(kept)
}

pub fn train(config: &RunConfig, options: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    config.check_paths()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;

    let scan = scan_dataset(&config.data_root, DatasetLayout::PairedDirs)?;
    let pairs = Arc::new(load_pairs(&scan.pairs)?);
    log::info!("training on {} pairs from {}", pairs.len(), config.data_root.display());

    let net = ContextNet::new(config.network.clone())?;
    let (mut params, mut adam, start) = match &options.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            net.check_params(&ckpt.params)
                .map_err(|e| Error::Incompatible(e.to_string()))?;
            let adam = ckpt
                .optimizer
                .ok_or_else(|| Error::Incompatible("checkpoint has no optimizer state to resume from".into()))?;
            log::info!("resuming from {} at iteration {}", path.display(), ckpt.iteration);
            (ckpt.params, adam, ckpt.iteration)
        }
        None => (net.init_parameters(config.seed), Adam::new(), 0),
    };

    let end = options
        .stop_at
        .unwrap_or(config.schedule.total_iters)
        .min(config.schedule.total_iters);
    let log_path = out.join(LOSS_LOG);
    let mut log_text = previous_rows(&log_path, start)?;
    let sampler = BatchSampler::new(pairs, config.augment_spec(), config.batch_size)?;
    let batches = Prefetcher::new(sampler, start, end, config.workers, 2);

    let mut losses = Vec::new();
    let clock = Instant::now();
    for batch in batches {
        let batch = batch?;
        let i = batch.iteration;
        let lr = config.schedule.lr_at(i);

        let mut tape = Tape::<f32>::new();
        let vars = tape.register_params(&params);
        let x = tape.constant(batch.input);
        let pred = net.forward(&mut tape, &vars, x).map_err(|e| match e {
            ctxnet_core::Error::NonFinite { .. } => Error::NonFiniteLoss { iteration: i },
            other => other.into(),
        })?;
        let loss_var = tape.l1_loss(pred, &batch.target)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: i });
        }
        tape.backward(loss_var)?;
        let mut grads = tape.param_grads(&vars)?;
        adam.step(&mut params, &mut grads, lr)?;

        if i % config.log_every == 0 {
            let row = LossRow { iteration: i, lr, loss };
            log_text.push_str(&format_row(&row));
            log::info!(
                "iter {i:>7}  lr {lr:.3e}  loss {loss:.5}  ({:.1}s)",
                clock.elapsed().as_secs_f64()
            );
            losses.push(row);
        }
        let done = i + 1;
        if done % config.checkpoint_every == 0 && done < end {
            let ckpt = Checkpoint {
                iteration: done,
                params: params.clone(),
                optimizer: Some(adam.clone()),
            };
            save(config, &checkpoint_path(out, done), &ckpt)?;
            std::fs::write(&log_path, &log_text).map_err(|e| io(&log_path, e))?;
        }
    }

    let ckpt = Checkpoint {
        iteration: end.max(start),
        params,
        optimizer: Some(adam),
    };
    save(config, &checkpoint_path(out, ckpt.iteration), &ckpt)?;
    let final_path = out.join(FINAL_CHECKPOINT);
    save(config, &final_path, &ckpt)?;
    std::fs::write(&log_path, &log_text).map_err(|e| io(&log_path, e))?;
    Ok(TrainSummary {
        final_checkpoint: final_path,
        iterations: ckpt.iteration,
        losses,
    })
}
