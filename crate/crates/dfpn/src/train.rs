//! Training driver: loss log CSV and periodic checkpoints around the core loop.

use std::fs;
use std::path::{Path, PathBuf};

use dfpn_core::data::ClipSource;
use dfpn_core::model::{ModelConfig, Parameters};
use dfpn_core::optim::{train_loop, Event, LoopOptions, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iters: u64,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Directory for `checkpoint_%07d.dfpn` files.
    pub out_dir: Option<PathBuf>,
    /// CSV loss log with header `iteration,lr,loss`.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:07}.dfpn"))
}

/// Run the loop, writing the loss log and checkpoints as it goes.
pub fn run_training(
    cfg: &ModelConfig,
    source: &ClipSource<f32>,
    params: &mut Parameters<f32>,
    state: &mut TrainState<f32>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = match &opts.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
            let mut w = csv::Writer::from_path(p).map_err(Error::csv(p))?;
            w.write_record(["iteration", "lr", "loss"]).map_err(Error::csv(p))?;
            Some((w, p.clone()))
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let loop_opts = LoopOptions {
        iters: opts.iters,
        batch_size: opts.batch_size,
        crop: opts.crop,
        checkpoint_every: opts.checkpoint_every,
    };
    train_loop(cfg, source, params, state, loop_opts, &mut rng, |event| -> Result<()> {
        match event {
            Event::Step { iteration, lr, loss } => {
                if let Some((w, p)) = log.as_mut() {
                    w.write_record([iteration.to_string(), lr.to_string(), loss.to_string()])
                        .map_err(Error::csv(p.as_path()))?;
                }
                rows.push(LogRow { iteration, lr, loss });
            }
            Event::Checkpoint { iteration, params, state } => {
                if let Some(dir) = &opts.out_dir {
                    let path = checkpoint_path(dir, iteration);
                    let ck = Checkpoint {
                        cfg: *cfg,
                        params: params.clone(),
                        state: Some(state.clone()),
                    };
                    save_checkpoint(&path, &ck)?;
                    checkpoints.push(path);
                }
                if let Some((w, p)) = log.as_mut() {
                    w.flush().map_err(Error::io(p.as_path()))?;
                }
            }
        }
        Ok(())
    })?;
    if let Some((mut w, p)) = log {
        w.flush().map_err(Error::io(p))?;
    }
    Ok(TrainSummary { rows, checkpoints })
}
