use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_patch_pair, EpochStats, LossTally, PatchPair, SequenceDataset, TrainConfig};
use crate::error::{contract_err, Error, Result};
use crate::local::WarpNet;
use crate::tensor::{adam_step, write_checkpoint, OptimizerState, Real, Tape};

/// Warp loss of one patch pair recorded on `tape`.
pub(crate) fn warp_loss_on_tape<T: Real>(net: &WarpNet<T>, tape: &mut Tape<T>, pair: &PatchPair) -> Result<crate::tensor::Var> {
    let gp = tape.constant(pair.prev_gray.to_tensor());
    let gc = tape.constant(pair.cur_gray.to_tensor());
    let prev = tape.constant(pair.prev_rgb.to_tensor());
    let cur = tape.constant(pair.cur_rgb.to_tensor());
    let (kv, kh) = net.kernels_on_tape(tape, gp, gc)?;
    let warped = tape.separable_warp(prev, kv, kh)?;
    tape.l1_mean(warped, cur)
}

pub struct WarpTrainer {
    cfg: TrainConfig,
    net: WarpNet<f32>,
    opt: OptimizerState<f32>,
    rng: ChaCha8Rng,
    /// Steps in the whole run, known once an epoch has started.
    total_steps: usize,
}

impl WarpTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = WarpNet::new(cfg.warp.clone(), cfg.seed)?;
        Ok(WarpTrainer {
            opt: OptimizerState::new(cfg.adam()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001),
            total_steps: 0,
            net,
            cfg,
        })
    }

    pub fn net(&self) -> &WarpNet<f32> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut WarpNet<f32> {
        &mut self.net
    }

    /// Accumulates gradients of the batch-mean loss; returns per-pair losses.
    pub fn accumulate(&mut self, batch: &[PatchPair]) -> Result<Vec<f64>> {
        let scale = 1.0 / batch.len() as f32;
        let mut losses = Vec::with_capacity(batch.len());
        for pair in batch {
            let mut tape = Tape::new();
            let loss = warp_loss_on_tape(&self.net, &mut tape, pair)?;
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("warp loss became {value}")));
            }
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled, self.net.params_mut())?;
            losses.push(value);
        }
        Ok(losses)
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self, ds: &SequenceDataset) -> Result<Vec<(usize, f64)>> {
        let multiple = self.cfg.warp.downsampling();
        let batch = (0..self.cfg.batch_size)
            .map(|_| sample_patch_pair(ds, &mut self.rng, self.cfg.patch_size, multiple))
            .collect::<Result<Vec<_>>>()?;
        self.net.params_mut().clear_grads();
        let losses = self.accumulate(&batch)?;
        if !self.net.params().iter().all(|(_, t)| t.grad().is_some_and(|g| g.iter().all(|v| v.is_finite()))) {
            return Err(Error::Numeric("non-finite warp gradient".into()));
        }
        self.opt.config.learning_rate = self.cfg.learning_rate_at(self.opt.step() as usize, self.total_steps);
        adam_step(self.net.params_mut(), &mut self.opt)?;
        Ok(batch.iter().map(|p| p.sequence).zip(losses).collect())
    }

    pub fn run_epoch(&mut self, ds: &SequenceDataset) -> Result<EpochStats> {
        if ds.pair_count() == 0 {
            return Err(contract_err!("warp training needs at least one frame pair"));
        }
        let steps = self.cfg.epoch_pairs(ds).div_ceil(self.cfg.batch_size);
        self.total_steps = steps * self.cfg.epochs;
        let mut tally = LossTally::default();
        for _ in 0..steps {
            for (seq, loss) in self.step(ds)? {
                tally.add(&ds.sequences[seq].name, loss);
            }
        }
        Ok(tally.finish())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoint: PathBuf,
    /// SHA-256 of the final checkpoint.
    pub digest: String,
}

impl WarpReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Trains the warp network on the training split of `ds`, writing the
/// checkpoint to `out` before the first epoch and after every epoch. A
/// non-finite loss aborts the run and leaves the last good checkpoint.
pub fn train_warp_stage(ds: &SequenceDataset, cfg: &TrainConfig, out: &Path) -> Result<WarpReport> {
    let (train_idx, _) = ds.split(cfg.val_fraction, cfg.seed);
    let train = ds.subset(&train_idx);
    let mut trainer = WarpTrainer::new(cfg.clone())?;
    write_checkpoint(out, trainer.net().params())?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = trainer.run_epoch(&train).map_err(|e| {
            log::error!("warp training aborted in epoch {epoch}; {} holds the last good weights", out.display());
            e
        })?;
        log::info!("warp epoch {epoch}: loss {:.6}", stats.mean_loss);
        write_checkpoint(out, trainer.net().params())?;
        epochs.push(stats);
    }
    Ok(WarpReport {
        epochs,
        checkpoint: out.to_path_buf(),
        digest: trainer.net().params().digest(),
    })
}
