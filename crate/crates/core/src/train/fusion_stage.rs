use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EpochStats, IntermediateCache, LossTally, SequenceDataset, TrainConfig};
use crate::color::{psnr_lab, replace_luma, rgb_to_yuv, Image};
use crate::error::{contract_err, Error, Result};
use crate::fusion::{yuv_on_tape, FusionNet};
use crate::local::WarpNet;
use crate::tensor::{adam_step, write_checkpoint, OptimizerState, ParameterSet, Tape, Tensor};

/// One training example: current frame `k` with its cached estimates.
#[derive(Clone, Debug)]
struct Sample {
    sequence: String,
    gk: Image,
    gt: Image,
    iw: Image,
    is: Image,
    prev_rgb: Image,
    prev_gray: Image,
}

impl Sample {
    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Sample> {
        Ok(Sample {
            sequence: self.sequence.clone(),
            gk: self.gk.crop(top, left, h, w)?,
            gt: self.gt.crop(top, left, h, w)?,
            iw: self.iw.crop(top, left, h, w)?,
            is: self.is.crop(top, left, h, w)?,
            prev_rgb: self.prev_rgb.crop(top, left, h, w)?,
            prev_gray: self.prev_gray.crop(top, left, h, w)?,
        })
    }

    fn pad_to(&self, multiple: usize) -> Sample {
        let (h, w) = self.gk.dims();
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        let p = |img: &Image| img.pad_replicate(ph, pw);
        Sample {
            sequence: self.sequence.clone(),
            gk: p(&self.gk),
            gt: p(&self.gt),
            iw: p(&self.iw),
            is: p(&self.is),
            prev_rgb: p(&self.prev_rgb),
            prev_gray: p(&self.prev_gray),
        }
    }
}

fn load_samples(ds: &SequenceDataset, cache: &IntermediateCache) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(ds.pair_count());
    for seq in &ds.sequences {
        for k in 2..=seq.len() {
            let (iw, is) = cache.load_pair(&seq.name, k)?;
            if !iw.same_dims(&seq.rgb[k - 1]) || !is.same_dims(&seq.rgb[k - 1]) {
                return Err(Error::Format(format!(
                    "cache entry for `{}` frame {k} does not match the frame size",
                    seq.name
                )));
            }
            out.push(Sample {
                sequence: seq.name.clone(),
                gk: seq.gray[k - 1].clone(),
                gt: seq.rgb[k - 1].clone(),
                iw,
                is,
                prev_rgb: seq.rgb[k - 2].clone(),
                prev_gray: seq.gray[k - 2].clone(),
            });
        }
    }
    Ok(out)
}

fn chroma_tensor(img: &Image) -> Result<Tensor<f32>> {
    let yuv = rgb_to_yuv(img)?;
    let data = yuv.data().chunks_exact(3).flat_map(|p| [p[1], p[2]]).collect();
    Tensor::new(vec![1, img.height(), img.width(), 2], data)
}

/// Loss of predicting the network's neutral output (the de-normalization
/// offset) everywhere; this is what an untrained network scores.
pub fn neutral_chroma_loss(gk: &Image, iw: &Image, is: &Image, gt: &Image) -> Result<f64> {
    let (a, b) = (rgb_to_yuv(iw)?, rgb_to_yuv(is)?);
    let mean = |img: &Image, c: usize| img.channel(c).iter().map(|&v| v as f64).sum::<f64>() / (gk.height() * gk.width()) as f64;
    let u = (mean(&a, 1) + mean(&b, 1)) / 2.0;
    let v = (mean(&a, 2) + mean(&b, 2)) / 2.0;
    let g = rgb_to_yuv(gt)?;
    let sum: f64 = g.data().chunks_exact(3).map(|p| (p[1] as f64 - u).abs() + (p[2] as f64 - v).abs()).sum();
    Ok(sum / (2 * gk.height() * gk.width()) as f64)
}

pub struct FusionTrainer {
    cfg: TrainConfig,
    net: FusionNet<f32>,
    opt: OptimizerState<f32>,
    warp: Option<(WarpNet<f32>, OptimizerState<f32>)>,
    rng: ChaCha8Rng,
    /// Steps in the whole run, known once an epoch has started.
    total_steps: usize,
}

impl FusionTrainer {
    /// `warp` is required in joint mode and updated along with the fusion net.
    pub fn new(cfg: TrainConfig, warp: Option<WarpNet<f32>>) -> Result<Self> {
        cfg.validate()?;
        let warp = match (cfg.joint, warp) {
            (true, Some(w)) => Some((w, OptimizerState::new(cfg.adam()))),
            (true, None) => return Err(contract_err!("joint training needs the warp network")),
            (false, _) => None,
        };
        Ok(FusionTrainer {
            net: FusionNet::new(cfg.fusion.clone(), cfg.seed ^ 0xF05E)?,
            opt: OptimizerState::new(cfg.adam()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002),
            total_steps: 0,
            warp,
            cfg,
        })
    }

    pub fn net(&self) -> &FusionNet<f32> {
        &self.net
    }

    pub fn warp(&self) -> Option<&WarpNet<f32>> {
        self.warp.as_ref().map(|(w, _)| w)
    }

    fn draw(&mut self, samples: &[Sample]) -> Result<Sample> {
        let s = &samples[self.rng.random_range(0..samples.len())];
        let (h, w) = s.gk.dims();
        let p = self.cfg.patch_size;
        let (ph, pw) = (p.min(h), p.min(w));
        let top = self.rng.random_range(0..=h - ph);
        let left = self.rng.random_range(0..=w - pw);
        let crop = s.crop(top, left, ph, pw)?;
        Ok(if self.cfg.joint {
            crop.pad_to(self.cfg.warp.downsampling())
        } else {
            crop
        })
    }

    fn sample_loss(&mut self, s: &Sample, scale: f32) -> Result<f64> {
        let mut tape = Tape::new();
        let g = tape.constant(s.gk.to_tensor());
        let iw = match &self.warp {
            Some((warp, _)) => {
                let gp = tape.constant(s.prev_gray.to_tensor());
                let gc = tape.constant(s.gk.to_tensor());
                let prev = tape.constant(s.prev_rgb.to_tensor());
                let (kv, kh) = warp.kernels_on_tape(&mut tape, gp, gc)?;
                let warped = tape.separable_warp(prev, kv, kh)?;
                yuv_on_tape(&mut tape, warped)?
            }
            None => tape.constant(rgb_to_yuv(&s.iw)?.to_tensor()),
        };
        let is = tape.constant(rgb_to_yuv(&s.is)?.to_tensor());
        let (chroma, _) = self.net.chroma_on_tape(&mut tape, g, iw, is, None)?;
        let target = tape.constant(chroma_tensor(&s.gt)?);
        let loss = tape.l1_mean(chroma, target)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("fusion loss became {value}")));
        }
        let scaled = tape.scale(loss, scale);
        match &mut self.warp {
            Some((warp, _)) => {
                // Gradients for both networks: backward into a merged set.
                let mut merged = ParameterSet::new();
                for (name, t) in self.net.params().iter().chain(warp.params().iter()) {
                    let mut t = t.clone();
                    t.clear_grad();
                    merged.insert(name, t)?;
                }
                tape.backward(scaled, &mut merged)?;
                for (name, t) in merged.iter() {
                    let dst = self
                        .net
                        .params_mut()
                        .get_mut(name)
                        .or_else(|| warp.params_mut().get_mut(name))
                        .expect("merged from both sets");
                    if let Some(g) = t.grad() {
                        dst.accumulate_grad(g);
                    }
                }
            }
            None => tape.backward(scaled, self.net.params_mut())?,
        }
        Ok(value)
    }

    fn step(&mut self, samples: &[Sample]) -> Result<Vec<(String, f64)>> {
        let batch = (0..self.cfg.batch_size).map(|_| self.draw(samples)).collect::<Result<Vec<_>>>()?;
        self.net.params_mut().clear_grads();
        if let Some((w, _)) = &mut self.warp {
            w.params_mut().clear_grads();
        }
        let scale = 1.0 / batch.len() as f32;
        let mut out = Vec::with_capacity(batch.len());
        for s in &batch {
            out.push((s.sequence.clone(), self.sample_loss(s, scale)?));
        }
        let lr = self.cfg.learning_rate_at(self.opt.step() as usize, self.total_steps);
        self.opt.config.learning_rate = lr;
        adam_step(self.net.params_mut(), &mut self.opt)?;
        if let Some((w, opt)) = &mut self.warp {
            opt.config.learning_rate = lr;
            adam_step(w.params_mut(), opt)?;
        }
        Ok(out)
    }

    fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochStats> {
        let steps = self.cfg.pairs_per_epoch.unwrap_or(samples.len()).max(1).div_ceil(self.cfg.batch_size);
        self.total_steps = steps * self.cfg.epochs;
        let mut tally = LossTally::default();
        for _ in 0..steps {
            for (seq, loss) in self.step(samples)? {
                tally.add(&seq, loss);
            }
        }
        Ok(tally.finish())
    }

    fn validate(&self, samples: &[Sample]) -> Result<Option<f64>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for s in samples {
            sum += psnr_lab(&self.net.fuse(&s.gk, &s.iw, &s.is)?, &s.gt)?;
        }
        Ok(Some(sum / samples.len() as f64))
    }

    fn parameters(&self) -> Result<ParameterSet<f32>> {
        let mut all = self.net.params().clone();
        if let Some((w, _)) = &self.warp {
            for (name, t) in w.params().iter() {
                all.insert(name, t.clone())?;
            }
        }
        Ok(all)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub epochs: Vec<EpochStats>,
    /// Mean Lab PSNR of the fused validation frames after each epoch.
    pub val_psnr: Vec<f64>,
    /// Mean Lab PSNR of the cached warped estimates (luminance from the gray
    /// frame) on the validation frames.
    pub val_warped_psnr: Option<f64>,
    /// Same for the globally transferred estimates.
    pub val_matched_psnr: Option<f64>,
    /// [`neutral_chroma_loss`] averaged over the training frames.
    pub neutral_loss: f64,
    pub checkpoint: PathBuf,
}

impl FusionReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

fn mean_intermediate_psnr(samples: &[Sample], pick: impl Fn(&Sample) -> &Image) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for s in samples {
        sum += psnr_lab(&replace_luma(pick(s), &s.gk)?, &s.gt)?;
    }
    Ok(Some(sum / samples.len() as f64))
}

/// Trains the fusion network on the cached estimates of the training split
/// and reports validation PSNR on the held-out sequences. The cache must
/// have been built with `cfg.warp_checkpoint`.
pub fn train_fusion_stage(ds: &SequenceDataset, cache_dir: &Path, cfg: &TrainConfig, out: &Path) -> Result<FusionReport> {
    let warp_ckpt = cfg
        .warp_checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("fusion training needs `warp_checkpoint`".into()))?;
    let cache = IntermediateCache::open(cache_dir)?;
    cache.check_warp_checkpoint(warp_ckpt)?;
    let (train_idx, val_idx) = ds.split(cfg.val_fraction, cfg.seed);
    let train = load_samples(&ds.subset(&train_idx), &cache)?;
    let val = load_samples(&ds.subset(&val_idx), &cache)?;
    if train.is_empty() {
        return Err(contract_err!("fusion training needs at least one training frame pair"));
    }
    let warp = if cfg.joint { Some(WarpNet::load(warp_ckpt)?) } else { None };
    let mut trainer = FusionTrainer::new(cfg.clone(), warp)?;
    let neutral_loss = train
        .iter()
        .map(|s| neutral_chroma_loss(&s.gk, &s.iw, &s.is, &s.gt))
        .sum::<Result<f64>>()?
        / train.len() as f64;
    let val_warped_psnr = mean_intermediate_psnr(&val, |s| &s.iw)?;
    let val_matched_psnr = mean_intermediate_psnr(&val, |s| &s.is)?;
    if let (Some(w), Some(m)) = (val_warped_psnr, val_matched_psnr) {
        log::info!("validation PSNR of the intermediates: warped {w:.3} dB, matched {m:.3} dB");
    }
    write_checkpoint(out, &trainer.parameters()?)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut val_psnr = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = trainer.run_epoch(&train).map_err(|e| {
            log::error!("fusion training aborted in epoch {epoch}; {} holds the last good weights", out.display());
            e
        })?;
        let psnr = trainer.validate(&val)?;
        log::info!(
            "fusion epoch {epoch}: loss {:.6}, validation PSNR {}",
            stats.mean_loss,
            psnr.map_or("n/a".to_string(), |p| format!("{p:.3} dB"))
        );
        write_checkpoint(out, &trainer.parameters()?)?;
        epochs.push(stats);
        val_psnr.extend(psnr);
    }
    Ok(FusionReport {
        epochs,
        val_psnr,
        val_warped_psnr,
        val_matched_psnr,
        neutral_loss,
        checkpoint: out.to_path_buf(),
    })
}
