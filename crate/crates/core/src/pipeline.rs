//! Sequence propagation and Lab-PSNR evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::color::{gray_to_rgb, psnr_lab, replace_luma, ColorSpace, Image};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::fusion::FusionNet;
use crate::global::{GlobalTransfer, SharedExtractor, DEFAULT_ROI_MARGIN};
use crate::local::WarpNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Warp, match and fuse.
    Full,
    /// Warped estimate with the gray frame as luminance.
    LocalOnly,
    /// Matched estimate with the gray frame as luminance.
    GlobalOnly,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "local" => Ok(Mode::LocalOnly),
            "global" => Ok(Mode::GlobalOnly),
            _ => Err(format!("unknown mode `{s}`, expected full, local or global")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::LocalOnly => "local",
            Mode::GlobalOnly => "global",
        })
    }
}

/// Networks and extractor shared by propagation runs.
pub struct Models {
    pub warp: Option<WarpNet<f32>>,
    pub fusion: Option<FusionNet<f32>>,
    pub extractor: SharedExtractor,
    pub roi_margin: usize,
}

impl Models {
    pub fn new(warp: Option<WarpNet<f32>>, fusion: Option<FusionNet<f32>>, extractor: SharedExtractor) -> Self {
        Models {
            warp,
            fusion,
            extractor,
            roi_margin: DEFAULT_ROI_MARGIN,
        }
    }

    /// Loads whichever checkpoints are given.
    pub fn load(warp: Option<&Path>, fusion: Option<&Path>, extractor: SharedExtractor) -> Result<Self> {
        Ok(Models::new(
            warp.map(WarpNet::load).transpose()?,
            fusion.map(FusionNet::load).transpose()?,
            extractor,
        ))
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if matches!(mode, Mode::Full | Mode::LocalOnly) && self.warp.is_none() {
            return Err(Error::Config(format!("mode `{mode}` needs a warp checkpoint")));
        }
        if mode == Mode::Full && self.fusion.is_none() {
            return Err(Error::Config("mode `full` needs a fusion checkpoint".into()));
        }
        Ok(())
    }
}

/// Wall time spent per stage on one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub warp: Duration,
    pub matching: Duration,
    pub fusion: Duration,
}

/// Frame-by-frame propagation of a reference frame through a gray sequence.
pub struct Propagator {
    models: Arc<Models>,
    mode: Mode,
    global: Option<GlobalTransfer>,
    prev_gray: Image,
    prev_color: Image,
    frame: usize,
}

impl Propagator {
    /// Starts a sequence whose first gray frame is `g1` and whose colors are `i1`.
    pub fn new(models: Arc<Models>, mode: Mode, g1: &Image, i1: &Image) -> Result<Self> {
        models.require(mode)?;
        g1.expect_space(ColorSpace::Gray, "propagate")?;
        i1.expect_space(ColorSpace::Rgb, "propagate")?;
        g1.check_same_dims(i1, "propagate")?;
        let global = match mode {
            Mode::LocalOnly => None,
            _ => Some(GlobalTransfer::new(models.extractor.clone(), g1, i1, models.roi_margin)?),
        };
        Ok(Propagator {
            models,
            mode,
            global,
            prev_gray: g1.clone(),
            prev_color: i1.clone(),
            frame: 1,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// 1-based index of the last frame produced.
    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Colors the next gray frame.
    pub fn push(&mut self, gk: &Image) -> Result<(Image, FrameTiming)> {
        gk.expect_space(ColorSpace::Gray, "propagate")?;
        if !gk.same_dims(&self.prev_gray) {
            return Err(shape_err!(
                "frame {} is {}x{} but the sequence is {}x{}",
                self.frame + 1,
                gk.height(),
                gk.width(),
                self.prev_gray.height(),
                self.prev_gray.width()
            ));
        }
        let k = self.frame + 1;
        let mut timing = FrameTiming::default();
        let warped = match self.mode {
            Mode::GlobalOnly => None,
            _ => {
                let t = Instant::now();
                let warp = self.models.warp.as_ref().expect("checked in new");
                let w = warp.warp(&self.prev_color, &self.prev_gray, gk)?;
                timing.warp = t.elapsed();
                Some(w)
            }
        };
        let matched = match &self.global {
            None => None,
            Some(g) => {
                let t = Instant::now();
                let m = g.transfer(gk, k)?;
                timing.matching = t.elapsed();
                Some(m)
            }
        };
        let out = match (self.mode, warped, matched) {
            (Mode::Full, Some(iw), Some(is)) => {
                let t = Instant::now();
                let fused = self.models.fusion.as_ref().expect("checked in new").fuse(gk, &iw, &is)?;
                timing.fusion = t.elapsed();
                fused
            }
            (Mode::LocalOnly, Some(iw), _) => replace_luma(&iw, gk)?,
            (Mode::GlobalOnly, _, Some(is)) => replace_luma(&is, gk)?,
            _ => unreachable!("estimates follow the mode"),
        };
        if !out.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("frame {k} contains non-finite values")));
        }
        self.prev_gray = gk.clone();
        self.prev_color = out.clone();
        self.frame = k;
        Ok((out, timing))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationRun {
    pub mode: Mode,
    /// `frames[0]` is the reference.
    pub frames: Vec<Image>,
    /// Per frame; zero for the reference.
    pub timings: Vec<FrameTiming>,
}

/// Colors `gray[1..]` from the reference colors `reference` of `gray[0]`.
pub fn propagate(models: Arc<Models>, mode: Mode, gray: &[Image], reference: &Image) -> Result<PropagationRun> {
    let first = gray.first().ok_or_else(|| contract_err!("cannot propagate an empty sequence"))?;
    let mut prop = Propagator::new(models, mode, first, reference)?;
    let mut frames = vec![reference.clone()];
    let mut timings = vec![FrameTiming::default()];
    for g in &gray[1..] {
        let (img, t) = prop.push(g)?;
        log::debug!(
            "frame {}: warp {:?}, match {:?}, fuse {:?}",
            prop.frame(),
            t.warp,
            t.matching,
            t.fusion
        );
        frames.push(img);
        timings.push(t);
    }
    Ok(PropagationRun { mode, frames, timings })
}

/// Achromatic copies of the gray frames, the no-color baseline.
pub fn gray_baseline(gray: &[Image]) -> Result<Vec<Image>> {
    gray.iter().map(gray_to_rgb).collect()
}

/// Horizons `N` of the "first N frames" averages.
pub const HORIZONS: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    /// Lab PSNR per frame, frame 1 first.
    pub per_frame: Vec<f64>,
    /// `(N, mean)` for each horizon.
    pub averages: Vec<(usize, f64)>,
}

/// Mean PSNR over frames `2..=min(n, len)`; the reference frame is left out.
/// NaN when there is no such frame.
pub fn average_first(per_frame: &[f64], n: usize) -> f64 {
    let end = n.min(per_frame.len());
    if end < 2 {
        return f64::NAN;
    }
    per_frame[1..end].iter().sum::<f64>() / (end - 1) as f64
}

pub fn evaluate(pred: &[Image], gt: &[Image], label: &str) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(shape_err!(
            "prediction has {} frames but ground truth has {}",
            pred.len(),
            gt.len()
        ));
    }
    let per_frame = pred.iter().zip(gt).map(|(p, g)| psnr_lab(p, g)).collect::<Result<Vec<_>>>()?;
    let averages = HORIZONS.iter().map(|&n| (n, average_first(&per_frame, n))).collect();
    Ok(EvalReport {
        label: label.to_string(),
        per_frame,
        averages,
    })
}

impl EvalReport {
    pub fn average(&self, n: usize) -> f64 {
        average_first(&self.per_frame, n)
    }

    pub fn frames_csv(&self) -> String {
        let mut s = String::from("frame,psnr\n");
        for (i, p) in self.per_frame.iter().enumerate() {
            s.push_str(&format!("{},{p:.6}\n", i + 1));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("N,value\n");
        for (n, v) in &self.averages {
            s.push_str(&format!("{n},{v:.6}\n"));
        }
        s
    }

    /// Writes the per-frame CSV to `path` and the summary next to it with a
    /// `.summary.csv` suffix; returns the summary path.
    pub fn write(&self, path: &Path) -> Result<std::path::PathBuf> {
        let summary = summary_path(path);
        std::fs::write(path, self.frames_csv()).map_err(|e| Error::io(path, e))?;
        std::fs::write(&summary, self.summary_csv()).map_err(|e| Error::io(&summary, e))?;
        Ok(summary)
    }
}

pub fn summary_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.summary.csv"))
}
