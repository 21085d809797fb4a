//! Sequence ingestion, train/validation split and patch sampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{rgb_to_gray, Image};
use crate::error::{Error, Result};
use crate::io::{list_frames, read_rgb};

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub name: String,
    pub paths: Vec<PathBuf>,
    pub rgb: Vec<Image>,
    pub gray: Vec<Image>,
}

impl SequenceData {
    /// Builds a sequence from in-memory RGB frames.
    pub fn from_frames(name: impl Into<String>, rgb: Vec<Image>) -> Result<Self> {
        let name = name.into();
        if rgb.len() < 2 {
            return Err(Error::Format(format!(
                "sequence `{name}` has {} frame(s); at least 2 are required",
                rgb.len()
            )));
        }
        if let Some(i) = rgb.iter().position(|f| !f.same_dims(&rgb[0])) {
            return Err(Error::Format(format!(
                "sequence `{name}`: frame {} is {}x{} but frame 1 is {}x{}",
                i + 1,
                rgb[i].height(),
                rgb[i].width(),
                rgb[0].height(),
                rgb[0].width()
            )));
        }
        let gray = rgb.iter().map(rgb_to_gray).collect::<Result<_>>()?;
        Ok(SequenceData {
            name,
            paths: Vec::new(),
            rgb,
            gray,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.rgb.len() - 1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb[0].dims()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<SequenceData>,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<SequenceData>) -> Self {
        SequenceDataset { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.sequences.iter().map(SequenceData::pair_count).sum()
    }

    pub fn get(&self, name: &str) -> Option<&SequenceData> {
        self.sequences.iter().find(|s| s.name == name)
    }

    /// Sequences at the given positions.
    pub fn subset(&self, indices: &[usize]) -> SequenceDataset {
        SequenceDataset::new(indices.iter().map(|&i| self.sequences[i].clone()).collect())
    }

    /// Positions of the training and validation sequences: `fraction` of the
    /// sequences (rounded, at least one when there are two or more) are held
    /// out, chosen by `seed`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.sequences.len();
        let held = if n < 2 || fraction <= 0.0 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val = order[..held].to_vec();
        let mut train = order[held..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        (train, val)
    }
}

/// Reads every subdirectory of `root` holding numbered PNG frames.
/// Directories without frames are skipped.
pub fn load_dataset(root: &Path) -> Result<SequenceDataset> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut sequences = Vec::new();
    for dir in dirs {
        let frames = list_frames(&dir)?;
        if frames.is_empty() {
            continue;
        }
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let rgb = frames.iter().map(|(_, p)| read_rgb(p)).collect::<Result<Vec<_>>>()?;
        let mut seq = SequenceData::from_frames(name, rgb)?;
        seq.paths = frames.into_iter().map(|(_, p)| p).collect();
        sequences.push(seq);
    }
    if sequences.is_empty() {
        log::warn!("no sequences found under {}", root.display());
    }
    Ok(SequenceDataset::new(sequences))
}

/// Co-located crops of two consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub sequence: usize,
    /// 1-based index of the current frame.
    pub frame: usize,
    pub top: usize,
    pub left: usize,
    pub prev_rgb: Image,
    pub cur_rgb: Image,
    pub prev_gray: Image,
    pub cur_gray: Image,
    /// The frames were smaller than the patch; the whole frame was taken
    /// and padded to `multiple`.
    pub padded: bool,
}

/// Draws a frame pair uniformly over all pairs in the dataset (so sequences
/// are chosen in proportion to their pair count) and a uniform crop.
pub fn sample_patch_pair(ds: &SequenceDataset, rng: &mut impl Rng, patch: usize, multiple: usize) -> Result<PatchPair> {
    let total = ds.pair_count();
    if total == 0 {
        return Err(crate::error::contract_err!("cannot sample from an empty dataset"));
    }
    let mut pick = rng.random_range(0..total);
    let (si, seq) = ds
        .sequences
        .iter()
        .enumerate()
        .find(|(_, s)| {
            if pick < s.pair_count() {
                true
            } else {
                pick -= s.pair_count();
                false
            }
        })
        .expect("pick < total");
    let k = pick + 1;
    let (h, w) = seq.dims();
    let grab = |img: &Image, top, left, ph, pw| img.crop(top, left, ph, pw);
    if h < patch || w < patch {
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        return Ok(PatchPair {
            sequence: si,
            frame: k + 1,
            top: 0,
            left: 0,
            prev_rgb: seq.rgb[k - 1].pad_replicate(ph, pw),
            cur_rgb: seq.rgb[k].pad_replicate(ph, pw),
            prev_gray: seq.gray[k - 1].pad_replicate(ph, pw),
            cur_gray: seq.gray[k].pad_replicate(ph, pw),
            padded: true,
        });
    }
    let top = rng.random_range(0..=h - patch);
    let left = rng.random_range(0..=w - patch);
    Ok(PatchPair {
        sequence: si,
        frame: k + 1,
        top,
        left,
        prev_rgb: grab(&seq.rgb[k - 1], top, left, patch, patch)?,
        cur_rgb: grab(&seq.rgb[k], top, left, patch, patch)?,
        prev_gray: grab(&seq.gray[k - 1], top, left, patch, patch)?,
        cur_gray: grab(&seq.gray[k], top, left, patch, patch)?,
        padded: false,
    })
}
