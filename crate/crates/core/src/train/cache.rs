//! Cached intermediate estimates for fusion training.
//!
//! Layout: `<cache>/<seq>/<k>.iw` (warped from frame `k-1`) and `<k>.is`
//! (transferred from frame 1), plus a `manifest` naming the warp checkpoint
//! hash, the feature extractor and the seed. Each entry file is `"IPAIR"`,
//! a `u32` version, height, width and channel count as `u32`, little-endian
//! `f32` samples, and the SHA-256 of all preceding bytes.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::SequenceDataset;
use crate::binio::{hex_digest, put_f32s, put_u32, read_file, write_atomic, Cursor};
use crate::color::{ColorSpace, Image};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::global::{GlobalTransfer, SharedExtractor, DEFAULT_ROI_MARGIN};
use crate::local::WarpNet;

pub const PAIR_MAGIC: &[u8; 5] = b"IPAIR";
const PAIR_VERSION: u32 = 1;
const MANIFEST: &str = "manifest";

pub fn write_pair_image(path: &Path, img: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(21 + 4 * img.data().len() + 32);
    out.extend_from_slice(PAIR_MAGIC);
    put_u32(&mut out, PAIR_VERSION as usize);
    for v in [img.height(), img.width(), img.channels()] {
        put_u32(&mut out, v);
    }
    put_f32s(&mut out, img.data());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    write_atomic(path, &out)
}

/// Reads an entry; a checksum mismatch is reported as a format error.
pub fn read_pair_image(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    let what = path.display().to_string();
    if bytes.len() < 32 {
        return Err(Error::Format(format!("{what}: truncated cache entry")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(format!("{what}: cache entry checksum mismatch")));
    }
    let mut cur = Cursor::new(body, &what);
    cur.magic(PAIR_MAGIC)?;
    let version = cur.u32()?;
    if version != PAIR_VERSION {
        return Err(cur.fail(format_args!("unsupported cache version {version}")));
    }
    let (h, w, c) = (cur.usize()?, cur.usize()?, cur.usize()?);
    let space = match c {
        1 => ColorSpace::Gray,
        3 => ColorSpace::Rgb,
        _ => return Err(cur.fail(format_args!("unsupported channel count {c}"))),
    };
    let data = cur.f32s(h * w * c)?;
    cur.finish()?;
    Image::new(h, w, space, data).map_err(|e| cur.fail(e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheManifest {
    /// SHA-256 of the warp checkpoint file.
    pub warp_checkpoint: String,
    pub extractor: String,
    pub roi_margin: usize,
    pub seed: u64,
}

impl CacheManifest {
    fn render(&self) -> String {
        format!(
            "warp_checkpoint = {}\nextractor = {}\nroi_margin = {}\nseed = {}\n",
            self.warp_checkpoint, self.extractor, self.roi_margin, self.seed
        )
    }

    fn parse(path: &Path) -> Result<Self> {
        let fmt = |e: Error| Error::Format(format!("cache manifest: {e}"));
        let mut kv = KeyValues::read(path).map_err(|e| match e {
            Error::Config(_) => fmt(e),
            other => other,
        })?;
        let mut req = |key: &str| -> Result<String> {
            kv.take::<String>(key)?
                .ok_or_else(|| Error::Format(format!("{}: missing `{key}`", path.display())))
        };
        let m = CacheManifest {
            warp_checkpoint: req("warp_checkpoint")?,
            extractor: req("extractor")?,
            roi_margin: req("roi_margin")?.parse().map_err(|_| Error::Format("bad roi_margin in cache manifest".into()))?,
            seed: req("seed")?.parse().map_err(|_| Error::Format("bad seed in cache manifest".into()))?,
        };
        kv.finish().map_err(fmt)?;
        Ok(m)
    }
}

/// Read access to a populated cache directory.
#[derive(Clone, Debug)]
pub struct IntermediateCache {
    dir: PathBuf,
    manifest: CacheManifest,
}

impl IntermediateCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Format(format!(
                "{} has no manifest; run precompute first",
                dir.display()
            )));
        }
        Ok(IntermediateCache {
            dir: dir.to_path_buf(),
            manifest: CacheManifest::parse(&path)?,
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn entry_path(&self, sequence: &str, frame: usize, kind: &str) -> PathBuf {
        entry_path(&self.dir, sequence, frame, kind)
    }

    /// Fails unless the cache was produced with the checkpoint at `warp_ckpt`.
    pub fn check_warp_checkpoint(&self, warp_ckpt: &Path) -> Result<()> {
        let hash = hex_digest(&read_file(warp_ckpt)?);
        if hash != self.manifest.warp_checkpoint {
            return Err(crate::error::contract_err!(
                "cache {} was built with warp checkpoint {} but {} hashes to {hash}",
                self.dir.display(),
                self.manifest.warp_checkpoint,
                warp_ckpt.display()
            ));
        }
        Ok(())
    }

    /// The warped and transferred estimates of 1-based frame `frame`.
    pub fn load_pair(&self, sequence: &str, frame: usize) -> Result<(Image, Image)> {
        let read = |kind| {
            let p = self.entry_path(sequence, frame, kind);
            if !p.exists() {
                return Err(Error::MissingCache {
                    sequence: sequence.to_string(),
                    frame,
                });
            }
            read_pair_image(&p)
        };
        Ok((read("iw")?, read("is")?))
    }
}

fn entry_path(dir: &Path, sequence: &str, frame: usize, kind: &str) -> PathBuf {
    dir.join(sequence).join(format!("{frame}.{kind}"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrecomputeReport {
    /// Frame pairs whose entries were (re)computed.
    pub computed: usize,
    /// Frame pairs whose valid entries were kept.
    pub reused: usize,
}

fn entry_ok(path: &Path) -> bool {
    path.exists() && read_pair_image(path).is_ok()
}

/// Fills the cache for every frame pair of `ds`. Valid entries made with the
/// same checkpoint and extractor are kept; everything else is recomputed.
pub fn precompute_intermediates(
    ds: &SequenceDataset,
    warp_ckpt: &Path,
    extractor: SharedExtractor,
    cache_dir: &Path,
    seed: u64,
) -> Result<PrecomputeReport> {
    let manifest = CacheManifest {
        warp_checkpoint: hex_digest(&read_file(warp_ckpt)?),
        extractor: extractor.tag(),
        roi_margin: DEFAULT_ROI_MARGIN,
        seed,
    };
    let net = WarpNet::<f32>::load(warp_ckpt)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let manifest_path = cache_dir.join(MANIFEST);
    let stale = match CacheManifest::parse(&manifest_path) {
        Ok(old) => old.warp_checkpoint != manifest.warp_checkpoint || old.extractor != manifest.extractor || old.roi_margin != manifest.roi_margin,
        Err(_) => true,
    };
    if stale && manifest_path.exists() {
        log::info!("cache manifest does not match; rebuilding {}", cache_dir.display());
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let mut report = PrecomputeReport::default();
    for seq in &ds.sequences {
        let sdir = cache_dir.join(&seq.name);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut global: Option<GlobalTransfer> = None;
        for k in 2..=seq.len() {
            let iw_path = entry_path(cache_dir, &seq.name, k, "iw");
            let is_path = entry_path(cache_dir, &seq.name, k, "is");
            if !stale && entry_ok(&iw_path) && entry_ok(&is_path) {
                report.reused += 1;
                continue;
            }
            let iw = net.warp(&seq.rgb[k - 2], &seq.gray[k - 2], &seq.gray[k - 1])?;
            if global.is_none() {
                global = Some(GlobalTransfer::new(extractor.clone(), &seq.gray[0], &seq.rgb[0], DEFAULT_ROI_MARGIN)?);
            }
            let is = global.as_ref().expect("set above").transfer(&seq.gray[k - 1], k)?;
            write_pair_image(&iw_path, &iw)?;
            write_pair_image(&is_path, &is)?;
            report.computed += 1;
        }
    }
    write_atomic(&manifest_path, manifest.render().as_bytes())?;
    Ok(report)
}
