//! Fusion of the warped and the matched color estimates.
//!
//! The network sees the gray frame and both estimates in Yuv. The 7-channel
//! stack is instance-normalized jointly per channel kind: the three luminance
//! channels share one mean and deviation, the two `u` channels another, the
//! two `v` channels a third. A dilated convolution trunk predicts two chroma
//! channels, which are mapped back with the `u` and `v` statistics and
//! combined with the gray frame as luminance, so the output luminance is the
//! input gray frame by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{rgb_from_yuv, rgb_to_yuv, rgb_to_yuv_matrix, ColorSpace, Image};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Init};
use crate::tensor::{self, ConvSpec, InstanceStats, ParameterSet, Real, Tape, Tensor, Var};

pub const PARAM_PREFIX: &str = "fusion.";
const PROJECTION: &str = "fusion.proj";
/// Channels of the normalized input stack: gray, Yuv of each estimate.
pub const INPUT_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub width: usize,
    /// One 3x3 convolution per entry.
    pub dilations: Vec<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 64,
            dilations: vec![1, 2, 4, 1, 1],
        }
    }
}

impl FusionConfig {
    /// Radius in pixels over which one input pixel can influence the output
    /// when normalization statistics are held fixed.
    pub fn receptive_radius(&self) -> usize {
        self.dilations.iter().sum::<usize>() + 1
    }
}

fn trunk_name(i: usize) -> String {
    format!("{PARAM_PREFIX}conv{i}")
}

#[derive(Clone, Debug)]
pub struct FusionNet<T: Real = f32> {
    params: ParameterSet<T>,
    config: FusionConfig,
}

/// Records the BT.601 RGB to Yuv transform as a constant 1x1 convolution.
pub fn yuv_on_tape<T: Real>(tape: &mut Tape<T>, rgb: Var) -> Result<Var> {
    let m = rgb_to_yuv_matrix();
    // weights are [1,1,cin,cout]: entry (i, o) = m[o][i]
    let w = Tensor::from_fn(&[1, 1, 3, 3], |k| T::c(m[k % 3][k / 3] as f64));
    let w = tape.constant(w);
    let b = tape.constant(Tensor::zeros(&[3]));
    tape.conv2d(rgb, w, b, ConvSpec::default())
}

/// Normalization group of each stack channel: `[gk, Y, u, v, Y, u, v]`.
pub const NORM_GROUPS: [usize; INPUT_CHANNELS] = [0, 0, 1, 2, 0, 1, 2];

/// Stack channels whose joint statistics map the `u` and `v` outputs back.
const CHROMA_STATS: [usize; 2] = [2, 3];

/// Frozen `u` and `v` statistics as constant scale and shift.
fn chroma_denorm<T: Real>(stats: &InstanceStats<T>) -> (Vec<T>, Vec<T>) {
    let mut scale = Vec::with_capacity(2 * stats.batch);
    let mut shift = Vec::with_capacity(2 * stats.batch);
    for n in 0..stats.batch {
        for c in CHROMA_STATS {
            scale.push(stats.std_of(n, c));
            shift.push(stats.mean_of(n, c));
        }
    }
    (scale, shift)
}

impl<T: Real> FusionNet<T> {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.dilations.is_empty() || config.dilations.contains(&0) {
            return Err(Error::Config("fusion width and dilations must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for i in 0..config.dilations.len() {
            let cin = if i == 0 { INPUT_CHANNELS } else { config.width };
            nn::add_conv(&mut params, &mut rng, &trunk_name(i), 3, cin, config.width, Init::HeUniform(1.0))?;
        }
        nn::add_conv(&mut params, &mut rng, PROJECTION, 3, config.width, 2, Init::Zero)?;
        Ok(FusionNet { params, config })
    }

    /// Rebuilds a network from stored parameters with the default dilations.
    pub fn from_params(params: ParameterSet<T>) -> Result<Self> {
        let (_, width) = nn::conv_width(&params, &trunk_name(0))
            .ok_or_else(|| Error::Format("fusion parameters lack a first layer".into()))?;
        let mut depth = 0;
        while nn::conv_width(&params, &trunk_name(depth)).is_some() {
            depth += 1;
        }
        let mut config = FusionConfig {
            width,
            ..FusionConfig::default()
        };
        if depth != config.dilations.len() {
            return Err(Error::Format(format!(
                "fusion parameters hold {depth} trunk layers, expected {}",
                config.dilations.len()
            )));
        }
        config.dilations.truncate(depth);
        FusionNet::<T>::new(config.clone(), 0)?.params.check_congruent(&params)?;
        Ok(FusionNet { params, config })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let params = tensor::read_checkpoint(path)?.cast::<T>();
        Self::from_params(params.with_prefix(PARAM_PREFIX))
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// Records the fusion network. `gk` is `[N,H,W,1]`, the estimates are
    /// `[N,H,W,3]` in Yuv. With `frozen` set, the stack is normalized with
    /// those statistics instead of its own. Returns the `[N,H,W,2]` chroma
    /// before clamping, and the statistics used.
    pub fn chroma_on_tape(
        &self,
        tape: &mut Tape<T>,
        gk: Var,
        iw_yuv: Var,
        is_yuv: Var,
        frozen: Option<&InstanceStats<T>>,
    ) -> Result<(Var, InstanceStats<T>)> {
        let stack = tape.concat_channels(&[gk, iw_yuv, is_yuv])?;
        if tape.shape(stack)[3] != INPUT_CHANNELS {
            return Err(shape_err!("fusion expects a gray frame and two 3-channel estimates"));
        }
        let (normed, stats) = match frozen {
            None => {
                let (v, s) = tape.instance_norm_grouped(stack, NORM_GROUPS.to_vec())?;
                (v, Some(s))
            }
            Some(s) => {
                let scale = s.std.iter().map(|&v| v.recip()).collect();
                let shift = s.mean.iter().zip(&s.std).map(|(&m, &d)| -m / d).collect();
                (tape.scale_shift_channels(stack, scale, shift)?, None)
            }
        };
        let mut x = normed;
        for (i, &d) in self.config.dilations.iter().enumerate() {
            x = nn::conv_relu(tape, &self.params, &trunk_name(i), x, ConvSpec::dilated(d))?;
        }
        let p = nn::conv(tape, &self.params, PROJECTION, x, ConvSpec::default())?;
        match (stats, frozen) {
            (Some(s), _) => Ok((tape.denormalize(p, normed, CHROMA_STATS.to_vec())?, s)),
            (None, Some(s)) => {
                let (scale, shift) = chroma_denorm(s);
                Ok((tape.scale_shift_channels(p, scale, shift)?, s.clone()))
            }
            (None, None) => unreachable!("statistics come from one of the two branches"),
        }
    }

    fn chroma(&self, gk: &Image, iw: &Image, is: &Image, frozen: Option<&InstanceStats<T>>) -> Result<Vec<f32>> {
        gk.expect_space(ColorSpace::Gray, "fuse")?;
        for img in [iw, is] {
            img.expect_space(ColorSpace::Rgb, "fuse")?;
            gk.check_same_dims(img, "fuse")?;
        }
        let mut tape = Tape::inference();
        let g = tape.constant(gk.to_tensor());
        let w = tape.constant(rgb_to_yuv(iw)?.to_tensor());
        let s = tape.constant(rgb_to_yuv(is)?.to_tensor());
        let (c, _) = self.chroma_on_tape(&mut tape, g, w, s, frozen)?;
        Ok(tape.value(c).iter().map(|v| v.as_f32()).collect())
    }

    /// Fused estimate in Yuv, unclamped; the `Y` channel is `gk` bit for bit.
    pub fn fuse_yuv(&self, gk: &Image, iw: &Image, is: &Image) -> Result<Image> {
        self.assemble(gk, &self.chroma(gk, iw, is, None)?)
    }

    /// Like [`FusionNet::fuse_yuv`] with normalization statistics held fixed.
    pub fn fuse_yuv_frozen(&self, gk: &Image, iw: &Image, is: &Image, stats: &InstanceStats<T>) -> Result<Image> {
        self.assemble(gk, &self.chroma(gk, iw, is, Some(stats))?)
    }

    /// Statistics the network would normalize these inputs with.
    pub fn input_stats(&self, gk: &Image, iw: &Image, is: &Image) -> Result<InstanceStats<T>> {
        let mut tape = Tape::inference();
        let g = tape.constant(gk.to_tensor());
        let w = tape.constant(rgb_to_yuv(iw)?.to_tensor());
        let s = tape.constant(rgb_to_yuv(is)?.to_tensor());
        let stack = tape.concat_channels(&[g, w, s])?;
        Ok(tape.instance_norm_grouped(stack, NORM_GROUPS.to_vec())?.1)
    }

    fn assemble(&self, gk: &Image, chroma: &[f32]) -> Result<Image> {
        let mut data = Vec::with_capacity(3 * chroma.len() / 2);
        for (&y, uv) in gk.data().iter().zip(chroma.chunks_exact(2)) {
            data.extend_from_slice(&[y, uv[0], uv[1]]);
        }
        Image::new(gk.height(), gk.width(), ColorSpace::Yuv, data)
    }

    /// The final color frame, clamped to `[0, 1]`.
    pub fn fuse(&self, gk: &Image, iw: &Image, is: &Image) -> Result<Image> {
        let yuv = self.fuse_yuv(gk, iw, is)?;
        let mut data = Vec::with_capacity(yuv.data().len());
        for p in yuv.data().chunks_exact(3) {
            data.extend(rgb_from_yuv(p).iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Image::new(gk.height(), gk.width(), ColorSpace::Rgb, data)
    }
}

/// Mean absolute difference of the Yuv chroma channels.
pub fn image_loss(pred: &Image, gt: &Image) -> Result<f64> {
    pred.expect_space(ColorSpace::Rgb, "image_loss")?;
    gt.expect_space(ColorSpace::Rgb, "image_loss")?;
    pred.check_same_dims(gt, "image_loss")?;
    let (a, b) = (rgb_to_yuv(pred)?, rgb_to_yuv(gt)?);
    let sum: f64 = a
        .data()
        .chunks_exact(3)
        .zip(b.data().chunks_exact(3))
        .map(|(p, q)| (p[1] as f64 - q[1] as f64).abs() + (p[2] as f64 - q[2] as f64).abs())
        .sum();
    Ok(sum / (2 * pred.height() * pred.width()) as f64)
}
