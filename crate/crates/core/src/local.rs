//! Frame-to-frame color propagation with per-pixel separable kernels.
//!
//! A U-shaped network looks at two consecutive gray frames and predicts, for
//! every pixel, a vertical and a horizontal 1-D kernel (softmax normalized).
//! The previous color frame is then resampled with the outer product of the
//! two kernels, which accounts for motion and interpolation at once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{ColorSpace, Image};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{self, Init};
use crate::tensor::{self, ConvSpec, ParameterSet, Real, Tape, Tensor, Var};

pub const DEFAULT_KERNEL_SIZE: usize = 21;
/// Largest kernel length the warp accepts.
pub const MAX_KERNEL_SIZE: usize = 63;
pub const PARAM_PREFIX: &str = "warp.";

/// Dense map of per-pixel separable kernels, `[y][x][i]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    height: usize,
    width: usize,
    k: usize,
    vertical: Vec<f32>,
    horizontal: Vec<f32>,
}

impl KernelField {
    pub fn new(height: usize, width: usize, k: usize, vertical: Vec<f32>, horizontal: Vec<f32>) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(contract_err!("kernel length must be odd, got {k}"));
        }
        let n = height * width * k;
        if vertical.len() != n || horizontal.len() != n {
            return Err(shape_err!(
                "kernel field {height}x{width}x{k} needs {n} weights per direction"
            ));
        }
        Ok(KernelField {
            height,
            width,
            k,
            vertical,
            horizontal,
        })
    }

    /// Every pixel reads the source displaced by `(dy, dx)`.
    pub fn shifted_delta(height: usize, width: usize, k: usize, dy: isize, dx: isize) -> Result<Self> {
        let r = (k / 2) as isize;
        if dy.abs() > r || dx.abs() > r {
            return Err(contract_err!("shift ({dy},{dx}) exceeds kernel radius {r}"));
        }
        let one_hot = |d: isize| {
            let mut v = vec![0.0; k];
            v[(r + d) as usize] = 1.0;
            v
        };
        let (v, h) = (one_hot(dy), one_hot(dx));
        let n = height * width;
        KernelField::new(
            height,
            width,
            k,
            v.iter().copied().cycle().take(n * k).collect(),
            h.iter().copied().cycle().take(n * k).collect(),
        )
    }

    pub fn delta(height: usize, width: usize, k: usize) -> Result<Self> {
        Self::shifted_delta(height, width, k, 0, 0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn vertical(&self) -> &[f32] {
        &self.vertical
    }

    pub fn horizontal(&self) -> &[f32] {
        &self.horizontal
    }

    pub fn vertical_at(&self, y: usize, x: usize) -> &[f32] {
        &self.vertical[(y * self.width + x) * self.k..][..self.k]
    }

    pub fn horizontal_at(&self, y: usize, x: usize) -> &[f32] {
        &self.horizontal[(y * self.width + x) * self.k..][..self.k]
    }

    /// Expected source displacement `(dy, dx)` read by the kernels at a pixel.
    pub fn source_offset(&self, y: usize, x: usize) -> (f32, f32) {
        let r = (self.k / 2) as f32;
        let center = |w: &[f32]| w.iter().enumerate().map(|(i, &v)| i as f32 * v).sum::<f32>() - r;
        (center(self.vertical_at(y, x)), center(self.horizontal_at(y, x)))
    }

    /// Checks that every kernel is nonnegative and sums to one within `tol`.
    pub fn check_normalized(&self, tol: f32) -> Result<()> {
        for (dir, data) in [("vertical", &self.vertical), ("horizontal", &self.horizontal)] {
            for (p, kern) in data.chunks_exact(self.k).enumerate() {
                let sum: f32 = kern.iter().sum();
                if kern.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > tol {
                    return Err(Error::Numeric(format!(
                        "{dir} kernel at pixel {p} is not normalized (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn tensors<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        let shape = [1, self.height, self.width, self.k];
        let conv = |d: &[f32]| Tensor::new(shape.to_vec(), d.iter().map(|&v| T::c(v as f64)).collect()).unwrap();
        (conv(&self.vertical), conv(&self.horizontal))
    }
}

/// Resamples `color` with a kernel field; borders are replicated.
pub fn apply_separable_kernels(color: &Image, field: &KernelField) -> Result<Image> {
    if field.k > MAX_KERNEL_SIZE {
        return Err(contract_err!(
            "kernel length {} exceeds the supported maximum {MAX_KERNEL_SIZE}",
            field.k
        ));
    }
    if color.dims() != (field.height, field.width) {
        return Err(shape_err!(
            "kernel field is {}x{} but the image is {}x{}",
            field.height,
            field.width,
            color.height(),
            color.width()
        ));
    }
    let (kv, kh) = field.tensors::<f32>();
    let out = tensor::separable_warp(&color.to_tensor::<f32>(), &kv, &kh)?;
    Image::from_tensor(&out, color.space())
}

/// Mean absolute difference over all samples.
pub fn warp_loss(warped: &Image, gt: &Image) -> Result<f64> {
    mean_abs_diff(warped, gt, "warp_loss")
}

pub(crate) fn mean_abs_diff(a: &Image, b: &Image, op: &str) -> Result<f64> {
    a.check_same_dims(b, op)?;
    if a.channels() != b.channels() {
        return Err(shape_err!("{op}: channel counts differ"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpNetConfig {
    pub kernel_size: usize,
    /// Channel width of each encoder stage; stages are separated by 2x pooling.
    pub widths: Vec<usize>,
    /// Start the kernel heads at zero so every initial kernel is uniform.
    pub zero_head: bool,
}

impl Default for WarpNetConfig {
    fn default() -> Self {
        WarpNetConfig {
            kernel_size: DEFAULT_KERNEL_SIZE,
            widths: vec![32, 64, 128, 256],
            zero_head: false,
        }
    }
}

impl WarpNetConfig {
    /// Input extents must be multiples of this.
    pub fn downsampling(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size > MAX_KERNEL_SIZE {
            return Err(Error::Config(format!(
                "kernel size must be odd and at most {MAX_KERNEL_SIZE}, got {}",
                self.kernel_size
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("warp widths must be positive".into()));
        }
        Ok(())
    }
}

/// The kernel-prediction network.
#[derive(Clone, Debug)]
pub struct WarpNet<T: Real = f32> {
    params: ParameterSet<T>,
    config: WarpNetConfig,
}

fn enc_name(stage: usize, j: usize) -> String {
    format!("{PARAM_PREFIX}enc{stage}.conv{j}")
}

fn dec_name(stage: usize, j: usize) -> String {
    format!("{PARAM_PREFIX}dec{stage}.conv{j}")
}

const HEAD_V: &str = "warp.head_v";
const HEAD_H: &str = "warp.head_h";

impl<T: Real> WarpNet<T> {
    pub fn new(config: WarpNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let w = &config.widths;
        let he = Init::HeUniform(1.0);
        for (s, &width) in w.iter().enumerate() {
            let cin = if s == 0 { 2 } else { w[s - 1] };
            nn::add_conv(&mut params, &mut rng, &enc_name(s, 0), 3, cin, width, he)?;
            nn::add_conv(&mut params, &mut rng, &enc_name(s, 1), 3, width, width, he)?;
        }
        for s in (0..w.len() - 1).rev() {
            nn::add_conv(&mut params, &mut rng, &dec_name(s, 0), 3, w[s + 1] + w[s], w[s], he)?;
            nn::add_conv(&mut params, &mut rng, &dec_name(s, 1), 3, w[s], w[s], he)?;
        }
        let head = if config.zero_head {
            Init::Zero
        } else {
            Init::HeUniform(0.1)
        };
        nn::add_conv(&mut params, &mut rng, HEAD_V, 3, w[0], config.kernel_size, head)?;
        nn::add_conv(&mut params, &mut rng, HEAD_H, 3, w[0], config.kernel_size, head)?;
        Ok(WarpNet { params, config })
    }

    /// Rebuilds a network from stored parameters, inferring its layout.
    pub fn from_params(params: ParameterSet<T>) -> Result<Self> {
        let mut widths = Vec::new();
        while let Some((_, cout)) = nn::conv_width(&params, &enc_name(widths.len(), 0)) {
            widths.push(cout);
        }
        let (_, kernel_size) = nn::conv_width(&params, HEAD_V)
            .ok_or_else(|| Error::Format("warp parameters lack a kernel head".into()))?;
        if widths.is_empty() {
            return Err(Error::Format("warp parameters lack encoder stages".into()));
        }
        let config = WarpNetConfig {
            kernel_size,
            widths,
            zero_head: false,
        };
        let template = WarpNet::<T>::new(config.clone(), 0)?;
        template.params.check_congruent(&params)?;
        Ok(WarpNet { params, config })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let params = tensor::read_checkpoint(path)?.cast::<T>();
        Self::from_params(params.with_prefix(PARAM_PREFIX))
    }

    pub fn config(&self) -> &WarpNetConfig {
        &self.config
    }

    pub fn kernel_size(&self) -> usize {
        self.config.kernel_size
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// Records the network on `tape`. Inputs are `[N,H,W,1]` gray frames with
    /// extents divisible by [`WarpNetConfig::downsampling`]; outputs are the
    /// vertical and horizontal kernels, `[N,H,W,k]`, softmax-normalized.
    pub fn kernels_on_tape(&self, tape: &mut Tape<T>, g_prev: Var, g_cur: Var) -> Result<(Var, Var)> {
        let [n, h, w, _] = match tape.shape(g_prev) {
            &[n, h, w, 1] => [n, h, w, 1],
            s => return Err(shape_err!("warp net expects [N,H,W,1] gray input, got {s:?}")),
        };
        if tape.shape(g_cur) != tape.shape(g_prev) {
            return Err(shape_err!("warp net inputs differ in shape"));
        }
        let f = self.config.downsampling();
        if h % f != 0 || w % f != 0 {
            return Err(shape_err!("warp net input {h}x{w} is not a multiple of {f}"));
        }
        let p = &self.params;
        let spec = ConvSpec::default();
        let stacked = tape.concat_channels(&[g_prev, g_cur])?;
        let mut x = tape.scale_shift_channels(stacked, vec![T::one(); 2 * n], vec![T::c(-0.5); 2 * n])?;
        let stages = self.config.widths.len();
        let mut skips = Vec::with_capacity(stages);
        for s in 0..stages {
            if s > 0 {
                x = tape.avg_pool2(x)?;
            }
            x = nn::conv_relu(tape, p, &enc_name(s, 0), x, spec)?;
            x = nn::conv_relu(tape, p, &enc_name(s, 1), x, spec)?;
            skips.push(x);
        }
        for s in (0..stages - 1).rev() {
            let up = tape.upsample2(x)?;
            x = tape.concat_channels(&[up, skips[s]])?;
            x = nn::conv_relu(tape, p, &dec_name(s, 0), x, spec)?;
            x = nn::conv_relu(tape, p, &dec_name(s, 1), x, spec)?;
        }
        let lv = nn::conv(tape, p, HEAD_V, x, spec)?;
        let lh = nn::conv(tape, p, HEAD_H, x, spec)?;
        Ok((tape.softmax(lv, 3)?, tape.softmax(lh, 3)?))
    }

    /// Kernel field mapping frame `k-1` onto frame `k`. Inputs of any size
    /// are padded (replicate) to the downsampling multiple and cropped back.
    pub fn predict_kernels(&self, g_prev: &Image, g_cur: &Image) -> Result<KernelField> {
        g_prev.expect_space(ColorSpace::Gray, "predict_kernels")?;
        g_cur.expect_space(ColorSpace::Gray, "predict_kernels")?;
        g_prev.check_same_dims(g_cur, "predict_kernels")?;
        let (h, w) = g_prev.dims();
        let f = self.config.downsampling();
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        let mut tape = Tape::<T>::inference();
        let a = tape.constant(g_prev.pad_replicate(ph, pw).to_tensor());
        let b = tape.constant(g_cur.pad_replicate(ph, pw).to_tensor());
        let (kv, kh) = self.kernels_on_tape(&mut tape, a, b)?;
        let k = self.config.kernel_size;
        let crop = |v: Var| -> Vec<f32> {
            let data = tape.value(v);
            let mut out = Vec::with_capacity(h * w * k);
            for y in 0..h {
                for x in 0..w {
                    out.extend(data[(y * pw + x) * k..][..k].iter().map(|v| v.as_f32()));
                }
            }
            out
        };
        KernelField::new(h, w, k, crop(kv), crop(kh))
    }

    /// The local propagation step: warps the previous color frame onto the
    /// current gray frame.
    pub fn warp(&self, prev_color: &Image, g_prev: &Image, g_cur: &Image) -> Result<Image> {
        prev_color.expect_space(ColorSpace::Rgb, "warp")?;
        let field = self.predict_kernels(g_prev, g_cur)?;
        Ok(apply_separable_kernels(prev_color, &field)?.clamp01())
    }
}
