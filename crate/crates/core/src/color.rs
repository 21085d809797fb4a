//! Images and color representations.
//!
//! Conventions: Yuv is BT.601 full range (Y in [0,1], chroma in about
//! [-0.5, 0.5]); Lab is CIELAB under D65 computed from sRGB with the standard
//! transfer curve. Lab PSNR pools the squared error of all three Lab channels
//! and uses a peak of 100, capped at [`PSNR_CAP_DB`].

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical (or nearly identical) images.
pub const PSNR_CAP_DB: f64 = 99.0;

const LUMA_R: f32 = 0.299;
const LUMA_G: f32 = 0.587;
const LUMA_B: f32 = 0.114;
/// `U = (B - Y) / CB_SCALE`, `V = (R - Y) / CR_SCALE`.
const CB_SCALE: f32 = 2.0 * (1.0 - LUMA_B);
const CR_SCALE: f32 = 2.0 * (1.0 - LUMA_R);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Gray,
    Rgb,
    Yuv,
    Lab,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            _ => 3,
        }
    }
}

/// `height x width x channels` samples, interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, space: ColorSpace, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("image extents must be positive, got {height}x{width}"));
        }
        let expect = height * width * space.channels();
        if data.len() != expect {
            return Err(shape_err!(
                "{height}x{width} {space:?} image needs {expect} samples, got {}",
                data.len()
            ));
        }
        Ok(Image {
            height,
            width,
            space,
            data,
        })
    }

    /// Every pixel set to `pixel` (which must have one value per channel).
    pub fn filled(height: usize, width: usize, space: ColorSpace, pixel: &[f32]) -> Self {
        assert_eq!(pixel.len(), space.channels());
        let data = pixel.iter().copied().cycle().take(height * width * pixel.len()).collect();
        Image {
            height,
            width,
            space,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let c = space.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Image {
            height,
            width,
            space,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let c = self.channels();
        &self.data[(y * self.width + x) * c..][..c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let c = self.channels();
        &mut self.data[(y * self.width + x) * c..][..c]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixel(y, x)[c]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_dims(&self, other: &Image, op: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(shape_err!(
                "{op}: image sizes differ ({}x{} vs {}x{})",
                self.height,
                self.width,
                other.height,
                other.width
            ))
        }
    }

    pub(crate) fn expect_space(&self, space: ColorSpace, op: &str) -> Result<()> {
        if self.space == space {
            Ok(())
        } else {
            Err(contract_err!("{op} expects a {space:?} image, got {:?}", self.space))
        }
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Samples of a single channel, row-major.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels()).copied().collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(shape_err!(
                "crop {height}x{width}+{top}+{left} outside {}x{} image",
                self.height,
                self.width
            ));
        }
        Ok(Image::from_fn(height, width, self.space, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Grows the image to `height x width` by replicating the last row/column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Image {
        assert!(height >= self.height && width >= self.width);
        Image::from_fn(height, width, self.space, |y, x, c| {
            self.get(y.min(self.height - 1), x.min(self.width - 1), c)
        })
    }

    /// `[1, H, W, C]` tensor view of the samples.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width, self.channels()],
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .expect("image dims are consistent")
    }

    /// Builds an image from a `[1, H, W, C]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, space: ColorSpace) -> Result<Image> {
        match t.shape() {
            &[1, h, w, c] if c == space.channels() => {
                Image::new(h, w, space, t.data().iter().map(|v| v.as_f32()).collect())
            }
            s => Err(shape_err!("cannot view tensor {s:?} as a {space:?} image")),
        }
    }

    fn map_pixels(&self, space: ColorSpace, f: impl Fn(&[f32], &mut [f32])) -> Image {
        let (ci, co) = (self.channels(), space.channels());
        let mut data = vec![0.0; self.height * self.width * co];
        for (src, dst) in self.data.chunks_exact(ci).zip(data.chunks_exact_mut(co)) {
            f(src, dst);
        }
        Image {
            height: self.height,
            width: self.width,
            space,
            data,
        }
    }
}

#[inline]
pub(crate) fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA_R * r + LUMA_G * g + LUMA_B * b
}

/// BT.601 luma.
pub fn rgb_to_gray(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::Rgb, "rgb_to_gray")?;
    Ok(img.map_pixels(ColorSpace::Gray, |p, o| o[0] = luma(p[0], p[1], p[2])))
}

/// Replicates the gray channel into an achromatic RGB image.
pub fn gray_to_rgb(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::Gray, "gray_to_rgb")?;
    Ok(img.map_pixels(ColorSpace::Rgb, |p, o| o.fill(p[0])))
}

#[inline]
pub(crate) fn yuv_from_rgb(p: &[f32]) -> [f32; 3] {
    let y = luma(p[0], p[1], p[2]);
    [y, (p[2] - y) / CB_SCALE, (p[0] - y) / CR_SCALE]
}

#[inline]
pub(crate) fn rgb_from_yuv(p: &[f32]) -> [f32; 3] {
    let (y, u, v) = (p[0], p[1], p[2]);
    let r = y + CR_SCALE * v;
    let b = y + CB_SCALE * u;
    let g = (y - LUMA_R * r - LUMA_B * b) / LUMA_G;
    [r, g, b]
}

/// The RGB -> Yuv matrix, rows `Y`, `U`, `V`.
pub fn rgb_to_yuv_matrix() -> [[f32; 3]; 3] {
    [
        [LUMA_R, LUMA_G, LUMA_B],
        [-LUMA_R / CB_SCALE, -LUMA_G / CB_SCALE, (1.0 - LUMA_B) / CB_SCALE],
        [(1.0 - LUMA_R) / CR_SCALE, -LUMA_G / CR_SCALE, -LUMA_B / CR_SCALE],
    ]
}

pub fn rgb_to_yuv(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::Rgb, "rgb_to_yuv")?;
    Ok(img.map_pixels(ColorSpace::Yuv, |p, o| o.copy_from_slice(&yuv_from_rgb(p))))
}

/// Inverse of [`rgb_to_yuv`] without clamping.
pub fn yuv_to_rgb_unclamped(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::Yuv, "yuv_to_rgb")?;
    Ok(img.map_pixels(ColorSpace::Rgb, |p, o| o.copy_from_slice(&rgb_from_yuv(p))))
}

/// Inverse of [`rgb_to_yuv`], clamped to `[0, 1]`.
pub fn yuv_to_rgb(img: &Image) -> Result<Image> {
    Ok(yuv_to_rgb_unclamped(img)?.clamp01())
}

/// Replaces the luminance of an RGB image by `gray`, keeping its chroma.
pub fn replace_luma(rgb: &Image, gray: &Image) -> Result<Image> {
    rgb.expect_space(ColorSpace::Rgb, "replace_luma")?;
    gray.expect_space(ColorSpace::Gray, "replace_luma")?;
    rgb.check_same_dims(gray, "replace_luma")?;
    let mut yuv = rgb_to_yuv(rgb)?;
    for (px, &g) in yuv.data.chunks_exact_mut(3).zip(&gray.data) {
        px[0] = g;
    }
    yuv_to_rgb(&yuv)
}

const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIELAB of one sRGB pixel (inputs clamped to `[0, 1]`).
pub fn lab_from_rgb(p: &[f32]) -> [f64; 3] {
    let [r, g, b] = [0, 1, 2].map(|i| srgb_to_linear((p[i] as f64).clamp(0.0, 1.0)));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (
        lab_f(x / D65_WHITE[0]),
        lab_f(y / D65_WHITE[1]),
        lab_f(z / D65_WHITE[2]),
    );
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab(img: &Image) -> Result<Image> {
    img.expect_space(ColorSpace::Rgb, "rgb_to_lab")?;
    Ok(img.map_pixels(ColorSpace::Lab, |p, o| {
        let lab = lab_from_rgb(p);
        for (d, v) in o.iter_mut().zip(lab) {
            *d = v as f32;
        }
    }))
}

/// PSNR in Lab space with peak 100 and MSE pooled over L, a and b.
pub fn psnr_lab(pred: &Image, gt: &Image) -> Result<f64> {
    pred.expect_space(ColorSpace::Rgb, "psnr_lab")?;
    gt.expect_space(ColorSpace::Rgb, "psnr_lab")?;
    pred.check_same_dims(gt, "psnr_lab")?;
    let mut sq = 0.0;
    for (p, q) in pred.data.chunks_exact(3).zip(gt.data.chunks_exact(3)) {
        let (a, b) = (lab_from_rgb(p), lab_from_rgb(q));
        sq += (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>();
    }
    let mse = sq / (pred.data.len() as f64);
    Ok(psnr_from_mse(mse))
}

/// `10 log10(100^2 / mse)`, capped.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (100.0f64 * 100.0 / mse).log10()).min(PSNR_CAP_DB)
}
