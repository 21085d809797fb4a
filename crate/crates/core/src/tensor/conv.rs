//! 2-D cross-correlation over `[N, H, W, C]` tensors.
//!
//! Implemented as im2col followed by a GEMM. Weights are laid out
//! `[kh, kw, cin, cout]`, which is already the `K x Cout` matrix the GEMM
//! wants, so no reshuffling is needed in either direction.

use super::gemm::{matmul, Mat};
use super::{Real, Tensor};
use crate::error::{contract_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Out-of-range taps read the nearest edge sample.
    #[default]
    Replicate,
    /// Out-of-range taps read zero.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: Padding::Replicate,
        }
    }
}

impl ConvSpec {
    pub fn dilated(dilation: usize) -> Self {
        ConvSpec {
            dilation,
            ..Default::default()
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(input: &[usize], weights: &[usize], bias: &[usize], spec: ConvSpec) -> Result<Self> {
        let &[n, h, w, cin] = input else {
            return Err(shape_err!("conv2d input must be [N,H,W,C], got {input:?}"));
        };
        let &[kh, kw, wcin, cout] = weights else {
            return Err(shape_err!(
                "conv2d weights must be [kh,kw,cin,cout], got {weights:?}"
            ));
        };
        if wcin != cin {
            return Err(shape_err!(
                "conv2d input has {cin} channels but weights expect {wcin}"
            ));
        }
        if bias != [cout] {
            return Err(shape_err!("conv2d bias must be [{cout}], got {bias:?}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(contract_err!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(contract_err!("conv2d stride and dilation must be positive"));
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ho: h.div_ceil(spec.stride),
            wo: w.div_ceil(spec.stride),
            spec,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.ho, self.wo, self.cout]
    }

    /// Source row for output row `o` and tap `k`, or `None` if it falls in
    /// the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, half: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k * self.spec.dilation) as isize
            - (half * self.spec.dilation) as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            match self.spec.padding {
                Padding::Zero => None,
                Padding::Replicate => Some(pos.clamp(0, extent as isize - 1) as usize),
            }
        }
    }

    /// Fills `col` (`out_pixels x patch_len`) from one image of the batch.
    fn im2col<T: Real>(&self, image: &[T], col: &mut [T]) {
        let (hh, hw) = (self.kh / 2, self.kw / 2);
        let k = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut col[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let sy = self.src(oy, ky, hh, self.h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        match (sy, self.src(ox, kx, hw, self.w)) {
                            (Some(y), Some(x)) => {
                                dst.copy_from_slice(&image[(y * self.w + x) * self.cin..][..self.cin])
                            }
                            _ => dst.iter_mut().for_each(|v| *v = T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Scatters `col` gradients back onto one image of the batch.
    fn col2im<T: Real>(&self, col: &[T], image: &mut [T]) {
        let (hh, hw) = (self.kh / 2, self.kw / 2);
        let k = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &col[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let Some(y) = self.src(oy, ky, hh, self.h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(x) = self.src(ox, kx, hw, self.w) else {
                            continue;
                        };
                        let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        let dst = &mut image[(y * self.w + x) * self.cin..][..self.cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, input: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![T::zero(); g.n * p * g.cout];
    let mut col = vec![T::zero(); p * k];
    let wmat = Mat::new(weights, k, g.cout);
    for n in 0..g.n {
        g.im2col(&input[n * g.h * g.w * g.cin..][..g.h * g.w * g.cin], &mut col);
        let dst = &mut out[n * p * g.cout..][..p * g.cout];
        for row in dst.chunks_exact_mut(g.cout) {
            row.copy_from_slice(bias);
        }
        matmul(Mat::new(&col, p, k), wmat, dst, true);
    }
    out
}

/// Accumulates gradients of a convolution. `d_input` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weights: &[T],
    d_out: &[T],
    d_input: Option<&mut [T]>,
    d_weights: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let img = g.h * g.w * g.cin;
    if let Some(db) = d_bias {
        for row in d_out.chunks_exact(g.cout) {
            for (b, &v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
    }
    let mut col = vec![T::zero(); p * k];
    if let Some(dw) = d_weights {
        for n in 0..g.n {
            g.im2col(&input[n * img..][..img], &mut col);
            let go = &d_out[n * p * g.cout..][..p * g.cout];
            matmul(Mat::new(&col, p, k).t(), Mat::new(go, p, g.cout), dw, true);
        }
    }
    if let Some(di) = d_input {
        for n in 0..g.n {
            let go = &d_out[n * p * g.cout..][..p * g.cout];
            matmul(Mat::new(go, p, g.cout), Mat::new(weights, k, g.cout).t(), &mut col, false);
            g.col2im(&col, &mut di[n * img..][..img]);
        }
    }
}

/// Cross-correlation of `input` `[N,H,W,Cin]` with `weights` `[kh,kw,Cin,Cout]`.
///
/// Output extents are `ceil(H / stride) x ceil(W / stride)`; taps are centred
/// so stride 1 preserves the spatial size.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weights.shape(), bias.shape(), spec)?;
    let out = conv_forward(&g, input.data(), weights.data(), bias.data());
    Tensor::new(g.out_shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 3, 1], |i| i as f32 * 0.1);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 5, 3], |i| (i as f64).cos());
        let w = Tensor::zeros(&[3, 3, 3, 2]);
        let b = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let y = conv2d(&x, &w, &b, ConvSpec { stride: 2, ..Default::default() }).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 2]);
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.25, -1.5]);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 1]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d(&x, &w, &b, ConvSpec::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 1]);
        let w = Tensor::zeros(&[2, 2, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &w, &b, ConvSpec::default()).is_err());
    }

    #[test]
    fn replicate_padding_reads_edges() {
        // 1x3 kernel picking the left neighbour: column 0 reads itself.
        let x = Tensor::<f32>::new(vec![1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, ConvSpec::default()).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0]);
        let z = conv2d(&x, &w, &b, ConvSpec { padding: Padding::Zero, ..Default::default() }).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 2.0]);
    }
}
