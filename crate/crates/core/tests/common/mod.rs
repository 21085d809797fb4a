//! Helpers shared by the integration tests.

use colorprop::tensor::{ConvSpec, Padding, Tensor};

/// Direct-summation convolution, written independently of the im2col path.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Vec<f64> {
    let [n, h, wd, cin] = x.shape().try_into().unwrap();
    let [kh, kw, _, cout] = w.shape().try_into().unwrap();
    let (ho, wo) = (h.div_ceil(spec.stride), wd.div_ceil(spec.stride));
    let read = |bn: usize, y: isize, xx: isize, c: usize| -> f64 {
        let inside = y >= 0 && y < h as isize && xx >= 0 && xx < wd as isize;
        match (inside, spec.padding) {
            (false, Padding::Zero) => 0.0,
            _ => {
                let yy = y.clamp(0, h as isize - 1) as usize;
                let xc = xx.clamp(0, wd as isize - 1) as usize;
                x.data()[((bn * h + yy) * wd + xc) * cin + c]
            }
        }
    };
    let mut out = Vec::with_capacity(n * ho * wo * cout);
    for bn in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * spec.stride) as isize + (ky as isize - (kh / 2) as isize) * spec.dilation as isize;
                            let xx = (ox * spec.stride) as isize + (kx as isize - (kw / 2) as isize) * spec.dilation as isize;
                            for ci in 0..cin {
                                acc += w.data()[((ky * kw + kx) * cin + ci) * cout + co] * read(bn, y, xx, ci);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}
