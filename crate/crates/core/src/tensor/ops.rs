//! Forward/backward kernels shared by the eager API and the tape.

use super::{Real, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Variance guard used by instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(contract_err!(
            "axis {axis} out of range for rank-{} tensor",
            shape.len()
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
pub fn softmax<T: Real>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(input.shape(), axis)?;
    Tensor::new(
        input.shape().to_vec(),
        softmax_forward(input.data(), outer, len, inner),
    )
}

/// Per-(sample, channel) statistics kept by instance normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats<T: Real = f32> {
    pub batch: usize,
    pub channels: usize,
    /// Indexed `n * channels + c`.
    pub mean: Vec<T>,
    /// `sqrt(var + eps)`, indexed like `mean`.
    pub std: Vec<T>,
}

impl<T: Real> InstanceStats<T> {
    pub fn mean_of(&self, n: usize, c: usize) -> T {
        self.mean[n * self.channels + c]
    }

    pub fn std_of(&self, n: usize, c: usize) -> T {
        self.std[n * self.channels + c]
    }
}

/// Group sizes for a channel-to-group map; ids must be `0..G` and dense.
pub(crate) fn group_sizes(groups: &[usize]) -> Result<Vec<usize>> {
    let g = groups.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0; g];
    for &id in groups {
        sizes[id] += 1;
    }
    if sizes.contains(&0) {
        return Err(contract_err!("normalization group ids must be dense, got {groups:?}"));
    }
    Ok(sizes)
}

/// Instance normalization where channels sharing a group id share one mean
/// and deviation. The statistics are stored per channel.
pub(crate) fn instance_norm_forward<T: Real>(
    x: &[T],
    [n, h, w, c]: [usize; 4],
    groups: &[usize],
) -> Result<(Vec<T>, InstanceStats<T>)> {
    let hw = h * w;
    if hw < 2 {
        return Err(contract_err!("instance normalization needs H*W >= 2, got {h}x{w}"));
    }
    if groups.len() != c {
        return Err(shape_err!("{} normalization groups for {c} channels", groups.len()));
    }
    let sizes = group_sizes(groups)?;
    let counts: Vec<T> = sizes.iter().map(|&s| T::c((hw * s) as f64)).collect();
    let eps = T::c(INSTANCE_NORM_EPS);
    let mut mean = vec![T::zero(); n * c];
    let mut std = vec![T::zero(); n * c];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        let img = &x[b * hw * c..][..hw * c];
        let mut gm = vec![T::zero(); sizes.len()];
        for px in img.chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                gm[groups[ch]] += v;
            }
        }
        gm.iter_mut().zip(&counts).for_each(|(v, &k)| *v /= k);
        let mut gv = vec![T::zero(); sizes.len()];
        for px in img.chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                let d = v - gm[groups[ch]];
                gv[groups[ch]] += d * d;
            }
        }
        for ch in 0..c {
            let g = groups[ch];
            mean[b * c + ch] = gm[g];
            std[b * c + ch] = (gv[g] / counts[g] + eps).sqrt();
        }
        let (m, s) = (&mean[b * c..][..c], &std[b * c..][..c]);
        let out = &mut y[b * hw * c..][..hw * c];
        for (o, px) in out.chunks_exact_mut(c).zip(img.chunks_exact(c)) {
            for ch in 0..c {
                o[ch] = (px[ch] - m[ch]) / s[ch];
            }
        }
    }
    Ok((
        y,
        InstanceStats {
            batch: n,
            channels: c,
            mean,
            std,
        },
    ))
}

pub(crate) fn instance_norm_backward<T: Real>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    stats: &InstanceStats<T>,
    hw: usize,
    groups: &[usize],
) {
    let c = stats.channels;
    let sizes = group_sizes(groups).expect("checked in forward");
    for b in 0..stats.batch {
        let range = b * hw * c..(b + 1) * hw * c;
        let (yb, dyb) = (&y[range.clone()], &dy[range.clone()]);
        let mut mean_dy = vec![T::zero(); sizes.len()];
        let mut mean_dyy = vec![T::zero(); sizes.len()];
        for (py, pdy) in yb.chunks_exact(c).zip(dyb.chunks_exact(c)) {
            for ch in 0..c {
                mean_dy[groups[ch]] += pdy[ch];
                mean_dyy[groups[ch]] += pdy[ch] * py[ch];
            }
        }
        for (g, &size) in sizes.iter().enumerate() {
            let count = T::c((hw * size) as f64);
            mean_dy[g] /= count;
            mean_dyy[g] /= count;
        }
        let dxb = &mut dx[range];
        for ((pdx, py), pdy) in dxb.chunks_exact_mut(c).zip(yb.chunks_exact(c)).zip(dyb.chunks_exact(c)) {
            for ch in 0..c {
                let g = groups[ch];
                let inv = T::one() / stats.std[b * c + ch];
                pdx[ch] += inv * (pdy[ch] - mean_dy[g] - py[ch] * mean_dyy[g]);
            }
        }
    }
}

/// Normalizes every (sample, channel) plane of an `[N,H,W,C]` tensor to zero
/// mean and unit standard deviation.
pub fn instance_normalize<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, InstanceStats<T>)> {
    let dims = input.nhwc()?;
    let groups: Vec<usize> = (0..dims[3]).collect();
    let (y, stats) = instance_norm_forward(input.data(), dims, &groups)?;
    Ok((Tensor::new(input.shape().to_vec(), y)?, stats))
}

/// Inverse of [`instance_normalize`] given its statistics.
pub fn denormalize<T: Real>(input: &Tensor<T>, stats: &InstanceStats<T>) -> Result<Tensor<T>> {
    let [n, _, _, c] = input.nhwc()?;
    if n != stats.batch || c != stats.channels {
        return Err(shape_err!(
            "statistics are for {}x{} planes, tensor has {n}x{c}",
            stats.batch,
            stats.channels
        ));
    }
    let per = input.len() / n;
    let mut out = input.data().to_vec();
    for (b, img) in out.chunks_exact_mut(per).enumerate() {
        for px in img.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = px[ch] * stats.std_of(b, ch) + stats.mean_of(b, ch);
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub(crate) fn avg_pool2_forward<T: Real>(x: &[T], [n, h, w, c]: [usize; 4]) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut y = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut y[((b * ho + oy) * wo + ox) * c..][..c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = &x[((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s * quarter;
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward<T: Real>(dy: &[T], dx: &mut [T], [n, h, w, c]: [usize; 4]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = &dy[((b * ho + oy) * wo + ox) * c..][..c];
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = &mut dx[((b * h + 2 * oy + ddy) * w + 2 * ox + ddx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s * quarter;
                    }
                }
            }
        }
    }
}

/// Two source taps and weights for each output coordinate of a 2x bilinear
/// upsample (half-pixel centres, edge clamped).
fn upsample_taps(extent: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * extent)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let lo = src.floor();
            let frac = src - lo;
            let clamp = |v: f64| v.clamp(0.0, (extent - 1) as f64) as usize;
            (clamp(lo), clamp(lo + 1.0), 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn upsample2_forward<T: Real>(x: &[T], [n, h, w, c]: [usize; 4]) -> Vec<T> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let dst = &mut y[((b * ho + oy) * wo + ox) * c..][..c];
                for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::c(wy * wx);
                        let src = &x[((b * h + sy) * w + sx) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s * wgt;
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Real>(dy: &[T], dx: &mut [T], [n, h, w, c]: [usize; 4]) {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    for b in 0..n {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let src = &dy[((b * ho + oy) * wo + ox) * c..][..c];
                for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::c(wy * wx);
                        let dst = &mut dx[((b * h + sy) * w + sx) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s * wgt;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a separable per-pixel warp: `color` is `[N,H,W,C]`, both
/// kernel maps are `[N,H,W,k]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WarpGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
}

impl WarpGeom {
    pub fn new(color: &[usize], kv: &[usize], kh: &[usize]) -> Result<Self> {
        let &[n, h, w, c] = color else {
            return Err(shape_err!("warp color must be [N,H,W,C], got {color:?}"));
        };
        let &[kn, kh_, kw, k] = kv else {
            return Err(shape_err!("warp kernels must be [N,H,W,k], got {kv:?}"));
        };
        if (kn, kh_, kw) != (n, h, w) || kh != kv {
            return Err(shape_err!(
                "warp kernel maps {kv:?} / {kh:?} do not match color {color:?}"
            ));
        }
        if k % 2 == 0 {
            return Err(contract_err!("warp kernel length must be odd, got {k}"));
        }
        Ok(WarpGeom { n, h, w, c, k })
    }

    #[inline]
    fn clamp(v: isize, extent: usize) -> usize {
        v.clamp(0, extent as isize - 1) as usize
    }
}

/// `out(y,x,c) = sum_i sum_j kv(y,x,i) kh(y,x,j) color(y+i-r, x+j-r, c)` with
/// replicated borders.
pub(crate) fn separable_warp_forward<T: Real>(g: &WarpGeom, color: &[T], kv: &[T], kh: &[T]) -> Vec<T> {
    let r = (g.k / 2) as isize;
    let mut out = vec![T::zero(); g.n * g.h * g.w * g.c];
    let mut row = vec![T::zero(); g.c];
    for b in 0..g.n {
        let img = &color[b * g.h * g.w * g.c..][..g.h * g.w * g.c];
        for y in 0..g.h {
            for x in 0..g.w {
                let p = (b * g.h + y) * g.w + x;
                let (wv, wh) = (&kv[p * g.k..][..g.k], &kh[p * g.k..][..g.k]);
                let dst = &mut out[p * g.c..][..g.c];
                for (i, &vi) in wv.iter().enumerate() {
                    let sy = WarpGeom::clamp(y as isize + i as isize - r, g.h);
                    row.iter_mut().for_each(|v| *v = T::zero());
                    for (j, &hj) in wh.iter().enumerate() {
                        let sx = WarpGeom::clamp(x as isize + j as isize - r, g.w);
                        let src = &img[(sy * g.w + sx) * g.c..][..g.c];
                        for (acc, &s) in row.iter_mut().zip(src) {
                            *acc += hj * s;
                        }
                    }
                    for (d, &a) in dst.iter_mut().zip(&row) {
                        *d += vi * a;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn separable_warp_backward<T: Real>(
    g: &WarpGeom,
    color: &[T],
    kv: &[T],
    kh: &[T],
    d_out: &[T],
    mut d_color: Option<&mut [T]>,
    mut d_kv: Option<&mut [T]>,
    mut d_kh: Option<&mut [T]>,
) {
    let r = (g.k / 2) as isize;
    let plane = g.h * g.w * g.c;
    for b in 0..g.n {
        let img = &color[b * plane..][..plane];
        for y in 0..g.h {
            for x in 0..g.w {
                let p = (b * g.h + y) * g.w + x;
                let (wv, wh) = (&kv[p * g.k..][..g.k], &kh[p * g.k..][..g.k]);
                let go = &d_out[p * g.c..][..g.c];
                for (i, &vi) in wv.iter().enumerate() {
                    let sy = WarpGeom::clamp(y as isize + i as isize - r, g.h);
                    let mut dvi = T::zero();
                    for (j, &hj) in wh.iter().enumerate() {
                        let sx = WarpGeom::clamp(x as isize + j as isize - r, g.w);
                        let off = (sy * g.w + sx) * g.c;
                        let dot: T = img[off..off + g.c].iter().zip(go).map(|(&s, &d)| s * d).sum();
                        dvi += hj * dot;
                        if let Some(dh) = d_kh.as_deref_mut() {
                            dh[p * g.k + j] += vi * dot;
                        }
                        if let Some(dc) = d_color.as_deref_mut() {
                            let wgt = vi * hj;
                            for (d, &gv) in dc[b * plane + off..][..g.c].iter_mut().zip(go) {
                                *d += wgt * gv;
                            }
                        }
                    }
                    if let Some(dv) = d_kv.as_deref_mut() {
                        dv[p * g.k + i] += dvi;
                    }
                }
            }
        }
    }
}

/// Eager separable per-pixel warp of `color` `[N,H,W,C]` by kernel maps
/// `[N,H,W,k]`.
pub fn separable_warp<T: Real>(color: &Tensor<T>, kv: &Tensor<T>, kh: &Tensor<T>) -> Result<Tensor<T>> {
    let g = WarpGeom::new(color.shape(), kv.shape(), kh.shape())?;
    Tensor::new(
        color.shape().to_vec(),
        separable_warp_forward(&g, color.data(), kv.data(), kh.data()),
    )
}

/// Mean absolute difference. The subgradient of `|0|` is taken as 0.
pub(crate) fn l1_mean<T: Real>(a: &[T], b: &[T]) -> T {
    let n = T::c(a.len() as f64);
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n
}

#[inline]
pub(crate) fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
