//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its output and enough context to
//! run its vector-Jacobian product. A tape is built per forward pass and
//! dropped afterwards; [`Tape::backward`] walks it in reverse and adds the
//! resulting parameter gradients into a [`ParameterSet`].

use super::conv::{conv_backward, conv_forward, ConvGeom, ConvSpec};
use super::ops::{self, InstanceStats, WarpGeom};
use super::{ParameterSet, Real, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    AvgPool2 { x: Var, dims: [usize; 4] },
    Upsample2 { x: Var, dims: [usize; 4] },
    Concat(Vec<Var>),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    InstanceNorm { x: Var, stats: InstanceStats<T>, hw: usize, groups: Vec<usize> },
    ScaleShift { x: Var, scale: Vec<T>, channels: usize },
    Denorm { p: Var, norm: Var, source: Vec<usize> },
    Warp { color: Var, kv: Var, kh: Var, geom: WarpGeom },
    L1Mean { a: Var, b: Var },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it will carry gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::Leaf, false)
    }

    /// Input whose gradient can be read back with [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::Leaf, true)
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<Var> {
        let t = params.require(name)?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        match self.shape(v) {
            &[n, h, w, c] => Ok([n, h, w, c]),
            s => Err(shape_err!("expected [N,H,W,C], got {s:?}")),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), spec)?;
        let out = conv_forward(&geom, self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(geom.out_shape(), out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        self.push(shape, out, Op::Relu(x), rg)
    }

    /// 2x2 average pooling with stride 2. Extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let dims @ [n, h, w, c] = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even extents, got {h}x{w}"));
        }
        let out = ops::avg_pool2_forward(self.value(x), dims);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, h / 2, w / 2, c], out, Op::AvgPool2 { x, dims }, rg))
    }

    /// 2x bilinear upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let dims @ [n, h, w, c] = self.dims4(x)?;
        let out = ops::upsample2_forward(self.value(x), dims);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, 2 * h, 2 * w, c], out, Op::Upsample2 { x, dims }, rg))
    }

    /// Concatenates `[N,H,W,*]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let [n, h, w, _] = self.dims4(first)?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, ph, pw, pc] = self.dims4(p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!(
                    "concat operands disagree: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                ));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * h * w * total);
        for px in 0..n * h * w {
            for (&p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p)[px * c..][..c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![n, h, w, total], out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = ops::axis_split(self.shape(x), axis)?;
        let out = ops::softmax_forward(self.value(x), outer, len, inner);
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Instance normalization; the statistics are returned for later
    /// de-normalization and are treated as part of the op's Jacobian.
    pub fn instance_norm(&mut self, x: Var) -> Result<(Var, InstanceStats<T>)> {
        let c = self.shape(x).last().copied().unwrap_or(0);
        self.instance_norm_grouped(x, (0..c).collect())
    }

    /// Instance normalization where the channels sharing an id in `groups`
    /// (one entry per channel, ids `0..G`) are normalized jointly.
    pub fn instance_norm_grouped(&mut self, x: Var, groups: Vec<usize>) -> Result<(Var, InstanceStats<T>)> {
        let dims @ [_, h, w, _] = self.dims4(x)?;
        let (out, stats) = ops::instance_norm_forward(self.value(x), dims, &groups)?;
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        let v = self.push(
            shape,
            out,
            Op::InstanceNorm {
                x,
                stats: stats.clone(),
                hw: h * w,
                groups,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// `y = x * scale[n, c] + shift[n, c]` with constant per-plane factors.
    pub fn scale_shift_channels(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let [n, h, w, c] = self.dims4(x)?;
        if scale.len() != n * c || shift.len() != n * c {
            return Err(shape_err!(
                "scale/shift need {} entries, got {}/{}",
                n * c,
                scale.len(),
                shift.len()
            ));
        }
        let mut out = self.value(x).to_vec();
        for (i, px) in out.chunks_exact_mut(c).enumerate() {
            let b = i / (h * w);
            for ch in 0..c {
                px[ch] = px[ch] * scale[b * c + ch] + shift[b * c + ch];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![n, h, w, c],
            out,
            Op::ScaleShift {
                x,
                scale,
                channels: c,
            },
            rg,
        ))
    }

    /// Maps channel `j` of `p` back with the statistics of channel
    /// `source[j]` of `norm`, which must come from an instance normalization:
    /// `y = p * std + mean`. Gradients flow into `p` and, through the
    /// statistics, into the normalized input.
    pub fn denormalize(&mut self, p: Var, norm: Var, source: Vec<usize>) -> Result<Var> {
        let [n, h, w, c] = self.dims4(p)?;
        let stats = match &self.node(norm).op {
            Op::InstanceNorm { stats, .. } => stats,
            _ => return Err(contract_err!("denormalize needs the output of an instance normalization")),
        };
        if source.len() != c || source.iter().any(|&s| s >= stats.channels) {
            return Err(shape_err!(
                "denormalize: {} source channels for {c} channels, {} available",
                source.len(),
                stats.channels
            ));
        }
        if self.shape(norm)[..3] != [n, h, w] {
            return Err(shape_err!("denormalize: {:?} does not match {:?}", self.shape(p), self.shape(norm)));
        }
        let mut out = self.value(p).to_vec();
        for (i, px) in out.chunks_exact_mut(c).enumerate() {
            let b = i / (h * w);
            for (ch, v) in px.iter_mut().enumerate() {
                *v = *v * stats.std_of(b, source[ch]) + stats.mean_of(b, source[ch]);
            }
        }
        let rg = self.rg(&[p, norm]);
        Ok(self.push(vec![n, h, w, c], out, Op::Denorm { p, norm, source }, rg))
    }

    /// Per-pixel separable filtering of `color` by vertical/horizontal kernels.
    pub fn separable_warp(&mut self, color: Var, kv: Var, kh: Var) -> Result<Var> {
        let geom = WarpGeom::new(self.shape(color), self.shape(kv), self.shape(kh))?;
        let out = ops::separable_warp_forward(&geom, self.value(color), self.value(kv), self.value(kh));
        let (shape, rg) = (self.shape(color).to_vec(), self.rg(&[color, kv, kh]));
        Ok(self.push(shape, out, Op::Warp { color, kv, kh, geom }, rg))
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "l1 operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let v = ops::l1_mean(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![v], Op::L1Mean { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a, b]));
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a, b]));
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(&[x]));
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Parameter gradients are
    /// added into `params`, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var, params: &mut ParameterSet<T>) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                for (v, contrib) in self.vjp(i, &g) {
                    match &mut grads[v.0] {
                        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += *c),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            let (Some(name), Some(g)) = (&node.param, g) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            params
                .get_mut(name)
                .ok_or_else(|| contract_err!("parameter `{name}` is not in the target set"))?
                .accumulate_grad(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn zeros_if(&self, v: Var) -> Option<Vec<T>> {
        self.node(v)
            .requires_grad
            .then(|| vec![T::zero(); self.node(v).value.len()])
    }

    /// Gradient contributions of node `i` to its inputs given its output
    /// gradient `g`.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let mut emit = |v: Var, buf: Option<Vec<T>>| {
            if let Some(b) = buf {
                out.push((v, b));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (mut dx, mut dw, mut db) = (self.zeros_if(*x), self.zeros_if(*w), self.zeros_if(*b));
                conv_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                emit(*x, dx);
                emit(*w, dw);
                emit(*b, db);
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                emit(*x, Some(d));
            }
            Op::AvgPool2 { x, dims } => {
                let mut d = vec![T::zero(); self.node(*x).value.len()];
                ops::avg_pool2_backward(g, &mut d, *dims);
                emit(*x, Some(d));
            }
            Op::Upsample2 { x, dims } => {
                let mut d = vec![T::zero(); self.node(*x).value.len()];
                ops::upsample2_backward(g, &mut d, *dims);
                emit(*x, Some(d));
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let pixels = node.value.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let c = *self.shape(p).last().unwrap();
                    if self.node(p).requires_grad {
                        let mut d = Vec::with_capacity(pixels * c);
                        for px in 0..pixels {
                            d.extend_from_slice(&g[px * total + offset..][..c]);
                        }
                        emit(p, Some(d));
                    }
                    offset += c;
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut d = vec![T::zero(); g.len()];
                ops::softmax_backward(&node.value, g, &mut d, *outer, *len, *inner);
                emit(*x, Some(d));
            }
            Op::InstanceNorm { x, stats, hw, groups } => {
                let mut d = vec![T::zero(); g.len()];
                ops::instance_norm_backward(&node.value, g, &mut d, stats, *hw, groups);
                emit(*x, Some(d));
            }
            Op::ScaleShift { x, scale, channels } => {
                let plane = node.value.len() / (scale.len() / channels);
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gv)| gv * scale[(j / plane) * channels + j % channels])
                    .collect();
                emit(*x, Some(d));
            }
            Op::Denorm { p, norm, source } => {
                let Op::InstanceNorm { x, stats, hw, groups } = &self.node(*norm).op else {
                    unreachable!("checked in forward")
                };
                let c = source.len();
                let pv = self.value(*p);
                if self.node(*p).requires_grad {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * stats.std_of(j / (hw * c), source[j % c]))
                        .collect();
                    emit(*p, Some(d));
                }
                if self.node(*x).requires_grad {
                    let cin = stats.channels;
                    let sizes = ops::group_sizes(groups).expect("checked in forward");
                    let y = self.value(*norm);
                    let mut d = vec![T::zero(); y.len()];
                    for b in 0..stats.batch {
                        // gradients with respect to each group's mean and deviation
                        let mut dm = vec![T::zero(); sizes.len()];
                        let mut ds = vec![T::zero(); sizes.len()];
                        for j in b * hw * c..(b + 1) * hw * c {
                            let grp = groups[source[j % c]];
                            dm[grp] += g[j];
                            ds[grp] += g[j] * pv[j];
                        }
                        for j in b * hw * cin..(b + 1) * hw * cin {
                            let grp = groups[j % cin];
                            let count = T::c((hw * sizes[grp]) as f64);
                            d[j] = (dm[grp] + ds[grp] * y[j]) / count;
                        }
                    }
                    emit(*x, Some(d));
                }
            }
            Op::Warp { color, kv, kh, geom } => {
                let (mut dc, mut dv, mut dh) =
                    (self.zeros_if(*color), self.zeros_if(*kv), self.zeros_if(*kh));
                ops::separable_warp_backward(
                    geom,
                    self.value(*color),
                    self.value(*kv),
                    self.value(*kh),
                    g,
                    dc.as_deref_mut(),
                    dv.as_deref_mut(),
                    dh.as_deref_mut(),
                );
                emit(*color, dc);
                emit(*kv, dv);
                emit(*kh, dh);
            }
            Op::L1Mean { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = g[0] / T::c(va.len() as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| ops::sign(x - y) * scale).collect();
                if self.node(*b).requires_grad {
                    emit(*b, Some(da.iter().map(|&v| -v).collect()));
                }
                if self.node(*a).requires_grad {
                    emit(*a, Some(da));
                }
            }
            Op::Sum(x) => emit(*x, Some(vec![g[0]; self.node(*x).value.len()])),
            Op::Add(a, b) => {
                emit(*a, self.node(*a).requires_grad.then(|| g.to_vec()));
                emit(*b, self.node(*b).requires_grad.then(|| g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.node(*a).requires_grad {
                    emit(*a, Some(g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect()));
                }
                if self.node(*b).requires_grad {
                    emit(*b, Some(g.iter().zip(va).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::Scale(x, s) => emit(*x, Some(g.iter().map(|&gv| gv * *s).collect())),
        }
        out
    }
}
