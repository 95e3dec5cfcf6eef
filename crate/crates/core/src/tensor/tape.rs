//! Reverse-mode tape. Every op appends one node; [`Tape::backward`] walks the
//! nodes in reverse recording order exactly once.

use super::kernels::{self, ConvGeom};
use super::{numel, strides, Scalar, Tensor};
use crate::error::{cfg_err, dim_err, input_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding ("unfilled"); output shrinks by `k - 1` per axis.
    Valid,
    /// `(k - 1) / 2` zeros on each side; preserves size at stride 1 for odd `k`.
    Same,
}

/// Top-left grid corner of a window: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct WindowCoord {
    pub x: usize,
    pub y: usize,
}

struct RoiSaved<T> {
    /// Per roi: batch index.
    batch: Vec<usize>,
    /// Per roi and grid sample: four `(cell, weight)` bilinear taps.
    taps: Vec<[(usize, T); 4]>,
    /// Per roi and channel: the winning sample.
    argmax: Vec<usize>,
    samples: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        dims: (usize, usize, usize),
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        dims: (usize, usize, usize),
    },
    Gelu(Var),
    Sigmoid(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    GatherWindows {
        x: Var,
        coords: Vec<WindowCoord>,
        w: usize,
    },
    ScatterWindows {
        base: Var,
        win: Var,
        coords: Vec<WindowCoord>,
        w: usize,
    },
    RoiPool {
        x: Var,
        saved: RoiSaved<T>,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
    Sum(Var),
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    loop {
        let base: usize = idx[..last]
            .iter()
            .zip(&src_strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        if inner_s == 1 {
            out.extend_from_slice(&data[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|j| data[base + j * inner_s]));
        }
        // Increment the outer multi-index.
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf honoring `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad;
        self.push(t, Op::Leaf, g)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Attention probabilities `[B, H, L, L]` saved by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.ops[v.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Winning lattice sample per `(roi, channel)` of a `roi_pool` output.
    pub fn roi_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.ops[v.0] {
            Op::RoiPool { saved, .. } => Some(&saved.argmax),
            _ => None,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let g = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, s), g)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), g))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!(
                "permute: {perm:?} is not a permutation of rank {}",
                shape.len()
            ));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), g))
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din {
            return Err(dim_err!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            ));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err!("linear: bias {:?} != [{dout}]", self.shape(b)));
            }
        }
        let m = numel(&xs) / din;
        let mut out = vec![T::zero(); m * dout];
        kernels::gemm(
            m,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut os = xs;
        *os.last_mut().unwrap() = dout;
        let t = Tensor::new(os, out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let g = self.any_grad(&ins);
        Ok(self.push(t, Op::Linear { x, w, b }, g))
    }

    /// Grouped 3D convolution over `[N, Cin, T, H, W]` with weight
    /// `[Cout, Cin / groups, kt, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: Padding,
        groups: usize,
    ) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(dim_err!(
                    "conv3d: bias {:?} != [{}]",
                    self.shape(b),
                    geom.cout
                ));
            }
        }
        let out = kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let [ot, oh, ow] = geom.output;
        let t = Tensor::new(vec![geom.n, geom.cout, ot, oh, ow], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let g = self.any_grad(&ins);
        Ok(self.push(t, Op::Conv3d { x, w, b, geom }, g))
    }

    /// Normalizes along `axis`, then applies the per-channel affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        axis: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(dim_err!("layer_norm: axis {axis} out of range for {xs:?}"));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(cfg_err!("layer_norm: eps must be positive"));
        }
        let dims = axis_dims(&xs, axis);
        if self.shape(gamma) != [dims.1] || self.shape(beta) != [dims.1] {
            return Err(dim_err!("layer_norm: affine params must be [{}]", dims.1));
        }
        let (y, mean, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            dims.0,
            dims.1,
            dims.2,
        );
        let t = Tensor::new(xs, y)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                g: gamma,
                b: beta,
                dims,
                mean,
                rstd,
            },
            g,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(dim_err!("softmax: axis {axis} out of range for {xs:?}"));
        }
        let dims = axis_dims(&xs, axis);
        let y = kernels::softmax_axis(self.value(x).data(), dims.0, dims.1, dims.2);
        let t = Tensor::new(xs, y)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x, dims }, g))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let g = self.any_grad(&[x]);
        self.push(t, Op::Gelu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        let g = self.any_grad(&[x]);
        self.push(t, Op::Sigmoid(x), g)
    }

    /// Multi-head self-attention on packed projections `qkv: [B, L, 3C]`,
    /// returning the merged heads `[B, L, C]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(3) {
            return Err(dim_err!("attention: expected [B, L, 3C], got {s:?}"));
        }
        let (b, l, c) = (s[0], s[1], s[2] / 3);
        if heads == 0 || c % heads != 0 {
            return Err(cfg_err!(
                "attention: {c} channels not divisible by {heads} heads"
            ));
        }
        let (out, probs) = kernels::attention_forward(self.value(qkv).data(), b, l, c, heads);
        let t = Tensor::new(vec![b, l, c], out)?;
        let g = self.any_grad(&[qkv]);
        Ok(self.push(t, Op::Attention { qkv, heads, probs }, g))
    }

    /// Gathers `w x w` windows from `[N, T, Gh, Gw, C]`, one per `(n, t)`.
    pub fn gather_windows(&mut self, x: Var, coords: &[WindowCoord], w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_windows(&s, coords, w)?;
        let (n, t, gh, gw, c) = (s[0], s[1], s[2], s[3], s[4]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * t * w * w * c);
        for (nt, wc) in coords.iter().enumerate() {
            for i in 0..w {
                let row = ((nt * gh + wc.y + i) * gw + wc.x) * c;
                out.extend_from_slice(&src[row..row + w * c]);
            }
        }
        let tt = Tensor::new(vec![n, t, w, w, c], out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(
            tt,
            Op::GatherWindows {
                x,
                coords: coords.to_vec(),
                w,
            },
            g,
        ))
    }

    /// Writes `win: [N, T, w, w, C]` over `base` at `coords`; everything else
    /// passes through.
    pub fn scatter_windows(
        &mut self,
        base: Var,
        win: Var,
        coords: &[WindowCoord],
        w: usize,
    ) -> Result<Var> {
        let s = self.shape(base).to_vec();
        check_windows(&s, coords, w)?;
        let (n, t, gh, gw, c) = (s[0], s[1], s[2], s[3], s[4]);
        if self.shape(win) != [n, t, w, w, c] {
            return Err(dim_err!(
                "scatter_windows: window tensor {:?} mismatched",
                self.shape(win)
            ));
        }
        let mut out = self.value(base).data().to_vec();
        let src = self.value(win).data();
        for (nt, wc) in coords.iter().enumerate() {
            for i in 0..w {
                let row = ((nt * gh + wc.y + i) * gw + wc.x) * c;
                out[row..row + w * c].copy_from_slice(&src[(nt * w + i) * w * c..][..w * c]);
            }
        }
        let tt = Tensor::new(s, out)?;
        let g = self.any_grad(&[base, win]);
        Ok(self.push(
            tt,
            Op::ScatterWindows {
                base,
                win,
                coords: coords.to_vec(),
                w,
            },
            g,
        ))
    }

    /// 3D RoI pooling over `[N, T, Gh, Gw, C]`: each 2D box (relative
    /// coordinates) is extended over all frames, averaged over time, sampled
    /// bilinearly on a `grid x grid` lattice, and max-reduced over the lattice.
    /// Output `[R, C]`.
    pub fn roi_pool(&mut self, x: Var, rois: &[(usize, [f64; 4])], grid: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(dim_err!("roi_pool: expected [N, T, Gh, Gw, C], got {s:?}"));
        }
        if grid == 0 {
            return Err(cfg_err!("roi_pool: grid must be positive"));
        }
        let (n, t, gh, gw, c) = (s[0], s[1], s[2], s[3], s[4]);
        let plane = gh * gw * c;
        let src = self.value(x).data();
        // Temporal means per sample, computed lazily.
        let mut means: Vec<Option<Vec<T>>> = vec![None; n];
        let inv_t = T::of(1.0 / t as f64);
        let samples = grid * grid;
        let mut saved = RoiSaved {
            batch: Vec::with_capacity(rois.len()),
            taps: Vec::with_capacity(rois.len() * samples),
            argmax: Vec::with_capacity(rois.len() * c),
            samples,
        };
        let mut out = Vec::with_capacity(rois.len() * c);
        for &(bi, bx) in rois {
            if bi >= n {
                return Err(input_err!("roi_pool: batch index {bi} >= {n}"));
            }
            let [x1, y1, x2, y2] = bx.map(|v| v.clamp(0.0, 1.0));
            if !(x2 > x1 && y2 > y1) {
                return Err(input_err!("roi_pool: degenerate box {bx:?}"));
            }
            let mean = means[bi].get_or_insert_with(|| {
                let mut m = vec![T::zero(); plane];
                for ti in 0..t {
                    for (mv, &v) in m.iter_mut().zip(&src[(bi * t + ti) * plane..][..plane]) {
                        *mv += v;
                    }
                }
                m.iter_mut().for_each(|v| *v *= inv_t);
                m
            });
            saved.batch.push(bi);
            let tap_base = saved.taps.len();
            for i in 0..grid {
                let py = (y1 + (i as f64 + 0.5) / grid as f64 * (y2 - y1)) * gh as f64 - 0.5;
                for j in 0..grid {
                    let px = (x1 + (j as f64 + 0.5) / grid as f64 * (x2 - x1)) * gw as f64 - 0.5;
                    saved.taps.push(bilinear_taps(px, py, gh, gw));
                }
            }
            let mut best = vec![T::neg_infinity(); c];
            let mut arg = vec![0usize; c];
            let mut sample = vec![T::zero(); c];
            for sidx in 0..samples {
                sample.iter_mut().for_each(|v| *v = T::zero());
                for &(cell, wt) in &saved.taps[tap_base + sidx] {
                    if wt == T::zero() {
                        continue;
                    }
                    for (sv, &mv) in sample.iter_mut().zip(&mean[cell * c..(cell + 1) * c]) {
                        *sv += wt * mv;
                    }
                }
                for ch in 0..c {
                    if sample[ch] > best[ch] {
                        best[ch] = sample[ch];
                        arg[ch] = sidx;
                    }
                }
            }
            out.extend_from_slice(&best);
            saved.argmax.extend_from_slice(&arg);
        }
        if rois.is_empty() {
            return Err(input_err!("roi_pool: no boxes"));
        }
        let tt = Tensor::new(vec![rois.len(), c], out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(tt, Op::RoiPool { x, saved }, g))
    }

    /// Mean over rows of the per-row sum of binary cross-entropies on
    /// `sigmoid(logits)`. Targets must be 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s != targets.shape() {
            return Err(dim_err!(
                "bce: logits {s:?} vs targets {:?}",
                targets.shape()
            ));
        }
        if targets
            .data()
            .iter()
            .any(|&y| y != T::zero() && y != T::one())
        {
            return Err(input_err!("bce: targets must be 0 or 1"));
        }
        let rows = if s.len() > 1 { s[0] } else { 1 };
        let z = self.value(logits).data();
        let total: f64 = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| {
                let z = z.f64();
                z.max(0.0) - z * y.f64() + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let t = Tensor::scalar(T::of(total / rows as f64));
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            t,
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            g,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Runs the reverse pass from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(dim_err!(
                "backward: output must be a scalar, got {:?}",
                self.shape(out)
            ));
        }
        if !self.value(out).all_finite() {
            return Err(Error::Numeric("backward: non-finite output".into()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
        }
        Ok(())
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn acc(&mut self, v: Var, g: Vec<T>) {
        if !self.needs_grad[v.0] {
            return;
        }
        debug_assert_eq!(g.len(), self.values[v.0].len());
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        // Temporarily take the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, dy.to_vec());
                self.acc(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                if self.needs_grad[a.0] {
                    let g = dy
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.acc(*a, g);
                }
                if self.needs_grad[b.0] {
                    let g = dy
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.acc(*b, g);
                }
            }
            Op::Scale(a, s) => self.acc(*a, dy.iter().map(|&d| d * *s).collect()),
            Op::Reshape(a) => self.acc(*a, dy.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let (g, _) = permute_data(dy, self.values[i].shape(), &inv);
                self.acc(*a, g);
            }
            Op::Linear { x, w, b } => {
                let din = *self.shape(*x).last().unwrap();
                let dout = self.shape(*w)[0];
                let m = self.value(*x).len() / din;
                if self.needs_grad[x.0] {
                    let mut dx = vec![T::zero(); m * din];
                    kernels::gemm(
                        m,
                        dout,
                        din,
                        dy,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    self.acc(*x, dx);
                }
                if self.needs_grad[w.0] {
                    let mut dw = vec![T::zero(); dout * din];
                    kernels::gemm(
                        dout,
                        m,
                        din,
                        dy,
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        false,
                    );
                    self.acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.needs_grad[b.0] {
                        let mut db = vec![T::zero(); dout];
                        for row in dy.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                        self.acc(*b, db);
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let need_b = b.map(|b| self.needs_grad[b.0]).unwrap_or(false);
                let (dx, dw, db) = kernels::conv3d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.needs_grad[x.0],
                    self.needs_grad[w.0],
                    need_b,
                );
                if let Some(dx) = dx {
                    self.acc(*x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(*b, db);
                }
            }
            Op::LayerNorm {
                x,
                g,
                b,
                dims,
                mean,
                rstd,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*g).data(),
                    mean,
                    rstd,
                    dy,
                    dims.0,
                    dims.1,
                    dims.2,
                );
                self.acc(*x, dx);
                self.acc(*g, dg);
                self.acc(*b, db);
            }
            Op::Softmax { x, dims } => {
                let dx = kernels::softmax_axis_backward(
                    self.values[i].data(),
                    dy,
                    dims.0,
                    dims.1,
                    dims.2,
                );
                self.acc(*x, dx);
            }
            Op::Gelu(x) => {
                let g = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| d * kernels::gelu_grad(v))
                    .collect();
                self.acc(*x, g);
            }
            Op::Sigmoid(x) => {
                let g = dy
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                self.acc(*x, g);
            }
            Op::Attention { qkv, heads, probs } => {
                let s = self.shape(*qkv);
                let (b, l, c) = (s[0], s[1], s[2] / 3);
                let g = kernels::attention_backward(
                    self.value(*qkv).data(),
                    probs,
                    dy,
                    b,
                    l,
                    c,
                    *heads,
                );
                self.acc(*qkv, g);
            }
            Op::GatherWindows { x, coords, w } => {
                let s = self.shape(*x).to_vec();
                let (gh, gw, c) = (s[2], s[3], s[4]);
                let mut g = vec![T::zero(); numel(&s)];
                for (nt, wc) in coords.iter().enumerate() {
                    for r in 0..*w {
                        let row = ((nt * gh + wc.y + r) * gw + wc.x) * c;
                        let src = &dy[(nt * w + r) * w * c..][..w * c];
                        g[row..row + w * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &v)| *a += v);
                    }
                }
                self.acc(*x, g);
            }
            Op::ScatterWindows {
                base,
                win,
                coords,
                w,
            } => {
                let s = self.shape(*base).to_vec();
                let (gh, gw, c) = (s[2], s[3], s[4]);
                let mut gbase = dy.to_vec();
                let mut gwin = vec![T::zero(); coords.len() * w * w * c];
                for (nt, wc) in coords.iter().enumerate() {
                    for r in 0..*w {
                        let row = ((nt * gh + wc.y + r) * gw + wc.x) * c;
                        gwin[(nt * w + r) * w * c..][..w * c]
                            .copy_from_slice(&dy[row..row + w * c]);
                        gbase[row..row + w * c]
                            .iter_mut()
                            .for_each(|v| *v = T::zero());
                    }
                }
                self.acc(*base, gbase);
                self.acc(*win, gwin);
            }
            Op::RoiPool { x, saved } => {
                let s = self.shape(*x).to_vec();
                let (t, gh, gw, c) = (s[1], s[2], s[3], s[4]);
                let plane = gh * gw * c;
                let inv_t = T::of(1.0 / t as f64);
                let mut g = vec![T::zero(); numel(&s)];
                for (r, &bi) in saved.batch.iter().enumerate() {
                    for ch in 0..c {
                        let d = dy[r * c + ch] * inv_t;
                        let sidx = saved.argmax[r * c + ch];
                        for &(cell, wt) in &saved.taps[r * saved.samples + sidx] {
                            let v = d * wt;
                            for ti in 0..t {
                                g[(bi * t + ti) * plane + cell * c + ch] += v;
                            }
                        }
                    }
                }
                self.acc(*x, g);
            }
            Op::Bce { logits, targets } => {
                let s = self.shape(*logits);
                let rows = if s.len() > 1 { s[0] } else { 1 };
                let scale = dy[0] / T::of(rows as f64);
                let g = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (kernels::sigmoid(z) - y) * scale)
                    .collect();
                self.acc(*logits, g);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(*x, vec![dy[0]; n]);
            }
        }
        self.ops[i] = op;
    }
}

fn bilinear_taps<T: Scalar>(px: f64, py: f64, gh: usize, gw: usize) -> [(usize, T); 4] {
    let fx = px.clamp(0.0, (gw - 1) as f64);
    let fy = py.clamp(0.0, (gh - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
    let (lx, ly) = (fx - x0 as f64, fy - y0 as f64);
    [
        (y0 * gw + x0, T::of((1.0 - lx) * (1.0 - ly))),
        (y0 * gw + x1, T::of(lx * (1.0 - ly))),
        (y1 * gw + x0, T::of((1.0 - lx) * ly)),
        (y1 * gw + x1, T::of(lx * ly)),
    ]
}

fn check_windows(s: &[usize], coords: &[WindowCoord], w: usize) -> Result<()> {
    if s.len() != 5 {
        return Err(dim_err!("windows: expected [N, T, Gh, Gw, C], got {s:?}"));
    }
    if coords.len() != s[0] * s[1] {
        return Err(dim_err!(
            "windows: {} coords for {} frames",
            coords.len(),
            s[0] * s[1]
        ));
    }
    if w == 0 || w > s[2] || w > s[3] {
        return Err(cfg_err!(
            "windows: size {w} does not fit grid {}x{}",
            s[2],
            s[3]
        ));
    }
    for wc in coords {
        if wc.x + w > s[3] || wc.y + w > s[2] {
            return Err(dim_err!(
                "windows: {wc:?} + {w} leaves grid {}x{}",
                s[2],
                s[3]
            ));
        }
    }
    Ok(())
}

pub(crate) fn conv_geom(
    xs: &[usize],
    ws: &[usize],
    stride: [usize; 3],
    padding: Padding,
    groups: usize,
) -> Result<ConvGeom> {
    if xs.len() != 5 || ws.len() != 5 {
        return Err(dim_err!(
            "conv3d: expected rank-5 input and weight, got {xs:?} / {ws:?}"
        ));
    }
    if groups == 0 || !xs[1].is_multiple_of(groups) || !ws[0].is_multiple_of(groups) {
        return Err(cfg_err!(
            "conv3d: groups {groups} must divide Cin {} and Cout {}",
            xs[1],
            ws[0]
        ));
    }
    if ws[1] != xs[1] / groups {
        return Err(dim_err!(
            "conv3d: weight {ws:?} expects {} in-channels per group, input has {}",
            ws[1],
            xs[1] / groups
        ));
    }
    if stride.contains(&0) {
        return Err(cfg_err!("conv3d: zero stride"));
    }
    let kernel = [ws[2], ws[3], ws[4]];
    let input = [xs[2], xs[3], xs[4]];
    let pad = match padding {
        Padding::Valid => [0; 3],
        Padding::Same => kernel.map(|k| (k - 1) / 2),
    };
    let mut output = [0; 3];
    for a in 0..3 {
        let span = input[a] + 2 * pad[a];
        if kernel[a] > span {
            return Err(dim_err!(
                "conv3d: kernel {kernel:?} does not fit input {input:?}"
            ));
        }
        output[a] = (span - kernel[a]) / stride[a] + 1;
    }
    Ok(ConvGeom {
        n: xs[0],
        cin: xs[1],
        cout: ws[0],
        groups,
        input,
        kernel,
        stride,
        pad,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv3d_sums_and_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 2, 2]));
        let y = tape
            .conv3d(x, w, None, [1, 1, 1], Padding::Valid, 1)
            .unwrap();
        assert_eq!(tape.value(y).data(), &[10.0]);

        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape
            .conv3d(x, w, Some(b), [1, 1, 1], Padding::Same, 1)
            .unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv3d_shapes_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 4, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[6, 3, 3, 3, 3]));
        let y = tape
            .conv3d(x, w, None, [1, 1, 1], Padding::Same, 1)
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 6, 4, 8, 8]);
        let y = tape
            .conv3d(x, w, None, [1, 2, 2], Padding::Valid, 1)
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 6, 2, 3, 3]);
        let bad = tape.constant(Tensor::zeros(&[6, 2, 3, 3, 3]));
        assert!(matches!(
            tape.conv3d(x, bad, None, [1, 1, 1], Padding::Same, 1),
            Err(Error::Dimension(_))
        ));
        let w2 = tape.constant(Tensor::zeros(&[4, 1, 3, 3, 3]));
        assert!(matches!(
            tape.conv3d(x, w2, None, [1, 1, 1], Padding::Same, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0]);
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.linear(x, eye, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let w3 = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.linear(x, w3, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let (g, b) = (
            tape.constant(Tensor::ones(&[3])),
            tape.constant(Tensor::zeros(&[3])),
        );
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, g, b, 1e-6, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let (g, b) = (
            tape.constant(Tensor::ones(&[2])),
            tape.constant(Tensor::zeros(&[2])),
        );
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12, 1).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1]));
        let (g, s) = (tape.gelu(x), tape.sigmoid(x));
        assert_eq!(tape.value(g).data(), &[0.0]);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        // y = x * x + x: dy/dx = 2x + 1.
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -3.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -5.0]);
    }

    #[test]
    fn windows_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::from_f64(
                &[1, 2, 4, 4, 1],
                &(0..32).map(f64::from).collect::<Vec<_>>(),
            )
            .unwrap(),
        );
        let coords = [WindowCoord { x: 1, y: 0 }, WindowCoord { x: 0, y: 2 }];
        let w = tape.gather_windows(x, &coords, 2).unwrap();
        assert_eq!(
            tape.value(w).data(),
            &[1.0, 2.0, 5.0, 6.0, 24.0, 25.0, 28.0, 29.0]
        );
        let back = tape.scatter_windows(x, w, &coords, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let off = [WindowCoord { x: 3, y: 0 }, WindowCoord { x: 0, y: 0 }];
        assert!(tape.gather_windows(x, &off, 2).is_err());
    }

    #[test]
    fn roi_pool_of_constant_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 4, 3], 2.5));
        let y = tape.roi_pool(x, &[(0, [0.1, 0.2, 0.7, 0.9])], 7).unwrap();
        assert_eq!(tape.shape(y), &[1, 3]);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-12));
        assert_eq!(tape.roi_argmax(y).unwrap().len(), 3);
        assert!(tape.roi_pool(x, &[(1, [0.1, 0.1, 0.5, 0.5])], 7).is_err());
        assert!(tape.roi_pool(x, &[(0, [0.5, 0.1, 0.5, 0.5])], 7).is_err());
    }
}
