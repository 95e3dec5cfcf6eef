//! Slice-level forward/backward kernels. Shapes are validated by the tape
//! before these are called.

use super::Scalar;
use crate::par;

/// Row-major `C (+)= op(A) · op(B)` with `op(A)` of shape `[m, k]` and
/// `op(B)` of shape `[k, n]`. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    par::chunks_mut(c, n, m * n * k, |i, row| {
        if !accumulate {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
}

/// `[rows, cols]` -> `[cols, rows]`.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a grouped 3D convolution over `[N, C, T, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    pub fn pin(&self) -> usize {
        self.input.iter().product()
    }
    pub fn pout(&self) -> usize {
        self.output.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.kvol() == 1 && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Unfolds the input channels of one group into `[cin_g * kvol, pout]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let pin = g.pin();
    let pout = g.pout();
    let mut r = 0;
    for ci in 0..g.cin_g() {
        let xc = &x[ci * pin..(ci + 1) * pin];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let row = &mut col[r * pout..(r + 1) * pout];
                    r += 1;
                    for t in 0..ot {
                        let ti = (t * st + a) as isize - pt as isize;
                        for h in 0..oh {
                            let dst = &mut row[(t * oh + h) * ow..(t * oh + h + 1) * ow];
                            let hi = (h * sh + b) as isize - ph as isize;
                            if ti < 0 || ti >= it as isize || hi < 0 || hi >= ih as isize {
                                dst.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src = &xc[(ti as usize * ih + hi as usize) * iw..][..iw];
                            for (w, d) in dst.iter_mut().enumerate() {
                                let wi = (w * sw + c) as isize - pw as isize;
                                *d = if wi < 0 || wi >= iw as isize {
                                    T::zero()
                                } else {
                                    src[wi as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `[cin_g * kvol, pout]` back, accumulating into the group's input grad.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let pin = g.pin();
    let pout = g.pout();
    let mut r = 0;
    for ci in 0..g.cin_g() {
        let dxc = &mut dx[ci * pin..(ci + 1) * pin];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let row = &col[r * pout..(r + 1) * pout];
                    r += 1;
                    for t in 0..ot {
                        let ti = (t * st + a) as isize - pt as isize;
                        if ti < 0 || ti >= it as isize {
                            continue;
                        }
                        for h in 0..oh {
                            let hi = (h * sh + b) as isize - ph as isize;
                            if hi < 0 || hi >= ih as isize {
                                continue;
                            }
                            let src = &row[(t * oh + h) * ow..(t * oh + h + 1) * ow];
                            let dst = &mut dxc[(ti as usize * ih + hi as usize) * iw..][..iw];
                            for (w, &v) in src.iter().enumerate() {
                                let wi = (w * sw + c) as isize - pw as isize;
                                if wi >= 0 && wi < iw as isize {
                                    dst[wi as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let pout = g.pout();
    let (cin_g, cout_g, ck) = (g.cin_g(), g.cout_g(), g.cin_g() * g.kvol());
    let mut out = vec![T::zero(); g.n * g.cout * pout];
    let work = cout_g * ck * pout;
    par::chunks_mut(
        &mut out,
        cout_g * pout,
        work * g.n * g.groups,
        |idx, dst| {
            let (n, grp) = (idx / g.groups, idx % g.groups);
            let xg = &x[(n * g.cin + grp * cin_g) * g.pin()..][..cin_g * g.pin()];
            let wg = &w[grp * cout_g * ck..(grp + 1) * cout_g * ck];
            if g.is_pointwise() {
                gemm_seq(cout_g, ck, pout, wg, xg, dst);
            } else {
                let mut col = vec![T::zero(); ck * pout];
                im2col(g, xg, &mut col);
                gemm_seq(cout_g, ck, pout, wg, &col, dst);
            }
            if let Some(b) = bias {
                for (co, row) in dst.chunks_mut(pout).enumerate() {
                    let bv = b[grp * cout_g + co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        },
    );
    out
}

/// `(dx, dw, db)`, each present only if requested.
pub type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Returns `(dx, dw, db)` for the requested operands.
pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let pout = g.pout();
    let pin = g.pin();
    let (cin_g, cout_g, ck) = (g.cin_g(), g.cout_g(), g.cin_g() * g.kvol());
    let work = cout_g * ck * pout;

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * g.cin * pin];
        par::chunks_mut(&mut dx, cin_g * pin, work * g.n * g.groups, |idx, dxg| {
            let (n, grp) = (idx / g.groups, idx % g.groups);
            let wg = &w[grp * cout_g * ck..(grp + 1) * cout_g * ck];
            let dyg = &dy[(n * g.cout + grp * cout_g) * pout..][..cout_g * pout];
            if g.is_pointwise() {
                gemm_seq_ta(ck, cout_g, pout, wg, dyg, dxg);
            } else {
                let mut dcol = vec![T::zero(); ck * pout];
                gemm_seq_ta(ck, cout_g, pout, wg, dyg, &mut dcol);
                col2im(g, &dcol, dxg);
            }
        });
        dx
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.cout * ck];
        par::chunks_mut(&mut dw, cout_g * ck, work * g.n * g.groups, |grp, dwg| {
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); ck * pout]
            };
            for n in 0..g.n {
                let xg = &x[(n * g.cin + grp * cin_g) * pin..][..cin_g * pin];
                let dyg = &dy[(n * g.cout + grp * cout_g) * pout..][..cout_g * pout];
                let src = if g.is_pointwise() {
                    xg
                } else {
                    im2col(g, xg, &mut col);
                    &col[..]
                };
                // dW[co, r] += sum_p dy[co, p] * col[r, p]
                for co in 0..cout_g {
                    let dyr = &dyg[co * pout..(co + 1) * pout];
                    let dwr = &mut dwg[co * ck..(co + 1) * ck];
                    for (r, d) in dwr.iter_mut().enumerate() {
                        *d += dot(dyr, &src[r * pout..(r + 1) * pout]);
                    }
                }
            }
        });
        dw
    });

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy[(n * g.cout + co) * pout..][..pout]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Sequential `C = A[m,k] · B[k,n]`.
fn gemm_seq<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        row.iter_mut().for_each(|v| *v = T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// Sequential `C += Aᵀ · B` with `A` stored `[k, m]`, `B` `[k, n]`, `C` `[m, n]`.
fn gemm_seq_ta<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Fused multi-head self-attention over packed `qkv: [B, L, 3C]`.
/// Returns the merged output `[B, L, C]` and the probabilities `[B, H, L, L]`.
pub fn attention_forward<T: Scalar>(
    qkv: &[T],
    b: usize,
    l: usize,
    c: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let per_head = par::map_range(b * heads, |bh| {
        let (bi, h) = (bh / heads, bh % heads);
        let (q, k, v) = split_head(qkv, bi, h, l, c, d);
        let mut p = vec![T::zero(); l * l];
        gemm_seq(l, d, l, &q, &transpose(&k, l, d), &mut p);
        for row in p.chunks_mut(l) {
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_inplace(row);
        }
        let mut o = vec![T::zero(); l * d];
        gemm_seq(l, l, d, &p, &v, &mut o);
        (o, p)
    });
    let mut out = vec![T::zero(); b * l * c];
    let mut probs = Vec::with_capacity(b * heads * l * l);
    for (bh, (o, p)) in per_head.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for i in 0..l {
            out[(bi * l + i) * c + h * d..][..d].copy_from_slice(&o[i * d..(i + 1) * d]);
        }
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    b: usize,
    l: usize,
    c: usize,
    heads: usize,
) -> Vec<T> {
    let d = c / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let per_head = par::map_range(b * heads, |bh| {
        let (bi, h) = (bh / heads, bh % heads);
        let (q, k, v) = split_head(qkv, bi, h, l, c, d);
        let p = &probs[bh * l * l..(bh + 1) * l * l];
        let mut dout_h = vec![T::zero(); l * d];
        for i in 0..l {
            dout_h[i * d..(i + 1) * d].copy_from_slice(&dout[(bi * l + i) * c + h * d..][..d]);
        }
        // dV = Pᵀ dO
        let mut dv = vec![T::zero(); l * d];
        gemm_seq_ta(l, l, d, p, &dout_h, &mut dv);
        // dP = dO Vᵀ, dS = P ⊙ (dP - rowsum(dP ⊙ P))
        let mut ds = vec![T::zero(); l * l];
        gemm_seq(l, d, l, &dout_h, &transpose(&v, l, d), &mut ds);
        for (dsr, pr) in ds.chunks_mut(l).zip(p.chunks(l)) {
            let s: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dsr.iter_mut().zip(pr) {
                *x = pv * (*x - s) * scale;
            }
        }
        let mut dq = vec![T::zero(); l * d];
        gemm_seq(l, l, d, &ds, &k, &mut dq);
        let mut dk = vec![T::zero(); l * d];
        gemm_seq_ta(l, l, d, &ds, &q, &mut dk);
        (dq, dk, dv)
    });
    let mut dqkv = vec![T::zero(); b * l * 3 * c];
    for (bh, (dq, dk, dv)) in per_head.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for i in 0..l {
            let row = &mut dqkv[(bi * l + i) * 3 * c..][..3 * c];
            row[h * d..][..d].copy_from_slice(&dq[i * d..(i + 1) * d]);
            row[c + h * d..][..d].copy_from_slice(&dk[i * d..(i + 1) * d]);
            row[2 * c + h * d..][..d].copy_from_slice(&dv[i * d..(i + 1) * d]);
        }
    }
    dqkv
}

fn split_head<T: Scalar>(
    qkv: &[T],
    bi: usize,
    h: usize,
    l: usize,
    c: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut q = Vec::with_capacity(l * d);
    let mut k = Vec::with_capacity(l * d);
    let mut v = Vec::with_capacity(l * d);
    for i in 0..l {
        let row = &qkv[(bi * l + i) * 3 * c..][..3 * c];
        q.extend_from_slice(&row[h * d..][..d]);
        k.extend_from_slice(&row[c + h * d..][..d]);
        v.extend_from_slice(&row[2 * c + h * d..][..d]);
    }
    (q, k, v)
}

/// Max-subtracted softmax of one contiguous slice.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax along the middle axis of an `[outer, n, inner]` view.
pub fn softmax_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = x.to_vec();
    if inner == 1 {
        y.chunks_mut(n).for_each(softmax_inplace);
        return y;
    }
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = x[(o * n + j) * inner + i];
            }
            softmax_inplace(&mut buf);
            for j in 0..n {
                y[(o * n + j) * inner + i] = buf[j];
            }
        }
    }
    y
}

pub fn softmax_axis_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let s: T = (0..n).map(|j| y[idx(j)] * dy[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - s);
            }
        }
    }
    dx
}

/// Layer norm along the middle axis of `[outer, c, inner]`.
/// Returns `(y, mean, rstd)` with statistics indexed `[outer, inner]`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    outer: usize,
    c: usize,
    inner: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); outer * inner];
    let mut rstd = vec![T::zero(); outer * inner];
    let inv_c = T::of(1.0 / c as f64);
    for o in 0..outer {
        let xs = &x[o * c * inner..(o + 1) * c * inner];
        let m = &mut mean[o * inner..(o + 1) * inner];
        for ch in 0..c {
            for (mv, &xv) in m.iter_mut().zip(&xs[ch * inner..(ch + 1) * inner]) {
                *mv += xv;
            }
        }
        m.iter_mut().for_each(|v| *v *= inv_c);
        let r = &mut rstd[o * inner..(o + 1) * inner];
        for ch in 0..c {
            for ((rv, &xv), &mv) in r
                .iter_mut()
                .zip(&xs[ch * inner..(ch + 1) * inner])
                .zip(m.iter())
            {
                let d = xv - mv;
                *rv += d * d;
            }
        }
        r.iter_mut()
            .for_each(|v| *v = T::one() / (*v * inv_c + T::of(eps)).sqrt());
        let ys = &mut y[o * c * inner..(o + 1) * c * inner];
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            let yr = &mut ys[ch * inner..(ch + 1) * inner];
            let xr = &xs[ch * inner..(ch + 1) * inner];
            for i in 0..inner {
                yr[i] = (xr[i] - m[i]) * r[i] * g + b;
            }
        }
    }
    (y, mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    outer: usize,
    c: usize,
    inner: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let inv_c = T::of(1.0 / c as f64);
    let mut s1 = vec![T::zero(); inner];
    let mut s2 = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * c * inner;
        let m = &mean[o * inner..(o + 1) * inner];
        let r = &rstd[o * inner..(o + 1) * inner];
        s1.iter_mut().for_each(|v| *v = T::zero());
        s2.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            let xr = &x[base + ch * inner..][..inner];
            let dyr = &dy[base + ch * inner..][..inner];
            let g = gamma[ch];
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..inner {
                let xhat = (xr[i] - m[i]) * r[i];
                let dxhat = dyr[i] * g;
                s1[i] += dxhat;
                s2[i] += dxhat * xhat;
                dg += dyr[i] * xhat;
                db += dyr[i];
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        for ch in 0..c {
            let xr = &x[base + ch * inner..][..inner];
            let dyr = &dy[base + ch * inner..][..inner];
            let dxr = &mut dx[base + ch * inner..][..inner];
            let g = gamma[ch];
            for i in 0..inner {
                let xhat = (xr[i] - m[i]) * r[i];
                dxr[i] = r[i] * (dyr[i] * g - s1[i] * inv_c - xhat * s2[i] * inv_c);
            }
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_K) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let x2 = x * x;
    let inner = T::of(GELU_K) * (x + T::of(GELU_A) * x2 * x);
    let th = inner.tanh();
    let dinner = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_A) * x2);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_gemm(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        gemm(m, k, n, &at, true, &bt, true, &mut c, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn dot_matches_sequential_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(1000.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
