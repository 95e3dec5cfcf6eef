//! Window enhanced attention.
//!
//! Per frame, the channel-pooled response map is scored with an unpadded
//! `s x s` convolution, the strongest window is picked by argmax, and the
//! `w x w` windows of all frames are attended jointly (or factorized over
//! space and time). Attended windows are written back in place; every other
//! token passes through untouched.
//!
//! Selection is a hard argmax: no gradient reaches the scoring kernel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::nn::{Bound, Linear, Norm, ParamId, ParamStore};
use crate::tensor::{init, kernels, Scalar, Tape, Tensor, Var, WindowCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScheme {
    /// One attention over all `T' * w * w` window tokens.
    #[default]
    Joint,
    /// Spatial attention within each frame window, then temporal attention
    /// across frames at matching offsets, sharing projections.
    Divided,
    SpaceOnly,
    TimeOnly,
}

impl AttentionScheme {
    pub const ALL: [AttentionScheme; 4] =
        [Self::Joint, Self::Divided, Self::SpaceOnly, Self::TimeOnly];
}

impl fmt::Display for AttentionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Divided => "divided",
            Self::SpaceOnly => "space_only",
            Self::TimeOnly => "time_only",
        })
    }
}

impl FromStr for AttentionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "joint" => Self::Joint,
            "divided" => Self::Divided,
            "space_only" => Self::SpaceOnly,
            "time_only" => Self::TimeOnly,
            other => return Err(cfg_err!("unknown attention scheme {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// `avg + max`.
    #[default]
    Sum,
    /// `[avg, max]` followed by a one-channel 1x1 projection.
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 2] = [Self::Sum, Self::Concat];
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sum" => Self::Sum,
            "concat" => Self::Concat,
            other => return Err(cfg_err!("unknown fusion way {other:?}")),
        })
    }
}

/// Channel avg+max fusion of `tokens: [N, T', Gh, Gw, C]` into the response
/// map `[N * T', Gh * Gw, 1]`. `Concat` requires `proj = [w_avg, w_max, bias]`.
pub fn pool_fuse<T: Scalar>(
    tokens: &Tensor<T>,
    fusion: Fusion,
    proj: Option<&[T]>,
) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 5 {
        return Err(dim_err!(
            "pool_fuse: expected [N, T', Gh, Gw, C], got {s:?}"
        ));
    }
    let (frames, p, c) = (s[0] * s[1], s[2] * s[3], s[4]);
    let (wa, wm, b) = match fusion {
        Fusion::Sum => (T::one(), T::one(), T::zero()),
        Fusion::Concat => match proj {
            Some(&[wa, wm, b]) => (wa, wm, b),
            _ => {
                return Err(cfg_err!(
                    "pool_fuse: concat fusion needs a 3-value projection"
                ))
            }
        },
    };
    let inv_c = T::of(1.0 / c as f64);
    let data = tokens
        .data()
        .chunks_exact(c)
        .map(|tok| {
            let avg = tok.iter().copied().sum::<T>() * inv_c;
            let max = tok.iter().copied().fold(T::neg_infinity(), T::max);
            wa * avg + wm * max + b
        })
        .collect();
    Tensor::new(vec![frames, p, 1], data)
}

/// Unpadded 2D convolution of `spatial: [F, 1, Gh, Gw]` with `kernel: [1, 1, s, s]`,
/// giving `[F, 1, Gh - s + 1, Gw - s + 1]`.
pub fn score_windows<T: Scalar>(spatial: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let ss = spatial.shape();
    let ks = kernel.shape();
    if ss.len() != 4 || ss[1] != 1 || ks.len() != 4 || ks[0] != 1 || ks[1] != 1 {
        return Err(dim_err!("score_windows: spatial {ss:?} / kernel {ks:?}"));
    }
    let (f, gh, gw) = (ss[0], ss[2], ss[3]);
    let (kh, kw) = (ks[2], ks[3]);
    if kh > gh || kw > gw {
        return Err(cfg_err!(
            "score_windows: kernel {kh}x{kw} exceeds grid {gh}x{gw}"
        ));
    }
    let (uh, uw) = (gh - kh + 1, gw - kw + 1);
    let k = kernel.data();
    let mut out = Vec::with_capacity(f * uh * uw);
    for fr in spatial.data().chunks_exact(gh * gw) {
        for y in 0..uh {
            for x in 0..uw {
                let mut acc = T::zero();
                for i in 0..kh {
                    for j in 0..kw {
                        acc += k[i * kw + j] * fr[(y + i) * gw + x + j];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![f, 1, uh, uw], out)
}

pub fn idx_to_xy(idx: usize, u: usize) -> (usize, usize) {
    (idx % u, idx / u)
}

pub fn xy_to_idx(x: usize, y: usize, u: usize) -> usize {
    y * u + x
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSelection {
    /// Flat argmax per frame, `y * u_w + x`.
    pub idx: Vec<usize>,
    pub coords: Vec<WindowCoord>,
    /// `(u_h, u_w)`: candidate positions per axis.
    pub u: (usize, usize),
    pub kernel: usize,
    pub window: usize,
}

/// Picks the strongest window per frame from `scored: [F, 1, u_h, u_w]`.
///
/// The softmax preceding the argmax is monotone, so the argmax is taken on the
/// raw scores; ties resolve to the lowest flat index.
pub fn select_window<T: Scalar>(scored: &Tensor<T>, window: usize) -> Result<WindowSelection> {
    let s = scored.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(dim_err!(
            "select_window: expected [F, 1, u_h, u_w], got {s:?}"
        ));
    }
    if !scored.all_finite() {
        return Err(Error::Numeric("select_window: non-finite scores".into()));
    }
    let (uh, uw) = (s[2], s[3]);
    let mut idx = Vec::with_capacity(s[0]);
    let mut coords = Vec::with_capacity(s[0]);
    for frame in scored.data().chunks_exact(uh * uw) {
        let i = argmax(frame);
        let (x, y) = idx_to_xy(i, uw);
        idx.push(i);
        coords.push(WindowCoord { x, y });
    }
    Ok(WindowSelection {
        idx,
        coords,
        u: (uh, uw),
        kernel: window,
        window,
    })
}

/// Softmax over each frame's flattened candidate scores.
pub fn selection_probabilities<T: Scalar>(scored: &Tensor<T>) -> Tensor<T> {
    let s = scored.shape();
    let n = s[2] * s[3];
    let mut out = scored.clone();
    out.data_mut()
        .chunks_mut(n)
        .for_each(kernels::softmax_inplace);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeaConfig {
    pub window: usize,
    pub heads: usize,
    pub scheme: AttentionScheme,
    pub fusion: Fusion,
    /// Leave the scoring kernel and concat projection trainable. They still
    /// receive no gradient through the hard selection.
    pub train_scoring: bool,
}

/// Parameters of one WEA module.
#[derive(Debug, Clone)]
pub struct Wea {
    pub cfg: WeaConfig,
    pub norm: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    /// `[1, 1, s, s]`, initialized to ones.
    pub score_kernel: ParamId,
    /// `[w_avg, w_max, bias]` for concat fusion.
    pub fusion_proj: ParamId,
}

/// Result of one WEA forward.
#[derive(Debug, Clone)]
pub struct WeaTrace<T> {
    pub out: Var,
    pub selection: WindowSelection,
    /// `[N * T', Gh * Gw]` fused response map.
    pub response: Tensor<T>,
}

impl Wea {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: WeaConfig,
        eps: f64,
        rng: &mut R,
    ) -> Self {
        let s = cfg.window;
        let score_kernel = store.add(
            format!("{name}.score_kernel"),
            Tensor::ones(&[1, 1, s, s]),
            cfg.train_scoring,
        );
        let mut fp = init::uniform::<T, R>(&[3], 0.5, 1.5, rng);
        fp.data_mut()[2] = T::zero();
        let fusion_proj = store.add(format!("{name}.fusion_proj"), fp, cfg.train_scoring);
        Self {
            cfg,
            norm: Norm::new(store, &format!("{name}.norm"), c, 4, eps),
            qkv: Linear::new(store, &format!("{name}.qkv"), c, 3 * c, rng),
            proj: Linear::new(store, &format!("{name}.proj"), c, c, rng),
            score_kernel,
            fusion_proj,
        }
    }

    /// Locates the strongest window per frame of `tokens: [N, T', Gh, Gw, C]`.
    pub fn locate<T: Scalar>(
        &self,
        store_or_tape: ScoringParams<'_, T>,
        tokens: &Tensor<T>,
    ) -> Result<(WindowSelection, Tensor<T>)> {
        let s = tokens.shape();
        let (gh, gw) = (s[2], s[3]);
        let w = self.cfg.window;
        if w > gh || w > gw {
            return Err(cfg_err!("wea: window {w} exceeds grid {gh}x{gw}"));
        }
        let fused = pool_fuse(tokens, self.cfg.fusion, Some(store_or_tape.fusion_proj))?;
        let spatial = fused.reshape(&[s[0] * s[1], 1, gh, gw])?;
        let scored = score_windows(&spatial, store_or_tape.kernel)?;
        let sel = select_window(&scored, w)?;
        Ok((sel, fused.reshape(&[s[0] * s[1], gh * gw])?))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, y: Var) -> Result<WeaTrace<T>> {
        let tokens = tape.value(y).clone();
        let kernel = tape.value(p.get(self.score_kernel)).clone();
        let fproj = tape.value(p.get(self.fusion_proj)).clone();
        let (selection, response) = self.locate(
            ScoringParams {
                kernel: &kernel,
                fusion_proj: fproj.data(),
            },
            &tokens,
        )?;
        let out = self.window_attention(tape, p, y, &selection)?;
        Ok(WeaTrace {
            out,
            selection,
            response,
        })
    }

    /// Gathers the selected windows, attends them under the configured scheme
    /// and scatters them back.
    pub fn window_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        y: Var,
        sel: &WindowSelection,
    ) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        let (n, t, c) = (s[0], s[1], s[4]);
        let w = self.cfg.window;
        let win = tape.gather_windows(y, &sel.coords, w)?;
        let attended = match self.cfg.scheme {
            AttentionScheme::Joint => {
                let seq = tape.reshape(win, &[n, t * w * w, c])?;
                let h = self.residual_attend(tape, p, seq)?;
                tape.reshape(h, &[n, t, w, w, c])?
            }
            AttentionScheme::SpaceOnly => self.attend_space(tape, p, win, [n, t, w, c])?,
            AttentionScheme::TimeOnly => self.attend_time(tape, p, win, [n, t, w, c])?,
            AttentionScheme::Divided => {
                let h = self.attend_space(tape, p, win, [n, t, w, c])?;
                self.attend_time(tape, p, h, [n, t, w, c])?
            }
        };
        tape.scatter_windows(y, attended, &sel.coords, w)
    }

    fn attend_space<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        win: Var,
        [n, t, w, c]: [usize; 4],
    ) -> Result<Var> {
        let seq = tape.reshape(win, &[n * t, w * w, c])?;
        let h = self.residual_attend(tape, p, seq)?;
        tape.reshape(h, &[n, t, w, w, c])
    }

    fn attend_time<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        win: Var,
        [n, t, w, c]: [usize; 4],
    ) -> Result<Var> {
        let perm = tape.permute(win, &[0, 2, 3, 1, 4])?;
        let seq = tape.reshape(perm, &[n * w * w, t, c])?;
        let h = self.residual_attend(tape, p, seq)?;
        let h = tape.reshape(h, &[n, w, w, t, c])?;
        tape.permute(h, &[0, 3, 1, 2, 4])
    }

    /// `x + proj(attn(qkv(norm(x))))` on `[B, L, C]`.
    fn residual_attend<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        // Norm is over the last axis regardless of rank.
        let rank = tape.shape(x).len();
        let norm = Norm {
            axis: rank - 1,
            ..self.norm
        };
        let h = norm.forward(tape, p, x)?;
        let h = self.qkv.forward(tape, p, h)?;
        let h = tape.attention(h, self.cfg.heads)?;
        let h = self.proj.forward(tape, p, h)?;
        tape.add(x, h)
    }

    pub fn param_count(c: usize, window: usize) -> usize {
        2 * c + Linear::param_count(c, 3 * c) + Linear::param_count(c, c) + window * window + 3
    }

    /// Tokens attended per attention call: `(sequence length, calls per clip)`
    /// for each factor of the scheme.
    pub fn attention_extents(
        scheme: AttentionScheme,
        frames: usize,
        window: usize,
    ) -> Vec<(usize, usize)> {
        let area = window * window;
        match scheme {
            AttentionScheme::Joint => vec![(frames * area, 1)],
            AttentionScheme::Divided => vec![(area, frames), (frames, area)],
            AttentionScheme::SpaceOnly => vec![(area, frames)],
            AttentionScheme::TimeOnly => vec![(frames, area)],
        }
    }
}

/// Borrowed scoring parameters.
#[derive(Debug, Clone, Copy)]
pub struct ScoringParams<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub fusion_proj: &'a [T],
}
