//! Local relation aggregator: a convolutional branch run once on the raw clip
//! whose output is added to the patch tokens.
//!
//! Each block applies three pre-norm residual steps on `[N, C, T, H, W]`:
//! a depthwise 3x3x3 conv, the relation aggregator (1x1x1 -> depthwise
//! 5x5x5 -> 1x1x1), and a 1x1x1 MLP with GELU.

use rand::Rng;

use crate::error::{cfg_err, Result};
use crate::nn::{Bound, Conv3d, Norm, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Var};

pub const DW_KERNEL: [usize; 3] = [3, 3, 3];
pub const RA_KERNEL: [usize; 3] = [5, 5, 5];
const ONE: [usize; 3] = [1, 1, 1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LraStageConfig {
    pub depths: Vec<usize>,
    pub channels: Vec<usize>,
    /// Downsampling of the stem conv (kernel == stride).
    pub stem_stride: [usize; 3],
    /// Downsampling between consecutive stages (kernel == stride).
    pub inter_stage_stride: [usize; 3],
    pub mlp_ratio: usize,
}

impl LraStageConfig {
    /// 5 blocks at 320 channels, then 8 at 768.
    pub fn full() -> Self {
        Self {
            depths: vec![5, 8],
            channels: vec![320, 768],
            stem_stride: [2, 4, 4],
            inter_stage_stride: [1, 4, 4],
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.channels.len() {
            return Err(cfg_err!(
                "lra: {} depths vs {} channel entries",
                self.depths.len(),
                self.channels.len()
            ));
        }
        if self.channels.contains(&0)
            || self.stem_stride.contains(&0)
            || self.inter_stage_stride.contains(&0)
        {
            return Err(cfg_err!("lra: zero channel count or stride"));
        }
        Ok(())
    }

    /// Output `(T, H, W)` for an input clip of `(T, H, W)`.
    pub fn output_grid(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut g = input;
        let mut apply = |s: [usize; 3]| -> Result<()> {
            for a in 0..3 {
                if !g[a].is_multiple_of(s[a]) {
                    return Err(cfg_err!(
                        "lra: extent {:?} not divisible by stride {s:?}",
                        g
                    ));
                }
                g[a] /= s[a];
            }
            Ok(())
        };
        apply(self.stem_stride)?;
        for _ in 1..self.depths.len() {
            apply(self.inter_stage_stride)?;
        }
        Ok(g)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct RelationAggregator {
    pub reduce: Conv3d,
    pub aggregate: Conv3d,
    pub expand: Conv3d,
}

impl RelationAggregator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            reduce: Conv3d::new(
                store,
                &format!("{name}.conv1"),
                c,
                c,
                ONE,
                ONE,
                Padding::Valid,
                1,
                rng,
            ),
            aggregate: Conv3d::new(
                store,
                &format!("{name}.conv5"),
                c,
                c,
                RA_KERNEL,
                ONE,
                Padding::Same,
                c,
                rng,
            ),
            expand: Conv3d::new(
                store,
                &format!("{name}.conv2"),
                c,
                c,
                ONE,
                ONE,
                Padding::Valid,
                1,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.reduce.forward(tape, p, x)?;
        let h = self.aggregate.forward(tape, p, h)?;
        self.expand.forward(tape, p, h)
    }

    pub fn param_count(c: usize) -> usize {
        2 * Conv3d::param_count(c, c, ONE, 1) + Conv3d::param_count(c, c, RA_KERNEL, c)
    }
}

#[derive(Debug, Clone)]
pub struct LraBlock {
    pub dw: Conv3d,
    pub norm1: Norm,
    pub ra: RelationAggregator,
    pub norm2: Norm,
    pub fc1: Conv3d,
    pub fc2: Conv3d,
    pub channels: usize,
}

impl LraBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        mlp_ratio: usize,
        eps: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = c * mlp_ratio;
        Self {
            dw: Conv3d::new(
                store,
                &format!("{name}.dwconv"),
                c,
                c,
                DW_KERNEL,
                ONE,
                Padding::Same,
                c,
                rng,
            ),
            norm1: Norm::new(store, &format!("{name}.norm1"), c, 1, eps),
            ra: RelationAggregator::new(store, &format!("{name}.ra"), c, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), c, 1, eps),
            fc1: Conv3d::new(
                store,
                &format!("{name}.mlp.fc1"),
                c,
                hidden,
                ONE,
                ONE,
                Padding::Valid,
                1,
                rng,
            ),
            fc2: Conv3d::new(
                store,
                &format!("{name}.mlp.fc2"),
                hidden,
                c,
                ONE,
                ONE,
                Padding::Valid,
                1,
                rng,
            ),
            channels: c,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(crate::error::dim_err!(
                "lra block expects {} channels, got {c}",
                self.channels
            ));
        }
        let d = self.dw.forward(tape, p, x)?;
        let xa = tape.add(d, x)?;
        let n = self.norm1.forward(tape, p, xa)?;
        let r = self.ra.forward(tape, p, n)?;
        let xb = tape.add(r, xa)?;
        let n = self.norm2.forward(tape, p, xb)?;
        let h = self.fc1.forward(tape, p, n)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(h, xb)
    }

    /// Zeroes every conv so the block becomes the identity.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for conv in [
            &self.dw,
            &self.ra.reduce,
            &self.ra.aggregate,
            &self.ra.expand,
            &self.fc1,
            &self.fc2,
        ] {
            conv.zero(store);
        }
    }

    pub fn param_count(c: usize, mlp_ratio: usize) -> usize {
        Conv3d::param_count(c, c, DW_KERNEL, c)
            + 4 * c
            + RelationAggregator::param_count(c)
            + Conv3d::param_count(c, c * mlp_ratio, ONE, 1)
            + Conv3d::param_count(c * mlp_ratio, c, ONE, 1)
    }

    /// Multiply-accumulates per output position.
    pub fn macs_per_position(c: usize, mlp_ratio: usize) -> usize {
        27 * c + 2 * c * c + 125 * c + 2 * c * c * mlp_ratio
    }
}

#[derive(Debug, Clone)]
pub struct LraBranch {
    pub cfg: LraStageConfig,
    pub stem: Conv3d,
    pub transitions: Vec<Conv3d>,
    pub stages: Vec<Vec<LraBlock>>,
}

impl LraBranch {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &LraStageConfig,
        in_channels: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv3d::new(
            store,
            &format!("{name}.stem"),
            in_channels,
            cfg.channels[0],
            cfg.stem_stride,
            cfg.stem_stride,
            Padding::Valid,
            1,
            rng,
        );
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for (s, (&depth, &c)) in cfg.depths.iter().zip(&cfg.channels).enumerate() {
            if s > 0 {
                transitions.push(Conv3d::new(
                    store,
                    &format!("{name}.down{s}"),
                    cfg.channels[s - 1],
                    c,
                    cfg.inter_stage_stride,
                    cfg.inter_stage_stride,
                    Padding::Valid,
                    1,
                    rng,
                ));
            }
            stages.push(
                (0..depth)
                    .map(|b| {
                        LraBlock::new(
                            store,
                            &format!("{name}.stage{s}.block{b}"),
                            c,
                            cfg.mlp_ratio,
                            eps,
                            rng,
                        )
                    })
                    .collect(),
            );
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            transitions,
            stages,
        })
    }

    /// `clip: [N, 3, T, H, W]` -> `[N, T', Gh, Gw, C]` (token layout).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, clip: Var) -> Result<Var> {
        let mut x = self.stem.forward(tape, p, clip)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.transitions[s - 1].forward(tape, p, x)?;
            }
            for b in blocks {
                x = b.forward(tape, p, x)?;
            }
        }
        tape.permute(x, &[0, 2, 3, 4, 1])
    }

    pub fn param_count(cfg: &LraStageConfig, in_channels: usize) -> usize {
        let mut n = Conv3d::param_count(in_channels, cfg.channels[0], cfg.stem_stride, 1);
        for (s, (&depth, &c)) in cfg.depths.iter().zip(&cfg.channels).enumerate() {
            if s > 0 {
                n += Conv3d::param_count(cfg.channels[s - 1], c, cfg.inter_stage_stride, 1);
            }
            n += depth * LraBlock::param_count(c, cfg.mlp_ratio);
        }
        n
    }

    /// Multiply-accumulates for one clip of `(T, H, W)`.
    pub fn macs(cfg: &LraStageConfig, in_channels: usize, input: [usize; 3]) -> usize {
        let mut g = input;
        let shrink = |g: &mut [usize; 3], s: [usize; 3]| {
            for a in 0..3 {
                g[a] /= s[a];
            }
        };
        shrink(&mut g, cfg.stem_stride);
        let mut macs = g.iter().product::<usize>()
            * cfg.channels[0]
            * in_channels
            * cfg.stem_stride.iter().product::<usize>();
        for (s, (&depth, &c)) in cfg.depths.iter().zip(&cfg.channels).enumerate() {
            if s > 0 {
                shrink(&mut g, cfg.inter_stage_stride);
                macs += g.iter().product::<usize>()
                    * c
                    * cfg.channels[s - 1]
                    * cfg.inter_stage_stride.iter().product::<usize>();
            }
            macs +=
                depth * g.iter().product::<usize>() * LraBlock::macs_per_position(c, cfg.mlp_ratio);
        }
        macs
    }
}
