//! The transformer backbone: patch embedding plus positional encoding plus the
//! optional LRA branch, then a stack of MHA -> WEA -> MLP blocks with pre-norm
//! residuals, and the detection head on top.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::head::DetectHead;
use crate::lra::{LraBranch, LraStageConfig};
use crate::nn::{Bound, Linear, Norm, ParamId, ParamStore};
use crate::tensor::{init, read_tensor, write_tensor, Scalar, Tape, Tensor, Var};
use crate::video::{self, Patch};
use crate::wea::{AttentionScheme, Fusion, Wea, WeaConfig, WeaTrace};
use crate::BoxRel;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Frame stride used when sampling clips.
    pub sampling_stride: usize,
    pub patch: Patch,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub window: usize,
    pub scheme: AttentionScheme,
    pub fusion: Fusion,
    pub lra: Option<LraStageConfig>,
    pub wea: bool,
    /// Blocks carrying WEA; `None` means all of them.
    pub wea_blocks: Option<Vec<usize>>,
    pub num_classes: usize,
    pub roi_grid: usize,
    /// Only 0 is supported.
    pub drop_path: f64,
    pub train_scoring: bool,
    pub eps: f64,
}

impl ModelConfig {
    /// 16x224x224 clips, 12 blocks at 768 channels, window 7.
    pub fn full() -> Self {
        Self {
            frames: 16,
            height: 224,
            width: 224,
            sampling_stride: 4,
            patch: [2, 16, 16],
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4,
            window: 7,
            scheme: AttentionScheme::Joint,
            fusion: Fusion::Sum,
            lra: Some(LraStageConfig::full()),
            wea: true,
            wea_blocks: None,
            num_classes: 10,
            roi_grid: 7,
            drop_path: 0.0,
            train_scoring: false,
            eps: 1e-6,
        }
    }

    /// 8x32x32 clips, C=16, 2 blocks: a 4x4x4 token grid.
    pub fn tiny() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            sampling_stride: 1,
            patch: [2, 8, 8],
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 4,
            window: 3,
            lra: Some(LraStageConfig {
                depths: vec![1, 1],
                channels: vec![8, 16],
                stem_stride: [2, 4, 4],
                inter_stage_stride: [1, 2, 2],
                mlp_ratio: 4,
            }),
            num_classes: 4,
            ..Self::full()
        }
    }

    /// 8x64x64 clips, C=32, 4 blocks: a 4x8x8 token grid.
    pub fn toy() -> Self {
        Self {
            height: 64,
            width: 64,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 2,
            lra: Some(LraStageConfig {
                depths: vec![1, 1],
                channels: vec![16, 32],
                stem_stride: [2, 4, 4],
                inter_stage_stride: [1, 2, 2],
                mlp_ratio: 4,
            }),
            ..Self::tiny()
        }
    }

    /// Smallest complete model, for finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            frames: 4,
            height: 16,
            width: 16,
            patch: [2, 4, 4],
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 2,
            lra: Some(LraStageConfig {
                depths: vec![1, 1],
                channels: vec![4, 8],
                stem_stride: [2, 2, 2],
                inter_stage_stride: [1, 2, 2],
                mlp_ratio: 2,
            }),
            num_classes: 3,
            roi_grid: 3,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            "toy" => Ok(Self::toy()),
            "gradcheck" => Ok(Self::gradcheck()),
            other => Err(cfg_err!(
                "unknown preset {other:?} (full, tiny, toy, gradcheck)"
            )),
        }
    }

    /// Same architecture with LRA and WEA removed.
    pub fn vanilla(&self) -> Self {
        Self {
            lra: None,
            wea: false,
            ..self.clone()
        }
    }

    /// `(T', Gh, Gw)`.
    pub fn token_grid(&self) -> Result<[usize; 3]> {
        video::token_grid(self.frames, self.height, self.width, self.patch)
    }

    /// Candidate window positions per axis, `(u_h, u_w)`.
    pub fn candidate_positions(&self) -> Result<(usize, usize)> {
        let [_, gh, gw] = self.token_grid()?;
        if self.window > gh || self.window > gw {
            return Err(cfg_err!("window {} exceeds grid {gh}x{gw}", self.window));
        }
        Ok((gh - self.window + 1, gw - self.window + 1))
    }

    pub fn has_wea(&self, block: usize) -> bool {
        self.wea
            && self
                .wea_blocks
                .as_ref()
                .map(|b| b.contains(&block))
                .unwrap_or(true)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.token_grid().map_err(|e| cfg_err!("{e}"))?;
        if self.frames < 2 || !self.frames.is_multiple_of(2) {
            return Err(cfg_err!(
                "frames must be even and >= 2, got {}",
                self.frames
            ));
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return Err(cfg_err!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim,
                self.num_heads
            ));
        }
        if self.num_classes == 0 {
            return Err(cfg_err!("num_classes must be >= 1"));
        }
        if self.mlp_ratio == 0 || self.roi_grid == 0 || self.sampling_stride == 0 {
            return Err(cfg_err!(
                "mlp_ratio, roi_grid and sampling_stride must be positive"
            ));
        }
        if self.drop_path != 0.0 {
            return Err(cfg_err!("drop_path {} unsupported; only 0", self.drop_path));
        }
        if self.wea {
            if self.window == 0 {
                return Err(cfg_err!("window must be positive"));
            }
            self.candidate_positions()?;
            if let Some(blocks) = &self.wea_blocks {
                if let Some(b) = blocks.iter().find(|&&b| b >= self.num_blocks) {
                    return Err(cfg_err!("wea block {b} >= num_blocks {}", self.num_blocks));
                }
            }
        }
        if let Some(lra) = &self.lra {
            lra.validate()?;
            let g = lra.output_grid([self.frames, self.height, self.width])?;
            if g != grid {
                return Err(cfg_err!("lra output grid {g:?} != token grid {grid:?}"));
            }
            if lra.out_channels() != self.embed_dim {
                return Err(cfg_err!(
                    "lra channels {} != embed_dim {}",
                    lra.out_channels(),
                    self.embed_dim
                ));
            }
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = vec![
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("sampling_stride", self.sampling_stride.to_string()),
            ("patch", list(&self.patch)),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("window", self.window.to_string()),
            ("scheme", self.scheme.to_string()),
            ("fusion", self.fusion.to_string()),
            ("wea", self.wea.to_string()),
            (
                "wea_blocks",
                self.wea_blocks
                    .as_ref()
                    .map(|b| list(b))
                    .unwrap_or_else(|| "all".into()),
            ),
            ("num_classes", self.num_classes.to_string()),
            ("roi_grid", self.roi_grid.to_string()),
            ("drop_path", self.drop_path.to_string()),
            ("train_scoring", self.train_scoring.to_string()),
            ("eps", self.eps.to_string()),
            ("lra", self.lra.is_some().to_string()),
        ];
        if let Some(l) = &self.lra {
            kv.push(("lra.depths", list(&l.depths)));
            kv.push(("lra.channels", list(&l.channels)));
            kv.push(("lra.stem_stride", list(&l.stem_stride)));
            kv.push(("lra.inter_stride", list(&l.inter_stage_stride)));
            kv.push(("lra.mlp_ratio", l.mlp_ratio.to_string()));
        }
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one key. Returns `Ok(false)` for keys this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = |what: &str| cfg_err!("{key}: bad {what} {v:?}");
        let num = || v.parse::<usize>().map_err(|_| bad("integer"));
        let list = || -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad("integer list")))
                .collect()
        };
        let triple = || -> Result<[usize; 3]> {
            let l = list()?;
            l.try_into().map_err(|_| bad("triple"))
        };
        let flag = || match v {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            _ => Err(bad("boolean")),
        };
        fn lra(this: &mut ModelConfig) -> &mut LraStageConfig {
            this.lra.get_or_insert_with(|| LraStageConfig {
                depths: vec![1],
                channels: vec![1],
                stem_stride: [1, 1, 1],
                inter_stage_stride: [1, 1, 1],
                mlp_ratio: 4,
            })
        }
        match key {
            "frames" => self.frames = num()?,
            "height" => self.height = num()?,
            "width" => self.width = num()?,
            "sampling_stride" => self.sampling_stride = num()?,
            "patch" => self.patch = triple()?,
            "embed_dim" => self.embed_dim = num()?,
            "num_blocks" => self.num_blocks = num()?,
            "num_heads" => self.num_heads = num()?,
            "mlp_ratio" => self.mlp_ratio = num()?,
            "window" => self.window = num()?,
            "scheme" => self.scheme = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "wea" => self.wea = flag()?,
            "wea_blocks" => self.wea_blocks = if v == "all" { None } else { Some(list()?) },
            "num_classes" => self.num_classes = num()?,
            "roi_grid" => self.roi_grid = num()?,
            "drop_path" => self.drop_path = v.parse().map_err(|_| bad("number"))?,
            "train_scoring" => self.train_scoring = flag()?,
            "eps" => self.eps = v.parse().map_err(|_| bad("number"))?,
            "lra" => {
                if flag()? {
                    if self.lra.is_none() {
                        self.lra = Self::preset_lra_for(self.embed_dim);
                    }
                } else {
                    self.lra = None;
                }
            }
            "lra.depths" => lra(self).depths = list()?,
            "lra.channels" => lra(self).channels = list()?,
            "lra.stem_stride" => lra(self).stem_stride = triple()?,
            "lra.inter_stride" => lra(self).inter_stage_stride = triple()?,
            "lra.mlp_ratio" => lra(self).mlp_ratio = num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// A two-stage branch ending at `embed_dim` channels, used when LRA is
    /// switched on without explicit stage settings.
    fn preset_lra_for(c: usize) -> Option<LraStageConfig> {
        Some(LraStageConfig {
            depths: vec![1, 1],
            channels: vec![(c / 2).max(1), c],
            stem_stride: [2, 4, 4],
            inter_stage_stride: [1, 2, 2],
            mlp_ratio: 4,
        })
    }
}

/// Parameter handles of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub wea: Option<Wea>,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl BlockState {
    pub fn new<T: Scalar, R: rand::Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        with_wea: bool,
        rng: &mut R,
    ) -> Self {
        let c = cfg.embed_dim;
        let hidden = c * cfg.mlp_ratio;
        let wea = with_wea.then(|| {
            Wea::new(
                store,
                &format!("{name}.wea"),
                c,
                WeaConfig {
                    window: cfg.window,
                    heads: cfg.num_heads,
                    scheme: cfg.scheme,
                    fusion: cfg.fusion,
                    train_scoring: cfg.train_scoring,
                },
                cfg.eps,
                rng,
            )
        });
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), c, 4, cfg.eps),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), c, 3 * c, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), c, c, rng),
            wea,
            norm2: Norm::new(store, &format!("{name}.norm2"), c, 4, cfg.eps),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), c, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, c, rng),
            heads: cfg.num_heads,
        }
    }

    /// Global space-time self-attention on normalized tokens `[N, T', Gh, Gw, C]`.
    pub fn mha<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let seq = tape.reshape(x, &[s[0], s[1] * s[2] * s[3], s[4]])?;
        let h = self.qkv.forward(tape, p, seq)?;
        let h = tape.attention(h, self.heads)?;
        let h = self.proj.forward(tape, p, h)?;
        tape.reshape(h, &s)
    }

    /// `Y = X + MHA(LN X)`, `W = WEA(Y)`, `Z = W + MLP(LN W)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, Option<WeaTrace<T>>)> {
        if tape.shape(x).len() != 5 {
            return Err(dim_err!(
                "block: expected [N, T', Gh, Gw, C], got {:?}",
                tape.shape(x)
            ));
        }
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.mha(tape, p, h)?;
        let y = tape.add(x, h)?;
        let (w, trace) = match &self.wea {
            Some(wea) => {
                let t = wea.forward(tape, p, y)?;
                (t.out, Some(t))
            }
            None => (y, None),
        };
        let h = self.norm2.forward(tape, p, w)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        Ok((tape.add(w, h)?, trace))
    }

    /// Zeroes every residual branch's output projection.
    pub fn zero_residuals<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.proj.zero(store);
        self.fc2.zero(store);
        if let Some(w) = &self.wea {
            w.proj.zero(store);
        }
    }

    pub fn param_count(c: usize, mlp_ratio: usize, wea_window: Option<usize>) -> usize {
        4 * c
            + Linear::param_count(c, 3 * c)
            + Linear::param_count(c, c)
            + Linear::param_count(c, c * mlp_ratio)
            + Linear::param_count(c * mlp_ratio, c)
            + wea_window.map(|w| Wea::param_count(c, w)).unwrap_or(0)
    }
}

/// Layer handles for the whole network; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub lra: Option<LraBranch>,
    pub blocks: Vec<BlockState>,
    pub head: DetectHead,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Embedded tokens entering the first block.
    pub tokens: Var,
    pub features: Var,
    /// Per block, `None` where WEA is absent.
    pub wea: Vec<Option<WeaTrace<T>>>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.embed_dim;
        let [pt, ph, pw] = cfg.patch;
        let patch_weight = store.add(
            "patch_embed.weight",
            init::trunc_normal(&[c, 3, pt, ph, pw], 0.02, &mut rng),
            true,
        );
        let patch_bias = store.add("patch_embed.bias", Tensor::zeros(&[c]), true);
        let lra = match &cfg.lra {
            Some(l) => Some(LraBranch::new(&mut store, "lra", l, 3, cfg.eps, &mut rng)?),
            None => None,
        };
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                BlockState::new(
                    &mut store,
                    &format!("blocks.{b}"),
                    cfg,
                    cfg.has_wea(b),
                    &mut rng,
                )
            })
            .collect();
        let head = DetectHead::new(
            &mut store,
            "head",
            c,
            cfg.num_classes,
            cfg.roi_grid,
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            arch: Architecture {
                patch_weight,
                patch_bias,
                lra,
                blocks,
                head,
            },
            store,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    /// `X = PE(clip) + pos + LRA(clip)` as `[N, T', Gh, Gw, C]`.
    pub fn embed(&self, tape: &mut Tape<T>, p: &Bound, clip: Var) -> Result<Var> {
        let a = &self.arch;
        let x = video::patch_embed(
            tape,
            clip,
            p.get(a.patch_weight),
            Some(p.get(a.patch_bias)),
            self.cfg.patch,
        )?;
        let x = video::add_positional(tape, x)?;
        match &a.lra {
            Some(lra) => {
                let l = lra.forward(tape, p, clip)?;
                tape.add(x, l)
            }
            None => Ok(x),
        }
    }

    pub fn features(&self, tape: &mut Tape<T>, p: &Bound, clip: Var) -> Result<ForwardTrace<T>> {
        let s = tape.shape(clip).to_vec();
        let want = [3, self.cfg.frames, self.cfg.height, self.cfg.width];
        if s.len() != 5 || s[1..] != want {
            return Err(dim_err!(
                "clip {s:?} incompatible with config [N, {want:?}]"
            ));
        }
        let tokens = self.embed(tape, p, clip)?;
        let mut x = tokens;
        let mut traces = Vec::with_capacity(self.arch.blocks.len());
        for b in &self.arch.blocks {
            let (y, t) = b.forward(tape, p, x)?;
            x = y;
            traces.push(t);
        }
        Ok(ForwardTrace {
            tokens,
            features: x,
            wea: traces,
        })
    }

    /// `[R, K]` logits for boxes `(clip index, box)`.
    pub fn detect(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        clip: Var,
        rois: &[(usize, BoxRel)],
    ) -> Result<Var> {
        let f = self.features(tape, p, clip)?;
        self.arch.head.forward(tape, p, f.features, rois)
    }

    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        clip: Var,
        rois: &[(usize, BoxRel)],
        targets: &Tensor<T>,
    ) -> Result<Var> {
        let logits = self.detect(tape, p, clip, rois)?;
        crate::head::multilabel_loss(tape, logits, targets)
    }

    /// Zeroes all residual branches so the block stack is the identity.
    pub fn zero_residuals(&mut self) {
        for b in &self.arch.blocks {
            b.zero_residuals(&mut self.store);
        }
    }

    /// Writes `manifest.txt` (config lines) and one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut text = String::new();
        for (k, v) in self.cfg.to_kv() {
            text.push_str(&format!("{k}={v}\n"));
        }
        let mpath = dir.join("manifest.txt");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        for (name, t) in self.store.names().iter().zip(self.store.tensors()) {
            write_tensor(t, &pdir.join(format!("{name}.wvt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let kv = crate::config::parse_kv(&text, &mpath.display().to_string())?;
        let mut cfg = ModelConfig::full();
        // Explicit `lra=false` must win over stage keys regardless of order.
        let lra_on = kv
            .get("lra")
            .map(|(_, v)| v.as_str() != "false")
            .unwrap_or(true);
        for (k, (line, v)) in &kv {
            if !cfg.set(k, v)? {
                return Err(Error::parse(
                    mpath.display(),
                    *line,
                    format!("unknown key {k:?}"),
                ));
            }
        }
        if !lra_on {
            cfg.lra = None;
        }
        let mut model = Self::new(&cfg, 0)?;
        let pdir = dir.join("params");
        let names = model.store.names().to_vec();
        for name in names {
            let t = read_tensor(&pdir.join(format!("{name}.wvt")))?.into_dtype::<T>();
            model.store.load(&name, t)?;
        }
        Ok(model)
    }
}

/// Parameter count and forward FLOPs (2 x multiply-accumulates) for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamsFlops {
    pub params: usize,
    pub flops: usize,
}

/// Closed-form counts from the configuration alone. FLOPs cover convs,
/// linears and attention matmuls, with one box through the head.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<ParamsFlops> {
    let [gt, gh, gw] = cfg.token_grid()?;
    let l = gt * gh * gw;
    let c = cfg.embed_dim;
    let hidden = c * cfg.mlp_ratio;
    let patch_vol: usize = cfg.patch.iter().product();
    let mut params = c * 3 * patch_vol + c;
    let mut macs = l * c * 3 * patch_vol;
    if let Some(lra) = &cfg.lra {
        params += LraBranch::param_count(lra, 3);
        macs += LraBranch::macs(lra, 3, [cfg.frames, cfg.height, cfg.width]);
    }
    for b in 0..cfg.num_blocks {
        let wea = cfg.has_wea(b).then_some(cfg.window);
        params += BlockState::param_count(c, cfg.mlp_ratio, wea);
        macs += l * (3 * c * c + c * c + 2 * c * hidden) + 2 * l * l * c;
        if wea.is_some() {
            for (len, calls) in Wea::attention_extents(cfg.scheme, gt, cfg.window) {
                macs += calls * (len * 4 * c * c + 2 * len * len * c);
            }
        }
    }
    params += DetectHead::param_count(c, cfg.num_classes);
    macs += c * cfg.num_classes;
    Ok(ParamsFlops {
        params,
        flops: 2 * macs,
    })
}

/// Output feature shape `[T', Gh, Gw, C]` without running the model.
pub fn infer_output_shape(cfg: &ModelConfig) -> Result<[usize; 4]> {
    cfg.validate()?;
    let [t, h, w] = cfg.token_grid()?;
    Ok([t, h, w, cfg.embed_dim])
}

/// `key -> value` view of a config, handy for logging and CSV headers.
pub fn config_map(cfg: &ModelConfig) -> BTreeMap<String, String> {
    cfg.to_kv().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{Normalization, RawClip, SamplingSpec};

    fn clip_var<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, seed: u8) -> Var {
        let mut raw = RawClip::new(cfg.frames, cfg.height, cfg.width, 3);
        for (i, p) in raw.pixels.iter_mut().enumerate() {
            *p = ((i * 31 + seed as usize * 7) % 251) as u8;
        }
        let v = raw
            .to_video::<T>(
                SamplingSpec::new(cfg.frames, 1).unwrap(),
                &Normalization::default(),
            )
            .unwrap();
        tape.constant(v.data)
    }

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::full(),
            ModelConfig::tiny(),
            ModelConfig::toy(),
            ModelConfig::gradcheck(),
        ] {
            cfg.validate().unwrap();
            cfg.vanilla().validate().unwrap();
        }
    }

    #[test]
    fn full_shapes() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.token_grid().unwrap(), [8, 14, 14]);
        assert_eq!(cfg.candidate_positions().unwrap(), (8, 8));
        assert_eq!(infer_output_shape(&cfg).unwrap(), [8, 14, 14, 768]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::tiny();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.window = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.num_classes = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_matches_store() {
        for cfg in [
            ModelConfig::tiny(),
            ModelConfig::toy(),
            ModelConfig::gradcheck(),
            ModelConfig::toy().vanilla(),
        ] {
            let m = Model::<f32>::new(&cfg, 1).unwrap();
            assert_eq!(
                count_params_flops(&cfg).unwrap().params,
                m.store.count(),
                "{cfg:?}"
            );
        }
        assert_eq!(Linear::param_count(768, 768), 590_592);
    }

    #[test]
    fn tiny_forward_shape() {
        let cfg = ModelConfig::tiny();
        let m = Model::<f32>::new(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let p = m.store.attach_frozen(&mut tape);
        let clip = clip_var(&mut tape, &cfg, 0);
        let f = m.features(&mut tape, &p, clip).unwrap();
        assert_eq!(tape.shape(f.features), &[1, 4, 4, 4, 16]);
        let logits = m
            .arch
            .head
            .forward(&mut tape, &p, f.features, &[(0, [0.1, 0.1, 0.5, 0.6])])
            .unwrap();
        assert_eq!(tape.shape(logits), &[1, 4]);
    }

    #[test]
    fn zero_residuals_is_identity() {
        let cfg = ModelConfig::tiny();
        let mut m = Model::<f64>::new(&cfg, 3).unwrap();
        m.zero_residuals();
        let mut tape = Tape::new();
        let p = m.store.attach_frozen(&mut tape);
        let clip = clip_var(&mut tape, &cfg, 1);
        let f = m.features(&mut tape, &p, clip).unwrap();
        assert!(tape.value(f.features).max_abs_diff(tape.value(f.tokens)) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [ModelConfig::tiny(), ModelConfig::tiny().vanilla()] {
            let m = Model::<f32>::new(&cfg, 5).unwrap();
            m.save(dir.path()).unwrap();
            let back = Model::<f32>::load(dir.path()).unwrap();
            assert_eq!(back.cfg, cfg);
            for (a, b) in m.store.tensors().iter().zip(back.store.tensors()) {
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn kv_roundtrip() {
        let mut cfg = ModelConfig::toy();
        cfg.scheme = AttentionScheme::Divided;
        cfg.wea_blocks = Some(vec![0, 2]);
        let mut back = ModelConfig::full();
        for (k, v) in cfg.to_kv() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("nope", "1").unwrap());
    }
}
