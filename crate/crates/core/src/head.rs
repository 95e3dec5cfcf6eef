//! Detection head: proposals, 3D RoI pooling, multi-label classifier and loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{input_err, Result};
use crate::eval::BoxAnnotation;
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::BoxRel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSource {
    GroundTruth,
    Jittered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxProposal {
    pub clip_id: String,
    pub bbox: BoxRel,
    pub source: ProposalSource,
    /// Person the proposal was derived from.
    pub person_id: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub clip_id: String,
    pub bbox: BoxRel,
    pub person_id: i64,
    /// Per-class probabilities.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposalMode {
    Exact,
    /// Gaussian corner noise with this standard deviation (relative units).
    Jitter(f64),
}

pub fn valid_box(b: &BoxRel) -> bool {
    let [x1, y1, x2, y2] = *b;
    (0.0..=1.0).contains(&x1)
        && (0.0..=1.0).contains(&x2)
        && (0.0..=1.0).contains(&y1)
        && (0.0..=1.0).contains(&y2)
        && x1 < x2
        && y1 < y2
}

/// FNV-1a; stable across runs and platforms.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stand-in for a person detector: copies or jitters ground-truth boxes. The
/// jitter stream is reseeded per clip from `seed` and the clip id.
pub fn make_proposals(gt: &[BoxAnnotation], mode: ProposalMode, seed: u64) -> Vec<BoxProposal> {
    let mut out = Vec::with_capacity(gt.len());
    let mut rng: Option<(String, ChaCha8Rng)> = None;
    for ann in gt {
        let (bbox, source) = match mode {
            ProposalMode::Exact => (ann.bbox, ProposalSource::GroundTruth),
            ProposalMode::Jitter(sigma) if sigma <= 0.0 => (ann.bbox, ProposalSource::GroundTruth),
            ProposalMode::Jitter(sigma) => {
                if rng
                    .as_ref()
                    .map(|(id, _)| id != &ann.clip_id)
                    .unwrap_or(true)
                {
                    rng = Some((
                        ann.clip_id.clone(),
                        ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&ann.clip_id)),
                    ));
                }
                let r = &mut rng.as_mut().unwrap().1;
                (jitter_box(&ann.bbox, sigma, r), ProposalSource::Jittered)
            }
        };
        out.push(BoxProposal {
            clip_id: ann.clip_id.clone(),
            bbox,
            source,
            person_id: ann.person_id,
        });
    }
    out
}

pub fn jitter_box<R: rand::Rng>(b: &BoxRel, sigma: f64, rng: &mut R) -> BoxRel {
    let noise = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut j = b.map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    const MIN_SIDE: f64 = 1e-3;
    for (lo, hi) in [(0, 2), (1, 3)] {
        if j[lo] > j[hi] {
            j.swap(lo, hi);
        }
        if j[hi] - j[lo] < MIN_SIDE {
            let mid = ((j[lo] + j[hi]) / 2.0).clamp(MIN_SIDE / 2.0, 1.0 - MIN_SIDE / 2.0);
            j[lo] = mid - MIN_SIDE / 2.0;
            j[hi] = mid + MIN_SIDE / 2.0;
        }
    }
    j
}

/// RoI pooling grid side.
pub const ROI_GRID: usize = 7;

/// Pools one box per row of `rois` from `features: [N, T', Gh, Gw, C]` into `[R, C]`.
pub fn roi_pool_3d<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    rois: &[(usize, BoxRel)],
    grid: usize,
) -> Result<Var> {
    tape.roi_pool(features, rois, grid)
}

/// Single linear classifier over pooled box features.
#[derive(Debug, Clone)]
pub struct DetectHead {
    pub cls: Linear,
    pub grid: usize,
    pub num_classes: usize,
}

impl DetectHead {
    pub fn new<T: Scalar, R: rand::Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        k: usize,
        grid: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            cls: Linear::new(store, &format!("{name}.cls"), c, k, rng),
            grid,
            num_classes: k,
        }
    }

    /// `[R, K]` logits.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        features: Var,
        rois: &[(usize, BoxRel)],
    ) -> Result<Var> {
        let pooled = roi_pool_3d(tape, features, rois, self.grid)?;
        self.classify(tape, p, pooled)
    }

    pub fn classify<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        roi_features: Var,
    ) -> Result<Var> {
        self.cls.forward(tape, p, roi_features)
    }

    pub fn param_count(c: usize, k: usize) -> usize {
        Linear::param_count(c, k)
    }
}

/// Sum over classes, mean over boxes, of sigmoid cross-entropy.
pub fn multilabel_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
) -> Result<Var> {
    tape.bce_with_logits(logits, targets)
}

/// Multi-hot `[B, K]` targets from label sets.
pub fn multi_hot<T: Scalar>(labels: &[Vec<usize>], k: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * k];
    for (r, set) in labels.iter().enumerate() {
        for &c in set {
            if c >= k {
                return Err(input_err!("label {c} outside [0, {k})"));
            }
            data[r * k + c] = T::one();
        }
    }
    Tensor::new(vec![labels.len().max(1), k], data)
}
