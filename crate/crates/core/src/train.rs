//! Training and inference loops.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Model, ModelConfig};
use crate::data::{annotations_by_clip, Manifest, SceneSpec, Split};
use crate::error::{cfg_err, input_err, Error, Result};
use crate::eval::{
    detections_to_rows, flatten_annotations, frame_map, ApResult, BoxAnnotation, DetRow, GtRow,
};
use crate::head::{make_proposals, multi_hot, BoxProposal, Detection, ProposalMode};
use crate::tensor::{kernels, Adam, AdamConfig, Tape, Tensor};
use crate::video::{Normalization, SamplingSpec, VideoTensor};
use crate::wea::{AttentionScheme, Fusion};
use crate::BoxRel;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule, as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Proposal jitter during training and evaluation (relative units).
    pub train_jitter: f64,
    pub eval_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 2e-3,
            min_lr_ratio: 0.05,
            weight_decay: 0.01,
            warmup_steps: 20,
            grad_clip: 1.0,
            train_jitter: 0.0,
            eval_jitter: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(cfg_err!("epochs and batch_size must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(cfg_err!("lr must be positive and min_lr_ratio in [0, 1]"));
        }
        if self.weight_decay < 0.0
            || self.grad_clip < 0.0
            || self.train_jitter < 0.0
            || self.eval_jitter < 0.0
        {
            return Err(cfg_err!(
                "weight_decay, grad_clip and jitters must be non-negative"
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("min_lr_ratio", self.min_lr_ratio.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("train_jitter", self.train_jitter.to_string()),
            ("eval_jitter", self.eval_jitter.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = || cfg_err!("{key}: bad value {v:?}");
        macro_rules! parse {
            ($f:expr) => {
                $f = v.parse().map_err(|_| bad())?
            };
        }
        match key {
            "epochs" => parse!(self.epochs),
            "batch_size" => parse!(self.batch_size),
            "lr" => parse!(self.lr),
            "min_lr_ratio" => parse!(self.min_lr_ratio),
            "weight_decay" => parse!(self.weight_decay),
            "warmup_steps" => parse!(self.warmup_steps),
            "grad_clip" => parse!(self.grad_clip),
            "train_jitter" => parse!(self.train_jitter),
            "eval_jitter" => parse!(self.eval_jitter),
            "seed" => parse!(self.seed),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Linear warmup, then cosine decay to `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// One preprocessed clip.
#[derive(Debug, Clone)]
pub struct Sample {
    pub clip_id: String,
    pub video: VideoTensor<f32>,
    pub annotations: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Loads the clips of `split` (all when `None`) from a manifest and GT CSV.
    pub fn load(
        manifest_path: &Path,
        gt_path: &Path,
        split: Option<Split>,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let gt = crate::eval::read_gt_csv(gt_path)?;
        if let Some(g) = gt.iter().find(|g| g.class_id >= cfg.num_classes) {
            return Err(input_err!(
                "ground-truth class {} >= num_classes {}",
                g.class_id,
                cfg.num_classes
            ));
        }
        let mut by_clip = annotations_by_clip(&gt);
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let entries: Vec<_> = manifest
            .entries
            .iter()
            .filter(|e| split.map(|s| e.split == s).unwrap_or(true))
            .cloned()
            .collect();
        let sampling = SamplingSpec::new(cfg.frames, cfg.sampling_stride)?;
        let norm = Normalization::default();
        let videos: Vec<Result<VideoTensor<f32>>> = crate::par::map_range(entries.len(), |i| {
            let e = &entries[i];
            let clip = crate::video::RawClip::load(&root.join(&e.path))?;
            if clip.height != cfg.height || clip.width != cfg.width {
                return Err(input_err!(
                    "{}: clip is {}x{}, model expects {}x{}",
                    e.clip_id,
                    clip.height,
                    clip.width,
                    cfg.height,
                    cfg.width
                ));
            }
            clip.to_video(sampling, &norm)
        });
        let mut samples = Vec::with_capacity(entries.len());
        for (e, v) in entries.iter().zip(videos) {
            samples.push(Sample {
                clip_id: e.clip_id.clone(),
                video: v?,
                annotations: by_clip.remove(&e.clip_id).unwrap_or_default(),
            });
        }
        Ok(Self {
            samples,
            num_classes: cfg.num_classes,
        })
    }

    pub fn ground_truth(&self) -> Vec<GtRow> {
        self.samples
            .iter()
            .flat_map(|s| flatten_annotations(&s.annotations))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Boxes and multi-hot targets of one batch, in clip order.
fn batch_boxes(
    samples: &[&Sample],
    mode: ProposalMode,
    seed: u64,
) -> (Vec<(usize, BoxRel)>, Vec<Vec<usize>>) {
    let mut rois = Vec::new();
    let mut labels = Vec::new();
    for (bi, s) in samples.iter().enumerate() {
        let props = make_proposals(&s.annotations, mode, seed);
        for (p, a) in props.iter().zip(&s.annotations) {
            rois.push((bi, p.bbox));
            labels.push(a.class_ids.iter().copied().collect());
        }
    }
    (rois, labels)
}

fn stack(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let vids: Vec<&VideoTensor<f32>> = samples.iter().map(|s| &s.video).collect();
    Ok(VideoTensor::stack(&vids)?.data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
}

/// Trains `model` in place. `on_epoch(epoch, mean_loss)` runs after every epoch.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    tc.validate()?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| !data.samples[i].annotations.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(input_err!("no annotated training clips"));
    }
    let start = Instant::now();
    let mut adam = Adam::new(
        AdamConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..AdamConfig::default()
        },
        model.store.tensors(),
    )?;
    let per_epoch = usable.len().div_ceil(tc.batch_size);
    let total = per_epoch * tc.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut epoch_loss = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let mode = if tc.train_jitter > 0.0 {
                ProposalMode::Jitter(tc.train_jitter)
            } else {
                ProposalMode::Exact
            };
            let (rois, labels) = batch_boxes(&batch, mode, tc.seed.wrapping_add(step as u64));
            let targets = multi_hot::<f32>(&labels, data.num_classes)?;
            let mut tape = Tape::new();
            let p = model.store.attach(&mut tape);
            let clip = tape.constant(stack(&batch)?);
            let loss = model.loss(&mut tape, &p, clip, &rois, &targets)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            tape.backward(loss)?;
            let mut grads = model.store.grads(&tape, &p);
            clip_grads(&mut grads, tc.grad_clip);
            adam.cfg.lr = tc.lr_at(step, total);
            adam.step(model.store.tensors_mut(), &grads)?;
            sum += lv;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainReport {
        epoch_loss,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grads(grads: &mut [Option<Tensor<f32>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| {
            g.data()
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Scores every proposal of every clip. Proposals come from the ground-truth
/// boxes, exact or jittered.
pub fn predict(
    model: &Model<f32>,
    data: &Dataset,
    mode: ProposalMode,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| !data.samples[i].annotations.is_empty())
        .collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let props: Vec<Vec<BoxProposal>> = batch
            .iter()
            .map(|s| make_proposals(&s.annotations, mode, seed))
            .collect();
        let rois: Vec<(usize, BoxRel)> = props
            .iter()
            .enumerate()
            .flat_map(|(bi, ps)| ps.iter().map(move |p| (bi, p.bbox)))
            .collect();
        let mut tape = Tape::new();
        let p = model.store.attach_frozen(&mut tape);
        let clip = tape.constant(stack(&batch)?);
        let logits = model.detect(&mut tape, &p, clip, &rois)?;
        let k = model.cfg.num_classes;
        let z = tape.value(logits).data();
        for (r, prop) in props.iter().flatten().enumerate() {
            out.push(Detection {
                clip_id: prop.clip_id.clone(),
                bbox: prop.bbox,
                person_id: prop.person_id,
                scores: z[r * k..(r + 1) * k]
                    .iter()
                    .map(|&v| kernels::sigmoid(v) as f64)
                    .collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub all: ApResult,
    /// Restricted to the back (top) row of actors.
    pub back_row: ApResult,
}

/// Person ids of the back row for a scene with `cols` actors per row.
pub fn is_back_row(person_id: i64, cols: usize) -> bool {
    person_id >= 0 && (person_id as usize) < cols
}

pub fn evaluate(
    detections: &[Detection],
    gt: &[GtRow],
    k: usize,
    cols: usize,
) -> Result<EvalReport> {
    let rows = detections_to_rows(detections);
    let all = frame_map(&rows, gt, k)?;
    let back_dets: Vec<DetRow> = detections_to_rows(
        &detections
            .iter()
            .filter(|d| is_back_row(d.person_id, cols))
            .cloned()
            .collect::<Vec<_>>(),
    );
    let back_gt: Vec<GtRow> = gt
        .iter()
        .filter(|g| is_back_row(g.person_id, cols))
        .cloned()
        .collect();
    let back_row = frame_map(&back_dets, &back_gt, k)?;
    Ok(EvalReport { all, back_row })
}

/// Outcome of one train-then-evaluate run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: TrainReport,
    pub eval: EvalReport,
    pub detections: Vec<Detection>,
    pub model: Model<f32>,
}

pub fn run_experiment(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    cols: usize,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Experiment> {
    let mut model = Model::<f32>::new(cfg, tc.seed)?;
    let report = train(&mut model, train_set, tc, on_epoch)?;
    let mode = if tc.eval_jitter > 0.0 {
        ProposalMode::Jitter(tc.eval_jitter)
    } else {
        ProposalMode::Exact
    };
    let detections = predict(&model, test_set, mode, tc.seed, tc.batch_size)?;
    let eval = evaluate(&detections, &test_set.ground_truth(), cfg.num_classes, cols)?;
    Ok(Experiment {
        report,
        eval,
        detections,
        model,
    })
}

/// One row of the attention-scheme x fusion-way grid.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub scheme: AttentionScheme,
    pub fusion: Fusion,
    pub eval: EvalReport,
    pub seconds: f64,
}

/// Trains and evaluates `cfg` once per scheme and fusion way, all other
/// settings fixed.
pub fn run_ablation(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    cols: usize,
    mut on_run: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for scheme in AttentionScheme::ALL {
        for fusion in Fusion::ALL {
            let mc = ModelConfig {
                scheme,
                fusion,
                ..cfg.clone()
            };
            mc.validate()?;
            let exp = run_experiment(&mc, tc, train_set, test_set, cols, |_, _| {})?;
            let row = AblationRow {
                scheme,
                fusion,
                eval: exp.eval,
                seconds: exp.report.seconds,
            };
            on_run(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut csv = String::from("scheme,fusion,map,back_row_map,seconds\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.2}\n",
            r.scheme, r.fusion, r.eval.all.map, r.eval.back_row.map, r.seconds
        ));
    }
    csv
}

/// Scene settings recorded in a generated manifest's header.
pub fn scene_from_manifest(m: &Manifest) -> Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    let mut seen = false;
    for c in &m.comments {
        if let Some((k, v)) = c.split_once('=') {
            if k.starts_with("scene.") {
                spec.set(k.trim(), v)?;
                seen = true;
            }
        }
    }
    if !seen {
        return Err(input_err!("manifest carries no scene settings"));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let tc = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((tc.lr_at(9, 100) - tc.lr).abs() < 1e-12);
        assert!(tc.lr_at(0, 100) < tc.lr_at(5, 100));
        assert!((tc.lr_at(100, 100) - tc.lr * tc.min_lr_ratio).abs() < 1e-12);
        assert!(tc.lr_at(50, 100) < tc.lr);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![
            Some(Tensor::<f32>::from_f64(&[2], &[3.0, 4.0]).unwrap()),
            None,
        ];
        clip_grads(&mut g, 1.0);
        let d = g[0].as_ref().unwrap().data();
        assert!(((d[0] * d[0] + d[1] * d[1]).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn back_row_ids() {
        assert!(is_back_row(3, 4));
        assert!(!is_back_row(4, 4));
    }

    #[test]
    fn tiny_end_to_end_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let spec = SceneSpec {
            frames: 8,
            height: 32,
            width: 32,
            rows: 2,
            cols: 2,
            ..SceneSpec::default()
        };
        let g = crate::data::generate_dataset(&spec, 6, dir.path()).unwrap();
        let tr = Dataset::load(&g.manifest_path, &g.gt_path, Some(Split::Train), &cfg).unwrap();
        let te = Dataset::load(&g.manifest_path, &g.gt_path, Some(Split::Test), &cfg).unwrap();
        assert_eq!((tr.len(), te.len()), (5, 1));
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = run_experiment(&cfg, &tc, &tr, &te, spec.cols, |_, _| {}).unwrap();
        let b = run_experiment(&cfg, &tc, &tr, &te, spec.cols, |_, _| {}).unwrap();
        assert_eq!(a.report.epoch_loss, b.report.epoch_loss);
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.detections.len(), 4);
        let m = Manifest::read(&g.manifest_path).unwrap();
        assert_eq!(scene_from_manifest(&m).unwrap(), spec);
    }
}
