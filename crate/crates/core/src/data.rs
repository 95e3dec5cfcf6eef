//! Benchmark plumbing: manifests, the synthetic dense-classroom generator,
//! annotation statistics and train/test splitting.
//!
//! Generated scenes place `rows x cols` seated actors on a grid. Row 0 is the
//! back of the room: actors there are smaller and a desk band hides the lower
//! part of their bodies. Each action class is drawn as a fixed temporal
//! pattern inside its own slot in the upper part of the actor; slots of
//! absent classes show a static patch of the same mean intensity, so classes
//! can only be told apart by their dynamics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{cfg_err, input_err, Error, Result};
use crate::eval::{flatten_annotations, group_annotations, write_gt_csv, BoxAnnotation, GtRow};
use crate::video::RawClip;

/// Pattern amplitude and base intensity of class slots.
pub const PATTERN_BASE: f64 = 128.0;
pub const MAX_CLASSES: usize = 8;

/// Names of the built-in class patterns, indexed by class id.
pub const PATTERN_NAMES: [&str; MAX_CLASSES] = [
    "flicker",
    "slow_square",
    "shifting_stripes",
    "pulse",
    "row_stripes",
    "checker_shift",
    "half_flicker",
    "ramp",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    /// Raw frames per clip (sampled frames times sampling stride).
    pub frames: usize,
    /// Pattern period unit in raw frames; equals the sampling stride.
    pub frame_stride: usize,
    pub height: usize,
    pub width: usize,
    /// Actor scale of the back row; rows scale linearly to 1 at the front.
    pub back_scale: f64,
    /// Fraction of a back-row actor's height hidden by the desk band.
    pub occlusion: f64,
    pub num_classes: usize,
    pub max_labels: usize,
    /// Exponent of the class-frequency power law.
    pub zipf: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub camera: String,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 4,
            cols: 4,
            frames: 8,
            frame_stride: 1,
            height: 64,
            width: 64,
            back_scale: 0.5,
            occlusion: 0.3,
            num_classes: 4,
            max_labels: 5,
            zipf: 0.6,
            amplitude: 36.0,
            noise: 14.0,
            camera: "front".into(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(cfg_err!(
                "scene: num_classes must be in [2, {MAX_CLASSES}], got {}",
                self.num_classes
            ));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(cfg_err!("scene: empty actor grid"));
        }
        if self.height / self.rows < 8 || self.width / self.cols < 8 {
            return Err(cfg_err!(
                "scene: {}x{} actors do not fit a {}x{} frame",
                self.rows,
                self.cols,
                self.height,
                self.width
            ));
        }
        if !(0.2..=1.0).contains(&self.back_scale) || !(0.0..=0.4).contains(&self.occlusion) {
            return Err(cfg_err!(
                "scene: back_scale in [0.2, 1] and occlusion in [0, 0.4] required"
            ));
        }
        if self.frames == 0 || self.frame_stride == 0 || self.max_labels == 0 {
            return Err(cfg_err!(
                "scene: frames, frame_stride and max_labels must be positive"
            ));
        }
        if self.height > u16::MAX as usize
            || self.width > u16::MAX as usize
            || self.frames > u16::MAX as usize
        {
            return Err(cfg_err!("scene: extents exceed the clip format"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("scene.seed", self.seed.to_string()),
            ("scene.rows", self.rows.to_string()),
            ("scene.cols", self.cols.to_string()),
            ("scene.frames", self.frames.to_string()),
            ("scene.frame_stride", self.frame_stride.to_string()),
            ("scene.height", self.height.to_string()),
            ("scene.width", self.width.to_string()),
            ("scene.back_scale", self.back_scale.to_string()),
            ("scene.occlusion", self.occlusion.to_string()),
            ("scene.num_classes", self.num_classes.to_string()),
            ("scene.max_labels", self.max_labels.to_string()),
            ("scene.zipf", self.zipf.to_string()),
            ("scene.amplitude", self.amplitude.to_string()),
            ("scene.noise", self.noise.to_string()),
            ("scene.camera", self.camera.clone()),
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
            "scene.seed" => parse!(self.seed),
            "scene.rows" => parse!(self.rows),
            "scene.cols" => parse!(self.cols),
            "scene.frames" => parse!(self.frames),
            "scene.frame_stride" => parse!(self.frame_stride),
            "scene.height" => parse!(self.height),
            "scene.width" => parse!(self.width),
            "scene.back_scale" => parse!(self.back_scale),
            "scene.occlusion" => parse!(self.occlusion),
            "scene.num_classes" => parse!(self.num_classes),
            "scene.max_labels" => parse!(self.max_labels),
            "scene.zipf" => parse!(self.zipf),
            "scene.amplitude" => parse!(self.amplitude),
            "scene.noise" => parse!(self.noise),
            "scene.camera" => self.camera = v.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of the actor at `(row, col)`.
    pub fn actor_rect(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let (ch, cw) = (self.height / self.rows, self.width / self.cols);
        let s = self.row_scale(row);
        let aw = ((cw as f64 * s).round() as usize).clamp(4, cw);
        let ah = ((ch as f64 * s).round() as usize).clamp(4, ch);
        let x0 = col * cw + (cw - aw) / 2;
        // Actors sit on the bottom edge of their cell.
        let y0 = row * ch + (ch - ah);
        (x0, y0, x0 + aw, y0 + ah)
    }

    pub fn row_scale(&self, row: usize) -> f64 {
        if self.rows == 1 {
            return 1.0;
        }
        self.back_scale + (1.0 - self.back_scale) * row as f64 / (self.rows - 1) as f64
    }

    /// Slot rectangles of each class inside an actor rectangle.
    pub fn slot_rects(
        &self,
        actor: (usize, usize, usize, usize),
    ) -> Vec<(usize, usize, usize, usize)> {
        let (x0, y0, x1, y1) = actor;
        let k = self.num_classes;
        let gc = (k as f64).sqrt().ceil() as usize;
        let gr = k.div_ceil(gc);
        let region_h = ((y1 - y0) as f64 * 0.6).round() as usize;
        let (aw, ah) = (x1 - x0, region_h.max(gr));
        (0..k)
            .map(|c| {
                let (r, q) = (c / gc, c % gc);
                let sx0 = x0 + q * aw / gc;
                let sx1 = x0 + (q + 1) * aw / gc;
                let sy0 = y0 + r * ah / gr;
                let sy1 = y0 + (r + 1) * ah / gr;
                (sx0, sy0, sx1.max(sx0 + 1), sy1.max(sy0 + 1))
            })
            .collect()
    }

    /// Relative box of an actor.
    pub fn actor_box(&self, row: usize, col: usize) -> crate::BoxRel {
        let (x0, y0, x1, y1) = self.actor_rect(row, col);
        [
            x0 as f64 / self.width as f64,
            y0 as f64 / self.height as f64,
            x1 as f64 / self.width as f64,
            y1 as f64 / self.height as f64,
        ]
    }

    pub fn class_weights(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| 1.0 / ((c + 1) as f64).powf(self.zipf))
            .collect()
    }
}

/// Signed pattern offset in units of the amplitude for class `class` at
/// sampled frame `t`, pixel `(x, y)` relative to the slot origin.
pub fn pattern_value(class: usize, t: usize, x: usize, y: usize) -> f64 {
    let alt = |n: usize| if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    match class {
        0 => alt(t),
        1 => alt(t / 4),
        2 => alt(x + t),
        3 => {
            if t.is_multiple_of(4) {
                1.0
            } else {
                -1.0 / 3.0
            }
        }
        4 => alt(y + t),
        5 => alt(x + y + t),
        6 => alt(t / 2),
        _ => (t % 4) as f64 / 1.5 - 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::Unassigned => "none",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "none" => Ok(Self::Unassigned),
            other => Err(input_err!("unknown split {other:?}")),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub entry: ManifestEntry,
    /// Nominal clip length in seconds.
    pub duration: f64,
    pub keyframe: usize,
    pub annotations: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Free-form `# ...` header lines.
    pub comments: Vec<String>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for c in &self.comments {
            text.push_str(&format!("# {c}\n"));
        }
        for e in &self.entries {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.clip_id, e.path, e.frames, e.height, e.width, e.split
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let mut comments = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim().to_string());
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let perr = |m: String| Error::parse(path.display(), i + 1, m);
            if f.len() != 6 {
                return Err(perr(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| perr(format!("bad {what} {s:?}")))
            };
            entries.push(ManifestEntry {
                clip_id: f[0].to_string(),
                path: f[1].to_string(),
                frames: num(f[2], "frame count")?,
                height: num(f[3], "height")?,
                width: num(f[4], "width")?,
                split: f[5].parse().map_err(|e: Error| perr(e.to_string()))?,
            });
        }
        Ok(Self { entries, comments })
    }

    pub fn with_split(&self, split: Split) -> Vec<ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect()
    }
}

/// Paths written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub gt_path: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<ClipRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const GT_FILE: &str = "gt.csv";
pub const CLIP_SECONDS: f64 = 3.0;

/// Draws the label set of one actor: 1..=max labels, classes weighted by the power law.
fn draw_labels<R: Rng>(spec: &SceneSpec, weights: &[f64], rng: &mut R) -> BTreeSet<usize> {
    let cap = spec.max_labels.min(spec.num_classes);
    // Label counts decay geometrically.
    let mut n = 1;
    while n < cap && rng.gen::<f64>() < 0.4 {
        n += 1;
    }
    let mut pool: Vec<usize> = (0..spec.num_classes).collect();
    let mut w: Vec<f64> = weights.to_vec();
    let mut out = BTreeSet::new();
    for _ in 0..n {
        let total: f64 = w.iter().sum();
        let mut r = rng.gen::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if r < wi {
                pick = i;
                break;
            }
            r -= wi;
        }
        out.insert(pool.remove(pick));
        w.remove(pick);
    }
    out
}

/// Renders one clip and its annotations. Pure function of `(spec, index)`.
pub fn render_clip(spec: &SceneSpec, index: usize) -> (RawClip, Vec<BoxAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let clip_id = clip_name(index);
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let mut clip = RawClip::new(f, h, w, 3);
    let weights = spec.class_weights();

    // Background: a dim gradient with a per-clip tint.
    let tint: [f64; 3] = [
        rng.gen_range(20.0..50.0),
        rng.gen_range(20.0..50.0),
        rng.gen_range(20.0..50.0),
    ];
    let mut canvas = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = 10.0 * y as f64 / h as f64;
            canvas[y * w + x] = tint.map(|t| t + g);
        }
    }

    struct Actor {
        rect: (usize, usize, usize, usize),
        slots: Vec<(usize, usize, usize, usize)>,
        labels: BTreeSet<usize>,
        row: usize,
    }
    let mut actors = Vec::new();
    let mut annotations = Vec::new();
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let rect = spec.actor_rect(row, col);
            let color: [f64; 3] = [
                rng.gen_range(70.0..200.0),
                rng.gen_range(70.0..200.0),
                rng.gen_range(70.0..200.0),
            ];
            for y in rect.1..rect.3 {
                for x in rect.0..rect.2 {
                    canvas[y * w + x] = color;
                }
            }
            let labels = draw_labels(spec, &weights, &mut rng);
            annotations.push(BoxAnnotation {
                clip_id: clip_id.clone(),
                bbox: spec.actor_box(row, col),
                class_ids: labels.clone(),
                person_id: (row * spec.cols + col) as i64,
            });
            actors.push(Actor {
                rect,
                slots: spec.slot_rects(rect),
                labels,
                row,
            });
        }
    }

    for fi in 0..f {
        let t = fi / spec.frame_stride;
        let mut frame = canvas.clone();
        for a in &actors {
            for (c, &(sx0, sy0, sx1, sy1)) in a.slots.iter().enumerate() {
                let active = a.labels.contains(&c);
                for y in sy0..sy1 {
                    for x in sx0..sx1 {
                        let off = if active {
                            pattern_value(c, t, x - sx0, y - sy0) * spec.amplitude
                        } else {
                            0.0
                        };
                        frame[y * w + x] = [PATTERN_BASE + off; 3];
                    }
                }
            }
            // Desk band over the lower body of back-row actors.
            if a.row + 1 < spec.rows || spec.rows == 1 {
                let (x0, y0, x1, y1) = a.rect;
                let occluded =
                    ((y1 - y0) as f64 * spec.occlusion * (1.0 - a.row as f64 / spec.rows as f64))
                        .round() as usize;
                for y in y1 - occluded..y1 {
                    for x in x0.saturating_sub(1)..(x1 + 1).min(w) {
                        frame[y * w + x] = [95.0, 70.0, 45.0];
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let o = clip.offset(fi, y, x);
                for (px, &v) in clip.pixels[o..o + 3].iter_mut().zip(&frame[y * w + x]) {
                    let n = if spec.noise > 0.0 {
                        rng.gen_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    *px = (v + n).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    (clip, annotations)
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Writes `n_clips` clips, `gt.csv` and `manifest.txt` under `out_dir`.
/// Splits are assigned 4:1 with the scene seed.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_clips: usize,
    out_dir: &Path,
) -> Result<GeneratedDataset> {
    spec.validate()?;
    if n_clips == 0 {
        return Err(input_err!("generate_dataset: n_clips must be positive"));
    }
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let rendered: Vec<Result<Vec<BoxAnnotation>>> = crate::par::map_range(n_clips, |i| {
        let (clip, anns) = render_clip(spec, i);
        clip.save(&clip_dir.join(format!("{}.wvf", clip_name(i))))?;
        Ok(anns)
    });
    let mut entries = Vec::with_capacity(n_clips);
    let mut records = Vec::with_capacity(n_clips);
    for (i, r) in rendered.into_iter().enumerate() {
        let anns = r?;
        let entry = ManifestEntry {
            clip_id: clip_name(i),
            path: format!("clips/{}.wvf", clip_name(i)),
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
            split: Split::Unassigned,
        };
        entries.push(entry.clone());
        records.push(ClipRecord {
            entry,
            duration: CLIP_SECONDS,
            keyframe: spec.frames / 2,
            annotations: anns,
        });
    }
    if n_clips >= 5 {
        let (train, _) = split_train_test(&entries, 4.0, spec.seed)?;
        let train: BTreeSet<&str> = train.iter().map(|e| e.clip_id.as_str()).collect();
        for (e, r) in entries.iter_mut().zip(records.iter_mut()) {
            e.split = if train.contains(e.clip_id.as_str()) {
                Split::Train
            } else {
                Split::Test
            };
            r.entry.split = e.split;
        }
    }
    let mut comments: Vec<String> = spec
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    comments.push(format!("pattern.base={PATTERN_BASE}"));
    for (c, name) in PATTERN_NAMES.iter().enumerate().take(spec.num_classes) {
        comments.push(format!("pattern.{c}={name}"));
    }
    comments.push("columns=clip_id,path,frames,height,width,split".into());
    let manifest = Manifest { entries, comments };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    let gt_path = out_dir.join(GT_FILE);
    let rows: Vec<GtRow> = records
        .iter()
        .flat_map(|r| flatten_annotations(&r.annotations))
        .collect();
    write_gt_csv(&gt_path, &rows)?;
    Ok(GeneratedDataset {
        manifest_path,
        gt_path,
        manifest,
        records,
    })
}

/// Disjoint, exhaustive clip-level split with about `ratio` train clips per test clip.
pub fn split_train_test(
    entries: &[ManifestEntry],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let n = entries.len();
    if n < 5 {
        return Err(input_err!("split needs at least 5 clips, got {n}"));
    }
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(input_err!("split ratio must be positive"));
    }
    let n_test = ((n as f64 / (ratio + 1.0)).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let test: BTreeSet<usize> = order[..n_test].iter().copied().collect();
    let mut tr = Vec::new();
    let mut te = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let mut e = e.clone();
        if test.contains(&i) {
            e.split = Split::Test;
            te.push(e);
        } else {
            e.split = Split::Train;
            tr.push(e);
        }
    }
    Ok((tr, te))
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Histogram bin `[lo, hi)` with its count.
#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    /// `(class_id, instances)`, most frequent first.
    pub class_counts: Vec<(usize, usize)>,
    /// Box area over frame area.
    pub area_hist: Vec<Bin>,
    /// Box height over width, in pixels.
    pub aspect_hist: Vec<Bin>,
    pub boxes: usize,
}

pub const AREA_EDGES: [f64; 10] = [0.0, 0.005, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0];
pub const ASPECT_EDGES: [f64; 10] = [0.0, 0.5, 0.75, 0.9, 1.1, 1.5, 2.0, 2.5, 3.0, f64::INFINITY];

fn histogram(values: &[f64], edges: &[f64]) -> Vec<Bin> {
    let mut bins: Vec<Bin> = edges
        .windows(2)
        .map(|e| Bin {
            lo: e[0],
            hi: e[1],
            count: 0,
        })
        .collect();
    let last = bins.len() - 1;
    for &v in values {
        let i = bins
            .iter()
            .position(|b| v >= b.lo && v < b.hi)
            .unwrap_or(last);
        bins[i].count += 1;
    }
    bins
}

pub fn area_ratio(b: &crate::BoxRel) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Height over width in pixels for a frame of `width x height`.
pub fn aspect_ratio(b: &crate::BoxRel, width: usize, height: usize) -> f64 {
    ((b[3] - b[1]) * height as f64) / ((b[2] - b[0]) * width as f64)
}

/// Class counts over `(person, label)` rows; box histograms over distinct persons.
/// `resolution` maps clip ids to `(width, height)`; unknown clips count as square.
pub fn dataset_stats(
    gt: &[GtRow],
    k: usize,
    resolution: &HashMap<String, (usize, usize)>,
) -> Result<DatasetStats> {
    let mut counts = vec![0usize; k];
    for r in gt {
        if r.class_id >= k {
            return Err(input_err!("class {} outside [0, {k})", r.class_id));
        }
        counts[r.class_id] += 1;
    }
    let mut class_counts: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    class_counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let boxes = group_annotations(gt);
    let areas: Vec<f64> = boxes.iter().map(|a| area_ratio(&a.bbox)).collect();
    let aspects: Vec<f64> = boxes
        .iter()
        .map(|a| {
            let (w, h) = resolution.get(&a.clip_id).copied().unwrap_or((1, 1));
            aspect_ratio(&a.bbox, w, h)
        })
        .collect();
    Ok(DatasetStats {
        class_counts,
        area_hist: histogram(&areas, &AREA_EDGES),
        aspect_hist: histogram(&aspects, &ASPECT_EDGES),
        boxes: boxes.len(),
    })
}

impl DatasetStats {
    /// Writes `class_counts.csv`, `area_hist.csv` and `aspect_hist.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = String::from("class_id,count\n");
        for (c, n) in &self.class_counts {
            s.push_str(&format!("{c},{n}\n"));
        }
        let p = dir.join("class_counts.csv");
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        for (name, bins) in [
            ("area_hist.csv", &self.area_hist),
            ("aspect_hist.csv", &self.aspect_hist),
        ] {
            let mut s = String::from("lo,hi,count\n");
            for b in bins {
                s.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
            }
            let p = dir.join(name);
            fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Resolution table from a manifest.
pub fn resolutions(m: &Manifest) -> HashMap<String, (usize, usize)> {
    m.entries
        .iter()
        .map(|e| (e.clip_id.clone(), (e.width, e.height)))
        .collect()
}

/// Annotations grouped per clip id.
pub fn annotations_by_clip(gt: &[GtRow]) -> BTreeMap<String, Vec<BoxAnnotation>> {
    let mut out: BTreeMap<String, Vec<BoxAnnotation>> = BTreeMap::new();
    for a in group_annotations(gt) {
        out.entry(a.clip_id.clone()).or_default().push(a);
    }
    out
}
