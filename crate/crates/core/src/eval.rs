//! Frame-level detection metrics.
//!
//! Ground truth CSV (headerless): `clip_id,x1,y1,x2,y2,class_id,person_id`,
//! one row per (person, label). Detection CSV: `clip_id,x1,y1,x2,y2,class_id,score`,
//! one row per (box, class). Coordinates are relative to the frame.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{input_err, Error, Result};
use crate::head::{valid_box, Detection};
use crate::BoxRel;

pub const IOU_THRESHOLD: f64 = 0.5;

/// A person on a keyframe with its action labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxAnnotation {
    pub clip_id: String,
    pub bbox: BoxRel,
    pub class_ids: BTreeSet<usize>,
    pub person_id: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtRow {
    pub clip_id: String,
    pub bbox: BoxRel,
    pub class_id: usize,
    pub person_id: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetRow {
    pub clip_id: String,
    pub bbox: BoxRel,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub counts: Vec<usize>,
}

pub fn iou(a: &BoxRel, b: &BoxRel) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &BoxRel| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// All-points AP of one class. Detections are ranked by descending score
/// (stable); each takes the highest-IoU still-unmatched ground truth of its
/// clip with IoU >= `iou_thresh`, otherwise it is a false positive.
/// Returns `None` when there is no ground truth.
pub fn average_precision(dets: &[DetRow], gts: &[GtRow], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut by_clip: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_clip.entry(g.clip_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_clip.get(d.clip_id.as_str()) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let o = iou(&d.bbox, &gts[gi].bbox);
                if o >= iou_thresh && best.map(|(_, bo)| o > bo).unwrap_or(true) {
                    best = Some((gi, o));
                }
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
        }
        tp_flags.push(best.is_some());
    }
    Some(ap_from_ranked(&tp_flags, gts.len()))
}

/// Area under the precision envelope for a ranked TP/FP list.
pub fn ap_from_ranked(tp_flags: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / npos as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

/// Per-class AP pooled over all keyframes; mAP over classes that have ground truth.
pub fn frame_map(dets: &[DetRow], gts: &[GtRow], k: usize) -> Result<ApResult> {
    for d in dets {
        if d.class_id >= k {
            return Err(input_err!(
                "detection class {} outside [0, {k})",
                d.class_id
            ));
        }
    }
    for g in gts {
        if g.class_id >= k {
            return Err(input_err!(
                "ground-truth class {} outside [0, {k})",
                g.class_id
            ));
        }
    }
    let per_class: Vec<(Option<f64>, usize)> = crate::par::map_range(k, |c| {
        let cd: Vec<DetRow> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let cg: Vec<GtRow> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        (average_precision(&cd, &cg, IOU_THRESHOLD), cg.len())
    });
    let present: Vec<f64> = per_class.iter().filter_map(|(ap, _)| *ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(ApResult {
        per_class_ap: per_class.iter().map(|(ap, _)| *ap).collect(),
        map,
        counts: per_class.iter().map(|(_, n)| *n).collect(),
    })
}

pub fn frame_map_files(det_path: &Path, gt_path: &Path, k: usize) -> Result<ApResult> {
    let dets = read_det_csv(det_path)?;
    let gts = read_gt_csv(gt_path)?;
    frame_map(&dets, &gts, k)
}

/// Groups per-label rows into one annotation per (clip, person), in first-seen order.
pub fn group_annotations(rows: &[GtRow]) -> Vec<BoxAnnotation> {
    let mut index: BTreeMap<(String, i64), usize> = BTreeMap::new();
    let mut out: Vec<BoxAnnotation> = Vec::new();
    for r in rows {
        let key = (r.clip_id.clone(), r.person_id);
        match index.get(&key) {
            Some(&i) => {
                out[i].class_ids.insert(r.class_id);
            }
            None => {
                index.insert(key, out.len());
                out.push(BoxAnnotation {
                    clip_id: r.clip_id.clone(),
                    bbox: r.bbox,
                    class_ids: BTreeSet::from([r.class_id]),
                    person_id: r.person_id,
                });
            }
        }
    }
    out
}

pub fn flatten_annotations(anns: &[BoxAnnotation]) -> Vec<GtRow> {
    anns.iter()
        .flat_map(|a| {
            a.class_ids.iter().map(move |&c| GtRow {
                clip_id: a.clip_id.clone(),
                bbox: a.bbox,
                class_id: c,
                person_id: a.person_id,
            })
        })
        .collect()
}

/// One row per (box, class).
pub fn detections_to_rows(dets: &[Detection]) -> Vec<DetRow> {
    dets.iter()
        .flat_map(|d| {
            d.scores.iter().enumerate().map(move |(c, &s)| DetRow {
                clip_id: d.clip_id.clone(),
                bbox: d.bbox,
                class_id: c,
                score: s,
            })
        })
        .collect()
}

fn split_fields<'a>(line: &'a str, n: usize, path: &Path, lineno: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != n {
        return Err(Error::parse(
            path.display(),
            lineno,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

fn parse_field<F: std::str::FromStr>(s: &str, what: &str, path: &Path, lineno: usize) -> Result<F> {
    s.parse()
        .map_err(|_| Error::parse(path.display(), lineno, format!("bad {what} {s:?}")))
}

fn parse_box(f: &[&str], path: &Path, lineno: usize) -> Result<BoxRel> {
    let mut b = [0.0; 4];
    for (i, v) in f.iter().enumerate() {
        b[i] = parse_field(v, "coordinate", path, lineno)?;
    }
    if !valid_box(&b) {
        return Err(Error::parse(
            path.display(),
            lineno,
            format!("invalid relative box {b:?}"),
        ));
    }
    Ok(b)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn parse_gt_line(line: &str, path: &Path, lineno: usize) -> Result<GtRow> {
    let f = split_fields(line, 7, path, lineno)?;
    Ok(GtRow {
        clip_id: f[0].to_string(),
        bbox: parse_box(&f[1..5], path, lineno)?,
        class_id: parse_field(f[5], "class id", path, lineno)?,
        person_id: parse_field(f[6], "person id", path, lineno)?,
    })
}

pub fn parse_det_line(line: &str, path: &Path, lineno: usize) -> Result<DetRow> {
    let f = split_fields(line, 7, path, lineno)?;
    let score: f64 = parse_field(f[6], "score", path, lineno)?;
    if !score.is_finite() {
        return Err(Error::parse(path.display(), lineno, "non-finite score"));
    }
    Ok(DetRow {
        clip_id: f[0].to_string(),
        bbox: parse_box(&f[1..5], path, lineno)?,
        class_id: parse_field(f[5], "class id", path, lineno)?,
        score,
    })
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<GtRow>> {
    read_lines(path)?
        .iter()
        .map(|(n, l)| parse_gt_line(l, path, *n))
        .collect()
}

pub fn read_det_csv(path: &Path) -> Result<Vec<DetRow>> {
    read_lines(path)?
        .iter()
        .map(|(n, l)| parse_det_line(l, path, *n))
        .collect()
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn gt_line(r: &GtRow) -> String {
    let [x1, y1, x2, y2] = r.bbox;
    format!(
        "{},{x1:.9},{y1:.9},{x2:.9},{y2:.9},{},{}",
        r.clip_id, r.class_id, r.person_id
    )
}

pub fn det_line(r: &DetRow) -> String {
    let [x1, y1, x2, y2] = r.bbox;
    format!(
        "{},{x1:.9},{y1:.9},{x2:.9},{y2:.9},{},{:.9e}",
        r.clip_id, r.class_id, r.score
    )
}

pub fn write_gt_csv(path: &Path, rows: &[GtRow]) -> Result<()> {
    write_lines(path, rows.iter().map(gt_line))
}

pub fn write_det_csv(path: &Path, rows: &[DetRow]) -> Result<()> {
    write_lines(path, rows.iter().map(det_line))
}
