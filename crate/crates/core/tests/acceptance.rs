//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wvt_core::backbone::{Model, ModelConfig};
use wvt_core::config::RunConfig;
use wvt_core::data::{generate_dataset, Split};
use wvt_core::eval::{average_precision, frame_map, DetRow, GtRow};
use wvt_core::head::multilabel_loss;
use wvt_core::lra::{LraBlock, DW_KERNEL, RA_KERNEL};
use wvt_core::nn::{Conv3d, ParamStore};
use wvt_core::tensor::{Tape, Tensor};
use wvt_core::train::{self, Dataset, TrainConfig};
use wvt_core::wea::{idx_to_xy, score_windows, select_window, xy_to_idx, AttentionScheme, Fusion};
use wvt_core::{par, selftest};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn main() {
    par::init_threads(None);
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("WEA oracle", wea_oracle),
        ("shape contract", shape_contract),
        ("evaluator oracle", evaluator_oracle),
        ("toy end-to-end", toy_end_to_end),
        ("ablation structure", ablation_structure),
        ("loss and identity checks", loss_identity_determinism),
        ("parameter-count closed forms", closed_forms),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += !o.passed as usize;
        println!(
            "{} criterion {}: {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let (errors, draws) = common::gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let (worst_name, worst) = errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let e2e = errors
        .iter()
        .find(|(n, _)| n == "tiny_end_to_end")
        .unwrap()
        .1;
    let block = errors.iter().find(|(n, _)| n == "tiny_block").unwrap().1;
    outcome(
        worst <= common::TOL && secs < 120.0,
        format!(
            "{} checks x {} seeds, worst {worst:.2e} ({worst_name}), tiny block {block:.2e}, \
             tiny end-to-end {e2e:.2e} ({draws} clips drawn), {secs:.1}s on {} thread(s)",
            errors.len(),
            common::SEEDS,
            par::threads()
        ),
    )
}

/// First maximum of `v`.
fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn wea_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let frames = rng.gen_range(1..4);
        let g = rng.gen_range(3..17);
        let w = rng.gen_range(1..=g);
        let vals: Vec<f64> = (0..frames * g * g)
            .map(|_| rng.gen_range(0..4) as f64)
            .collect();
        let map = Tensor::new(vec![frames, 1, g, g], vals.clone()).unwrap();
        let scored = score_windows(&map, &Tensor::ones(&[1, 1, w, w])).unwrap();
        let sel = select_window(&scored, w).unwrap();
        let u = g - w + 1;
        for f in 0..frames {
            // Exhaustive search in row-major order; first strict maximum wins.
            let mut best = (f64::NEG_INFINITY, 0, 0);
            let mut n_best = 0;
            for y in 0..u {
                for x in 0..u {
                    let mut s = 0.0;
                    for i in 0..w {
                        for j in 0..w {
                            s += vals[(f * g + y + i) * g + x + j];
                        }
                    }
                    if s > best.0 {
                        best = (s, x, y);
                        n_best = 1;
                    } else if s == best.0 {
                        n_best += 1;
                    }
                }
            }
            ties += (n_best > 1) as usize;
            let c = sel.coords[f];
            if (c.x, c.y) != (best.1, best.2) || sel.idx[f] != best.2 * u + best.1 {
                mismatches += 1;
            }
        }
    }
    let roundtrip = (1..=16usize).all(|u| {
        (0..u * u).all(|i| {
            let (x, y) = idx_to_xy(i, u);
            x < u && y < u && y * u + x == i && xy_to_idx(x, y, u) == i
        })
    });
    let mut argmax_bad = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..24);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, n], v.clone()).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        argmax_bad += (first_max(tape.value(s).data()) != first_max(&v)) as usize;
    }
    outcome(
        mismatches == 0 && roundtrip && argmax_bad == 0,
        format!(
            "{mismatches} selection mismatches on 1000 maps ({ties} frames with tied maxima), \
             idx<->(x,y) round-trip {roundtrip} for u in 1..=16, {argmax_bad}/1000 softmax argmax changes"
        ),
    )
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::full();
    let grid = cfg.token_grid().unwrap();
    let u = cfg.candidate_positions().unwrap();
    let setup = cfg.frames == 16
        && (cfg.height, cfg.width) == (224, 224)
        && cfg.patch == [2, 16, 16]
        && cfg.window == 7;
    outcome(
        setup && grid == [8, 14, 14] && u == (8, 8),
        format!("T=16, 224x224, patch (2,16,16), w=7: token grid {grid:?}, u = {u:?}"),
    )
}

fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

/// Brute-force frame-mAP: repeated max extraction for the ranking, exhaustive
/// search for matches, and AP as the mean over ground truths of the best
/// precision at or beyond the rank where each is recovered.
fn oracle_map(dets: &[DetRow], gts: &[GtRow], k: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..k {
        let cg: Vec<&GtRow> = gts.iter().filter(|g| g.class_id == c).collect();
        if cg.is_empty() {
            continue;
        }
        let mut left: Vec<&DetRow> = dets.iter().filter(|d| d.class_id == c).collect();
        let mut used = vec![false; cg.len()];
        let mut hits = Vec::new();
        while !left.is_empty() {
            let top =
                (0..left.len()).fold(0, |b, i| if left[i].score > left[b].score { i } else { b });
            let d = left.remove(top);
            let mut pick: Option<usize> = None;
            for (gi, g) in cg.iter().enumerate() {
                if used[gi] || g.clip_id != d.clip_id || oracle_iou(&d.bbox, &g.bbox) < 0.5 {
                    continue;
                }
                if pick
                    .is_none_or(|p| oracle_iou(&d.bbox, &g.bbox) > oracle_iou(&d.bbox, &cg[p].bbox))
                {
                    pick = Some(gi);
                }
            }
            if let Some(p) = pick {
                used[p] = true;
            }
            hits.push(pick.is_some());
        }
        let prec: Vec<f64> = (0..hits.len())
            .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
            .collect();
        let ap: f64 = (0..hits.len())
            .filter(|&i| hits[i])
            .map(|i| prec[i..].iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / cg.len() as f64;
        aps.push(ap);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn rand_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (x, y) = (rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7));
    [
        x,
        y,
        x + rng.gen_range(0.1..0.3),
        y + rng.gen_range(0.1..0.3),
    ]
}

fn evaluator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let k = 3;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let clips = rng.gen_range(1..4);
        let mut gts = Vec::new();
        for c in 0..clips {
            for p in 0..rng.gen_range(1..5) {
                let bbox = rand_box(&mut rng);
                for class_id in 0..k {
                    if rng.gen_bool(0.5) {
                        gts.push(GtRow {
                            clip_id: format!("c{c}"),
                            bbox,
                            class_id,
                            person_id: p,
                        });
                    }
                }
            }
        }
        if gts.is_empty() {
            gts.push(GtRow {
                clip_id: "c0".into(),
                bbox: rand_box(&mut rng),
                class_id: 0,
                person_id: 0,
            });
        }
        let mut dets = Vec::new();
        for g in &gts {
            for _ in 0..rng.gen_range(0..3) {
                let j = 0.06;
                let b = g.bbox.map(|v| v + rng.gen_range(-j..j));
                dets.push(DetRow {
                    clip_id: g.clip_id.clone(),
                    bbox: b,
                    class_id: g.class_id,
                    score: rng.gen(),
                });
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            dets.push(DetRow {
                clip_id: format!("c{}", rng.gen_range(0..clips)),
                bbox: rand_box(&mut rng),
                class_id: rng.gen_range(0..k),
                score: rng.gen(),
            });
        }
        let got = frame_map(&dets, &gts, k).unwrap().map;
        worst = worst.max((got - oracle_map(&dets, &gts, k)).abs());
    }

    // Two ground truths; ranked hit, miss, hit: 0.5 * 1 + 0.5 * 2/3.
    let b1 = [0.1, 0.1, 0.3, 0.3];
    let b2 = [0.5, 0.5, 0.8, 0.9];
    let gt = |bbox| GtRow {
        clip_id: "a".into(),
        bbox,
        class_id: 0,
        person_id: 0,
    };
    let det = |bbox, score| DetRow {
        clip_id: "a".into(),
        bbox,
        class_id: 0,
        score,
    };
    let hand = average_precision(
        &[det(b1, 0.9), det([0.6, 0.0, 0.7, 0.1], 0.8), det(b2, 0.7)],
        &[gt(b1), gt(b2)],
        0.5,
    )
    .unwrap();
    let hand_ok = (hand - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12 && (hand - 0.8333).abs() < 5e-5;

    let gts: Vec<GtRow> = (0..6)
        .map(|i| GtRow {
            clip_id: format!("c{}", i / 2),
            bbox: rand_box(&mut rng),
            class_id: i % 3,
            person_id: i as i64,
        })
        .collect();
    let perfect: Vec<DetRow> = gts
        .iter()
        .map(|g| DetRow {
            clip_id: g.clip_id.clone(),
            bbox: g.bbox,
            class_id: g.class_id,
            score: 1.0,
        })
        .collect();
    let perfect_map = frame_map(&perfect, &gts, 3).unwrap().map;
    outcome(
        worst <= 1e-9 && hand_ok && perfect_map == 1.0,
        format!("max |frame_map - brute force| {worst:.1e} over 100 cases, hand case AP {hand:.4}, perfect mAP {perfect_map}"),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn toy_end_to_end() -> Outcome {
    const EPOCHS: usize = 8;
    let rc = RunConfig::from_preset("toy").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scene = rc.scene.clone();
    let ds = generate_dataset(&scene, 200, dir.path()).unwrap();
    let cfg = rc.model.clone();
    let tr = Dataset::load(&ds.manifest_path, &ds.gt_path, Some(Split::Train), &cfg).unwrap();
    let te = Dataset::load(&ds.manifest_path, &ds.gt_path, Some(Split::Test), &cfg).unwrap();
    let setup_ok = scene.rows == 4
        && scene.cols == 4
        && cfg.num_classes == 4
        && cfg.embed_dim == 32
        && cfg.num_blocks == 4
        && cfg.window == 3
        && cfg.lra.is_some()
        && tr.len() == 4 * te.len();
    let vanilla = cfg.vanilla();
    let (mut full_all, mut full_back, mut van_back, mut worst_secs) =
        (vec![], vec![], vec![], 0.0f64);
    for seed in 0..3 {
        let tc = TrainConfig {
            epochs: EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let f = train::run_experiment(&cfg, &tc, &tr, &te, scene.cols, |_, _| {}).unwrap();
        worst_secs = worst_secs.max(t0.elapsed().as_secs_f64());
        let v = train::run_experiment(&vanilla, &tc, &tr, &te, scene.cols, |_, _| {}).unwrap();
        full_all.push(f.eval.all.map);
        full_back.push(f.eval.back_row.map);
        van_back.push(v.eval.back_row.map);
    }
    let min_full = full_all.iter().cloned().fold(f64::INFINITY, f64::min);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        setup_ok && min_full >= 0.70 && worst_secs < 900.0 && mean(&full_back) >= mean(&van_back),
        format!(
            "{} train / {} test clips, {EPOCHS} epochs; full mAP {} (slowest run {worst_secs:.0}s); \
             back-row mAP full {} (mean {:.4}) vs vanilla {} (mean {:.4})",
            tr.len(),
            te.len(),
            fmt(&full_all),
            fmt(&full_back),
            mean(&full_back),
            fmt(&van_back),
            mean(&van_back)
        ),
    )
}

fn ablation_structure() -> Outcome {
    let rc = RunConfig::from_preset("toy").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&rc.scene, 40, &dir.path().join("data")).unwrap();
    let cfg = rc.model.clone();
    let tr = Dataset::load(&ds.manifest_path, &ds.gt_path, Some(Split::Train), &cfg).unwrap();
    let te = Dataset::load(&ds.manifest_path, &ds.gt_path, Some(Split::Test), &cfg).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let rows = train::run_ablation(&cfg, &tc, &tr, &te, rc.scene.cols, |_| {}).unwrap();
    let path = dir.path().join("ablation.csv");
    std::fs::write(&path, train::ablation_csv(&rows)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("scheme,fusion,map,back_row_map,seconds");
    let mut seen = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let map: f64 = f[2].parse().unwrap();
        if map.is_finite() && (0.0..=1.0).contains(&map) {
            seen.insert((f[0].to_string(), f[1].to_string()), map);
        }
    }
    let all_pairs = AttentionScheme::ALL.iter().all(|s| {
        Fusion::ALL
            .iter()
            .all(|f| seen.contains_key(&(s.to_string(), f.to_string())))
    });
    let defaults = [ModelConfig::full(), ModelConfig::toy(), ModelConfig::tiny()]
        .iter()
        .all(|c| c.scheme == AttentionScheme::Joint && c.fusion == Fusion::Sum)
        && AttentionScheme::default() == AttentionScheme::Joint
        && Fusion::default() == Fusion::Sum;
    outcome(
        header_ok && all_pairs && seen.len() == 8 && defaults,
        format!(
            "{} of 8 scheme x fusion runs wrote metrics rows; joint/sum default {defaults}",
            seen.len()
        ),
    )
}

fn loss_identity_determinism() -> Outcome {
    let mut loss_err = 0.0f64;
    for k in [1usize, 4, 10, 80] {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[5, k]));
        let mut y = Tensor::zeros(&[5, k]);
        y.data_mut()[0] = 1.0;
        let l = multilabel_loss(&mut tape, z, &y).unwrap();
        loss_err =
            loss_err.max((tape.value(l).data()[0] - k as f64 * std::f64::consts::LN_2).abs());
    }

    let mut identity = 0.0f64;
    for cfg in [
        ModelConfig::tiny(),
        ModelConfig::toy(),
        ModelConfig::gradcheck(),
    ] {
        let mut m = Model::<f64>::new(&cfg, 11).unwrap();
        m.zero_residuals();
        let mut tape = Tape::new();
        let p = m.store.attach_frozen(&mut tape);
        let clip = tape.constant(selftest::random_clip(&cfg, 12));
        let f = m.features(&mut tape, &p, clip).unwrap();
        identity = identity.max(tape.value(f.features).max_abs_diff(tape.value(f.tokens)));
    }

    let rc = RunConfig::from_preset("tiny").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&rc.scene, 20, dir.path()).unwrap();
    let tr = Dataset::load(
        &ds.manifest_path,
        &ds.gt_path,
        Some(Split::Train),
        &rc.model,
    )
    .unwrap();
    let te = Dataset::load(&ds.manifest_path, &ds.gt_path, Some(Split::Test), &rc.model).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let e = train::run_experiment(&rc.model, &tc, &tr, &te, rc.scene.cols, |_, _| {}).unwrap();
        let params: Vec<Vec<u32>> = e
            .model
            .store
            .tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let scores: Vec<u64> = e
            .detections
            .iter()
            .flat_map(|d| d.scores.iter().map(|v| v.to_bits()))
            .collect();
        (params, scores, e.report.epoch_loss)
    };
    let a = run();
    let b = run();
    let c = par::with_single_thread(run);
    let deterministic = a == b && a == c;
    outcome(
        loss_err < 1e-9 && identity < 1e-6 && deterministic,
        format!(
            "max |loss - K ln2| {loss_err:.1e} for K in {{1,4,10,80}}, zero-residual max |diff| {identity:.1e}, \
             reruns bit-identical {deterministic} (incl. single-thread)"
        ),
    )
}

fn closed_forms() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for c in [8usize, 320, 768] {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        LraBlock::new(&mut store, "b", c, 4, 1e-6, &mut rng);
        let count = |part: &str| -> usize {
            store
                .names()
                .iter()
                .zip(store.tensors())
                .filter(|(n, _)| n.starts_with(part))
                .map(|(_, t)| t.len())
                .sum()
        };
        let (dw, ra5) = (count("b.dwconv."), count("b.ra.conv5."));
        let formula = Conv3d::param_count(c, c, DW_KERNEL, c) == 27 * c + c
            && Conv3d::param_count(c, c, RA_KERNEL, c) == 125 * c + c;
        ok &= dw == 27 * c + c && ra5 == 125 * c + c && formula;
        details.push(format!("C={c}: DWConv {dw}, RA {ra5}"));
    }
    outcome(ok, details.join("; "))
}
