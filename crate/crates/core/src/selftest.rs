//! Quick end-to-end invariant checks, run by `wvt selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{count_params_flops, Model, ModelConfig};
use crate::error::Result;
use crate::eval::{frame_map, DetRow, GtRow};
use crate::head::multilabel_loss;
use crate::lra::{RelationAggregator, DW_KERNEL};
use crate::nn::Conv3d;
use crate::tensor::{grad_check, Tape, Tensor};
use crate::wea::{argmax, idx_to_xy, score_windows, select_window, xy_to_idx};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

/// Uniform `[-1, 1)` clip `[1, 3, T, H, W]` matching `cfg`.
pub fn random_clip(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 3, cfg.frames, cfg.height, cfg.width];
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

pub fn run_all() -> Result<Vec<Check>> {
    let mut out = Vec::new();

    let k = 4;
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[3, k]));
    let l = multilabel_loss(&mut tape, z, &Tensor::zeros(&[3, k]))?;
    let v = tape.value(l).data()[0];
    let want = k as f64 * std::f64::consts::LN_2;
    out.push(check(
        "loss_at_zero_logits",
        (v - want).abs() < 1e-9,
        format!("{v} vs {want}"),
    ));

    let cfg = ModelConfig::tiny();
    let mut m = Model::<f64>::new(&cfg, 7)?;
    m.zero_residuals();
    let mut tape = Tape::new();
    let p = m.store.attach_frozen(&mut tape);
    let clip = tape.constant(random_clip(&cfg, 1));
    let f = m.features(&mut tape, &p, clip)?;
    let d = tape.value(f.features).max_abs_diff(tape.value(f.tokens));
    out.push(check(
        "zero_residual_identity",
        d < 1e-6,
        format!("max |diff| {d:e}"),
    ));

    let run = || -> Result<Vec<f32>> {
        let m = Model::<f32>::new(&cfg, 3)?;
        let mut tape = Tape::new();
        let p = m.store.attach_frozen(&mut tape);
        let clip = tape.constant(random_clip(&cfg, 2).cast());
        let logits = m.detect(&mut tape, &p, clip, &[(0, [0.1, 0.2, 0.6, 0.9])])?;
        Ok(tape.value(logits).data().to_vec())
    };
    let (a, b) = (run()?, run()?);
    out.push(check("deterministic_forward", a == b, format!("{a:?}")));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = true;
    for _ in 0..100 {
        let g = rng.gen_range(3..9);
        let w = rng.gen_range(1..=g);
        let map = Tensor::<f64>::new(
            vec![1, 1, g, g],
            (0..g * g).map(|_| rng.gen_range(0..5) as f64).collect(),
        )?;
        let sel = select_window(&score_windows(&map, &Tensor::ones(&[1, 1, w, w]))?, w)?;
        let u = g - w + 1;
        let mut best = (f64::NEG_INFINITY, 0);
        for y in 0..u {
            for x in 0..u {
                let s: f64 = (0..w)
                    .flat_map(|i| (0..w).map(move |j| (i, j)))
                    .map(|(i, j)| map.data()[(y + i) * g + x + j])
                    .sum();
                if s > best.0 {
                    best = (s, xy_to_idx(x, y, u));
                }
            }
        }
        agree &= sel.idx[0] == best.1;
    }
    out.push(check(
        "window_selection_brute_force",
        agree,
        "100 random maps",
    ));

    let rt = (1..=16).all(|u| {
        (0..u * u).all(|i| {
            let (x, y) = idx_to_xy(i, u);
            xy_to_idx(x, y, u) == i
        })
    });
    out.push(check("index_roundtrip", rt, "u in 1..=16"));
    out.push(check("argmax_first_max", argmax(&[1.0, 3.0, 3.0]) == 1, ""));

    let full = ModelConfig::full();
    let grid_ok = full.token_grid()? == [8, 14, 14] && full.candidate_positions()? == (8, 8);
    out.push(check("full_shape_contract", grid_ok, "8x14x14 grid, u=8"));

    let counts_ok = [8usize, 320, 768].iter().all(|&c| {
        Conv3d::param_count(c, c, DW_KERNEL, c) == 27 * c + c
            && RelationAggregator::param_count(c) - 2 * (c * c + c) == 125 * c + c
    });
    out.push(check(
        "closed_form_param_counts",
        counts_ok,
        "C in {8, 320, 768}",
    ));
    let pf = count_params_flops(&full)?;
    out.push(check(
        "full_model_counts",
        pf.params > 0 && pf.flops > 0,
        format!("{} params, {} FLOPs", pf.params, pf.flops),
    ));

    let gts: Vec<GtRow> = (0..3)
        .map(|i| GtRow {
            clip_id: format!("c{i}"),
            bbox: [0.1, 0.1, 0.4, 0.5],
            class_id: i % 2,
            person_id: 0,
        })
        .collect();
    let dets: Vec<DetRow> = gts
        .iter()
        .map(|g| DetRow {
            clip_id: g.clip_id.clone(),
            bbox: g.bbox,
            class_id: g.class_id,
            score: 0.9,
        })
        .collect();
    let r = frame_map(&dets, &gts, 2)?;
    out.push(check(
        "perfect_predictions_map",
        r.map == 1.0,
        format!("{}", r.map),
    ));

    let err = grad_check(
        |tape, x| {
            let g = tape.gelu(x);
            let s = tape.softmax(g, 1)?;
            let m = tape.mul(s, x)?;
            Ok(tape.sum(m))
        },
        &Tensor::from_f64(&[2, 3], &[0.3, -0.7, 1.1, 0.2, -1.5, 0.9])?,
        1e-3,
    )?;
    out.push(check(
        "gradcheck_smoke",
        err <= 1e-4,
        format!("max rel err {err:e}"),
    ));
    Ok(out)
}
