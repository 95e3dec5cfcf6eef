//! Finite-difference gradient checks over 20 seeds.

mod common;

use std::cell::RefCell;

use common::{block_error, end_to_end_error, op_errors, tiny_loss, SEEDS, TOL};
use wvt_core::backbone::{Model, ModelConfig};
use wvt_core::{Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..SEEDS {
        for (name, err) in op_errors(seed) {
            assert!(err <= TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn tiny_block_matches_finite_differences() {
    for seed in 0..SEEDS {
        let err = block_error(seed);
        assert!(err <= TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn tiny_end_to_end_loss_matches_finite_differences() {
    for seed in 0..SEEDS {
        let (err, _) = end_to_end_error(seed);
        assert!(err <= TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn recorded_loss_equals_model_loss() {
    let cfg = ModelConfig::tiny();
    let model = Model::<f64>::new(&cfg, 5).unwrap();
    let clip = wvt_core::selftest::random_clip(&cfg, 9);
    let rois = [(0, [0.1, 0.1, 0.6, 0.8])];
    let labels = Tensor::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut t = Tape::new();
    let p = model.store.attach_frozen(&mut t);
    let c = t.constant(clip);
    let a = model.loss(&mut t, &p, c, &rois, &labels).unwrap();
    let pattern = RefCell::new(Vec::new());
    let b = tiny_loss(&model, &mut t, &p, c, &rois, &labels, &pattern).unwrap();
    assert_eq!(t.value(a).data(), t.value(b).data());
    assert_eq!(pattern.borrow()[0].len(), 2 * 4 + 16);
}
