mod common;

use common::*;
use maskprune_core::model::{generate_samples, GRADIENT_FD_STEP};
use maskprune_core::{ModelShape, SampleBatch, ToyTransformer};

#[test]
fn analytic_gradients_match_central_differences() {
    let model = ToyTransformer::init(ModelShape::new(2, 2, 6, 8, 4, 3, 2).unwrap(), 21).unwrap();
    let batch = generate_samples(&model, 5, 21, "data").unwrap();
    let analytic = model.mask_gradients(&batch).unwrap();
    let numeric = model.mask_gradients_fd(&batch, GRADIENT_FD_STEP).unwrap();
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.0.iter().zip(&n.0) {
            assert!(close(*x, *y, 1e-4, 1e-9), "{x} vs {y}");
            checked += 1;
        }
    }
    assert!(checked >= 50);
}

#[test]
fn zero_output_projection_gives_zero_gradient() {
    let mut model = ToyTransformer::init(ModelShape::new(2, 2, 4, 8, 4, 3, 2).unwrap(), 5).unwrap();
    for v in model.layers[1].output[0].as_mut_slice() {
        *v = 0.0;
    }
    let batch = generate_samples(&model, 6, 5, "data").unwrap();
    let stride = 2 + 4;
    for g in model.mask_gradients(&batch).unwrap() {
        assert_eq!(g.0[stride], 0.0);
    }
}

#[test]
fn duplicated_example_duplicates_its_gradient() {
    let model = ToyTransformer::init(ModelShape::new(1, 2, 3, 4, 3, 2, 2).unwrap(), 8).unwrap();
    let batch = generate_samples(&model, 3, 8, "data").unwrap();
    let doubled = batch.select(&[0, 1, 1, 2]);
    let g = model.mask_gradients(&batch).unwrap();
    let d = model.mask_gradients(&doubled).unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!(d[1], g[1]);
    assert_eq!(d[2], g[1]);
    assert_eq!(d[3], g[2]);
}

#[test]
fn nonpositive_step_is_rejected() {
    let model = ToyTransformer::init(ModelShape::new(1, 1, 2, 2, 2, 2, 2).unwrap(), 0).unwrap();
    let batch = generate_samples(&model, 2, 0, "data").unwrap();
    assert!(model.mask_gradients_fd(&batch, 0.0).is_err());
    assert!(model.mask_gradients_fd(&batch, -1e-3).is_err());
    let empty = SampleBatch::new(vec![], vec![]).unwrap();
    assert!(model.mask_gradients(&empty).is_err());
}
