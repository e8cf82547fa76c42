use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{primitive_suite, random_tensor};
use super::*;
use crate::geom::IGNORE_LABEL;

#[test]
fn every_primitive_passes_finite_differences() {
    for r in primitive_suite(17).unwrap() {
        assert!(r.passes(1e-4), "{r:?}");
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.input(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    let l = t.dot_const(y, vec![1.0; 3]).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn center_tap_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(vec![1, 2, 4, 5], &mut rng);
    let mut w = vec![0.0; 2 * 2 * 9];
    w[4] = 1.0; // out 0 <- in 0
    w[3 * 9 + 4] = 1.0; // out 1 <- in 1
    let mut t = Tape::<f64>::new();
    let xv = t.input(&x);
    let wv = t.constant(vec![2, 2, 3, 3], w).unwrap();
    let bv = t.constant(vec![2], vec![0.0; 2]).unwrap();
    let y = t.conv2d(xv, wv, bv).unwrap();
    assert_eq!(t.value(y), x.data());
}

#[test]
fn reduce_max_ties_route_to_first_row() {
    let mut t = Tape::<f64>::new();
    let x = t.input(&Tensor::new(vec![3, 1], vec![2.0, 2.0, 1.0]).unwrap());
    let y = t.reduce_groups(x, 3, GroupReduce::Max).unwrap();
    let l = t.dot_const(y, vec![1.0]).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_is_weighted_negative_log_likelihood() {
    let logits = vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 0.2, 0.2, 0.2];
    let labels = [1u16, 0, IGNORE_LABEL];
    let weights = [2.0, 0.5, 1.0];
    let mut t = Tape::<f64>::new();
    let x = t.input(&Tensor::new(vec![3, 3], logits.clone()).unwrap());
    let l = t.softmax_cross_entropy(x, &labels, Some(&weights)).unwrap();
    let nll = |row: &[f64], c: usize| {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[c].exp() / z).ln()
    };
    let want = (0.5 * nll(&logits[0..3], 1) + 2.0 * nll(&logits[3..6], 0)) / 2.5;
    assert!((t.value(l)[0] - want).abs() < 1e-12);
    assert!(t.value(l)[0] >= 0.0);
    t.backward(l).unwrap();
    assert_eq!(&t.grad(x).unwrap()[6..9], &[0.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_rejects_out_of_range_labels() {
    let mut t = Tape::<f64>::new();
    let x = t.input(&Tensor::zeros(vec![2, 3]));
    assert!(matches!(
        t.softmax_cross_entropy(x, &[0, 3], None),
        Err(crate::Error::Validation(_))
    ));
}

#[test]
fn batchnorm_eval_is_affine_and_single_sample_training_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    store.get_mut(bn.running_mean).value = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
    store.get_mut(bn.running_var).value = Tensor::new(vec![2], vec![4.0, 0.25]).unwrap();
    store.get_mut(bn.gamma).value = Tensor::new(vec![2], vec![2.0, 1.0]).unwrap();
    let mut t = Tape::new();
    let x = t.input(&Tensor::new(vec![2, 2], vec![3.0, 0.0, 1.0, -1.0]).unwrap());
    let y = bn.forward(&mut t, &store, x, Mode::Eval).unwrap();
    let expect = [
        2.0 * 2.0 / (4.0f64 + 1e-5).sqrt(),
        1.0 / (0.25f64 + 1e-5).sqrt(),
        0.0,
        0.0,
    ];
    for (a, b) in t.value(y).iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut t = Tape::new();
    let x = t.input(&Tensor::zeros(vec![1, 2]));
    assert!(matches!(
        bn.forward(&mut t, &store, x, Mode::Train),
        Err(crate::Error::Validation(_))
    ));
}

#[test]
fn training_batchnorm_queues_running_stat_updates() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 1);
    let mut t = Tape::new();
    let x = t.input(&Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    bn.forward(&mut t, &store, x, Mode::Train).unwrap();
    apply_stat_updates(&t, &mut store);
    assert!((store.value(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
    // unbiased variance 5/3
    assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn shape_mismatches_are_reported() {
    let mut t = Tape::<f32>::new();
    let x = t.input(&Tensor::zeros(vec![2, 3]));
    let w = t.input(&Tensor::zeros(vec![4, 2]));
    assert!(matches!(t.linear(x, w, None), Err(crate::Error::Shape(_))));
    let img = t.input(&Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(matches!(t.maxpool2d(img), Err(crate::Error::Shape(_))));
}

#[test]
fn parameter_gradients_accumulate_into_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
    for _ in 0..2 {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = lin.forward(&mut t, &store, x).unwrap();
        let l = t.dot_const(y, vec![1.0, 1.0]).unwrap();
        t.backward(l).unwrap();
        t.accumulate_param_grads(&mut store);
    }
    assert_eq!(store.get(lin.bias).value.grad.as_deref(), Some(&[2.0, 2.0][..]));
    assert_eq!(
        store.get(lin.weight).value.grad.as_deref(),
        Some(&[2.0, 2.0, 4.0, 4.0, 6.0, 6.0][..])
    );
}
