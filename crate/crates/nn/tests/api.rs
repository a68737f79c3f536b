use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remission_nn::optim::{clip_grad_norm, grad_norm, Adam, Optimizer};
use remission_nn::{Graph, ParamStore, Tensor};

#[test]
fn relu_keeps_nan_visible() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::from_vec([4], vec![-1.0, f32::NAN, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    let out = g.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!(out[1].is_nan());
    assert_eq!((out[2], out[3]), (0.0, 2.0));
}

#[test]
fn zero_logits_cost_ln_two() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros([5, 2]));
    let loss = g.cross_entropy(x, &[0, 1, 1, 0, 1]);
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let p = g.softmax_last(x);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn adam_recovers_a_planted_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xs: Vec<f64> = (0..64 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.chunks(3).flat_map(|r| (0..2).map(|j| (0..3).map(|k| r[k] * truth[k * 2 + j]).sum::<f64>()).collect::<Vec<_>>()).collect();
    let (x, y) = (Tensor::from_vec([64, 3], xs).unwrap(), Tensor::from_vec([64, 2], ys).unwrap());
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::zeros([3, 2]));
    let mut opt = Adam::new(0.05);
    let mut last = f64::INFINITY;
    for _ in 0..600 {
        let mut g = Graph::new(&store);
        let (xv, wv) = (g.input(x.clone()), g.param(w));
        let pred = g.linear(xv, wv, None);
        let loss = g.mse(pred, &y);
        last = g.value(loss).item();
        let grads = g.backward(loss).param_grads(&store);
        opt.step(&mut store, &grads);
    }
    assert!(last < 1e-8, "loss {last}");
    let fitted = store.get(w).data();
    assert!(fitted.iter().zip(&truth).all(|(a, b)| (a - b).abs() < 1e-3), "{fitted:?} vs {truth:?}");
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut grads = vec![Tensor::from_vec([2], vec![3.0f64, 4.0]).unwrap(), Tensor::from_vec([1], vec![12.0]).unwrap()];
    assert_eq!(clip_grad_norm(&mut grads, 1.0), 13.0);
    assert!((grad_norm(&grads) - 1.0).abs() < 1e-12);
    assert!((grads[1].data()[0] - 12.0 / 13.0).abs() < 1e-12);
    let before = grads.clone();
    clip_grad_norm(&mut grads, 5.0);
    assert_eq!(grads, before);
}
