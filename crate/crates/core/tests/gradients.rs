use blapose::model::{loss_and_gradients, LengthModelParams, ModelDims};
use blapose::rng;
use nalgebra::DMatrix;
use rand::Rng;

fn tiny(bidirectional: bool, seed: u64) -> (LengthModelParams, Vec<DMatrix<f64>>, DMatrix<f64>) {
    let dims = ModelDims {
        joints: 3,
        c: 3,
        c_prime: 2,
        bidirectional,
    };
    let mut r = rng::seeded(seed);
    let mut params = LengthModelParams::init(dims, &mut r).unwrap();
    // Larger weights exercise the gate nonlinearities.
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 2.0);
    }
    let batch = 2;
    let frames = (0..4)
        .map(|_| DMatrix::from_fn(6, batch, |_, _| r.random_range(-1.0..1.0)))
        .collect();
    let targets = DMatrix::from_fn(2, batch, |_, _| r.random_range(0.5..2.0));
    (params, frames, targets)
}

fn check(bidirectional: bool, seed: u64) {
    let (params, frames, targets) = tiny(bidirectional, seed);
    let (_, grads) = loss_and_gradients(&params, &frames, &targets).unwrap();
    let h = 1e-5;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.as_slice().to_vec()))
        .collect();
    for (k, (name, values)) in analytic.iter().enumerate() {
        for (i, &g) in values.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[k][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k][i] -= h;
            let lp = loss_and_gradients(&plus, &frames, &targets).unwrap().0;
            let lm = loss_and_gradients(&minus, &frames, &targets).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {g} vs numeric {fd}");
        }
    }
}

#[test]
fn bidirectional_gradients_match_central_differences() {
    for seed in 0..5 {
        check(true, seed);
    }
}

#[test]
fn unidirectional_gradients_match_central_differences() {
    for seed in 0..5 {
        check(false, seed);
    }
}
