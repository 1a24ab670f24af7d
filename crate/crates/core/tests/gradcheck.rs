//! Analytic gradients of every tape primitive against central differences.

use clp::autograd::{Tape, Var};
use clp::{ClpError, Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(f(inputs) * weights)` on a fresh tape and returns its value.
type Graph = dyn Fn(&mut Tape<'_>, &[Var]) -> Var;

fn scalarize(tape: &mut Tape<'_>, out: Var, weights: &Tensor) -> Var {
    if tape.value(out).numel() == 1 {
        return out;
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn eval(inputs: &[Tensor], weights: &Tensor, graph: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, false)).collect();
    let out = graph(&mut tape, &vars);
    let loss = scalarize(&mut tape, out, weights);
    tape.value(loss).item() as f64
}

/// Largest norm-wise relative error over all inputs.
fn check(inputs: Vec<Tensor>, weight_shape_of_output: bool, rng: &mut ChaCha8Rng, graph: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = graph(&mut tape, &vars);
    let weights = if weight_shape_of_output {
        random(rng, tape.value(out).shape(), 1.0)
    } else {
        Tensor::scalar(1.0)
    };
    let loss = scalarize(&mut tape, out, &weights);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).unwrap();
        let mut diff2 = 0.0;
        let mut norm2: f64 = 0.0;
        let mut fd_norm2: f64 = 0.0;
        for j in 0..input.numel() {
            let mut bumped = inputs.clone();
            bumped[idx].data_mut()[j] += H as Real;
            let up = eval(&bumped, &weights, graph);
            bumped[idx].data_mut()[j] -= (2.0 * H) as Real;
            let down = eval(&bumped, &weights, graph);
            let fd = (up - down) / (2.0 * H);
            let a = analytic.data()[j] as f64;
            diff2 += (a - fd).powi(2);
            norm2 += a * a;
            fd_norm2 += fd * fd;
        }
        let scale = norm2.sqrt().max(fd_norm2.sqrt()).max(1e-8);
        worst = worst.max(diff2.sqrt() / scale);
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 5], 1.0)];
        let err = check(inputs, true, &mut rng, &|t, v| t.matmul(v[0], v[1]).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[3, 6], 2.0),
            random(&mut rng, &[6], 1.5),
            random(&mut rng, &[6], 1.0),
        ];
        let err = check(inputs, true, &mut rng, &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn sigmoid_and_gelu(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 5], 3.0);
        let err = check(vec![x.clone()], true, &mut rng, &|t, v| t.sigmoid(v[0]));
        prop_assert!(err < REL_TOL, "sigmoid relative error {err}");
        let err = check(vec![x], true, &mut rng, &|t, v| t.gelu(v[0]));
        prop_assert!(err < REL_TOL, "gelu relative error {err}");
    }

    #[test]
    fn softmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&mut rng, &[3, 5], 2.0)];
        let err = check(inputs, true, &mut rng, &|t, v| t.softmax(v[0]).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn embedding_lookup(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let inputs = vec![random(&mut rng, &[5, 3], 1.0)];
        let err = check(inputs, true, &mut rng, &move |t, v| t.embedding(v[0], &ids).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn cross_entropy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..7)).collect();
        let inputs = vec![random(&mut rng, &[4, 7], 2.0)];
        let err = check(inputs, false, &mut rng, &move |t, v| t.cross_entropy(v[0], &targets).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn kl_divergence_from_logits(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random(&mut rng, &[3, 6], 2.0);
        let mut tape = Tape::new();
        let pv = tape.constant(&p);
        let probs = tape.softmax(pv).unwrap();
        let target = tape.value(probs).data().to_vec();
        let inputs = vec![random(&mut rng, &[3, 6], 2.0)];
        let err = check(inputs, false, &mut rng, &move |t, v| t.kl_div(&target, v[0]).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn causal_attention(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // batch 2, seq 3, two heads of width 2
        let inputs = vec![
            random(&mut rng, &[6, 4], 1.0),
            random(&mut rng, &[6, 4], 1.0),
            random(&mut rng, &[6, 4], 1.0),
        ];
        let err = check(inputs, true, &mut rng, &|t, v| t.causal_attention(v[0], v[1], v[2], 2, 2).unwrap());
        prop_assert!(err < REL_TOL, "relative error {err}");
    }

    #[test]
    fn bias_scale_and_elementwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[3, 4], 1.0),
            random(&mut rng, &[4], 1.0),
            random(&mut rng, &[1], 1.0),
            random(&mut rng, &[3, 4], 1.0),
        ];
        let err = check(inputs, true, &mut rng, &|t, v| {
            let b = t.add_bias(v[0], v[1]).unwrap();
            let s = t.scale_by(b, v[2]).unwrap();
            let m = t.mul(s, v[3]).unwrap();
            let d = t.sub(m, v[0]).unwrap();
            let a = t.affine(d, 0.7, 0.1);
            t.add(a, v[3]).unwrap()
        });
        prop_assert!(err < REL_TOL, "relative error {err}");
    }
}

#[test]
fn linear_loss_gradient_is_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[1, 4], 1.0);
    let w = random(&mut rng, &[4, 3], 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x, false);
    let wv = tape.leaf(&w, true);
    let y = tape.matmul(xv, wv).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(wv).unwrap();
    let h = 1e-4;
    for i in 0..4 {
        for j in 0..3 {
            // d sum(xW)/dW_ij = x_i
            assert_eq!(g.data()[i * 3 + j], x.data()[i]);
            let mut up = w.clone();
            up.data_mut()[i * 3 + j] += h as Real;
            let mut down = w.clone();
            down.data_mut()[i * 3 + j] -= h as Real;
            let f = |w: &Tensor| -> f64 {
                (0..3)
                    .map(|c| (0..4).map(|r| (x.data()[r] * w.data()[r * 3 + c]) as f64).sum::<f64>())
                    .sum()
            };
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((fd - g.data()[i * 3 + j] as f64).abs() <= 1e-6 * fd.abs().max(1e-12));
        }
    }
}

#[test]
fn unrelated_leaf_gets_zero_gradient() {
    let a = Tensor::from_vec(vec![1.0, 2.0]);
    let b = Tensor::from_vec(vec![3.0, 4.0]);
    let mut tape = Tape::new();
    let av = tape.leaf(&a, true);
    let bv = tape.leaf(&b, true);
    let loss = tape.sum(av);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(bv).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get(av).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn shared_leaf_accumulates() {
    let a = Tensor::from_vec(vec![1.5, -2.0]);
    let mut tape = Tape::new();
    let av = tape.leaf(&a, true);
    let sq = tape.mul(av, av).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(av).unwrap().data(), &[3.0, -4.0]);
}

#[test]
fn tape_sweeps_once() {
    let a = Tensor::from_vec(vec![1.0]);
    let mut tape = Tape::new();
    let av = tape.leaf(&a, true);
    let loss = tape.sum(av);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(ClpError::Contract(_))));
    tape.reset();
    let av = tape.leaf(&a, true);
    let loss = tape.sum(av);
    assert!(tape.backward(loss).is_ok());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let a = Tensor::from_vec(vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let av = tape.leaf(&a, true);
    assert!(matches!(tape.backward(av), Err(ClpError::Contract(_))));
}

#[test]
fn frozen_leaves_have_no_gradient_entry() {
    let a = Tensor::from_vec(vec![1.0, 2.0]);
    let b = Tensor::from_vec(vec![3.0, 4.0]);
    let mut tape = Tape::new();
    let av = tape.leaf(&a, true);
    let bv = tape.constant(&b);
    let p = tape.mul(av, bv).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(bv).is_none());
    assert_eq!(grads.len(), 1);
}

#[test]
fn softmax_on_tape_rejects_non_finite() {
    let a = Tensor::from_vec(vec![Real::NAN, 1.0]);
    let mut tape = Tape::new();
    let av = tape.constant(&a);
    assert!(matches!(tape.softmax(av), Err(ClpError::NumericDomain(_))));
}
