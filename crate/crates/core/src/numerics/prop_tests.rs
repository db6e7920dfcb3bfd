//! Every primitive's adjoint against central differences over random shapes.

use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::grad_check;
use super::tape::{Tape, Var};
use super::tensor::{Precision, Tensor};
use crate::error::Result;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts an arbitrary output against fixed random weights so every
/// output entry contributes to the scalar.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            contract(tape, y, seed)
        },
        &inputs,
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, rng_seed: RngSeed::Fixed(0x5eed_0001), ..ProptestConfig::default() })]

    #[test]
    fn elementwise_binary(shape in shape_strategy(), seed in any::<u64>(), bcast in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&shape, &mut rng);
        let b_shape = if bcast { shape[shape.len() - 1..].to_vec() } else { shape.clone() };
        let b = random(&b_shape, &mut rng).map(|v| v + 2.0 * v.signum() + 0.5);
        check(vec![a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]));
        check(vec![a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]));
        check(vec![a.clone(), b.clone()], seed, |t, v| t.mul(v[0], v[1]));
        check(vec![a, b], seed, |t, v| t.div(v[0], v[1]));
    }

    #[test]
    fn elementwise_unary(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng);
        let mask = Tensor::from_fn(&shape, |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        check(vec![x.clone()], seed, |t, v| Ok(t.scale(v[0], -1.7)));
        check(vec![x.clone()], seed, |t, v| Ok(t.exp(v[0])));
        check(vec![x.clone()], seed, |t, v| Ok(t.gelu(v[0])));
        check(vec![x.clone()], seed, |t, v| t.dropout(v[0], &mask, 0.3));
        check(vec![x.clone()], seed, |t, v| Ok(t.mean(v[0])));
        check(vec![x], seed, |t, v| Ok(t.sum(v[0])));
    }

    #[test]
    fn matmul_batched(b in 1usize..3, m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>(), shared in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[b, m, k], &mut rng);
        let w = if shared { random(&[k, n], &mut rng) } else { random(&[b, k, n], &mut rng) };
        check(vec![a.clone(), w.clone()], seed, |t, v| t.matmul(v[0], v[1]));
        // left operand broadcast
        let l = random(&[m, b], &mut rng);
        let r = random(&[2, b, n], &mut rng);
        check(vec![l, r], seed, |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn shape_ops(shape in prop::collection::vec(1usize..4, 2..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng);
        let r = shape.len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.rotate_left(1);
        check(vec![x.clone()], seed, move |t, v| t.permute(v[0], &perm));
        check(vec![x.clone()], seed, |t, v| t.transpose(v[0]));
        let flat = [x.len()];
        check(vec![x.clone()], seed, move |t, v| t.reshape(v[0], &flat));
        let mut big = vec![2];
        big.extend(&shape);
        check(vec![x.clone()], seed, move |t, v| t.broadcast_to(v[0], &big));
        let y = random(&shape, &mut rng);
        check(vec![x.clone(), y], seed, |t, v| t.concat(&[v[0], v[1], v[0]], 1));
        let len = shape[r - 1];
        check(vec![x.clone()], seed, move |t, v| t.narrow(v[0], r - 1, len - 1, 1));
        check(vec![x.clone()], seed, |t, v| t.sum_axis(v[0], 0));
        let table = random(&[4, 3], &mut rng);
        check(vec![table], seed, |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]));
    }

    // length-2 axes are left out: standardising two values gives ±1 whatever
    // they are, so the gradient is ~eps and only rounding noise remains
    #[test]
    fn softmax_and_normalisation(shape in prop::collection::vec(3usize..5, 1..4), seed in any::<u64>(), tau in 0.5f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng);
        let axis = shape.len() - 1;
        check(vec![x.clone()], seed, move |t, v| t.softmax(v[0], axis, tau));
        check(vec![x.clone()], seed, |t, v| t.softmax(v[0], 0, 1.0));
        check(vec![x.clone()], seed, move |t, v| Ok(t.standardize(v[0], &[axis], 1e-5)?.0));
        let all: Vec<usize> = (0..shape.len()).filter(|&a| a != 0 || shape.len() == 1).collect();
        check(vec![x], seed, move |t, v| Ok(t.standardize(v[0], &all, 1e-5)?.0));
    }

    #[test]
    fn cosine_and_cross_entropy(n in 1usize..4, c in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[n, c, 3], &mut rng);
        let b = random(&[n, c, 3], &mut rng);
        check(vec![a.clone(), b.clone()], seed, |t, v| t.cosine(v[0], v[1], 1));
        check(vec![a, b], seed, |t, v| t.cosine(v[0], v[1], 2));
        let logits = random(&[n, c], &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();
        let report = grad_check(|t, v| t.cross_entropy(v[0], &labels), &[logits], STEP, TOL).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn softmax_sums_to_one_at_extreme_magnitudes(
        logits in prop::collection::vec(-1e4f64..1e4, 2..12),
        tau in 0.05f64..5.0,
    ) {
        let n = logits.len();
        for precision in [Precision::Double, Precision::Single] {
            let mut tape = Tape::new(precision);
            let x = tape.constant(&Tensor::new(vec![n], logits.clone()).unwrap());
            let s = tape.softmax(x, 0, tau).unwrap();
            let vals = tape.value(s).data();
            prop_assert!(vals.iter().all(|v| v.is_finite() && *v >= 0.0));
            let tol = if precision == Precision::Double { 1e-12 } else { 1e-6 };
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < tol);
        }
    }
}
