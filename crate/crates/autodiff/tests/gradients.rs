//! Finite-difference checks for every primitive, plus tape-level properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajformer_autodiff::gradcheck::analytic_gradients;
use trajformer_autodiff::{check_gradients, GradCheckConfig, Result, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes a distinct amount to the scalar loss.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_passes<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, f, &GradCheckConfig::default()).unwrap();
    assert!(
        report.passed,
        "{name}: max relative error {:.3e} at {:?} (analytic {}, numeric {})",
        report.max_rel_error, report.worst, report.analytic_at_worst, report.numeric_at_worst
    );
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[test]
fn gradcheck_binary_and_matrix_ops() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let row = random(&[4], &mut rng);
        let m = random(&[4, 2], &mut rng);
        for (name, rhs) in [("add", &b), ("add_broadcast", &row)] {
            assert_passes(name, &[a.clone(), rhs.clone()], |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, seed)
            });
        }
        assert_passes("sub", &[a.clone(), row.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_passes("mul", &[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_passes("mul_broadcast", &[a.clone(), row.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        });
        assert_passes("matmul", &[a.clone(), m.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        });
        let p = random(&[2, 3, 4], &mut rng);
        let q = random(&[2, 4, 5], &mut rng);
        let r = random(&[2, 5, 4], &mut rng);
        assert_passes("batch_matmul", &[p.clone(), q], |t, v| {
            let y = t.batch_matmul(v[0], v[1], false)?;
            project(t, y, seed)
        });
        assert_passes("batch_matmul_t", &[p, r], |t, v| {
            let y = t.batch_matmul(v[0], v[1], true)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn gradcheck_unary_ops() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 5], &mut rng);
        let positive = x.map(|v| v.abs() + 0.2);
        assert_passes("relu", std::slice::from_ref(&x), |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        });
        assert_passes("tanh", std::slice::from_ref(&x), |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, seed)
        });
        assert_passes("sigmoid", std::slice::from_ref(&x), |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, seed)
        });
        assert_passes("log", &[positive], |t, v| {
            let y = t.log(v[0]);
            project(t, y, seed)
        });
        assert_passes("clamp", std::slice::from_ref(&x), |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5);
            project(t, y, seed)
        });
        assert_passes("scale", std::slice::from_ref(&x), |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, seed)
        });
        assert_passes("mean", std::slice::from_ref(&x), |t, v| {
            let y = t.mean(v[0]);
            project(t, y, seed)
        });
        assert_passes("sum", &[x], |t, v| {
            let y = t.sum(v[0]);
            project(t, y, seed)
        });
    }
}

#[test]
fn gradcheck_softmax_and_layer_norm() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4], &mut rng);
        for axis in 0..3 {
            assert_passes("softmax", std::slice::from_ref(&x), |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, seed)
            });
        }
        let gain = random(&[4], &mut rng);
        let bias = random(&[4], &mut rng);
        assert_passes("layer_norm", &[x, gain, bias], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn gradcheck_structural_ops() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 3, 2], &mut rng);
        let b = random(&[2, 1, 2], &mut rng);
        assert_passes("concat", &[a.clone(), b], |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 1)?;
            project(t, y, seed)
        });
        assert_passes("permute", std::slice::from_ref(&a), |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y, seed)
        });
        assert_passes("reshape", std::slice::from_ref(&a), |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let y = t.transpose(y)?;
            project(t, y, seed)
        });
        assert_passes("slice", std::slice::from_ref(&a), |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            project(t, y, seed)
        });
        assert_passes("embedding_lookup", &[a], |t, v| {
            let y = t.embedding_lookup(v[0], &[1, 0, 1])?;
            project(t, y, seed)
        });
    }
}

/// A small composite resembling one attention head with a residual norm.
fn composite(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let h = t.matmul(v[0], v[1])?;
    let h = t.add(h, v[2])?;
    let h = t.tanh(h);
    let ht = t.transpose(h)?;
    let scores = t.matmul(h, ht)?;
    let w = t.softmax(scores, 1)?;
    let mixed = t.matmul(w, h)?;
    let res = t.add(mixed, h)?;
    let g = t.constant(Tensor::full([3], 1.0));
    let b = t.constant(Tensor::zeros([3]));
    let n = t.layer_norm(res, g, b, 1e-5)?;
    let sq = t.mul(n, n)?;
    let s = t.mean(sq);
    let z = t.sum(mixed);
    t.add(s, z)
}

fn composite_inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        random(&[4, 2], &mut rng),
        random(&[2, 3], &mut rng),
        random(&[3], &mut rng),
    ]
}

#[test]
fn gradcheck_composite() {
    for seed in SEEDS {
        assert_passes("composite", &composite_inputs(seed), composite);
    }
}

#[test]
fn tape_is_deterministic() {
    let inputs = composite_inputs(11);
    let first = analytic_gradients(&composite, &inputs).unwrap();
    let second = analytic_gradients(&composite, &inputs).unwrap();
    for (a, b) in first.iter().zip(&second) {
        let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn injected_sign_bug_is_caught() {
    // scale_grad(-1) is an identity whose backward has the wrong sign.
    let x = composite_inputs(3).remove(0);
    let report = check_gradients(
        &[x],
        |t, v| {
            let y = t.scale_grad(v[0], -1.0);
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let inputs = composite_inputs(seed);
        let l1 = |t: &mut Tape, v: &[Var]| composite(t, v);
        let l2 = |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let s = t.sigmoid(h);
            Ok(t.mean(s))
        };
        let combined = |t: &mut Tape, v: &[Var]| {
            let x = l1(t, v)?;
            let y = l2(t, v)?;
            let x = t.scale(x, a);
            let y = t.scale(y, b);
            t.add(x, y)
        };
        let g1 = analytic_gradients(&l1, &inputs).unwrap();
        let g2 = analytic_gradients(&l2, &inputs).unwrap();
        let gc = analytic_gradients(&combined, &inputs).unwrap();
        for ((x, y), z) in g1.iter().zip(&g2).zip(&gc) {
            for ((p, q), r) in x.data().iter().zip(y.data()).zip(z.data()) {
                let expected = a * p + b * q;
                prop_assert!((expected - r).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([3, 4], values).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
