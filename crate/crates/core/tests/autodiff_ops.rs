use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_fusion::autodiff::{check_gradients, Tape, Tensor, TensorError, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum against a fixed random tensor so every output entry gets a
/// distinct upstream gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("add_row", vec![vec![3, 4], vec![1, 4]], |t, v| {
            t.add_row(v[0], v[1])
        }),
        ("scale", vec![vec![2, 2]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("sigmoid", vec![vec![2, 3]], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![vec![2, 3]], |t, v| Ok(t.tanh(v[0]))),
        ("relu", vec![vec![3, 3]], |t, v| Ok(t.relu(v[0]))),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v| {
            t.slice(v[0], 1, 1, 3)
        }),
        ("slice_rows", vec![vec![4, 2]], |t, v| {
            t.slice(v[0], 0, 1, 2)
        }),
        ("sum", vec![vec![2, 3]], |t, v| {
            let s = t.sum(v[0]);
            let sq = t.mul(s, s)?;
            Ok(sq)
        }),
        ("mean", vec![vec![2, 3]], |t, v| {
            let m = t.mean(v[0]);
            Ok(t.tanh(m))
        }),
        ("softmax_axis1", vec![vec![3, 4]], |t, v| t.softmax(v[0], 1)),
        ("softmax_axis0", vec![vec![3, 4]], |t, v| t.softmax(v[0], 0)),
        ("gather_rows", vec![vec![4, 3]], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 3])
        }),
        ("reshape", vec![vec![2, 6]], |t, v| {
            t.reshape(v[0], vec![3, 4])
        }),
        ("row_scale", vec![vec![3, 4], vec![3, 1]], |t, v| {
            t.row_scale(v[0], v[1])
        }),
        ("group_sum", vec![vec![6, 2]], |t, v| t.group_sum(v[0], 3)),
        ("dropout_with_mask", vec![vec![2, 4]], |t, v| {
            let mask = t.constant(
                Tensor::new(vec![2, 4], vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0, 2.0, 2.0]).unwrap(),
            );
            t.dropout_with_mask(v[0], mask)
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences_over_20_seeds() {
    for (name, shapes, build) in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let report = check_gradients(&inputs, H, None, |t, v| {
                let out = build(t, v)?;
                probe(t, out, seed)
            })
            .unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst < TOL, "{name}: max rel error {worst:e}");
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[2, 3]);
    let report =
        check_gradients(&[logits], H, None, |t, v| t.cross_entropy(v[0], &[2, 0])).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn matmul_random_case_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let report = check_gradients(&[a, b], H, None, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        probe(t, c, 3)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn matmul_identity_and_small_product() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap());
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(c).values(), tape.value(a).values());

    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = tape.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.shape(z), &[2, 1]);
    assert_eq!(tape.value(z).values(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(TensorError::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
    let s = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(s).values(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
    let s = tape.softmax(x, 1).unwrap();
    let expected = [0.0900305731703804, 0.2447284710547977, 0.6652409557748219];
    for (got, want) in tape.value(s).values().iter().zip(expected) {
        assert!((got - want).abs() < 1e-5);
    }

    let shifted = tape.constant(Tensor::row(vec![1001.0, 1002.0, 1003.0]));
    let s2 = tape.softmax(shifted, 1).unwrap();
    for (a, b) in tape.value(s).values().iter().zip(tape.value(s2).values()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::row(vec![0.3; 4]));
    for target in 0..4 {
        let l = tape.cross_entropy(uniform, &[target]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }
    let sat = tape.constant(Tensor::row(vec![50.0, -50.0]));
    let l = tape.cross_entropy(sat, &[0]).unwrap();
    assert!(tape.value(l).item() < 1e-40);
    assert!(tape.value(l).item() >= 0.0);
    assert!(matches!(
        tape.cross_entropy(sat, &[2]),
        Err(TensorError::Index {
            index: 2,
            extent: 2,
            ..
        })
    ));
}

#[test]
fn backward_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w0 = rand_tensor(&mut rng, &[3, 2]);

    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert!(tape.grad(w).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(w).unwrap(), w0.values());
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::row(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::row(vec![5.0, 6.0, 7.0]));
    assert!(matches!(tape.backward(w), Err(TensorError::Contract(_))));
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    assert!(matches!(tape.backward(s), Err(TensorError::Contract(_))));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let a = tape.param(rand_tensor(&mut rng, &[4, 6]));
        let b = tape.param(rand_tensor(&mut rng, &[6, 3]));
        let c = tape.matmul(a, b).unwrap();
        let c = tape.tanh(c);
        let p = tape.softmax(c, 1).unwrap();
        let l = tape.cross_entropy(p, &[0, 1, 2, 0]).unwrap();
        tape.backward(l).unwrap();
        (
            tape.value(p).values().to_vec(),
            tape.grad(a).unwrap().to_vec(),
        )
    };
    let (p1, g1) = run();
    let (p2, g2) = run();
    assert_eq!(
        p1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        p2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(g1, g2);
}

#[test]
fn shared_parent_accumulates() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::row(vec![2.0, -3.0]));
    let a = tape.scale(w, 3.0);
    let b = tape.add(a, w).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[4.0, 4.0]);
}

#[test]
fn gather_scatters_into_repeated_rows() {
    let mut tape = Tape::new();
    let table = tape.param(Tensor::zeros(&[5, 2]));
    let rows = tape.gather_rows(table, &[3, 3]).unwrap();
    let up = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap());
    let prod = tape.mul(rows, up).unwrap();
    let s = tape.sum(prod);
    tape.backward(s).unwrap();
    let g = tape.grad(table).unwrap();
    assert_eq!(&g[6..8], &[11.0, 22.0]);
    assert!(g[..6].iter().chain(&g[8..]).all(|&x| x == 0.0));
    assert!(matches!(
        tape.gather_rows(table, &[5]),
        Err(TensorError::Index { .. })
    ));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12), c in -100.0f64..100.0) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], vals.clone()).unwrap());
            let s = tape.softmax(x, 1).unwrap();
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let xs = tape.constant(Tensor::new(vec![3, 4], shifted).unwrap());
            let ss = tape.softmax(xs, 1).unwrap();
            for (row, row2) in tape.value(s).values().chunks(4).zip(tape.value(ss).values().chunks(4)) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, b) in row.iter().zip(row2) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn cross_entropy_nonnegative(vals in proptest::collection::vec(-20.0f64..20.0, 6), t0 in 0usize..3, t1 in 0usize..3) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 3], vals).unwrap());
            let l = tape.cross_entropy(x, &[t0, t1]).unwrap();
            prop_assert!(tape.value(l).item() > 0.0);
        }
    }
}

#[test]
fn relu_propagates_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![f64::NAN, -1.0, 2.0]).unwrap());
    let y = tape.relu(x);
    let v = tape.value(y).values();
    assert!(v[0].is_nan());
    assert_eq!(&v[1..], &[0.0, 2.0]);
}
