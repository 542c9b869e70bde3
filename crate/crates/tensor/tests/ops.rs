use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spt_tensor::{
    finite_diff_check, GradCheckOptions, Probe, Tape, Tensor, TensorError, Var,
};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    t(&[m, n], &out)
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var, TensorError>) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).clone()
}

fn all_probes(params: &[Tensor]) -> Vec<Probe> {
    params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| Probe { param: p, index: i }))
        .collect()
}

/// Gradient check of `sum(w * f(params))` with a fixed random weighting `w`.
fn check_op<F>(params: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let weights = Arc::new(random(&mut rng, &probe_shape));
    let probes = all_probes(&params);
    let report = finite_diff_check(
        |tape, vars| {
            let out = f(tape, vars)?;
            let w = tape.constant(Arc::clone(&weights));
            let prod = tape.mul(out, w)?;
            Ok(tape.sum(prod))
        },
        &params,
        &probes,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(
        report.passed(),
        "max rel error {} at {:?}",
        report.max_rel_error,
        report
            .results
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    );
}

#[test]
fn matmul_examples() {
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let id = eval(|tp| {
        let i = tp.constant(Tensor::eye(2));
        let b = tp.constant(b.clone());
        tp.matmul(i, b)
    });
    assert_eq!(id, b);

    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let expected = naive_matmul(&a, &b);
    assert_eq!(expected.data(), &[19.0, 22.0, 43.0, 50.0]);
    let got = eval(|tp| {
        let a = tp.constant(a.clone());
        let b = tp.constant(b.clone());
        tp.matmul(a, b)
    });
    assert_eq!(got, expected);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let any = random(&mut rng, &[3, 4]);
    let z = eval(|tp| {
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(any.clone());
        tp.matmul(a, b)
    });
    assert_eq!(z, Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let u = eval(|tp| {
        let x = tp.constant(Tensor::zeros(&[3]));
        tp.softmax(x, 0)
    });
    for &v in u.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let masked = eval(|tp| {
        let x = tp.constant(Tensor::from_vec(vec![f64::NEG_INFINITY, 0.0]));
        tp.softmax(x, 0)
    });
    assert_eq!(masked.data(), &[0.0, 1.0]);
    let closed = eval(|tp| {
        let x = tp.constant(Tensor::from_vec(vec![0.0, 3f64.ln()]));
        tp.softmax(x, 0)
    });
    assert!((closed.data()[0] - 0.25).abs() < 1e-15);
    assert!((closed.data()[1] - 0.75).abs() < 1e-15);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![f64::NEG_INFINITY; 2]));
    assert_eq!(tape.softmax(x, 0), Err(TensorError::DegenerateSlice));
}

#[test]
fn softmax_along_leading_axis() {
    let out = eval(|tp| {
        let x = tp.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        tp.softmax(x, 0)
    });
    assert_eq!(out.data(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn elementwise_examples() {
    let s = eval(|tp| {
        let x = tp.constant(Tensor::scalar(0.0));
        tp.sigmoid(x)
    });
    assert_eq!(s.item().unwrap(), 0.5);
    let r = eval(|tp| {
        let x = tp.constant(Tensor::scalar(-2.0));
        tp.relu(x)
    });
    assert_eq!(r.item().unwrap(), 0.0);
    let sum = eval(|tp| {
        let a = tp.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tp.constant(Tensor::from_vec(vec![3.0, 4.0]));
        tp.add(a, b)
    });
    let oracle: Vec<f64> = [1.0, 2.0].iter().zip([3.0, 4.0]).map(|(a, b)| a + b).collect();
    assert_eq!(sum.data(), &oracle[..]);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(a, b), Err(TensorError::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::ones(&[3]);
    let zeros = Tensor::zeros(&[3]);
    let flat = eval(|tp| {
        let x = tp.constant(Tensor::full(&[3], 5.0));
        let g = tp.constant(ones.clone());
        let b = tp.constant(zeros.clone());
        tp.layer_norm(x, g, b, 1e-5)
    });
    assert_eq!(flat, Tensor::zeros(&[3]));

    let unit = eval(|tp| {
        let x = tp.constant(Tensor::from_vec(vec![1.0, -1.0]));
        let g = tp.constant(Tensor::ones(&[2]));
        let b = tp.constant(Tensor::zeros(&[2]));
        tp.layer_norm(x, g, b, 1e-300)
    });
    assert_eq!(unit.data(), &[1.0, -1.0]);

    let out = eval(|tp| {
        let x = tp.constant(Tensor::from_vec(vec![2.0, 4.0, 6.0]));
        let g = tp.constant(ones.clone());
        let b = tp.constant(zeros.clone());
        tp.layer_norm(x, g, b, 1e-12)
    });
    let mean = out.data().iter().sum::<f64>() / 3.0;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x), Tensor::ones(&[2, 3]));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let unused = tape.leaf(Tensor::from_vec(vec![1.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    assert_eq!(tape.grad(unused).data(), &[0.0]);

    // Repeated calls accumulate until zeroed.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), &[4.0, 8.0]);
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(TensorError::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![800.0]));
    assert_eq!(tape.exp(x), Err(TensorError::NonFinite("exp")));
}

#[test]
fn reuse_accumulates_both_paths() {
    // f(x) = sum(x * sigmoid(x) + relu(x) * x), x used four times.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_op(vec![random(&mut rng, &[7])], |tp, v| {
        let s = tp.sigmoid(v[0])?;
        let a = tp.mul(v[0], s)?;
        let r = tp.relu(v[0])?;
        let b = tp.mul(r, v[0])?;
        tp.add(a, b)
    });
}

#[test]
fn gradients_of_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |s: &[usize]| random(&mut rng, s);

    check_op(vec![r(&[3, 4]), r(&[4, 2])], |tp, v| tp.matmul(v[0], v[1]));
    check_op(vec![r(&[3, 4]), r(&[5, 4])], |tp, v| tp.matmul_nt(v[0], v[1]));
    check_op(vec![r(&[4, 3]), r(&[4, 2])], |tp, v| tp.matmul_t(v[0], v[1], true, false));
    check_op(vec![r(&[4, 3]), r(&[2, 4])], |tp, v| tp.matmul_t(v[0], v[1], true, true));
    check_op(vec![r(&[2, 3, 4]), r(&[4, 5])], |tp, v| tp.matmul(v[0], v[1]));
    check_op(vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |tp, v| tp.matmul_nt(v[0], v[1]));
    check_op(vec![r(&[2, 4, 3]), r(&[2, 4, 2])], |tp, v| tp.matmul_t(v[0], v[1], true, false));

    check_op(vec![r(&[3, 4]), r(&[4])], |tp, v| tp.add(v[0], v[1]));
    check_op(vec![r(&[3, 4]), r(&[3, 1])], |tp, v| tp.sub(v[0], v[1]));
    check_op(vec![r(&[2, 3, 4]), r(&[1, 4])], |tp, v| tp.mul(v[0], v[1]));
    check_op(vec![r(&[3, 4]), r(&[1, 1])], |tp, v| tp.mul(v[0], v[1]));
    check_op(vec![r(&[3, 4]), r(&[3, 4]).map(|x| 2.0 + x)], |tp, v| tp.div(v[0], v[1]));
    check_op(vec![r(&[2, 1, 3]), r(&[4, 1])], |tp, v| tp.add(v[0], v[1]));

    check_op(vec![r(&[10])], |tp, v| tp.gelu(v[0]));
    check_op(vec![r(&[10])], |tp, v| tp.sigmoid(v[0]));
    check_op(vec![r(&[10])], |tp, v| tp.tanh(v[0]));
    check_op(vec![r(&[10])], |tp, v| tp.exp(v[0]));
    check_op(vec![r(&[10]).map(|x| x.abs() + 0.5)], |tp, v| tp.sqrt(v[0]));
    check_op(vec![r(&[10]).map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |tp, v| {
        tp.relu(v[0])
    });
    check_op(vec![r(&[10])], |tp, v| tp.scale(v[0], -2.5));
    check_op(vec![r(&[10])], |tp, v| tp.offset(v[0], 1.5));

    check_op(vec![r(&[3, 5])], |tp, v| tp.softmax(v[0], 1));
    check_op(vec![r(&[3, 5])], |tp, v| tp.softmax(v[0], 0));
    check_op(vec![r(&[4, 4])], |tp, v| {
        let m = tp.fill_diagonal(v[0], f64::NEG_INFINITY)?;
        tp.softmax(m, 1)
    });
    check_op(vec![r(&[4, 6]), r(&[6]), r(&[6])], |tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5));

    check_op(vec![r(&[3, 4])], |tp, v| Ok(tp.sum(v[0])));
    check_op(vec![r(&[3, 4])], |tp, v| tp.mean(v[0]));
    check_op(vec![r(&[2, 3, 4])], |tp, v| tp.sum_axis(v[0], 1));
    check_op(vec![r(&[2, 3, 4])], |tp, v| tp.permute(v[0], &[2, 0, 1]));
    check_op(vec![r(&[3, 4])], |tp, v| tp.transpose(v[0]));
    check_op(vec![r(&[3, 4])], |tp, v| tp.reshape(v[0], &[2, 6]));
    check_op(vec![r(&[5, 3])], |tp, v| tp.slice(v[0], 0, 1, 3));
    check_op(vec![r(&[2, 3]), r(&[4, 3])], |tp, v| tp.concat(&[v[0], v[1]], 0));
    check_op(vec![r(&[3, 2]), r(&[3, 4])], |tp, v| tp.concat(&[v[0], v[1]], 1));
    check_op(vec![r(&[4, 4, 8])], |tp, v| tp.space_to_depth(v[0], 2));
    check_op(vec![r(&[2, 2, 8])], |tp, v| tp.depth_to_space(v[0], 2));
    check_op(vec![r(&[3, 3])], |tp, v| {
        let s = tp.sum(v[0]);
        tp.offset(s, 0.0)
    });

    let target = Arc::new(Tensor::new(vec![6], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap());
    check_op(vec![r(&[6]).map(|x| 4.0 * x)], move |tp, v| {
        tp.bce_with_logits(v[0], Arc::clone(&target))
    });
}

#[test]
fn bce_matches_naive_formula() {
    let logits = [-3.0, 0.0, 2.0, 6.0];
    let target = [0.0, 1.0, 1.0, 0.0];
    let got = eval(|tp| {
        let x = tp.constant(Tensor::from_vec(logits.to_vec()));
        tp.bce_with_logits(x, Arc::new(Tensor::from_vec(target.to_vec())))
    })
    .item()
    .unwrap();
    let naive: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, y)| {
            let p: f64 = 1.0 / (1.0 + (-z).exp());
            if y == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    assert!((got - naive).abs() < 1e-12);
    let half = eval(|tp| {
        let x = tp.constant(Tensor::zeros(&[5]));
        tp.bce_with_logits(x, Arc::new(Tensor::ones(&[5])))
    });
    assert!((half.item().unwrap() - 2f64.ln()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let got = eval(|tp| {
            let a = tp.constant(a.clone());
            let b = tp.constant(b.clone());
            tp.matmul(a, b)
        });
        prop_assert!(got.max_abs_diff(&naive_matmul(&a, &b)).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one(rows in 1usize..6, cols in 1usize..9, mask_bits in any::<u64>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random(&mut rng, &[rows, cols]).map(|v| 30.0 * v);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            // keep column 0 finite so no slice is degenerate
            if i % cols != 0 && (mask_bits >> (i % 64)) & 1 == 1 {
                *v = f64::NEG_INFINITY;
            }
        }
        let y = eval(|tp| {
            let x = tp.constant(x.clone());
            tp.softmax(x, 1)
        });
        for (row_x, row_y) in x.data().chunks(cols).zip(y.data().chunks(cols)) {
            prop_assert!((row_y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (&xi, &yi) in row_x.iter().zip(row_y) {
                if xi == f64::NEG_INFINITY {
                    prop_assert_eq!(yi, 0.0);
                } else {
                    prop_assert!(yi > 0.0 && yi <= 1.0);
                }
            }
        }
    }
}
