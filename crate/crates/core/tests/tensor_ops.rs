use proptest::prelude::*;
use rand::Rng;
use voltcast_core::tensor::{seeded_rng, Tape, Tensor, Var};
use voltcast_core::Error;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn run1(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Vec<f64> {
    let mut t = Tape::new();
    let v = t.constant(x);
    let out = f(&mut t, v);
    t.value(out).values().to_vec()
}

// ---------------------------------------------------------------------------
// Finite-difference oracle, independent of the backward rules.
// ---------------------------------------------------------------------------

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn loss_at(inputs: &[Tensor], build: &Build) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let l = build(&mut t, &vars);
    t.value(l).values()[0]
}

fn assert_grad_matches_fd(inputs: Vec<Tensor>, build: &Build) {
    const STEP: f64 = 1e-5;
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let l = build(&mut t, &vars);
    t.backward(l).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = t.grad(vars[k]).unwrap().to_vec();
        for i in 0..x.len() {
            let nudge = |delta: f64| {
                let mut vals = x.values().to_vec();
                vals[i] += delta;
                let mut moved = inputs.clone();
                moved[k] = Tensor::new(x.shape().to_vec(), vals).unwrap();
                loss_at(&moved, build)
            };
            let fd = (nudge(STEP) - nudge(-STEP)) / (2.0 * STEP);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(
                rel < 1e-4,
                "input {k} elem {i}: analytic {} vs fd {fd} (rel {rel})",
                analytic[i]
            );
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Weights each output element differently so the loss exercises every
/// entry of the upstream gradient.
fn weighted_sum(t: &mut Tape, v: Var) -> Var {
    let shape = t.value(v).shape().to_vec();
    let n = t.value(v).len();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect()).unwrap();
    let w = t.constant(w);
    let p = t.mul(v, w).unwrap();
    t.sum(p)
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::identity(2));
    let b = t.constant(Tensor::identity(2));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c), &Tensor::identity(2));
}

#[test]
fn matmul_hand_arithmetic() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
    let b = t.constant(Tensor::matrix(2, 1, vec![1., 1.]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).values(), &[3., 7.]);
    assert_eq!(t.value(c).shape(), &[2, 1]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[3, 5]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![3, 5]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

#[test]
fn softmax_examples() {
    let s = |v: Vec<f64>| run1(Tensor::vector(v), |t, x| t.softmax(x).unwrap());
    assert!(close(&s(vec![0., 0., 0.]), &[1. / 3.; 3], 1e-12));
    assert!(close(&s(vec![1000., 1000.]), &[0.5, 0.5], 1e-12));
    assert!(close(&s(vec![0., 3f64.ln()]), &[0.25, 0.75], 1e-12));
}

#[test]
fn softmax_rejects_nan() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(t.softmax(x), Err(Error::Numeric(_))));
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

fn ln(x: Vec<f64>, gain: f64, bias: f64) -> Vec<f64> {
    let d = x.len();
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(x));
    let g = t.constant(Tensor::full(&[d], gain));
    let b = t.constant(Tensor::full(&[d], bias));
    let y = t.layer_norm(x, g, b).unwrap();
    t.value(y).values().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(ln(vec![4.0; 5], 1.0, 0.0), vec![0.0; 5]);
    assert!(close(&ln(vec![1., 2., 3.], 1.0, 0.0), &[-1.2247, 0.0, 1.2247], 1e-3));
    assert_eq!(ln(vec![1., 2., 3.], 0.0, 5.0), vec![5.0; 3]);
}

#[test]
fn layer_norm_standardizes_rows() {
    let x = random(&[4, 7], 11);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let g = t.constant(Tensor::full(&[7], 1.0));
    let b = t.constant(Tensor::zeros(&[7]));
    let y = t.layer_norm(xv, g, b).unwrap();
    for r in 0..4 {
        let row = t.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-6);
        // epsilon shrinks the variance slightly below one
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

// ---------------------------------------------------------------------------
// conv1d and max_pool1d
// ---------------------------------------------------------------------------

#[test]
fn conv1d_identity_kernel() {
    let x = random(&[6, 3], 3);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::identity(3).reshape(vec![1, 3, 3]).unwrap());
    let b = t.constant(Tensor::zeros(&[3]));
    let y = t.conv1d(xv, w, b, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv1d_output_length() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[8, 2]));
    let w = t.constant(Tensor::zeros(&[3, 2, 4]));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.conv1d(x, w, b, 2, 1).unwrap();
    assert_eq!(t.value(y).shape(), &[4, 4]);
    let same = t.conv1d(x, w, b, 1, 1).unwrap();
    assert_eq!(t.value(same).shape(), &[8, 4]);
}

#[test]
fn conv1d_kernel_wider_than_input() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 1]));
    let w = t.constant(Tensor::zeros(&[5, 1, 1]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.conv1d(x, w, b, 1, 0), Err(Error::Dimension { .. })));
}

fn pool(x: Vec<f64>) -> Vec<f64> {
    let n = x.len();
    run1(Tensor::matrix(n, 1, x), |t, v| t.max_pool1d(v, 3, 2, 1).unwrap())
}

#[test]
fn max_pool_examples() {
    assert_eq!(pool(vec![5.0]), vec![5.0]);
    assert_eq!(pool(vec![1., 9., 2., 8.]), vec![9., 9.]);
    assert_eq!(pool(vec![0.0; 96]).len(), 48);
}

/// Exhaustive window-max oracle written without the padding trick.
fn pool_oracle(x: &[f64]) -> Vec<f64> {
    let l = x.len() as isize;
    (0..x.len().div_ceil(2))
        .map(|t| {
            let c = 2 * t as isize;
            [c - 1, c, c + 1]
                .iter()
                .filter(|&&i| i >= 0 && i < l)
                .map(|&i| x[i as usize])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[test]
fn max_pool_length_is_ceil_half_for_all_lengths() {
    for l in 1..=512usize {
        let x: Vec<f64> = (0..l).map(|i| ((i * 7919) % 101) as f64).collect();
        let got = pool(x.clone());
        assert_eq!(got.len(), l.div_ceil(2), "L={l}");
        assert_eq!(got, pool_oracle(&x), "L={l}");
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

#[test]
fn grad_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(random(&[3, 4], 1), true);
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 12]);
}

#[test]
fn grad_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn unreachable_tensors_get_zero_grad() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let unused = t.leaf(Tensor::vector(vec![3.0]), true);
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(unused).unwrap(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Usage(_))));
}

#[test]
fn fd_matmul_and_matmul_nt() {
    assert_grad_matches_fd(vec![random(&[3, 4], 1), random(&[4, 2], 2)], &|t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, c)
    });
    assert_grad_matches_fd(vec![random(&[3, 4], 3), random(&[5, 4], 4)], &|t, v| {
        let c = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, c)
    });
}

#[test]
fn fd_elementwise() {
    let ins = vec![random(&[2, 3], 5), random(&[2, 3], 6), random(&[3], 7)];
    assert_grad_matches_fd(ins, &|t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(a, v[1]).unwrap();
        let m = t.mul(s, v[1]).unwrap();
        let r = t.add_row(m, v[2]).unwrap();
        let c = t.scale(r, -0.7);
        let g = t.gelu(c);
        let e = t.elu(g);
        weighted_sum(t, e)
    });
}

#[test]
fn fd_reductions() {
    assert_grad_matches_fd(vec![random(&[4, 3], 8)], &|t, v| {
        let m = t.mean_rows(v[0]).unwrap();
        let w = weighted_sum(t, m);
        let sq = t.mul(v[0], v[0]).unwrap();
        let mean = t.mean(sq);
        t.add(w, mean).unwrap()
    });
    assert_grad_matches_fd(vec![random(&[6], 9), random(&[6], 10)], &|t, v| {
        t.mse(v[0], v[1]).unwrap()
    });
}

#[test]
fn fd_softmax_and_layer_norm() {
    assert_grad_matches_fd(vec![random(&[3, 5], 11)], &|t, v| {
        let s = t.softmax(v[0]).unwrap();
        weighted_sum(t, s)
    });
    assert_grad_matches_fd(
        vec![random(&[3, 5], 12), random(&[5], 13), random(&[5], 14)],
        &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y)
        },
    );
}

#[test]
fn fd_conv_and_pool() {
    let ins = vec![random(&[7, 2], 15), random(&[3, 2, 3], 16), random(&[3], 17)];
    assert_grad_matches_fd(ins.clone(), &|t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 1, 1).unwrap();
        weighted_sum(t, y)
    });
    assert_grad_matches_fd(ins, &|t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 2, 1).unwrap();
        let p = t.max_pool1d(y, 3, 2, 1).unwrap();
        weighted_sum(t, p)
    });
}

#[test]
fn fd_structural_ops() {
    assert_grad_matches_fd(vec![random(&[5, 4], 18), random(&[5, 2], 19)], &|t, v| {
        let a = t.slice_cols(v[0], 1, 2).unwrap();
        let b = t.concat_cols(&[a, v[1], a]).unwrap();
        let r = t.slice_rows(b, 1, 3).unwrap();
        let g = t.gather_rows(b, &[4, 0, 4]).unwrap();
        let m = t.mean_rows(b).unwrap();
        let asm = t.assemble_rows(m, g, &[0, 2, 3], 5).unwrap();
        let w1 = weighted_sum(t, r);
        let w2 = weighted_sum(t, asm);
        t.add(w1, w2).unwrap()
    });
}

#[test]
fn fd_causal_attention_pattern() {
    assert_grad_matches_fd(vec![random(&[4, 3], 20), random(&[4, 3], 21)], &|t, v| {
        let s = t.matmul_nt(v[0], v[1]).unwrap();
        let m = t.causal_mask(s).unwrap();
        let p = t.softmax(m).unwrap();
        let o = t.matmul(p, v[1]).unwrap();
        weighted_sum(t, o)
    });
}

#[test]
fn dropout_masks_consistently() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[100], 1.0), true);
    let mut rng = seeded_rng(0);
    let d = t.dropout(x, 0.5, &mut rng);
    let y = t.value(d).values().to_vec();
    let s = t.sum(d);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), y.as_slice());
    assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn live_elements_counts_every_recorded_value() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[3, 4]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    t.matmul(a, b).unwrap();
    assert_eq!(t.live_elements(), 12 + 20 + 15);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
        c in -100.0f64..100.0,
    ) {
        let a = run1(Tensor::vector(xs.clone()), |t, x| t.softmax(x).unwrap());
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let b = run1(Tensor::vector(shifted), |t, x| t.softmax(x).unwrap());
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(a.iter().all(|&v| v >= 0.0));
        prop_assert!(close(&a, &b, 1e-9));
    }

    #[test]
    fn ops_are_bit_deterministic(seed in 0u64..1000) {
        let x = random(&[5, 4], seed);
        let f = |x: Tensor| run1(x, |t, v| {
            let s = t.matmul_nt(v, v).unwrap();
            let p = t.softmax(s).unwrap();
            t.gelu(p)
        });
        prop_assert_eq!(f(x.clone()), f(x));
    }

    #[test]
    fn grad_matches_fd_on_random_small_matmul(seed in 0u64..200, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        assert_grad_matches_fd(vec![random(&[m, k], seed), random(&[k, n], seed + 1)], &|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let g = t.gelu(c);
            weighted_sum(t, g)
        });
    }
}
