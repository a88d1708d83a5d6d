use std::rc::Rc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

const FD_STEP: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn mat(rows: usize, cols: usize, data: &[f32]) -> Tensor {
    Tensor::new(&[rows, cols], data.to_vec()).unwrap()
}

#[test]
fn new_rejects_wrong_length() {
    assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Shape { .. })));
}

#[test]
fn matmul_identity_and_scalar() {
    let mut g = Graph::new();
    let eye = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(mat(1, 1, &[2.0]));
    let b = g.constant(mat(1, 1, &[3.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[6.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_extent() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_sum_gradient_is_row_broadcast_of_column_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random(&[4, 5], &mut rng), random(&[5, 3], &mut rng));
    let mut g = Graph::new();
    let av = g.param(a);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    let ga = grads.get(av).unwrap();
    for i in 0..4 {
        for k in 0..5 {
            let row_sum: f32 = b.data()[k * 3..k * 3 + 3].iter().sum();
            assert!((ga.data()[i * 5 + k] - row_sum).abs() < 1e-6);
        }
    }
    let report = check_gradients(&[random(&[4, 5], &mut rng), b], FD_STEP, 1, |g, v| g.matmul(v[0], v[1])).unwrap();
    assert!(report.max_relative_error() < FD_TOL, "{report:?}");
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::full(&[3, 4], 0.7));
    let loss = g.cross_entropy(logits, &[0, 1, 3]).unwrap();
    assert!((g.value(loss).item() - 4f32.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_vanishes_with_margin() {
    let mut g = Graph::new();
    let mut data = vec![0.0; 2 * 5];
    data[2] = 20.0;
    data[5 + 4] = 20.0;
    let logits = g.constant(mat(2, 5, &data));
    let loss = g.cross_entropy(logits, &[2, 4]).unwrap();
    let v = g.value(loss).item();
    assert!((0.0..1e-8).contains(&v), "{v}");
}

#[test]
fn cross_entropy_matches_naive_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::from_fn(&[3, 5], |_| rng.random_range(-3.0..3.0));
    let targets = [4, 0, 2];
    let mut oracle = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * 5..i * 5 + 5];
        let z: f64 = row.iter().map(|x| (*x as f64).exp()).sum();
        oracle += z.ln() - row[t] as f64;
    }
    oracle /= 3.0;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = g.cross_entropy(l, &targets).unwrap();
    assert!((g.value(loss).item() as f64 - oracle).abs() < 1e-6);
}

#[test]
fn cross_entropy_rejects_bad_target() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy(l, &[0, 4]),
        Err(Error::Index {
            index: 4,
            extent: 4,
            ..
        })
    ));
}

#[test]
fn resize_constant_and_single_pixel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 5], 1.5));
    let y = g.resize_bilinear(x, (7, 2)).unwrap();
    assert_eq!(g.shape(y), &[2, 7, 2]);
    assert!(g.value(y).data().iter().all(|v| *v == 1.5));

    let x = g.constant(Tensor::new(&[1, 1, 1], vec![-2.25]).unwrap());
    let y = g.resize_bilinear(x, (4, 3)).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == -2.25));
}

#[test]
fn resize_up_then_down_keeps_corners() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let up = g.resize_bilinear(x, (4, 4)).unwrap();
    // Align-corners weights along each axis are (1, 2/3, 1/3, 0) on the first sample.
    let row0 = &g.value(up).data()[..4];
    for (v, want) in row0.iter().zip([1.0, 4.0 / 3.0, 5.0 / 3.0, 2.0]) {
        assert!((v - want).abs() < 1e-6);
    }
    let down = g.resize_bilinear(up, (2, 2)).unwrap();
    assert_eq!(g.value(down).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn resize_rejects_zero_target() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(g.resize_bilinear(x, (0, 3)).is_err());
}

#[test]
fn conv_with_dirac_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random(&[3, 5, 6], &mut rng);
    let mut kernel = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        kernel.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(kernel);
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[4, 16], |_| rng.random_range(-5.0..9.0)));
    let gamma = g.constant(Tensor::full(&[16], 1.0));
    let beta = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f32>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn embedding_rejects_out_of_range() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.embedding(t, &[1, 4]), Err(Error::Index { .. })));
}

#[test]
fn attention_mask_requires_nonempty_rows() {
    assert!(AttentionMask::from_fn(3, |i, j| i != 1 && j <= i).is_err());
    assert!(AttentionMask::from_fn(3, |i, j| j <= i).is_ok());
}

#[test]
fn shared_subexpression_gradients_accumulate() {
    // y = s * s with s = x + x, against the duplicated expression (x + x) * (x + x).
    let x0 = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s = g.add(x, x).unwrap();
    let y = g.mul(s, s).unwrap();
    let loss = g.sum(y);
    let shared = g.backward(loss).unwrap().get(x).unwrap().clone();

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s1 = g.add(x, x).unwrap();
    let s2 = g.add(x, x).unwrap();
    let y = g.mul(s1, s2).unwrap();
    let loss = g.sum(y);
    let duplicated = g.backward(loss).unwrap().get(x).unwrap().clone();

    assert_eq!(shared, duplicated);
    for (gv, xv) in shared.data().iter().zip(x0.data()) {
        assert!((gv - 8.0 * xv).abs() < 1e-5);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(&[2], 1.0));
    let c = g.constant(Tensor::full(&[2], 3.0));
    let y = g.mul(a, c).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn backward_reports_non_finite_gradients() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(&[1], 1.0));
    let big = g.scale(a, f32::MAX);
    let y = g.mul(big, big).unwrap();
    let s = g.sum(y);
    assert!(matches!(g.backward(s), Err(Error::Divergence(_))));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(random(&[6, 8], &mut rng));
        let w = g.constant(random(&[8, 8], &mut rng));
        let b = g.constant(random(&[8], &mut rng));
        let h = g.linear(x, w, b).unwrap();
        let mask = Rc::new(AttentionMask::from_fn(3, |i, j| j <= i).unwrap());
        let y = g.attention(h, h, h, 2, mask).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn attention_tail_matches_trailing_rows_of_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (q, k, v) = (
        random(&[10, 4], &mut rng),
        random(&[10, 4], &mut rng),
        random(&[10, 4], &mut rng),
    );
    let mask = Rc::new(AttentionMask::from_fn(5, |i, j| j <= i || j < 2).unwrap());
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let full = g.attention(qv, kv, vv, 2, Rc::clone(&mask)).unwrap();
    let tails = [g.slice_rows(qv, 3, 2).unwrap(), g.slice_rows(qv, 8, 2).unwrap()];
    let tq = g.concat_rows(&tails).unwrap();
    let tail = g.attention_tail(tq, kv, vv, 2, mask).unwrap();
    let f = g.value(full).data();
    let want: Vec<f32> = [&f[12..20], &f[32..40]].concat();
    assert_eq!(g.value(tail).data(), &want[..]);
    assert!(g
        .attention_tail(tq, kv, vv, 3, Rc::new(AttentionMask::from_fn(5, |_, _| true).unwrap()))
        .is_err());
}

mod finite_differences {
    use super::*;

    fn assert_fd(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var>) {
        let report = check_gradients(inputs, FD_STEP, 7, f).unwrap();
        assert!(report.max_relative_error() < FD_TOL, "{report:?}");
    }

    #[test]
    fn elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (a, b) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
        assert_fd(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        assert_fd(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        assert_fd(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        assert_fd(std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -1.7)));
        assert_fd(std::slice::from_ref(&a), |g, v| Ok(g.gelu(v[0])));
        assert_fd(&[a.clone(), b], |g, v| g.mse(v[0], v[1]));
        assert_fd(&[a], |g, v| Ok(g.mean(v[0])));
    }

    #[test]
    fn structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[2, 4], &mut rng);
        assert_fd(std::slice::from_ref(&a), |g, v| g.transpose(v[0]));
        assert_fd(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[2, 6]));
        assert_fd(&[a.clone(), b], |g, v| g.concat_rows(&[v[0], v[1], v[0]]));
        assert_fd(&[a], |g, v| g.slice_rows(v[0], 1, 2));
    }

    #[test]
    fn linear_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random(&[5, 6], &mut rng);
        let w = random(&[6, 3], &mut rng);
        let b = random(&[3], &mut rng);
        assert_fd(&[x.clone(), w, b], |g, v| g.linear(v[0], v[1], v[2]));
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        assert_fd(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let table = random(&[5, 4], &mut rng);
        assert_fd(&[table], |g, v| g.embedding(v[0], &[3, 0, 3, 4]));
    }

    #[test]
    fn conv2d_strided_and_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random(&[2, 5, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        assert_fd(&[x.clone(), w.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], v[2], 1, 1)
        });
        assert_fd(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));
    }

    #[test]
    fn resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = random(&[2, 3, 4], &mut rng);
        assert_fd(std::slice::from_ref(&x), |g, v| g.resize_bilinear(v[0], (5, 7)));
        assert_fd(std::slice::from_ref(&x), |g, v| g.resize_bilinear(v[0], (2, 2)));
        assert_fd(&[x], |g, v| g.resize_bilinear(v[0], (1, 1)));
    }

    #[test]
    fn attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (q, k, v) = (
            random(&[8, 4], &mut rng),
            random(&[8, 4], &mut rng),
            random(&[8, 4], &mut rng),
        );
        let mask = Rc::new(AttentionMask::from_fn(4, |i, j| j <= i || (i < 2 && j < 2)).unwrap());
        assert_fd(&[q, k, v], |g, x| g.attention(x[0], x[1], x[2], 2, mask.clone()));
    }

    #[test]
    fn attention_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (q, k, v) = (
            random(&[4, 4], &mut rng),
            random(&[8, 4], &mut rng),
            random(&[8, 4], &mut rng),
        );
        let mask = Rc::new(AttentionMask::from_fn(4, |i, j| j <= i).unwrap());
        assert_fd(&[q, k, v], |g, x| g.attention_tail(x[0], x[1], x[2], 2, mask.clone()));
    }

    #[test]
    fn cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let logits = random(&[4, 6], &mut rng);
        assert_fd(&[logits], |g, v| g.cross_entropy(v[0], &[5, 0, 2, 2]));
    }
}
