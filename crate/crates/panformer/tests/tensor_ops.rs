//! Oracle tests for the tensor kernels: every forward kernel is compared
//! against an independent naive implementation, and the reverse-mode tape
//! is exercised through small end-to-end programs.

use std::rc::Rc;

use panformer::tensor::{
    kernels, set_oracle_mode, Eager, Engine, ParamSet, Tape, Tensor,
};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

struct OracleGuard;
impl OracleGuard {
    fn on() -> Self {
        set_oracle_mode(true);
        OracleGuard
    }
}
impl Drop for OracleGuard {
    fn drop(&mut self) {
        set_oracle_mode(false);
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Naive triple-loop batched matrix product, independent of the kernel's
/// loop order and accumulation strategy.
fn naive_matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    tb: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for bi in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    let av = a[bi * m * k + i * k + p];
                    let bv = if tb {
                        b[bi * n * k + j * k + p]
                    } else {
                        b[bi * k * n + p * n + j]
                    };
                    acc += av * bv;
                }
                c[bi * m * n + i * n + j] = acc;
            }
        }
    }
    c
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(batch, m, k, n) in &[(1usize, 2usize, 3usize, 4usize), (3, 5, 7, 2), (2, 1, 8, 1)] {
        let a = rand_vec(&mut rng, batch * m * k);
        for &tb in &[false, true] {
            let b = rand_vec(&mut rng, batch * k * n);
            let got = kernels::matmul_fwd(&a, &b, batch, m, k, n, tb);
            let want = naive_matmul(&a, &b, batch, m, k, n, tb);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "matmul mismatch: {g} vs {w}");
            }
        }
    }
}

#[test]
fn matmul_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_vec(&mut rng, 4 * 4);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let got = kernels::matmul_fwd(&a, &eye, 1, 4, 4, 4, false);
    assert_eq!(got, a);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Direct exp/sum-exp softmax over the last axis.
fn naive_softmax_rows(x: &[f64], row: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(row) {
        let s: f64 = chunk.iter().map(|v| v.exp()).sum();
        out.extend(chunk.iter().map(|v| v.exp() / s));
    }
    out
}

#[test]
fn softmax_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_vec(&mut rng, 6 * 5);
    let got = kernels::softmax_fwd(&x, &[6, 5], 1);
    let want = naive_softmax_rows(&x, 5);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 20)) {
        let y = kernels::softmax_fwd(&vals, &[4, 5], 1);
        for row in y.chunks(5) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(vals in proptest::collection::vec(-10.0f64..10.0, 8), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
        let a = kernels::softmax_fwd(&vals, &[1, 8], 1);
        let b = kernels::softmax_fwd(&shifted, &[1, 8], 1);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_survives_large_magnitudes() {
    let x = vec![1000.0, 1000.0, -1000.0];
    let y = kernels::softmax_fwd(&x, &[1, 3], 1);
    assert!((y[0] - 0.5).abs() < 1e-12);
    assert!((y[1] - 0.5).abs() < 1e-12);
    assert!(y[2].abs() < 1e-12);
    assert!(y.iter().all(|v| v.is_finite()));
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

/// Scalar-loop layer normalization with population variance.
fn naive_layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]);
        }
    }
    out
}

#[test]
fn layer_norm_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_vec(&mut rng, 7 * 6);
    let gamma = rand_vec(&mut rng, 6);
    let beta = rand_vec(&mut rng, 6);
    let got = kernels::layer_norm_fwd(&x, 6, &gamma, &beta, 1e-5);
    let want = naive_layer_norm(&x, 6, &gamma, &beta, 1e-5);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_unit_gamma_zero_beta_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 16;
    let x = rand_vec(&mut rng, c);
    let y = kernels::layer_norm_fwd(&x, c, &vec![1.0; c], &vec![0.0; c], 0.0);
    let mean = y.iter().sum::<f64>() / c as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-9);
}

// ---------------------------------------------------------------------------
// gelu / relu
// ---------------------------------------------------------------------------

/// Maclaurin-series erf, independent of the libm implementation.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..60 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_erf_series_oracle() {
    let xs: Vec<f64> = (-20..=20).map(|i| i as f64 / 5.0).collect();
    let got = kernels::gelu_fwd(&xs);
    for (&x, &g) in xs.iter().zip(&got) {
        let phi = 0.5 * (1.0 + erf_series(x / 2.0f64.sqrt()));
        assert!((g - x * phi).abs() < 1e-10, "gelu({x}) = {g}");
    }
}

#[test]
fn gelu_known_values() {
    let y = kernels::gelu_fwd(&[0.0]);
    assert_eq!(y[0], 0.0);
    // gelu(x) -> x for large x, -> 0 for very negative x
    let y = kernels::gelu_fwd(&[10.0, -10.0]);
    assert!((y[0] - 10.0).abs() < 1e-9);
    assert!(y[1].abs() < 1e-9);
}

#[test]
fn relu_definition() {
    let y = kernels::relu_fwd(&[-3.0, -0.0, 0.5, 2.0]);
    assert_eq!(y, vec![0.0, 0.0, 0.5, 2.0]);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Six-loop direct 3x3 same convolution with zero padding, NHWC layout,
/// kernel layout [3,3,Cin,Cout].
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * h * wd * cout];
    for ni in 0..n {
        for oy in 0..h {
            for ox in 0..wd {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[((ni * h + iy as usize) * wd + ix as usize) * cin + ci]
                                    * w[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    y[((ni * h + oy) * wd + ox) * cout + co] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, h, wd, cin, cout) = (2, 5, 4, 3, 2);
    let x = rand_vec(&mut rng, n * h * wd * cin);
    let w = rand_vec(&mut rng, 9 * cin * cout);
    let b = rand_vec(&mut rng, cout);
    let got = kernels::conv2d_fwd(&x, &w, &b, n, h, wd, cin, cout);
    let want = naive_conv2d(&x, &w, &b, n, h, wd, cin, cout);
    for (g, v) in got.iter().zip(&want) {
        assert!((g - v).abs() < 1e-12);
    }
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, wd) = (4, 6);
    let x = rand_vec(&mut rng, h * wd);
    // kernel that copies the center pixel
    let mut w = vec![0.0; 9];
    w[4] = 1.0; // (ky=1, kx=1), cin=cout=1
    let y = kernels::conv2d_fwd(&x, &w, &[0.0], 1, h, wd, 1, 1);
    assert_eq!(y, x);
}

// ---------------------------------------------------------------------------
// pixel shuffle and data-movement indices
// ---------------------------------------------------------------------------

#[test]
fn pixel_shuffle_matches_index_formula() {
    // [N,H,W,C·r²] -> [N,H·r,W·r,C] with out(y,x,c) = in(y/r, x/r, c·r² + (y%r)·r + (x%r))
    let (n, h, w, c, r) = (1usize, 2usize, 3usize, 2usize, 2usize);
    let cin = c * r * r;
    let total = n * h * w * cin;
    let x: Vec<f64> = (0..total).map(|i| i as f64).collect();
    let (shape, idx) = kernels::pixel_shuffle_index(n, h, w, c, r);
    assert_eq!(shape, vec![n, h * r, w * r, c]);
    let y = kernels::gather_fwd(&x, &idx);
    for oy in 0..h * r {
        for ox in 0..w * r {
            for ci in 0..c {
                let src_c = ci * r * r + (oy % r) * r + (ox % r);
                let want = x[((oy / r) * w + ox / r) * cin + src_c];
                let got = y[(oy * w * r + ox) * c + ci];
                assert_eq!(got, want, "pixel ({oy},{ox},{ci})");
            }
        }
    }
}

#[test]
fn pixel_shuffle_is_a_permutation() {
    let (n, h, w, c, r) = (2usize, 3usize, 2usize, 3usize, 2usize);
    let (_, idx) = kernels::pixel_shuffle_index(n, h, w, c, r);
    let mut seen = vec![false; idx.len()];
    for &i in &idx {
        assert!(!seen[i as usize], "duplicate index {i}");
        seen[i as usize] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn gather_out_of_range_index_reads_zero_pad() {
    let x = vec![5.0, 7.0];
    let y = kernels::gather_fwd(&x, &[1, -1, 0]);
    assert_eq!(y, vec![7.0, 0.0, 5.0]);
}

#[test]
fn gather_backward_scatter_adds_duplicates() {
    // two output slots read the same input element; gradients must sum
    let idx = vec![0i64, 0, 1];
    let dy = vec![1.0, 2.0, 5.0];
    let dx = kernels::gather_bwd(&dy, &idx, 2);
    assert_eq!(dx, vec![3.0, 5.0]);
}

#[test]
fn concat_last_index_interleaves_channels() {
    let (rows, ca, cb) = (2usize, 2usize, 3usize);
    let a: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0];
    let b: Vec<f64> = vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
    let (ia, ib) = kernels::concat_last_index(rows, ca, cb);
    let ya = kernels::gather_fwd(&a, &ia);
    let yb = kernels::gather_fwd(&b, &ib);
    let y: Vec<f64> = ya.iter().zip(&yb).map(|(p, q)| p + q).collect();
    assert_eq!(y, vec![1.0, 2.0, 10.0, 20.0, 30.0, 3.0, 4.0, 40.0, 50.0, 60.0]);
}

#[test]
fn head_split_then_merge_is_identity() {
    let (b, t, heads, d) = (2usize, 3usize, 2usize, 2usize);
    let x: Vec<f64> = (0..b * t * heads * d).map(|i| i as f64).collect();
    let (_, si) = kernels::head_split_index(b, t, heads, d);
    let (_, mi) = kernels::head_merge_index(b, t, heads, d);
    let split = kernels::gather_fwd(&x, &si);
    let merged = kernels::gather_fwd(&split, &mi);
    assert_eq!(merged, x);
}

// ---------------------------------------------------------------------------
// tape: reverse-mode programs with hand-computed gradients
// ---------------------------------------------------------------------------

#[test]
fn tape_gradient_of_linear_chain() {
    let _g = OracleGuard::on();
    // loss = mean(|3·x - t|) with x > t everywhere → dloss/dx = 3/n
    let mut ps = ParamSet::new();
    let x = ps.add("x", Tensor::new(vec![4], vec![2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&ps, x);
    let y = tape.scale(&xv, 3.0);
    let t = tape.constant(Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
    let loss = tape.l1_loss(&y, &t).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    for &g in ps.get(x).grad.data() {
        assert!((g - 0.75).abs() < 1e-12);
    }
}

#[test]
fn tape_backward_twice_accumulates() {
    let _g = OracleGuard::on();
    let mut ps = ParamSet::new();
    let x = ps.add("x", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
    let run = |ps: &mut ParamSet| {
        let mut tape = Tape::new();
        let xv = tape.param(ps, x);
        let s = tape.sum_all(&xv);
        tape.backward(s, ps).unwrap();
    };
    run(&mut ps);
    run(&mut ps);
    assert_eq!(ps.get(x).grad.data(), &[2.0, 2.0]);
}

#[test]
fn tape_rejects_non_scalar_loss() {
    let mut ps = ParamSet::new();
    let x = ps.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&ps, x);
    assert!(tape.backward(xv, &mut ps).is_err());
}

#[test]
fn eager_and_tape_forward_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![2, 3, 4], rand_vec(&mut rng, 24)).unwrap();
    let w = Tensor::new(vec![4, 5], rand_vec(&mut rng, 20)).unwrap();
    let b = Tensor::new(vec![5], rand_vec(&mut rng, 5)).unwrap();

    let mut e = Eager::new();
    let (xe, we, be) = (e.constant(x.clone()), e.constant(w.clone()), e.constant(b.clone()));
    let ye = e.linear(&xe, &we, Some(&be)).unwrap();
    let ye = e.gelu(&ye);
    let out_e = e.value(&ye);

    let mut t = Tape::new();
    let (xt, wt, bt) = (t.constant(x), t.constant(w), t.constant(b));
    let yt = t.linear(&xt, &wt, Some(&bt)).unwrap();
    let yt = t.gelu(&yt);
    let out_t = t.value(&yt);

    assert_eq!(out_e.data(), out_t.data());
    assert_eq!(out_e.shape(), out_t.shape());
}

#[test]
fn default_mode_quantizes_through_f32() {
    let mut e = Eager::new();
    let x = e.constant(Tensor::new(vec![1], vec![0.1]).unwrap());
    let y = e.scale(&x, 1.0 / 3.0);
    let got = e.value(&y).data()[0];
    assert_eq!(got, (0.1f64 / 3.0) as f32 as f64);

    set_oracle_mode(true);
    let mut e = Eager::new();
    let x = e.constant(Tensor::new(vec![1], vec![0.1]).unwrap());
    let y = e.scale(&x, 1.0 / 3.0);
    let got = e.value(&y).data()[0];
    set_oracle_mode(false);
    assert_eq!(got, 0.1f64 / 3.0);
}

#[test]
fn gather_tape_roundtrip_window_partition() {
    // partition then reverse through the tape is the identity, and the
    // gradient of sum∘identity is all ones
    let _g = OracleGuard::on();
    let (n, h, w, c, win) = (1usize, 4usize, 4usize, 3usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::new();
    let x = ps
        .add("x", Tensor::new(vec![n, h, w, c], rand_vec(&mut rng, n * h * w * c)).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&ps, x);
    let (ws, wi) = kernels::window_partition_index(n, h, w, c, win);
    let part = tape.gather(&xv, ws, Rc::new(wi));
    let (rs, ri) = kernels::window_reverse_index(n, h, w, c, win);
    let back = tape.gather(&part, rs, Rc::new(ri));
    let orig = tape.value(&xv);
    let round = tape.value(&back);
    assert_eq!(orig.data(), round.data());
    let s = tape.sum_all(&back);
    tape.backward(s, &mut ps).unwrap();
    assert!(ps.get(x).grad.data().iter().all(|&g| g == 1.0));
}
