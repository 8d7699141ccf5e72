use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, COSINE_EPS, LAYERNORM_EPS};
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::normal(&[rows, cols], 1.0, &mut rng(seed))
}

// ---- oracles ----

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

fn log_sum_exp_loss(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[y];
        assert!(y < c);
    }
    total / labels.len() as f64
}

#[test]
fn matmul_identity_and_small_cases() {
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(ops::matmul(&Tensor::eye(2), &m).unwrap(), m);
    let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
    assert_eq!(ops::matmul(&a, &b).unwrap().data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..5 {
        let a = mat(3, 4, seed);
        let b = mat(4, 2, seed + 100);
        let got = ops::matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    assert!(matches!(
        ops::matmul(&mat(2, 3, 0), &mat(2, 3, 1)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn layernorm_cases() {
    let g = Tensor::full(&[4], 1.0);
    let b = Tensor::zeros(&[4]);
    let x = Tensor::from_rows(&[vec![5.0; 4]]).unwrap();
    assert_eq!(
        ops::layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap().data(),
        &[0.0; 4]
    );

    // mean 0, variance 1: output is the input up to the eps correction
    let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
    let y = ops::layernorm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-11 && (y.data()[1] + 1.0).abs() < 1e-11);

    let empty = Tensor::zeros(&[3, 0]);
    assert!(matches!(
        ops::layernorm(&empty, &Tensor::zeros(&[0]), &Tensor::zeros(&[0]), 1e-6),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn softmax_cases() {
    let y = ops::softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = ops::softmax(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);

    let x = [1.0f64, 2.0, 3.0];
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    let y = ops::softmax(&Tensor::vector(x.to_vec()), 0).unwrap();
    for (a, b) in y.data().iter().zip(x.iter().map(|v| v.exp() / z)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_first_axis() {
    let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap();
    let y = ops::softmax(&x, 0).unwrap();
    assert!((y.at(&[0, 0]) - 0.5).abs() < 1e-15);
    let z = 1.0f64.exp() + 3.0f64.exp();
    assert!((y.at(&[1, 1]) - 3.0f64.exp() / z).abs() < 1e-15);
    assert!(ops::softmax(&x, 2).is_err());
}

#[test]
fn cosine_cases() {
    let v = |d: &[f64]| Tensor::vector(d.to_vec());
    assert_eq!(
        ops::cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), COSINE_EPS).unwrap(),
        0.0
    );
    assert_eq!(
        ops::cosine_similarity(&v(&[2.0, 0.0]), &v(&[1.0, 0.0]), COSINE_EPS).unwrap(),
        1.0
    );
    let c = ops::cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0]), COSINE_EPS).unwrap();
    assert!((c - 0.70710678).abs() < 1e-8);
    // zero vector guarded
    assert_eq!(
        ops::cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), COSINE_EPS).unwrap(),
        0.0
    );
}

#[test]
fn cross_entropy_cases() {
    let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    assert!((ops::cross_entropy(&l, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);

    let mut tape = Tape::new();
    let raw = tape.leaf_with(&Tensor::from_rows(&[vec![10.0, 3.0]]).unwrap(), true);
    let masked = tape.mask_fill(raw, &[true, false]).unwrap();
    let loss = tape.cross_entropy(masked, &[0]).unwrap();
    assert!(tape.value(loss)[0].abs() < 1e-12);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(raw).unwrap()[1], 0.0);
    assert_eq!(tape.grad(masked).unwrap()[1], 0.0);

    for seed in 0..3 {
        let logits = mat(4, 6, seed);
        let labels = [0, 5, 2, 3];
        let got = ops::cross_entropy(&logits, &labels).unwrap();
        assert!((got - log_sum_exp_loss(&logits, &labels)).abs() < 1e-10);
    }
}

#[test]
fn cross_entropy_rejects_masked_label() {
    let mut tape = Tape::new();
    let raw = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let masked = tape.mask_fill(raw, &[true, false]).unwrap();
    assert!(matches!(
        tape.cross_entropy(masked, &[1]),
        Err(Error::InvalidMask(_))
    ));
}

#[test]
fn non_finite_forward_is_error() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::vector(vec![f64::MAX, f64::MAX]));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::Numeric(_))));
}

#[test]
fn grad_check_trivial_functions() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let sq = |t: &mut Tape, v: Var| {
        let s = t.mul(v, v)?;
        t.sum(s)
    };
    assert!(grad_check(sq, &x, DEFAULT_STEP).unwrap() < 1e-8);
    let constant = |t: &mut Tape, v: Var| {
        let z = t.scale(v, 0.0)?;
        let s = t.sum(z)?;
        t.offset(s, 3.0)
    };
    assert_eq!(grad_check(constant, &x, DEFAULT_STEP).unwrap(), 0.0);
}

#[test]
fn grad_check_rejects_non_finite() {
    let x = Tensor::vector(vec![1.0]);
    let f = |t: &mut Tape, v: Var| {
        let big = t.scale(v, f64::MAX)?;
        let s = t.scale(big, 10.0)?;
        t.sum(s)
    };
    assert!(matches!(
        grad_check(f, &x, DEFAULT_STEP),
        Err(Error::Numeric(_))
    ));
}

/// Weighted reduction so every output element influences the loss differently.
fn probe(t: &mut Tape, y: Var, seed: u64) -> crate::error::Result<Var> {
    let w = Tensor::normal(t.shape(y), 1.0, &mut rng(seed ^ 0xabc));
    let wv = t.constant(&w);
    let p = t.mul(y, wv)?;
    t.sum(p)
}

const ELEMENTARY_TOL: f64 = 1e-6;

#[test]
fn elementary_ops_match_finite_differences() {
    for seed in 0..5 {
        let a = mat(3, 4, seed);
        let b = mat(4, 5, seed + 1);
        let bt = mat(5, 4, seed + 2);
        let row = Tensor::normal(&[4], 1.0, &mut rng(seed + 3));
        let h = DEFAULT_STEP;

        let e = grad_check_many(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, seed)
            },
            &[a.clone(), b.clone()],
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "matmul {e}");

        let e = grad_check_many(
            |t, v| {
                let y = t.matmul_bt(v[0], v[1])?;
                probe(t, y, seed)
            },
            &[a.clone(), bt.clone()],
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "matmul_bt {e}");

        let gain = Tensor::normal(&[4], 1.0, &mut rng(seed + 4));
        let e = grad_check_many(
            |t, v| {
                let y = t.layernorm(v[0], v[1], v[2], LAYERNORM_EPS)?;
                probe(t, y, seed)
            },
            &[a.clone(), gain.clone(), row.clone()],
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "layernorm {e}");

        for axis in 0..2 {
            let e = grad_check(
                |t, v| {
                    let y = t.softmax(v, axis)?;
                    probe(t, y, seed)
                },
                &a,
                h,
            )
            .unwrap();
            assert!(e < ELEMENTARY_TOL, "softmax axis {axis}: {e}");
        }

        let e = grad_check_many(
            |t, v| {
                let y = t.cosine_matrix(v[0], v[1], COSINE_EPS)?;
                probe(t, y, seed)
            },
            &[a.clone(), bt.clone()],
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "cosine {e}");

        let e = grad_check(
            |t, v| {
                let y = t.gelu(v)?;
                probe(t, y, seed)
            },
            &a,
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "gelu {e}");

        let e = grad_check_many(
            |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let z = t.mul_row(y, v[1])?;
                probe(t, z, seed)
            },
            &[a.clone(), row.clone()],
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "row broadcast {e}");

        let logits = mat(4, 6, seed + 5);
        let e = grad_check(
            |t, v| {
                let m = t.mask_fill(v, &[true, true, false, true, true, true])?;
                t.cross_entropy(m, &[0, 5, 1, 3])
            },
            &logits,
            h,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "cross_entropy {e}");
    }
}

#[test]
fn attention_matches_finite_differences() {
    for seed in 0..5 {
        // 2 items, 3 query tokens, 4 key tokens, 2 heads of width 2
        let q = mat(6, 4, seed);
        let k = mat(8, 4, seed + 10);
        let v = mat(8, 4, seed + 20);
        let e = grad_check_many(
            |t, x| {
                let y = t.attention(x[0], x[1], x[2], 2, 2)?;
                probe(t, y, seed)
            },
            &[q, k, v],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "attention {e}");
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for seed in 0..5 {
        let x = mat(6, 4, seed);
        let y = mat(4, 4, seed + 1);
        let w = mat(2, 2, seed + 2);
        let e = grad_check_many(
            |t, v| {
                let c = t.concat_per_batch(&[(v[0], 3), (v[1], 2)], 2)?;
                let s = t.select_rows(c, &[0, 3, 3, 9])?;
                let m = t.mask_rows(s, &[true, false, true, true])?;
                let cc = t.concat_cols(&[m, m])?;
                let blocks = t.sum_col_blocks(cc, 4, 0, 2)?;
                let r = t.reshape(blocks, &[2, 8])?;
                let b = t.broadcast_rows(r, 2)?;
                let tiled = t.add_tiled(b, r)?;
                let scaled = t.scale(v[0], 1.5)?;
                let pooled = t.token_pool(scaled, v[2], 3, 1)?;
                let a = probe(t, tiled, seed)?;
                let p = probe(t, pooled, seed + 7)?;
                let rows = t.concat_rows(&[a, p])?;
                let rows2 = t.reshape(rows, &[2, 1])?;
                let mean = t.mean(rows2)?;
                let sub = t.sub(mean, a)?;
                t.add(sub, p)
            },
            &[x, y, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < ELEMENTARY_TOL, "structural {e}");
    }
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut t = Tape::new();
    let frozen = t.constant(&mat(2, 2, 0));
    let live = t.leaf_with(&mat(2, 2, 1), true);
    let y = t.matmul(frozen, live).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(frozen).is_none());
    assert!(t.grad(live).is_some());
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let a = t.leaf_with(&mat(5, 8, 3), true);
        let b = t.leaf_with(&mat(5, 8, 4), true);
        let att = t.attention(a, b, b, 1, 2).unwrap();
        let c = t.cosine_matrix(att, b, COSINE_EPS).unwrap();
        let s = t.softmax(c, 1).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        (t.tensor(att).to_le_bytes(), t.grad(a).unwrap().to_vec())
    };
    let (x1, g1) = run();
    let (x2, g2) = run();
    assert_eq!(x1, x2);
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let y = ops::softmax(&Tensor::vector(xs), 0).unwrap();
        let sum: f64 = y.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let tb = Tensor::vector(b);
        let base = ops::cosine_similarity(&Tensor::vector(a.clone()), &tb, COSINE_EPS).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        for alpha in [0.5, 2.0, 10.0] {
            let scaled = Tensor::vector(a.iter().map(|v| v * alpha).collect());
            let c = ops::cosine_similarity(&scaled, &tb, COSINE_EPS).unwrap();
            prop_assert!((c - base).abs() < 1e-12);
        }
    }
}
