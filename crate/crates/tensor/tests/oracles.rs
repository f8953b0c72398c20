//! Tape operations against independent scalar-loop oracles.

#![allow(clippy::needless_range_loop)]

use aelayers_tensor::{KernelKind, Tape, Tensor};
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

fn pseudo(n: usize, salt: f64) -> Vec<f32> {
    (0..n).map(|i| ((i as f64 + 1.0) * salt).sin() as f32).collect()
}

#[test]
fn dense_matches_triple_loop() {
    let x = pseudo(6, 0.77);
    let w = pseudo(6, 1.31);
    let b = pseudo(2, 2.03);
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![2, 3], x.clone()).unwrap());
    let wv = tape.constant(Tensor::new(vec![3, 2], w.clone()).unwrap());
    let bv = tape.constant(Tensor::new(vec![2], b.clone()).unwrap());
    let y = tape.dense(xv, wv, bv).unwrap();
    for i in 0..2 {
        for o in 0..2 {
            let mut acc = b[o] as f64;
            for k in 0..3 {
                acc += x[i * 3 + k] as f64 * w[k * 2 + o] as f64;
            }
            assert!(rel_close(tape.value(y).data()[i * 2 + o] as f64, acc, 1e-5));
        }
    }
}

#[test]
fn conv_matches_sliding_window_sum() {
    let x = pseudo(2 * 16, 0.53);
    let k = pseudo(3 * 2 * 9, 0.91);
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![1, 2, 4, 4], x.clone()).unwrap());
    let kv = tape.constant(Tensor::new(vec![3, 2, 3, 3], k.clone()).unwrap());
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let y = tape.conv2d(xv, kv, stride, padding).unwrap();
        let out = tape.value(y);
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        for f in 0..3 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..2 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (r, s) = ((i * stride + di) as isize - padding as isize, (j * stride + dj) as isize - padding as isize);
                                if (0..4).contains(&r) && (0..4).contains(&s) {
                                    acc += x[c * 16 + r as usize * 4 + s as usize] as f64
                                        * k[((f * 2 + c) * 3 + di) * 3 + dj] as f64;
                                }
                            }
                        }
                    }
                    let got = out.data()[(f * oh + i) * ow + j] as f64;
                    assert!(rel_close(got, acc, 1e-5) || (got - acc).abs() < 1e-6, "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn kernel_gram_matches_scalar_distances() {
    let a = [[0.1f64, -0.4], [1.2, 0.3]];
    let b = [[-0.7f64, 0.9], [0.0, 0.0]];
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(Tensor::new(vec![2, 2], a.concat()).unwrap());
    let bv = tape.constant(Tensor::new(vec![2, 2], b.concat()).unwrap());
    let scale = 4.0;
    let rbf = tape.kernel_gram(av, bv, KernelKind::Rbf, scale).unwrap();
    let imq = tape.kernel_gram(av, bv, KernelKind::Imq, scale).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let d = (a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2);
            assert!(rel_close(tape.value(rbf).data()[i * 2 + j], (-d / scale).exp(), 1e-12));
            assert!(rel_close(tape.value(imq).data()[i * 2 + j], scale / (scale + d), 1e-12));
        }
    }
}

#[test]
fn one_by_one_identity_convolution() {
    let x = Tensor::from_fn(vec![3, 1, 5, 6], |i| (i as f32 * 0.37).cos());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let y = tape.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

fn small_network_grads(seed: f32) -> Vec<Vec<f32>> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(vec![2, 1, 5, 5], |i| (i as f32 * seed).sin()), true);
    let k = tape.leaf(Tensor::from_fn(vec![2, 1, 3, 3], |i| (i as f32 * 0.3).cos()), true);
    let h = tape.conv2d(x, k, 2, 1).unwrap();
    let h = tape.relu(h).unwrap();
    let h = tape.reshape(h, vec![2, 18]).unwrap();
    let w = tape.leaf(Tensor::from_fn(vec![18, 3], |i| (i as f32 * 0.11).sin()), true);
    let b = tape.leaf(Tensor::zeros(vec![3]), true);
    let z = tape.dense(h, w, b).unwrap();
    let loss = tape.cross_entropy(z, &[0, 2]).unwrap();
    let g = tape.backward(loss).unwrap();
    [x, k, w, b].iter().map(|v| g.get(*v).unwrap().data().to_vec()).collect()
}

#[test]
fn backward_is_bit_deterministic() {
    let a = small_network_grads(0.7);
    let b = small_network_grads(0.7);
    let bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, k in 1usize..8, vals in prop::collection::vec(-20.0f32..20.0, 40)) {
        let data: Vec<f32> = (0..rows * k).map(|i| vals[i % vals.len()]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, k], data).unwrap());
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(k) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn argmax_survives_softmax(vals in prop::collection::vec(-10.0f32..10.0, 6)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 6], vals.clone()).unwrap());
        let s = tape.softmax(x).unwrap();
        let argmax = |v: &[f32]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
        prop_assert_eq!(argmax(&vals), argmax(tape.value(s).data()));
    }
}
