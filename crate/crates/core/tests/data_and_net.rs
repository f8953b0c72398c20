mod common;

use aelayers_core::data::{parse_idx_images, parse_idx_labels, synth_dataset, write_idx_images, write_idx_labels, SynthParams};
use aelayers_core::net::{accuracy, argmax, build_small_convnet, train_classifier, Classifier, LayerSpec, Network, TrainParams};
use aelayers_tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn idx_write_then_read_is_identity(n in 1usize..4, h in 1usize..6, w in 1usize..6, bytes in prop::collection::vec(any::<u8>(), 150)) {
        let pixels: Vec<f32> = bytes.iter().cycle().take(n * h * w).map(|&b| f32::from(b) / 255.0).collect();
        let images = Tensor::new(vec![n, 1, h, w], pixels).unwrap();
        let labels: Vec<usize> = bytes.iter().take(n).map(|&b| usize::from(b % 10)).collect();
        let (mut fi, mut fl) = (Vec::new(), Vec::new());
        write_idx_images(&mut fi, &images).unwrap();
        write_idx_labels(&mut fl, &labels).unwrap();
        prop_assert_eq!(parse_idx_images(&fi).unwrap(), images);
        prop_assert_eq!(parse_idx_labels(&fl).unwrap(), labels);
    }
}

#[test]
fn two_by_two_image_scales_bytes() {
    let mut file = 0x0803u32.to_be_bytes().to_vec();
    for d in [1u32, 2, 2] {
        file.extend_from_slice(&d.to_be_bytes());
    }
    file.extend_from_slice(&[0, 255, 0, 255]);
    let x = parse_idx_images(&file).unwrap();
    assert_eq!(x.shape(), &[1, 1, 2, 2]);
    assert_eq!(x.data(), &[0.0, 1.0, 0.0, 1.0]);
}

fn closed_form_params(c: usize, k: usize, h: usize, w: usize) -> usize {
    let conv = |f: usize, cin: usize| f * cin * 9 + f;
    let down = |n: usize| (n + 2 - 3) / 2 + 1;
    let (h3, w3) = (down(down(h)), down(down(w)));
    conv(16, c) + conv(32, 16) + conv(64, 32) + 64 * h3 * w3 * k + k
}

#[test]
fn parameter_count_matches_closed_form() {
    for (input, k) in [([1, 28, 28], 10), ([3, 32, 32], 10), ([1, 9, 13], 3)] {
        let cfg = build_small_convnet(input, k).unwrap();
        assert_eq!(cfg.param_count().unwrap(), closed_form_params(input[0], k, input[1], input[2]), "{input:?}");
    }
}

#[test]
fn tap_shapes_follow_conv_arithmetic() {
    let out = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    for input in [[1, 28, 28], [3, 32, 32]] {
        let cfg = build_small_convnet(input, 10).unwrap();
        assert_eq!(cfg.tap_names(), ["tap1", "tap2", "tap3", "tap4"]);
        let mut expected = Vec::new();
        let (mut h, mut w) = (input[1], input[2]);
        for layer in &cfg.layers {
            if let LayerSpec::Conv2d { filters, kernel, stride, padding } = *layer {
                h = out(h, kernel, stride, padding);
                w = out(w, kernel, stride, padding);
                expected.push(vec![filters, h, w]);
            }
        }
        expected.push(vec![10]);
        assert_eq!(cfg.tap_shapes().unwrap(), expected);
    }
    assert!(build_small_convnet([1, 7, 28], 10).is_err());
}

#[test]
fn taps_do_not_disturb_logits() {
    let (net, data) = common::toy_net();
    let x = data.images.select(&(0..70).collect::<Vec<_>>()).unwrap();
    let plain = net.forward(&x).unwrap();
    let (logits, taps) = net.forward_with_taps(&x).unwrap();
    assert_eq!(plain.data(), logits.data());
    assert_eq!(taps.names, net.config().tap_names());
    assert_eq!(taps.get("tap4").unwrap(), &logits);
}

#[test]
fn accuracy_equals_brute_force_count() {
    let (net, _) = common::toy_net();
    let held = common::toy_data(3, 99).head(10).unwrap();
    let logits = net.forward(&held.images).unwrap();
    let mut hits = 0;
    for i in 0..10 {
        let row = logits.sample(i);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        hits += usize::from(best == held.labels[i]);
    }
    assert_eq!(net.accuracy(&held).unwrap(), hits as f64 / 10.0);
}

#[test]
fn argmax_ties_and_softmax_monotonicity() {
    assert_eq!(argmax(&[0.1, 0.9]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    let mut state = 12345u64;
    for _ in 0..200 {
        let row: Vec<f32> = (0..7)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32 - 0.5) * 20.0
            })
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(f64::from(b)));
        let soft: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
        let best = (0..7).fold(0, |b, i| if soft[i] > soft[b] { i } else { b });
        assert_eq!(argmax(&row), best);
    }
}

#[test]
fn separable_blobs_are_learned() {
    let p = SynthParams { classes: 2, per_class: 100, size: 12, blob_sigma: 1.5, jitter: 0.5, seed: 3, ..Default::default() };
    let train = synth_dataset(&p).unwrap();
    let val = synth_dataset(&SynthParams { seed: 4, per_class: 50, ..p }).unwrap();
    let cfg = build_small_convnet([1, 12, 12], 2).unwrap();
    let net = train_classifier(&cfg, &train, Some(&val), &TrainParams { epochs: 5, learning_rate: 1e-3, batch: 32, seed: 0 }).unwrap();
    let acc = net.meta.validation_accuracy.unwrap();
    assert!(acc >= 0.99, "validation accuracy {acc}");
    assert_eq!(acc, net.accuracy(&val).unwrap());
}

#[test]
fn training_is_deterministic_and_rejects_zero_epochs() {
    let train = common::toy_data(20, 5);
    let cfg = build_small_convnet([1, 12, 12], common::CLASSES).unwrap();
    let p = TrainParams { epochs: 2, seed: 11, ..Default::default() };
    let a = train_classifier(&cfg, &train, None, &p).unwrap();
    let b = train_classifier(&cfg, &train, None, &p).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.params(), b.params());
    assert!(train_classifier(&cfg, &train, None, &TrainParams { epochs: 0, ..p }).is_err());
}

#[test]
fn network_save_load_round_trip() {
    let train = common::toy_data(5, 5);
    let cfg = build_small_convnet([1, 12, 12], common::CLASSES).unwrap();
    let net = train_classifier(&cfg, &train, None, &TrainParams { epochs: 1, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path(), "target").unwrap();
    let back = Network::load(dir.path(), "target").unwrap();
    assert_eq!(back, net);
    assert_eq!(back.checksum(), net.checksum());
    assert_eq!(back.predict(&train.images).unwrap(), net.predict(&train.images).unwrap());
}

/// Nearest-template rule `argmax_k μ_k·x − ‖μ_k‖²/2`, a linear classifier.
#[test]
fn synthetic_classes_are_linearly_separable() {
    let p = SynthParams { classes: 10, per_class: 50, size: 28, blob_sigma: 2.0, seed: 8, ..Default::default() };
    let train = synth_dataset(&p).unwrap();
    let test = synth_dataset(&SynthParams { seed: 9, ..p }).unwrap();
    let d = train.images.sample_len();
    let mut mu = vec![vec![0.0f64; d]; 10];
    for i in 0..train.len() {
        for (m, &v) in mu[train.labels[i]].iter_mut().zip(train.images.sample(i)) {
            *m += f64::from(v) / 50.0;
        }
    }
    let pred: Vec<usize> = (0..test.len())
        .map(|i| {
            let x = test.images.sample(i);
            let score = |m: &Vec<f64>| {
                m.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum::<f64>() - 0.5 * m.iter().map(|a| a * a).sum::<f64>()
            };
            (0..10).fold(0, |b, k| if score(&mu[k]) > score(&mu[b]) { k } else { b })
        })
        .collect();
    let acc = accuracy(&pred, &test.labels);
    assert!(acc > 0.9, "linear accuracy {acc}");
}
