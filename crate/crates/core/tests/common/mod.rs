#![allow(dead_code)]

use aelayers_core::autoencoder::{train_wae, AeConfig};
use aelayers_core::data::{synth_dataset, LabeledSet, SynthParams};
use aelayers_core::features::{AeBank, Provenance};
use aelayers_core::net::{build_small_convnet, train_classifier, Network, TrainParams};
use aelayers_core::Result;
use aelayers_tensor::{Tape, Tensor, Var};

pub const SIZE: usize = 12;
pub const CLASSES: usize = 4;

pub fn toy_data(per_class: usize, seed: u64) -> LabeledSet {
    synth_dataset(&SynthParams { classes: CLASSES, per_class, size: SIZE, blob_sigma: 1.5, jitter: 0.7, seed, ..Default::default() })
        .unwrap()
}

/// Small convnet trained on 12×12 blobs.
pub fn toy_net() -> (Network, LabeledSet) {
    let train = toy_data(100, 1);
    let cfg = build_small_convnet([1, SIZE, SIZE], CLASSES).unwrap();
    let net = train_classifier(&cfg, &train, None, &TrainParams { epochs: 4, learning_rate: 3e-3, batch: 32, seed: 7 }).unwrap();
    (net, train)
}

pub fn toy_bank(net: &Network, train: &LabeledSet, epochs: usize, latent: Option<usize>) -> AeBank {
    let (_, acts) = net.forward_with_taps(&train.images).unwrap();
    let prov = vec![Provenance::Clean; train.len()];
    let aes = acts
        .names
        .iter()
        .zip(&acts.values)
        .enumerate()
        .map(|(i, (name, a))| {
            let mut cfg = AeConfig::for_tap(name, a.rank() - 1);
            cfg.epochs = epochs;
            cfg.seed = i as u64;
            if let Some(z) = latent {
                cfg.latent = z;
            }
            train_wae(a, &prov, &cfg).unwrap()
        })
        .collect();
    AeBank { aes }
}

/// `logits = x·W + b` over flat inputs.
pub struct LinearModel {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl LinearModel {
    pub fn new(inputs: usize, classes: usize, w: Vec<f32>, b: Vec<f32>) -> Self {
        LinearModel { w: Tensor::new(vec![inputs, classes], w).unwrap(), b: Tensor::new(vec![classes], b).unwrap() }
    }
}

impl aelayers_core::net::Classifier for LinearModel {
    fn num_classes(&self) -> usize {
        self.b.numel()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.w.shape()[0]]
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        Ok(tape.dense(x, w, b)?)
    }
}
