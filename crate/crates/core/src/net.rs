//! The target convolutional classifier and its tap points.

use std::path::Path;

use aelayers_tensor::{read_archive_file, write_archive_file, Archive, OptimizerState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledSet;
use crate::error::{CoreError, Result};
use crate::par_map_chunks;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
    Dense { units: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    /// Index of the layer whose output is captured.
    pub after_layer: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `[C,H,W]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<TapSpec>,
    pub classes: usize,
}

/// Reference architecture: three conv+relu blocks (16, 32, 64 filters, the
/// last two strided) and a dense head, tapped after each block and at the logits.
pub fn build_small_convnet(input: [usize; 3], classes: usize) -> Result<NetworkConfig> {
    if input[1] < 8 || input[2] < 8 || input[0] == 0 || classes == 0 {
        return Err(CoreError::Config(format!("convnet needs H,W >= 8 and K >= 1, got {input:?}, K={classes}")));
    }
    let conv = |filters, stride| LayerSpec::Conv2d { filters, kernel: 3, stride, padding: 1 };
    let layers = vec![
        conv(16, 1),
        LayerSpec::Relu,
        conv(32, 2),
        LayerSpec::Relu,
        conv(64, 2),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: classes },
    ];
    let taps = [(1, "tap1"), (3, "tap2"), (5, "tap3"), (7, "tap4")]
        .into_iter()
        .map(|(after_layer, name)| TapSpec { name: name.into(), after_layer })
        .collect();
    let cfg = NetworkConfig { input, layers, taps, classes };
    cfg.validate()?;
    Ok(cfg)
}

impl NetworkConfig {
    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                    if shape.len() != 3 {
                        return Err(CoreError::Config(format!("layer {i}: conv on shape {shape:?}")));
                    }
                    let extent = |n| aelayers_tensor::kernels::conv_out_extent(n, kernel, stride, padding);
                    match (extent(shape[1]), extent(shape[2])) {
                        (Some(h), Some(w)) if filters > 0 => vec![filters, h, w],
                        _ => return Err(CoreError::Config(format!("layer {i}: conv does not fit {shape:?}"))),
                    }
                }
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 || units == 0 {
                        return Err(CoreError::Config(format!("layer {i}: dense on shape {shape:?}")));
                    }
                    vec![units]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        if shapes.last() != Some(&vec![self.classes]) || !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(CoreError::Config(format!("final layer must be dense with {} outputs", self.classes)));
        }
        if self.taps.is_empty() {
            return Err(CoreError::Config("network has no taps".into()));
        }
        for w in self.taps.windows(2) {
            if w[1].after_layer <= w[0].after_layer {
                return Err(CoreError::Config("tap indices must be strictly increasing".into()));
            }
        }
        if self.taps.iter().any(|t| t.after_layer >= self.layers.len()) {
            return Err(CoreError::Config("tap refers to a missing layer".into()));
        }
        let mut names: Vec<&str> = self.taps.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.taps.len() {
            return Err(CoreError::Config("tap names must be unique".into()));
        }
        Ok(())
    }

    /// Shapes of the parameter tensors in storage order (weight, bias per layer).
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        let mut prev = self.input.to_vec();
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    out.push(vec![filters, prev[0], kernel, kernel]);
                    out.push(vec![filters]);
                }
                LayerSpec::Dense { units } => {
                    out.push(vec![prev[0], units]);
                    out.push(vec![units]);
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
            }
            prev = shape.clone();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|s| s.iter().product::<usize>()).sum())
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.iter().map(|t| t.name.clone()).collect()
    }

    pub fn tap_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        Ok(self.taps.iter().map(|t| shapes[t.after_layer].clone()).collect())
    }

    /// Records the forward pass of `x[B,C,H,W]` on `tape`. Returns the logits
    /// and one handle per tap; taps are plain references to layer outputs.
    pub fn forward_on(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut p = params.iter().copied();
        let mut next = || p.next().ok_or_else(|| CoreError::Config("too few parameter tensors".into()));
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut tap_iter = self.taps.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let (w, b) = (next()?, next()?);
                    let c = tape.conv2d(h, w, stride, padding)?;
                    tape.channel_bias(c, b)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::Flatten => {
                    let s = tape.value(h).shape();
                    let (b, n) = (s[0], s[1..].iter().product::<usize>());
                    tape.reshape(h, vec![b, n])?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (next()?, next()?);
                    tape.dense(h, w, b)?
                }
            };
            if tap_iter.peek().is_some_and(|t| t.after_layer == i) {
                tap_iter.next();
                taps.push(h);
            }
        }
        Ok((h, taps))
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<Vec<Tensor<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_shapes()?
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Ok(Tensor::zeros(shape));
                }
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Ok(Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32))
            })
            .collect()
    }
}

/// Anything that maps a batch of inputs to logits on a tape.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Per-sample input shape.
    fn input_shape(&self) -> Vec<usize>;

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.logits_on(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(argmax_rows(&z))
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.sample_len();
    logits.data().chunks(k).map(argmax).collect()
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 3, learning_rate: 1e-3, batch: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

/// Per-tap activations of a batch, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct TapActivations {
    pub names: Vec<String>,
    pub values: Vec<Tensor<f32>>,
}

impl TapActivations {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }
}

/// A trained, frozen classifier. Parameters are private so that nothing
/// outside [`train_classifier`] can change them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor<f32>>,
    pub meta: TrainingMeta,
}

/// Batch size used for inference passes.
pub const INFERENCE_CHUNK: usize = 64;

impl Network {
    /// Wraps externally supplied parameters, checking their shapes.
    pub fn from_parts(config: NetworkConfig, params: Vec<Tensor<f32>>, meta: TrainingMeta) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes()?;
        if expected.len() != params.len() || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(CoreError::Config("parameter shapes do not match the network config".into()));
        }
        Ok(Network { config, params, meta })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    /// SHA-256 over parameter shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for &d in p.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.config.input {
            return Err(CoreError::Config(format!(
                "input {:?} does not match network input {:?}",
                x.shape(),
                self.config.input
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let (z, taps) = self.config.forward_on(&mut tape, xv, &params)?;
        Ok((tape.value(z).clone(), taps.into_iter().map(|t| tape.value(t).clone()).collect()))
    }

    /// Logits without tap capture.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let parts = par_map_chunks(x.batch(), INFERENCE_CHUNK, |idx| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.select(&idx)?);
            let z = self.logits_on(&mut tape, xv)?;
            Ok(tape.value(z).clone())
        })?;
        Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>())?)
    }

    pub fn forward_with_taps(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, TapActivations)> {
        self.check_input(x)?;
        let parts = par_map_chunks(x.batch(), INFERENCE_CHUNK, |idx| self.run(&x.select(&idx)?))?;
        let logits = Tensor::stack(&parts.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let values = (0..self.config.taps.len())
            .map(|t| Tensor::stack(&parts.iter().map(|p| &p.1[t]).collect::<Vec<_>>()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((logits, TapActivations { names: self.config.tap_names(), values }))
    }

    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64> {
        let pred = argmax_rows(&self.forward(&set.images)?);
        Ok(accuracy(&pred, &set.labels))
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mut archive = Archive::new();
        for (i, p) in self.params.iter().enumerate() {
            archive.push(format!("param.{i}"), p.clone());
        }
        write_archive_file(dir.join(format!("{stem}.aedm")), &archive)?;
        let sidecar = serde_json::json!({ "format_version": 1, "config": self.config, "meta": self.meta });
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(CoreError::file(&path))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read(&path).map_err(CoreError::file(&path))?;
        let sidecar: Sidecar = serde_json::from_slice(&text)?;
        if sidecar.format_version != 1 {
            return Err(CoreError::Config(format!("unsupported network sidecar version {}", sidecar.format_version)));
        }
        let archive = read_archive_file(dir.join(format!("{stem}.aedm")))?;
        let params = archive.into_entries().into_iter().map(|(_, t)| t).collect();
        Network::from_parts(sidecar.config, params, sidecar.meta)
    }
}

#[derive(Deserialize)]
struct Sidecar {
    format_version: u32,
    config: NetworkConfig,
    meta: TrainingMeta,
}

impl Classifier for Network {
    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn input_shape(&self) -> Vec<usize> {
        self.config.input.to_vec()
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(self.config.forward_on(tape, x, &params)?.0)
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Mini-batch Adam on mean cross-entropy. Deterministic for a fixed seed.
pub fn train_classifier(
    config: &NetworkConfig,
    train: &LabeledSet,
    validation: Option<&LabeledSet>,
    p: &TrainParams,
) -> Result<Network> {
    config.validate()?;
    if p.epochs == 0 || p.batch == 0 {
        return Err(CoreError::Config("training needs epochs >= 1 and batch >= 1".into()));
    }
    if train.is_empty() {
        return Err(CoreError::Config("empty training set".into()));
    }
    if train.sample_shape() != config.input {
        return Err(CoreError::Config(format!("data {:?} vs network input {:?}", train.sample_shape(), config.input)));
    }
    if train.labels.iter().any(|&l| l >= config.classes) {
        return Err(CoreError::Config(format!("labels must lie in [0,{})", config.classes)));
    }
    let mut params = config.init_params(p.seed)?;
    let mut opt = OptimizerState::adam(p.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x005e_ed0f_0dd5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..p.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(p.batch).enumerate() {
            let diag = |e: String| CoreError::Training {
                stage: "target network".into(),
                detail: format!("epoch {epoch}, batch {bi}: {e}"),
            };
            let mut tape = Tape::new();
            let x = tape.constant(train.images.select(idx)?);
            let pv: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (logits, _) = config.forward_on(&mut tape, x, &pv).map_err(|e| diag(e.to_string()))?;
            let loss = tape.cross_entropy(logits, &labels).map_err(|e| diag(e.to_string()))?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(diag(format!("loss is {value}")));
            }
            total += f64::from(value) * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&Tensor<f32>>> = pv.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut params, &g)?;
        }
        final_loss = total / train.len() as f64;
        log::info!("target epoch {}/{}: loss {final_loss:.4}", epoch + 1, p.epochs);
    }
    let mut net = Network {
        config: config.clone(),
        params,
        meta: TrainingMeta { epochs: p.epochs, final_loss, train_accuracy: 0.0, validation_accuracy: None },
    };
    net.meta.train_accuracy = net.accuracy(train)?;
    if let Some(v) = validation {
        net.meta.validation_accuracy = Some(net.accuracy(v)?);
    }
    Ok(net)
}
