//! Per-tap WAE-MMD autoencoders.
//!
//! Rank-3 taps `[C,H,W]` get two stride-2 conv layers and a dense projection
//! to the latent; flat taps get a two-layer dense encoder. Decoders mirror
//! their encoders with a linear output.

use std::path::Path;

use aelayers_tensor::kernels::conv_out_extent;
use aelayers_tensor::{read_archive_file, write_archive_file, Archive, KernelKind, OptimizerState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::Provenance;
use crate::par_map_chunks;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub tap: String,
    pub latent: usize,
    /// Conv filters (rank-3 taps) or hidden units (flat taps).
    pub width: usize,
    /// MMD weight λ.
    pub lambda: f32,
    pub kernel: KernelKind,
    /// Kernel scale; `None` means `2·latent`.
    pub kernel_scale: Option<f32>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch: usize,
    pub seed: u64,
}

impl AeConfig {
    /// Conv taps: 32 filters, Z = 16. Flat taps: 32 hidden units, Z = 8.
    pub fn for_tap(tap: &str, rank: usize) -> Self {
        let latent = if rank == 3 { 16 } else { 8 };
        AeConfig {
            tap: tap.into(),
            latent,
            width: 32,
            lambda: 1.0,
            kernel: KernelKind::Imq,
            kernel_scale: None,
            epochs: 10,
            learning_rate: 1e-3,
            batch: 64,
            seed: 0,
        }
    }

    pub fn scale(&self) -> f32 {
        self.kernel_scale.unwrap_or(2.0 * self.latent as f32)
    }

    fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.width == 0 || !(self.lambda >= 0.0) || self.epochs == 0 || self.batch == 0 {
            return Err(CoreError::Config(format!("invalid autoencoder config for {}: {self:?}", self.tap)));
        }
        if !(self.scale() > 0.0) {
            return Err(CoreError::Config(format!("kernel scale must be positive for {}", self.tap)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AeArch {
    Conv {
        channels: usize,
        /// Spatial extents at input, after the first and after the second conv.
        extents: [[usize; 2]; 3],
        filters: usize,
        /// Transposed-conv output padding per decoder stage.
        output_padding: [[usize; 2]; 2],
    },
    Dense {
        inputs: usize,
        hidden: usize,
    },
}

impl AeArch {
    pub fn for_shape(shape: &[usize], width: usize) -> Result<Self> {
        match *shape {
            [c, h, w] => {
                let down = |n| conv_out_extent(n, 3, 2, 1);
                let (h1, w1) = (down(h), down(w));
                let (h2, w2) = (h1.and_then(down), w1.and_then(down));
                let (Some(h1), Some(w1), Some(h2), Some(w2)) = (h1, w1, h2, w2) else {
                    return Err(CoreError::Config(format!("tap shape {shape:?} too small for the conv autoencoder")));
                };
                // convT extent = 2·n − 1 + output_padding
                let op = |big: usize, small: usize| big + 1 - 2 * small;
                Ok(AeArch::Conv {
                    channels: c,
                    extents: [[h, w], [h1, w1], [h2, w2]],
                    filters: width,
                    output_padding: [[op(h1, h2), op(w1, w2)], [op(h, h1), op(w, w1)]],
                })
            }
            [d] => Ok(AeArch::Dense { inputs: d, hidden: width }),
            _ => Err(CoreError::Config(format!("unsupported tap shape {shape:?}"))),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            AeArch::Conv { channels, extents, .. } => vec![channels, extents[0][0], extents[0][1]],
            AeArch::Dense { inputs, .. } => vec![inputs],
        }
    }

    pub fn param_shapes(&self, latent: usize) -> Vec<Vec<usize>> {
        match *self {
            AeArch::Conv { channels, extents, filters, .. } => {
                let flat = filters * extents[2][0] * extents[2][1];
                vec![
                    vec![filters, channels, 3, 3],
                    vec![filters],
                    vec![filters, filters, 3, 3],
                    vec![filters],
                    vec![flat, latent],
                    vec![latent],
                    vec![latent, flat],
                    vec![flat],
                    vec![filters, filters, 3, 3],
                    vec![filters],
                    vec![filters, channels, 3, 3],
                    vec![channels],
                ]
            }
            AeArch::Dense { inputs, hidden } => vec![
                vec![inputs, hidden],
                vec![hidden],
                vec![hidden, latent],
                vec![latent],
                vec![latent, hidden],
                vec![hidden],
                vec![hidden, inputs],
                vec![inputs],
            ],
        }
    }

    pub fn encode_on(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        match self {
            AeArch::Conv { .. } => {
                let h = tape.conv2d(x, p[0], 2, 1)?;
                let h = tape.channel_bias(h, p[1])?;
                let h = tape.relu(h)?;
                let h = tape.conv2d(h, p[2], 2, 1)?;
                let h = tape.channel_bias(h, p[3])?;
                let h = tape.relu(h)?;
                let b = tape.value(h).batch();
                let h = tape.reshape(h, vec![b, tape.value(h).sample_len()])?;
                Ok(tape.dense(h, p[4], p[5])?)
            }
            AeArch::Dense { .. } => {
                let h = tape.dense(x, p[0], p[1])?;
                let h = tape.relu(h)?;
                Ok(tape.dense(h, p[2], p[3])?)
            }
        }
    }

    pub fn decode_on(&self, tape: &mut Tape, z: Var, p: &[Var]) -> Result<Var> {
        match *self {
            AeArch::Conv { extents, filters, output_padding, .. } => {
                let h = tape.dense(z, p[6], p[7])?;
                let h = tape.relu(h)?;
                let b = tape.value(h).batch();
                let h = tape.reshape(h, vec![b, filters, extents[2][0], extents[2][1]])?;
                let h = self.conv_t(tape, h, p[8], output_padding[0])?;
                let h = tape.channel_bias(h, p[9])?;
                let h = tape.relu(h)?;
                let h = self.conv_t(tape, h, p[10], output_padding[1])?;
                Ok(tape.channel_bias(h, p[11])?)
            }
            AeArch::Dense { .. } => {
                let h = tape.dense(z, p[4], p[5])?;
                let h = tape.relu(h)?;
                Ok(tape.dense(h, p[6], p[7])?)
            }
        }
    }

    fn conv_t(&self, tape: &mut Tape, x: Var, k: Var, op: [usize; 2]) -> Result<Var> {
        if op[0] != op[1] {
            return Err(CoreError::Config("non-square taps need equal output padding on both axes".into()));
        }
        Ok(tape.conv_transpose2d(x, k, 2, 1, op[0])?)
    }
}

/// A trained, frozen autoencoder for one tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAutoencoder {
    pub config: AeConfig,
    pub arch: AeArch,
    params: Vec<Tensor<f32>>,
    /// Inputs are divided by this before encoding and reconstructions
    /// multiplied by it, so every tap trains at unit RMS.
    pub input_scale: f32,
    /// Mean training loss per epoch, in scaled units.
    pub curve: Vec<f64>,
}

/// Per-sample AE outputs for one tap.
#[derive(Clone, Debug, PartialEq)]
pub struct AeOutputs {
    /// `Σ (x − 𝔇(𝔈(x)))²`
    pub rec_err: Vec<f64>,
    /// `‖𝔈(x)‖₂`
    pub lat_norm: Vec<f64>,
    /// `[N,Z]`
    pub latent: Tensor<f32>,
}

/// Chunk size for AE inference.
const AE_CHUNK: usize = 64;

impl LayerAutoencoder {
    pub fn from_parts(
        config: AeConfig,
        arch: AeArch,
        params: Vec<Tensor<f32>>,
        input_scale: f32,
        curve: Vec<f64>,
    ) -> Result<Self> {
        if !(input_scale > 0.0) || !input_scale.is_finite() {
            return Err(CoreError::Config(format!("input scale must be positive for {}, got {input_scale}", config.tap)));
        }
        let shapes = arch.param_shapes(config.latent);
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(CoreError::Config(format!("parameter shapes do not match autoencoder for {}", config.tap)));
        }
        Ok(LayerAutoencoder { config, arch, params, input_scale, curve })
    }

    /// The initialization `train_wae` starts from on `activations`.
    pub fn untrained(activations: &Tensor<f32>, config: &AeConfig) -> Result<Self> {
        config.validate()?;
        let arch = AeArch::for_shape(&activations.shape()[1..], config.width)?;
        let params = init_params(&arch, config.latent, config.seed);
        LayerAutoencoder::from_parts(config.clone(), arch, params, rms_scale(activations), vec![])
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    /// Monotone (running-minimum) version of the training curve.
    pub fn smoothed_curve(&self) -> Vec<f64> {
        self.curve
            .iter()
            .scan(f64::INFINITY, |m, &v| {
                *m = m.min(v);
                Some(*m)
            })
            .collect()
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        if x.shape().get(1..) != Some(self.arch.input_shape().as_slice()) {
            return Err(CoreError::Config(format!(
                "activations {:?} do not match autoencoder input {:?} for {}",
                x.shape(),
                self.arch.input_shape(),
                self.config.tap
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<AeOutputs> {
        self.check(x)?;
        let parts = par_map_chunks(x.batch(), AE_CHUNK, |idx| {
            let xs = x.select(&idx)?;
            let mut tape = Tape::new();
            let xv = tape.constant(xs.clone());
            let xn = tape.scale(xv, 1.0 / self.input_scale)?;
            let pv: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
            let z = self.arch.encode_on(&mut tape, xn, &pv)?;
            let rn = self.arch.decode_on(&mut tape, z, &pv)?;
            let r = tape.scale(rn, self.input_scale)?;
            let (zv, rv) = (tape.value(z).clone(), tape.value(r));
            let rec: Vec<f64> = (0..xs.batch())
                .map(|i| {
                    xs.sample(i).iter().zip(rv.sample(i)).map(|(&a, &b)| f64::from(a - b).powi(2)).sum()
                })
                .collect();
            let norm: Vec<f64> =
                (0..xs.batch()).map(|i| zv.sample(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()).collect();
            Ok((rec, norm, zv))
        })?;
        let mut out = AeOutputs { rec_err: vec![], lat_norm: vec![], latent: Tensor::zeros(vec![1]) };
        for (r, n, _) in &parts {
            out.rec_err.extend(r);
            out.lat_norm.extend(n);
        }
        out.latent = Tensor::stack(&parts.iter().map(|p| &p.2).collect::<Vec<_>>())?;
        Ok(out)
    }

    pub fn reconstruction_error(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.apply(x)?.rec_err)
    }

    pub fn latent_norm(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.apply(x)?.lat_norm)
    }

    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.apply(x)?.latent)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut archive = Archive::new();
        for (i, p) in self.params.iter().enumerate() {
            archive.push(format!("param.{i}"), p.clone());
        }
        write_archive_file(dir.join(format!("ae_{}.aedm", self.config.tap)), &archive)?;
        let sidecar = AeSidecar {
            format_version: 1,
            config: self.config.clone(),
            arch: self.arch.clone(),
            input_scale: self.input_scale,
            curve: self.curve.clone(),
        };
        let path = dir.join(format!("ae_{}.json", self.config.tap));
        std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(CoreError::file(&path))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, tap: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(format!("ae_{tap}.json"));
        let bytes = std::fs::read(&path).map_err(CoreError::file(&path))?;
        let s: AeSidecar = serde_json::from_slice(&bytes)?;
        if s.format_version != 1 {
            return Err(CoreError::Config(format!("unsupported autoencoder sidecar version {}", s.format_version)));
        }
        let params = read_archive_file(dir.join(format!("ae_{tap}.aedm")))?.into_entries().into_iter().map(|e| e.1).collect();
        LayerAutoencoder::from_parts(s.config, s.arch, params, s.input_scale, s.curve)
    }
}

#[derive(Serialize, Deserialize)]
struct AeSidecar {
    format_version: u32,
    config: AeConfig,
    arch: AeArch,
    input_scale: f32,
    curve: Vec<f64>,
}

/// Biased (V-statistic) MMD² between the rows of `a` and `b`, recorded on the tape.
pub fn mmd2_on(tape: &mut Tape, a: Var, b: Var, kind: KernelKind, scale: f32) -> Result<Var> {
    let kaa = tape.kernel_gram(a, a, kind, scale)?;
    let kbb = tape.kernel_gram(b, b, kind, scale)?;
    let kab = tape.kernel_gram(a, b, kind, scale)?;
    let (maa, mbb, mab) = (tape.mean(kaa)?, tape.mean(kbb)?, tape.mean(kab)?);
    let s = tape.add(maa, mbb)?;
    let cross = tape.scale(mab, 2.0)?;
    Ok(tape.sub(s, cross)?)
}

/// Root-mean-square of all activation values; 1 for all-zero data.
fn rms_scale(activations: &Tensor<f32>) -> f32 {
    let n = activations.numel().max(1) as f64;
    let ms = activations.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / n;
    if ms > 0.0 && ms.is_finite() {
        ms.sqrt() as f32
    } else {
        1.0
    }
}

fn init_params(arch: &AeArch, latent: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    arch.param_shapes(latent)
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let fan_in: usize = if shape.len() == 4 { shape[0].max(shape[1]) * 9 } else { shape[0] };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
        })
        .collect()
}

/// Trains an autoencoder on clean activations `[N, ...]` by minimizing
/// `mean squared reconstruction error + λ·MMD²(𝔈(batch), prior sample)` with
/// Adam, on activations divided by their RMS. A fresh standard-normal prior
/// sample is drawn per batch.
pub fn train_wae(activations: &Tensor<f32>, provenance: &[Provenance], config: &AeConfig) -> Result<LayerAutoencoder> {
    config.validate()?;
    if provenance.len() != activations.batch() {
        return Err(CoreError::Protocol(format!(
            "{} provenance tags for {} activations",
            provenance.len(),
            activations.batch()
        )));
    }
    if let Some(p) = provenance.iter().find(|&&p| p != Provenance::Clean) {
        return Err(CoreError::Protocol(format!("autoencoder for {} offered {p} activations", config.tap)));
    }
    let arch = AeArch::for_shape(&activations.shape()[1..], config.width)?;
    let input_scale = rms_scale(activations);
    let mut params = init_params(&arch, config.latent, config.seed);
    let mut opt = OptimizerState::adam(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xae_ae_ae);
    let mut order: Vec<usize> = (0..activations.batch()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let diag = |epoch: usize, e: String| CoreError::Training {
        stage: format!("autoencoder {}", config.tap),
        detail: format!("epoch {epoch}: {e}"),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch) {
            let mut tape = Tape::new();
            let x = tape.constant(activations.select(idx)?.map(|v| v / input_scale));
            let pv: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let prior = Tensor::from_fn(vec![idx.len(), config.latent], |_| StandardNormal.sample(&mut rng));
            let step = |tape: &mut Tape| -> Result<Var> {
                let z = arch.encode_on(tape, x, &pv)?;
                let r = arch.decode_on(tape, z, &pv)?;
                let rec = tape.mse(r, x)?;
                if config.lambda == 0.0 {
                    return Ok(rec);
                }
                let p = tape.constant(prior);
                let mmd = mmd2_on(tape, z, p, config.kernel, config.scale())?;
                let weighted = tape.scale(mmd, config.lambda)?;
                Ok(tape.add(rec, weighted)?)
            };
            let loss = step(&mut tape).map_err(|e| diag(epoch, e.to_string()))?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(diag(epoch, format!("loss is {value}")));
            }
            total += f64::from(value) * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&Tensor<f32>>> = pv.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut params, &g)?;
        }
        let mean = total / activations.batch() as f64;
        log::debug!("autoencoder {} epoch {}: loss {mean:.5}", config.tap, epoch + 1);
        curve.push(mean);
    }
    LayerAutoencoder::from_parts(config.clone(), arch, params, input_scale, curve)
}
