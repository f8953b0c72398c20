//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Each operator is exercised on randomly drawn small instances. The scalar
//! loss is a fixed random projection `Σ op(inputs) ⊙ R`, so every output
//! coordinate contributes to the gradient. Differences are evaluated in the
//! tape's own precision: `f32` with `h = 1e-3` and `f64` with `h = 1e-5`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::conv_out_extent;
use crate::tape::{KernelKind, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const STEP_F32: f64 = 1e-3;
pub const STEP_F64: f64 = 1e-5;

/// One randomly drawn operator instance.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub op: &'static str,
    inputs: Vec<Tensor<f64>>,
    kind: CaseKind,
}

#[derive(Clone, Debug)]
enum CaseKind {
    Dense,
    Conv { stride: usize, padding: usize },
    ConvTranspose { stride: usize, padding: usize, output_padding: usize },
    ChannelBias,
    Relu,
    Tanh,
    Softmax,
    CrossEntropy(Vec<usize>),
    CrossEntropyEach(Vec<usize>),
    Mse,
    Gram(KernelKind, f64),
    GramSelf(KernelKind, f64),
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Mean,
    SumPerSample,
    Reshape(Vec<usize>),
    SelectColumn(usize),
    Margin(Vec<usize>, f64),
}

/// Result of checking one operator over all its instances.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err_f32: f64,
    pub max_rel_err_f64: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Logits whose entries are pairwise at least 0.8 apart, so arg-max choices
/// are stable under finite-difference steps.
fn spread_logits(rng: &mut ChaCha8Rng, batch: usize, k: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(batch * k);
    for _ in 0..batch {
        let mut levels: Vec<f64> = (0..k).map(|i| i as f64 + rng.random_range(0.0..0.2)).collect();
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            levels.swap(i, j);
        }
        data.extend(levels.iter().map(|v| v - 0.5 * k as f64));
    }
    Tensor::new(vec![batch, k], data).unwrap()
}

impl OpCase {
    /// Draws `per_op` instances of every differentiable operator.
    pub fn suite(per_op: usize, seed: u64) -> Vec<OpCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = Vec::new();
        for _ in 0..per_op {
            cases.extend(Self::draw_all(&mut rng));
        }
        cases
    }

    fn draw_all(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
        let mut out = Vec::new();
        let b = rng.random_range(1..4);
        let (i, o) = (rng.random_range(1..5), rng.random_range(1..5));
        out.push(OpCase {
            op: "dense",
            inputs: vec![uniform(rng, vec![b, i], -1.0, 1.0), uniform(rng, vec![i, o], -1.0, 1.0), uniform(rng, vec![o], -1.0, 1.0)],
            kind: CaseKind::Dense,
        });

        loop {
            let (c, f) = (rng.random_range(1..3), rng.random_range(1..3));
            let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
            let (kh, kw) = (rng.random_range(1..4), rng.random_range(1..4));
            let (stride, padding) = (rng.random_range(1..3), rng.random_range(0..2));
            if conv_out_extent(h, kh, stride, padding).is_none() || conv_out_extent(w, kw, stride, padding).is_none() {
                continue;
            }
            out.push(OpCase {
                op: "conv2d",
                inputs: vec![uniform(rng, vec![b, c, h, w], -1.0, 1.0), uniform(rng, vec![f, c, kh, kw], -1.0, 1.0)],
                kind: CaseKind::Conv { stride, padding },
            });
            break;
        }

        loop {
            let (cin, cout) = (rng.random_range(1..3), rng.random_range(1..3));
            let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
            let k = rng.random_range(2..4);
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2);
            let output_padding = rng.random_range(0..stride);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::zeros(vec![1, cin, h, w]));
            let kv = tape.constant(Tensor::zeros(vec![cin, cout, k, k]));
            if tape.conv_transpose2d(x, kv, stride, padding, output_padding).is_err() {
                continue;
            }
            out.push(OpCase {
                op: "conv_transpose2d",
                inputs: vec![uniform(rng, vec![b, cin, h, w], -1.0, 1.0), uniform(rng, vec![cin, cout, k, k], -1.0, 1.0)],
                kind: CaseKind::ConvTranspose { stride, padding, output_padding },
            });
            break;
        }

        let c = rng.random_range(1..4);
        out.push(OpCase {
            op: "channel_bias",
            inputs: vec![uniform(rng, vec![b, c, 2, 3], -1.0, 1.0), uniform(rng, vec![c], -1.0, 1.0)],
            kind: CaseKind::ChannelBias,
        });

        let shape = vec![b, rng.random_range(1..6)];
        out.push(OpCase { op: "relu", inputs: vec![away_from_zero(rng, shape.clone())], kind: CaseKind::Relu });
        out.push(OpCase { op: "tanh", inputs: vec![uniform(rng, shape.clone(), -2.0, 2.0)], kind: CaseKind::Tanh });

        let k = rng.random_range(2..6);
        out.push(OpCase { op: "softmax", inputs: vec![uniform(rng, vec![b, k], -3.0, 3.0)], kind: CaseKind::Softmax });
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        out.push(OpCase {
            op: "cross_entropy",
            inputs: vec![uniform(rng, vec![b, k], -2.0, 2.0)],
            kind: CaseKind::CrossEntropy(labels.clone()),
        });
        out.push(OpCase {
            op: "cross_entropy_each",
            inputs: vec![uniform(rng, vec![b, k], -2.0, 2.0)],
            kind: CaseKind::CrossEntropyEach(labels.clone()),
        });
        out.push(OpCase {
            op: "margin_loss",
            inputs: vec![spread_logits(rng, b, k)],
            kind: CaseKind::Margin(labels, rng.random_range(0.0..0.05) + 0.5),
        });

        out.push(OpCase {
            op: "mse",
            inputs: vec![uniform(rng, shape.clone(), -1.0, 1.0), uniform(rng, shape.clone(), -1.0, 1.0)],
            kind: CaseKind::Mse,
        });

        let z = rng.random_range(1..4);
        for (name, kind) in [("kernel_gram_rbf", KernelKind::Rbf), ("kernel_gram_imq", KernelKind::Imq)] {
            let scale = rng.random_range(0.5..4.0);
            let (n, m) = (rng.random_range(1..4), rng.random_range(1..4));
            out.push(OpCase {
                op: name,
                inputs: vec![uniform(rng, vec![n, z], -1.0, 1.0), uniform(rng, vec![m, z], -1.0, 1.0)],
                kind: CaseKind::Gram(kind, scale),
            });
            out.push(OpCase {
                op: if kind == KernelKind::Rbf { "kernel_gram_rbf_self" } else { "kernel_gram_imq_self" },
                inputs: vec![uniform(rng, vec![n, z], -1.0, 1.0)],
                kind: CaseKind::GramSelf(kind, scale),
            });
        }

        let pair = || shape.clone();
        for (op, kind) in [("add", CaseKind::Add), ("sub", CaseKind::Sub), ("mul", CaseKind::Mul)] {
            out.push(OpCase { op, inputs: vec![uniform(rng, pair(), -1.0, 1.0), uniform(rng, pair(), -1.0, 1.0)], kind });
        }
        let factor = rng.random_range(-2.0..2.0);
        out.push(OpCase { op: "scale", inputs: vec![uniform(rng, pair(), -1.0, 1.0)], kind: CaseKind::Scale(factor) });
        out.push(OpCase { op: "add_scalar", inputs: vec![uniform(rng, pair(), -1.0, 1.0)], kind: CaseKind::AddScalar(factor) });
        out.push(OpCase { op: "mean", inputs: vec![uniform(rng, pair(), -1.0, 1.0)], kind: CaseKind::Mean });
        out.push(OpCase {
            op: "sum_per_sample",
            inputs: vec![uniform(rng, vec![b, 2, 3], -1.0, 1.0)],
            kind: CaseKind::SumPerSample,
        });
        out.push(OpCase {
            op: "reshape",
            inputs: vec![uniform(rng, vec![b, 2, 3], -1.0, 1.0)],
            kind: CaseKind::Reshape(vec![b * 3, 2]),
        });
        out.push(OpCase {
            op: "select_column",
            inputs: vec![uniform(rng, vec![b, k], -1.0, 1.0)],
            kind: CaseKind::SelectColumn(rng.random_range(0..k)),
        });
        out
    }

    /// Builds the operator's output on `tape` from already-recorded inputs.
    fn apply<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let t = T::from_f64_lossy;
        match &self.kind {
            CaseKind::Dense => tape.dense(v[0], v[1], v[2]),
            CaseKind::Conv { stride, padding } => tape.conv2d(v[0], v[1], *stride, *padding),
            CaseKind::ConvTranspose { stride, padding, output_padding } => {
                tape.conv_transpose2d(v[0], v[1], *stride, *padding, *output_padding)
            }
            CaseKind::ChannelBias => tape.channel_bias(v[0], v[1]),
            CaseKind::Relu => tape.relu(v[0]),
            CaseKind::Tanh => tape.tanh(v[0]),
            CaseKind::Softmax => tape.softmax(v[0]),
            CaseKind::CrossEntropy(labels) => tape.cross_entropy(v[0], labels),
            CaseKind::CrossEntropyEach(labels) => tape.cross_entropy_each(v[0], labels),
            CaseKind::Mse => tape.mse(v[0], v[1]),
            CaseKind::Gram(kind, scale) => tape.kernel_gram(v[0], v[1], *kind, t(*scale)),
            CaseKind::GramSelf(kind, scale) => tape.kernel_gram(v[0], v[0], *kind, t(*scale)),
            CaseKind::Add => tape.add(v[0], v[1]),
            CaseKind::Sub => tape.sub(v[0], v[1]),
            CaseKind::Mul => tape.mul(v[0], v[1]),
            CaseKind::Scale(f) => tape.scale(v[0], t(*f)),
            CaseKind::AddScalar(f) => tape.add_scalar(v[0], t(*f)),
            CaseKind::Mean => tape.mean(v[0]),
            CaseKind::SumPerSample => tape.sum_per_sample(v[0]),
            CaseKind::Reshape(shape) => tape.reshape(v[0], shape.clone()),
            CaseKind::SelectColumn(c) => tape.select_column(v[0], *c),
            CaseKind::Margin(labels, kappa) => tape.margin_loss(v[0], labels, t(*kappa)),
        }
    }

    /// Projection weights for the scalar loss, derived deterministically from the output shape.
    fn projection(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i * 7919 + 13) % 17) as f64 / 8.5 - 1.0)
    }

    fn loss_on<T: Real>(&self, inputs: &[Tensor<T>], requires_grad: bool) -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), requires_grad)).collect();
        let out = self.apply(&mut tape, &vars)?;
        let proj = tape.constant(Self::projection(tape.value(out).shape()).cast());
        let weighted = tape.mul(out, proj)?;
        let loss = tape.sum(weighted)?;
        Ok((tape, vars, loss))
    }

    /// Largest relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-3)
    /// over this case's inputs, evaluated in precision `T` with step `h`.
    pub fn relative_error<T: Real>(&self, h: f64) -> Result<f64> {
        let inputs: Vec<Tensor<T>> = self.inputs.iter().map(|x| x.cast()).collect();
        let (tape, vars, loss) = self.loss_on(&inputs, true)?;
        let grads = tape.backward(loss)?;
        let mut worst = 0.0f64;
        for (idx, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = match grads.get(*var) {
                Some(g) => g.data().iter().map(|v| v.to_f64_lossy()).collect(),
                None => vec![0.0; inputs[idx].numel()],
            };
            let mut numeric = Vec::with_capacity(analytic.len());
            for j in 0..inputs[idx].numel() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut shifted = inputs.clone();
                    let v = &mut shifted[idx].data_mut()[j];
                    *v = *v + T::from_f64_lossy(delta);
                    let (tape, _, loss) = self.loss_on(&shifted, false)?;
                    Ok(tape.value(loss).item()?.to_f64_lossy())
                };
                numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
            let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-3);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

/// Checks every operator on `per_op` random instances in both precisions.
pub fn check_all_ops(per_op: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for case in OpCase::suite(per_op, seed) {
        let e32 = case.relative_error::<f32>(STEP_F32)?;
        let e64 = case.relative_error::<f64>(STEP_F64)?;
        match reports.iter_mut().find(|r| r.op == case.op) {
            Some(r) => {
                r.instances += 1;
                r.max_rel_err_f32 = r.max_rel_err_f32.max(e32);
                r.max_rel_err_f64 = r.max_rel_err_f64.max(e64);
            }
            None => reports.push(GradCheckReport { op: case.op, instances: 1, max_rel_err_f32: e32, max_rel_err_f64: e64 }),
        }
    }
    Ok(reports)
}
