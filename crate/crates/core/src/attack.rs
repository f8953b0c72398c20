//! L∞-bounded gradient attacks (FGSM, BIM, PGD) and the minimum-norm
//! attacks DeepFool and Carlini-Wagner L2.
//!
//! Every attack treats samples independently: losses are per-sample sums and
//! random starts come from per-sample seeds, so results do not depend on how
//! a batch is partitioned across chunks or threads.

use aelayers_detect::derive_seed;
use aelayers_tensor::{OptimizerState, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::net::{argmax, argmax_rows, Classifier};
use crate::par_map_chunks;

/// Batch size for attack tapes.
pub const ATTACK_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    #[serde(rename = "deepfool")]
    DeepFool,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd, AttackKind::DeepFool, AttackKind::Cw];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::DeepFool => "deepfool",
            AttackKind::Cw => "cw",
        }
    }

    /// Whether the attack enforces an L∞ budget.
    pub fn is_epsilon_bounded(self) -> bool {
        matches!(self, AttackKind::Fgsm | AttackKind::Bim | AttackKind::Pgd)
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown attack '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
    pub cw_confidence: f32,
    pub cw_const: f32,
    pub cw_lr: f32,
    /// DeepFool overshoot applied to the accumulated perturbation.
    pub overshoot: f32,
    pub seed: u64,
}

impl AttackSpec {
    /// Defaults: BIM ε/4 × 10 steps; PGD 40 steps of 2.5ε/40 from a random
    /// start; DeepFool 50 steps with 2% overshoot; CW c=1, κ=0, 100 Adam steps
    /// at 0.01.
    pub fn defaults(kind: AttackKind, epsilon: f32) -> Self {
        let (steps, step_size) = match kind {
            AttackKind::Fgsm => (1, epsilon),
            AttackKind::Bim => (10, epsilon / 4.0),
            AttackKind::Pgd => (40, 2.5 * epsilon / 40.0),
            AttackKind::DeepFool => (50, 0.0),
            AttackKind::Cw => (100, 0.0),
        };
        AttackSpec {
            kind,
            epsilon,
            steps,
            step_size,
            cw_confidence: 0.0,
            cw_const: 1.0,
            cw_lr: 0.01,
            overshoot: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("{} attack: {m}", self.kind)));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        match self.kind {
            AttackKind::Bim | AttackKind::Pgd => {
                if !(self.step_size > 0.0) {
                    return bad("step size must be positive".into());
                }
                // Relative slack absorbs rounding in the defaults' step sizes.
                if self.step_size * (self.steps as f32) < self.epsilon * (1.0 - 1e-5) {
                    return bad(format!(
                        "step_size·steps = {} cannot reach epsilon {}",
                        self.step_size * self.steps as f32,
                        self.epsilon
                    ));
                }
            }
            AttackKind::Cw => {
                if !(self.cw_const > 0.0) || !(self.cw_confidence >= 0.0) || !(self.cw_lr > 0.0) {
                    return bad("needs c > 0, kappa >= 0 and lr > 0".into());
                }
            }
            AttackKind::DeepFool => {
                if !(self.overshoot >= 0.0) {
                    return bad("overshoot must be >= 0".into());
                }
            }
            AttackKind::Fgsm => {}
        }
        Ok(())
    }

    /// Copy with a different budget; step sizes scale with it.
    pub fn with_epsilon(&self, epsilon: f32) -> Self {
        let mut s = self.clone();
        if self.epsilon > 0.0 {
            s.step_size = self.step_size * (epsilon / self.epsilon);
        } else {
            s.step_size = AttackSpec::defaults(self.kind, epsilon).step_size;
        }
        s.epsilon = epsilon;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Tensor<f32>,
    pub perturbed: Tensor<f32>,
    pub labels: Vec<usize>,
    pub pred_clean: Vec<usize>,
    pub pred_adv: Vec<usize>,
    pub success: Vec<bool>,
    pub linf: Vec<f32>,
    pub l2: Vec<f32>,
}

impl AdversarialBatch {
    fn assemble(model: &dyn Classifier, x: &Tensor<f32>, adv: Tensor<f32>, y: &[usize]) -> Result<Self> {
        let pred_clean = model.predict(x)?;
        let pred_adv = model.predict(&adv)?;
        let success = pred_adv.iter().zip(y).map(|(p, t)| p != t).collect();
        let (linf, l2) = (0..x.batch())
            .map(|i| {
                let d = x.sample(i).iter().zip(adv.sample(i)).map(|(a, b)| b - a);
                d.fold((0.0f32, 0.0f32), |(m, s), v| (m.max(v.abs()), s + v * v))
            })
            .map(|(m, s)| (m, s.sqrt()))
            .unzip();
        Ok(AdversarialBatch {
            originals: x.clone(),
            perturbed: adv,
            labels: y.to_vec(),
            pred_clean,
            pred_adv,
            success,
            linf,
            l2,
        })
    }

    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len().max(1) as f64
    }
}

fn check_batch(model: &dyn Classifier, x: &Tensor<f32>, y: &[usize]) -> Result<()> {
    if x.shape().get(1..) != Some(model.input_shape().as_slice()) || x.batch() != y.len() {
        return Err(CoreError::Attack(format!(
            "inputs {:?} with {} labels do not fit model input {:?}",
            x.shape(),
            y.len(),
            model.input_shape()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= model.num_classes()) {
        return Err(CoreError::Attack(format!("label {bad} outside [0,{})", model.num_classes())));
    }
    Ok(())
}

/// `sign(0) = 0`.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the summed per-sample cross-entropy with respect to `x`.
pub fn input_gradient(model: &dyn Classifier, x: &Tensor<f32>, y: &[usize]) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let z = model.logits_on(&mut tape, xv)?;
    let each = tape.cross_entropy_each(z, y)?;
    let loss = tape.sum(each)?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take(xv).ok_or_else(|| CoreError::Attack("input received no gradient".into()))?;
    if !g.is_finite() {
        return Err(CoreError::Attack("non-finite input gradient".into()));
    }
    Ok(g)
}

/// Splits the batch into chunks, runs `f` on each, and restacks.
fn per_chunk(
    x: &Tensor<f32>,
    y: &[usize],
    f: impl Fn(&Tensor<f32>, &[usize], &[usize]) -> Result<Tensor<f32>> + Sync,
) -> Result<Tensor<f32>> {
    let parts = par_map_chunks(x.batch(), ATTACK_CHUNK, |idx| {
        let xs = x.select(&idx)?;
        let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        f(&xs, &ys, &idx)
    })?;
    Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>())?)
}

/// `clip(x + ε·sign(∇ₓ CE), 0, 1)`.
pub fn fgsm(model: &dyn Classifier, x: &Tensor<f32>, y: &[usize], epsilon: f32) -> Result<AdversarialBatch> {
    check_batch(model, x, y)?;
    if !(epsilon >= 0.0) {
        return Err(CoreError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let adv = per_chunk(x, y, |xs, ys, _| {
        let g = input_gradient(model, xs, ys)?;
        let data = xs.data().iter().zip(g.data()).map(|(&v, &d)| (v + epsilon * sign(d)).clamp(0.0, 1.0)).collect();
        Ok(Tensor::new(xs.shape().to_vec(), data)?)
    })?;
    AdversarialBatch::assemble(model, x, adv, y)
}

/// Repeated sign steps, each projected onto the ε-ball around `x` and onto
/// `[0,1]`. With `random_start` the first iterate is drawn uniformly from the
/// ball, using a seed derived from `(seed, sample index)`.
#[allow(clippy::too_many_arguments)]
pub fn iterative_linf(
    model: &dyn Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    epsilon: f32,
    steps: usize,
    step_size: f32,
    random_start: bool,
    seed: u64,
) -> Result<AdversarialBatch> {
    check_batch(model, x, y)?;
    let kind = if random_start { AttackKind::Pgd } else { AttackKind::Bim };
    AttackSpec { epsilon, steps, step_size, seed, ..AttackSpec::defaults(kind, epsilon) }.validate()?;
    let adv = per_chunk(x, y, |xs, ys, idx| {
        let n = xs.sample_len();
        let mut cur = xs.clone();
        if random_start && epsilon > 0.0 {
            for (row, &i) in cur.data_mut().chunks_mut(n).zip(idx) {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                for v in row.iter_mut() {
                    *v = (*v + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0);
                }
            }
        }
        for _ in 0..steps {
            let g = input_gradient(model, &cur, ys)?;
            for ((c, &d), &x0) in cur.data_mut().iter_mut().zip(g.data()).zip(xs.data()) {
                *c = (*c + step_size * sign(d)).clamp(x0 - epsilon, x0 + epsilon).clamp(0.0, 1.0);
            }
        }
        Ok(cur)
    })?;
    AdversarialBatch::assemble(model, x, adv, y)
}

/// One DeepFool step for a single sample: the minimal-norm move onto the
/// nearest linearized boundary between class `from` and any other class.
/// `grads[k]` is `∇ₓ z_k`.
pub fn linearized_step(logits: &[f32], grads: &[Vec<f32>], from: usize) -> Option<Vec<f32>> {
    let mut best: Option<(f32, usize)> = None;
    for k in 0..logits.len() {
        if k == from {
            continue;
        }
        let f = logits[k] - logits[from];
        let norm2: f32 = grads[k].iter().zip(&grads[from]).map(|(a, b)| (a - b) * (a - b)).sum();
        if norm2 <= 0.0 || !norm2.is_finite() {
            continue;
        }
        let dist = f.abs() / norm2.sqrt();
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, k));
        }
    }
    let (_, k) = best?;
    let f = logits[k] - logits[from];
    let norm2: f32 = grads[k].iter().zip(&grads[from]).map(|(a, b)| (a - b) * (a - b)).sum();
    let c = f.abs() / norm2;
    Some(grads[k].iter().zip(&grads[from]).map(|(a, b)| c * (a - b)).collect())
}

/// Jacobian of all logits with respect to the input, `[K][B·D]`.
fn logit_jacobian(model: &dyn Classifier, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let z = model.logits_on(&mut tape, xv)?;
    let mut jac = Vec::with_capacity(model.num_classes());
    for k in 0..model.num_classes() {
        let col = tape.select_column(z, k)?;
        let s = tape.sum(col)?;
        let mut g = tape.backward(s)?;
        jac.push(g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())));
    }
    Ok((tape.value(z).clone(), jac))
}

/// DeepFool against the true label. Each iteration applies the linearized
/// minimal step; the output is `clip(x + (1 + overshoot)·Σr, 0, 1)`. Samples
/// stop as soon as their prediction differs from the label.
pub fn deepfool(
    model: &dyn Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    steps_max: usize,
    overshoot: f32,
) -> Result<AdversarialBatch> {
    check_batch(model, x, y)?;
    if model.num_classes() < 2 {
        return Err(CoreError::Config("DeepFool needs at least two classes".into()));
    }
    let adv = per_chunk(x, y, |xs, ys, _| {
        let n = xs.sample_len();
        let mut total = vec![0.0f32; xs.numel()];
        let mut cur = xs.clone();
        // Samples still classified as their label; only these are differentiated.
        let mut active: Vec<usize> = (0..ys.len()).collect();
        for _ in 0..steps_max {
            if active.is_empty() {
                break;
            }
            let (z, jac) = logit_jacobian(model, &cur.select(&active)?)?;
            let k = model.num_classes();
            let mut still = Vec::with_capacity(active.len());
            for (a, &b) in active.iter().enumerate() {
                let label = ys[b];
                let row = &z.data()[a * k..(a + 1) * k];
                if argmax(row) != label {
                    continue;
                }
                let grads: Vec<Vec<f32>> = jac.iter().map(|g| g.sample(a).to_vec()).collect();
                let Some(r) = linearized_step(row, &grads, label) else { continue };
                still.push(b);
                let acc = &mut total[b * n..(b + 1) * n];
                for (t, v) in acc.iter_mut().zip(&r) {
                    *t += v;
                }
                let x0 = xs.sample(b);
                for ((c, &t), &o) in cur.data_mut()[b * n..(b + 1) * n].iter_mut().zip(acc.iter()).zip(x0) {
                    *c = (o + (1.0 + overshoot) * t).clamp(0.0, 1.0);
                }
            }
            active = still;
        }
        if !cur.is_finite() {
            return Err(CoreError::Attack("DeepFool produced non-finite values".into()));
        }
        Ok(cur)
    })?;
    AdversarialBatch::assemble(model, x, adv, y)
}

/// Carlini-Wagner L2 with fixed `c`: minimizes `‖δ‖² + c·max(z_y − max_{i≠y} z_i + κ, 0)`
/// over `w` with `x + δ = (tanh(w) + 1)/2`, using Adam. Returns the
/// lowest-norm misclassified iterate (the clean input counts as iterate 0),
/// or the last iterate when none succeeded.
pub fn cw_l2(
    model: &dyn Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    c: f32,
    kappa: f32,
    steps: usize,
    lr: f32,
) -> Result<AdversarialBatch> {
    check_batch(model, x, y)?;
    AttackSpec { cw_const: c, cw_confidence: kappa, steps, cw_lr: lr, ..AttackSpec::defaults(AttackKind::Cw, 0.0) }
        .validate()?;
    let adv = per_chunk(x, y, |xs, ys, _| {
        let n = xs.sample_len();
        let bsz = xs.batch();
        let mut best: Vec<Option<(f32, Vec<f32>)>> = vec![None; bsz];
        let pred0 = argmax_rows(&model.logits(xs)?);
        for b in 0..bsz {
            if pred0[b] != ys[b] {
                best[b] = Some((0.0, xs.sample(b).to_vec()));
            }
        }
        let eps = 1e-6f32;
        let mut w = xs.map(|v| {
            let t = (2.0 * v - 1.0).clamp(-1.0 + eps, 1.0 - eps);
            0.5 * ((1.0 + t) / (1.0 - t)).ln()
        });
        let mut opt = OptimizerState::adam(lr);
        let mut last = xs.clone();
        for _ in 0..steps {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone(), true);
            let x0 = tape.constant(xs.clone());
            let t = tape.tanh(wv)?;
            let half = tape.scale(t, 0.5)?;
            let xa = tape.add_scalar(half, 0.5)?;
            let d = tape.sub(xa, x0)?;
            let d2 = tape.mul(d, d)?;
            let dist = tape.sum(d2)?;
            let z = model.logits_on(&mut tape, xa)?;
            let margin = tape.margin_loss(z, ys, kappa)?;
            let ms = tape.sum(margin)?;
            let weighted = tape.scale(ms, c)?;
            let loss = tape.add(dist, weighted)?;

            let xa_val = tape.value(xa).clone();
            let zv = tape.value(z).clone();
            let k = model.num_classes();
            for b in 0..bsz {
                if argmax(&zv.data()[b * k..(b + 1) * k]) == ys[b] {
                    continue;
                }
                let l2: f32 = xa_val.sample(b).iter().zip(xs.sample(b)).map(|(a, o)| (a - o) * (a - o)).sum();
                if best[b].as_ref().is_none_or(|(bn, _)| l2 < *bn) {
                    best[b] = Some((l2, xa_val.sample(b).to_vec()));
                }
            }
            last = xa_val;
            let grads = tape.backward(loss)?;
            opt.step(std::slice::from_mut(&mut w), &[grads.get(wv)])?;
        }
        let mut out = Vec::with_capacity(xs.numel());
        for (b, slot) in best.into_iter().enumerate() {
            match slot {
                Some((_, v)) => out.extend(v),
                None => out.extend_from_slice(last.sample(b)),
            }
        }
        debug_assert_eq!(out.len(), bsz * n);
        Ok(Tensor::new(xs.shape().to_vec(), out)?)
    })?;
    AdversarialBatch::assemble(model, x, adv, y)
}

/// Dispatches on `spec.kind`.
pub fn run_attack(model: &dyn Classifier, x: &Tensor<f32>, y: &[usize], spec: &AttackSpec) -> Result<AdversarialBatch> {
    spec.validate()?;
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, y, spec.epsilon),
        AttackKind::Bim => iterative_linf(model, x, y, spec.epsilon, spec.steps, spec.step_size, false, spec.seed),
        AttackKind::Pgd => iterative_linf(model, x, y, spec.epsilon, spec.steps, spec.step_size, true, spec.seed),
        AttackKind::DeepFool => deepfool(model, x, y, spec.steps, spec.overshoot),
        AttackKind::Cw => cw_l2(model, x, y, spec.cw_const, spec.cw_confidence, spec.steps, spec.cw_lr),
    }
}

/// Perturbed inputs along `ε ∈ linspace(0, 2·ε_max, grid_points)`.
///
/// L∞ attacks are re-run with each budget. DeepFool is run once and its
/// perturbation `δ` is scaled as `x + t·δ` with `t ∈ linspace(0, 2, grid_points)`.
/// CW has no budget to sweep and is rejected. The first grid point is `x`.
pub fn epsilon_sweep(
    model: &dyn Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    spec: &AttackSpec,
    epsilon_max: f32,
    grid_points: usize,
) -> Result<Vec<(f32, Tensor<f32>)>> {
    if grid_points < 2 {
        return Err(CoreError::Config("epsilon sweep needs at least 2 grid points".into()));
    }
    if spec.kind == AttackKind::Cw {
        return Err(CoreError::Config("CW has no perturbation budget to sweep".into()));
    }
    let grid: Vec<f32> = (0..grid_points).map(|i| 2.0 * epsilon_max * i as f32 / (grid_points - 1) as f32).collect();
    let base = if spec.kind == AttackKind::DeepFool { Some(run_attack(model, x, y, spec)?) } else { None };
    let mut out = Vec::with_capacity(grid_points);
    for (i, &eps) in grid.iter().enumerate() {
        if i == 0 {
            out.push((0.0, x.clone()));
            continue;
        }
        let adv = match &base {
            Some(df) => {
                let t = 2.0 * i as f32 / (grid_points - 1) as f32;
                let data = x
                    .data()
                    .iter()
                    .zip(df.perturbed.data())
                    .map(|(&o, &a)| (o + t * (a - o)).clamp(0.0, 1.0))
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            None => run_attack(model, x, y, &spec.with_epsilon(eps))?.perturbed,
        };
        out.push((eps, adv));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-2.0), -1.0);
    }

    #[test]
    fn closed_form_linear_step() {
        // z = (0, x₀): class 1 at x = (2, 0); boundary at x₀ = 0.
        let grads = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let r = linearized_step(&[0.0, 2.0], &grads, 1).unwrap();
        assert_eq!(r, vec![-2.0, 0.0]);
    }

    #[test]
    fn reachability_is_enforced() {
        let mut s = AttackSpec::defaults(AttackKind::Bim, 0.3);
        s.validate().unwrap();
        s.steps = 1;
        assert!(s.validate().is_err());
        assert!(AttackSpec::defaults(AttackKind::Pgd, 0.3).validate().is_ok());
        assert_eq!("deepfool".parse::<AttackKind>().unwrap(), AttackKind::DeepFool);
    }
}
