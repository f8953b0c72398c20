//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a hard criterion fails. Criterion 7 is reported but does not
//! fail the run.
//!
//! Criteria 2 and 4-10 run the desk preset end to end through the `aelayers`
//! binary with `--threads 1`, twice.

#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use aelayers_cli::manifest::RunManifest;
use aelayers_cli::pipeline::read_artifact;
use aelayers_cli::report::{AblationStudy, EvalReport, ImportanceSummary, TrajectorySummary};
use aelayers_core::attack::{deepfool, fgsm, iterative_linf, AttackKind};
use aelayers_core::autoencoder::{mmd2_on, AeArch, AeConfig, LayerAutoencoder};
use aelayers_core::csvio::Table;
use aelayers_core::features::Representation;
use aelayers_core::net::{Classifier, Network};
use aelayers_detect::auroc;
use aelayers_tensor::gradcheck::check_all_ops;
use aelayers_tensor::{read_archive_file, KernelKind, Tape, Tensor, Var};

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
}

fn verdict(id: u32, title: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, title, pass, hard: true, detail }
}

/// xorshift stream in [-1, 1).
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn vec32(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next() as f32).collect()
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

// ---- 1

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let reports = match check_all_ops(20, 0x00ac_ce97) {
        Ok(r) => r,
        Err(e) => return verdict(1, "gradient correctness", false, format!("gradcheck failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst32 = reports.iter().map(|r| r.max_rel_err_f32).fold(0.0, f64::max);
    let worst64 = reports.iter().map(|r| r.max_rel_err_f64).fold(0.0, f64::max);
    let min_n = reports.iter().map(|r| r.instances).min().unwrap_or(0);
    let pass = !reports.is_empty() && worst32 < 1e-2 && worst64 < 1e-5 && min_n >= 20 && secs < 60.0;
    verdict(
        1,
        "gradient correctness",
        pass,
        format!("{} ops, >= {min_n} instances each, max rel err f32 {worst32:.2e} f64 {worst64:.2e}, {secs:.1}s", reports.len()),
    )
}

// ---- 2

/// `logits = x·W + b`.
struct Linear {
    w: Tensor<f32>,
    b: Tensor<f32>,
}

impl Classifier for Linear {
    fn num_classes(&self) -> usize {
        self.b.numel()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.w.shape()[0]]
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> aelayers_core::Result<Var> {
        let (w, b) = (tape.constant(self.w.clone()), tape.constant(self.b.clone()));
        Ok(tape.dense(x, w, b)?)
    }
}

/// `(1 + η)` times the minimal move onto the nearest decision hyperplane.
fn deepfool_closed_form(m: &Linear, x: &[f32], y: usize, overshoot: f64) -> Vec<f64> {
    let (d, k) = (x.len(), m.num_classes());
    let w = |i: usize, c: usize| f64::from(m.w.data()[i * k + c]);
    let z: Vec<f64> = (0..k).map(|c| (0..d).map(|i| f64::from(x[i]) * w(i, c)).sum::<f64>() + f64::from(m.b.data()[c])).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for c in (0..k).filter(|&c| c != y) {
        let dw: Vec<f64> = (0..d).map(|i| w(i, c) - w(i, y)).collect();
        let n2: f64 = dw.iter().map(|v| v * v).sum();
        let f = z[c] - z[y];
        let dist = f.abs() / n2.sqrt();
        if best.as_ref().is_none_or(|(b, _)| dist < *b) {
            best = Some((dist, dw.iter().map(|v| -(1.0 + overshoot) * f * v / n2).collect()));
        }
    }
    best.expect("two or more classes").1
}

fn attack_contracts(run: &Path) -> Result<Verdict, String> {
    let mut checked = 0usize;
    let mut violations = 0usize;
    let summary = |k: AttackKind| -> Result<f32, String> {
        let s: aelayers_cli::report::AttackSummary =
            read_artifact(&run.join(format!("attacks/{k}/summary.json"))).map_err(|e| e.to_string())?;
        Ok(s.spec.epsilon)
    };
    for kind in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd] {
        let eps = summary(kind)?;
        let a = read_archive_file(run.join(format!("attacks/{kind}/batch.aedm"))).map_err(|e| e.to_string())?;
        let (x, adv) = (a.require("originals").map_err(|e| e.to_string())?, a.require("perturbed").map_err(|e| e.to_string())?);
        for (o, p) in x.data().iter().zip(adv.data()) {
            checked += 1;
            if (p - o).abs() > eps + 1e-6 || !(0.0..=1.0).contains(p) {
                violations += 1;
            }
        }
    }

    // FGSM against one-step BIM on the trained desk network.
    let net = Network::load(run.join("target"), "target").map_err(|e| e.to_string())?;
    let a = read_archive_file(run.join("attacks/fgsm/batch.aedm")).map_err(|e| e.to_string())?;
    let x = a.require("originals").map_err(|e| e.to_string())?;
    let manifest = Table::read(run.join("attacks/fgsm/manifest.csv")).map_err(|e| e.to_string())?;
    let col = manifest.column("true_label").map_err(|e| e.to_string())?;
    let y: Vec<usize> = manifest.rows.iter().map(|r| r[col].parse().unwrap()).collect();
    let eps = summary(AttackKind::Fgsm)?;
    let f = fgsm(&net, x, &y, eps).map_err(|e| e.to_string())?;
    let b = iterative_linf(&net, x, &y, eps, 1, eps, false, 0).map_err(|e| e.to_string())?;
    let identical = f.perturbed.data().iter().zip(b.perturbed.data()).all(|(p, q)| p.to_bits() == q.to_bits());

    // DeepFool on random linear models against the closed form.
    let mut rng = Rng(0x00df_00df);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 100 {
        let (d, k) = (8, 4);
        let m = Linear {
            w: Tensor::new(vec![d, k], rng.vec32(d * k).iter().map(|v| v * 2.0).collect()).unwrap(),
            b: Tensor::new(vec![k], rng.vec32(k).iter().map(|v| v * 0.1).collect()).unwrap(),
        };
        let xs = Tensor::new(vec![1, d], rng.vec32(d).iter().map(|v| 0.5 + 0.05 * v).collect()).unwrap();
        let y0 = m.predict(&xs).unwrap()[0];
        let adv = deepfool(&m, &xs, &[y0], 50, 0.02).map_err(|e| e.to_string())?;
        if adv.perturbed.data().iter().any(|&v| v == 0.0 || v == 1.0) {
            continue; // clipping leaves the closed form
        }
        let want = deepfool_closed_form(&m, xs.data(), y0, 0.02);
        let got: Vec<f64> = adv.perturbed.data().iter().zip(xs.data()).map(|(a, o)| f64::from(a - o)).collect();
        let diff = got.iter().zip(&want).map(|(g, w)| (g - w).powi(2)).sum::<f64>().sqrt();
        let norm = want.iter().map(|w| w * w).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
        cases += 1;
    }
    let pass = violations == 0 && identical && worst < 0.02;
    Ok(verdict(
        2,
        "attack contracts",
        pass,
        format!(
            "{violations}/{checked} L∞/range violations; FGSM vs 1-step BIM bit-identical: {identical}; DeepFool max rel dev from closed form {worst:.2e} over {cases} linear models"
        ),
    ))
}

// ---- 3

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &s) in scores.iter().enumerate() {
        for (j, &t) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if s > t { 1.0 } else if s == t { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn oracle_equivalence() -> Verdict {
    let mut rng = Rng(0x0a0c);
    let mut auroc_mismatch = 0;
    let mut instances = 0;
    while instances < 100 {
        let n = 2 + ((rng.next() + 1.0) * 15.0) as usize;
        // Coarse scores so that ties are common.
        let scores: Vec<f64> = (0..n).map(|_| (rng.next() * 4.0).round()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.next() > 0.0)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        instances += 1;
        if auroc(&scores, &labels).unwrap() != pairwise_auroc(&scores, &labels) {
            auroc_mismatch += 1;
        }
    }

    let mut worst = [0.0f64; 4]; // mmd, matmul, conv, rec_err
    for trial in 0..5 {
        // MMD against the kernel definition.
        let (n, m, z) = (5, 6, 3);
        let (a, b) = (rng.vec32(n * z), rng.vec32(m * z));
        for (kind, scale) in [(KernelKind::Imq, 6.0f32), (KernelKind::Rbf, 1.5)] {
            let k = |p: &[f32], q: &[f32]| {
                let d2: f64 = p.iter().zip(q).map(|(x, y)| f64::from(x - y).powi(2)).sum();
                let s = f64::from(scale);
                match kind {
                    KernelKind::Imq => s / (s + d2),
                    KernelKind::Rbf => (-d2 / s).exp(),
                }
            };
            let mean = |x: &[f32], nx: usize, y: &[f32], ny: usize| {
                let mut t = 0.0;
                for i in 0..nx {
                    for j in 0..ny {
                        t += k(&x[i * z..(i + 1) * z], &y[j * z..(j + 1) * z]);
                    }
                }
                t / (nx * ny) as f64
            };
            let want = mean(&a, n, &a, n) + mean(&b, m, &b, m) - 2.0 * mean(&a, n, &b, m);
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::new(vec![n, z], a.clone()).unwrap());
            let bv = tape.constant(Tensor::new(vec![m, z], b.clone()).unwrap());
            let m = mmd2_on(&mut tape, av, bv, kind, scale).unwrap();
            let got = f64::from(tape.value(m).item().unwrap());
            worst[0] = worst[0].max((got - want).abs() / want.abs().max(1e-3));
        }

        // Dense layer against the triple loop.
        let (r, i, o) = (3, 7, 4);
        let (x, w, bias) = (rng.vec32(r * i), rng.vec32(i * o), rng.vec32(o));
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![r, i], x.clone()).unwrap());
        let wv = tape.constant(Tensor::new(vec![i, o], w.clone()).unwrap());
        let bv = tape.constant(Tensor::new(vec![o], bias.clone()).unwrap());
        let yv = tape.dense(xv, wv, bv).unwrap();
        for row in 0..r {
            for col in 0..o {
                let want = f64::from(bias[col]) + (0..i).map(|t| f64::from(x[row * i + t]) * f64::from(w[t * o + col])).sum::<f64>();
                let got = f64::from(tape.value(yv).data()[row * o + col]);
                worst[1] = worst[1].max((got - want).abs() / want.abs().max(1e-3));
            }
        }

        // Convolution against the sliding-window sum.
        let (c, h, f, kk) = (2, 5, 3, 3);
        let (x, ker) = (rng.vec32(c * h * h), rng.vec32(f * c * kk * kk));
        let stride = 1 + trial % 2;
        let pad = trial % 2;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, c, h, h], x.clone()).unwrap());
        let kv = tape.constant(Tensor::new(vec![f, c, kk, kk], ker.clone()).unwrap());
        let yv = tape.conv2d(xv, kv, stride, pad).unwrap();
        let out = tape.value(yv);
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        for ff in 0..f {
            for i0 in 0..oh {
                for j0 in 0..ow {
                    let mut want = 0.0f64;
                    for cc in 0..c {
                        for di in 0..kk {
                            for dj in 0..kk {
                                let (r0, s0) = ((i0 * stride + di) as isize - pad as isize, (j0 * stride + dj) as isize - pad as isize);
                                if (0..h as isize).contains(&r0) && (0..h as isize).contains(&s0) {
                                    want += f64::from(x[(cc * h + r0 as usize) * h + s0 as usize])
                                        * f64::from(ker[((ff * c + cc) * kk + di) * kk + dj]);
                                }
                            }
                        }
                    }
                    let got = f64::from(out.data()[(ff * oh + i0) * ow + j0]);
                    worst[2] = worst[2].max((got - want).abs() / want.abs().max(1e-3));
                }
            }
        }

        // Dense autoencoder reconstruction error against scalar loops.
        let (d, hid, zd) = (6, 5, 3);
        let shapes = [d * hid, hid, hid * zd, zd, zd * hid, hid, hid * d, d];
        let p: Vec<Vec<f32>> = shapes.iter().map(|&s| rng.vec32(s)).collect();
        let config = AeConfig { latent: zd, width: hid, ..AeConfig::for_tap("t", 1) };
        let arch = AeArch::Dense { inputs: d, hidden: hid };
        let params = arch.param_shapes(zd).into_iter().zip(&p).map(|(s, v)| Tensor::new(s, v.clone()).unwrap()).collect();
        let ae = LayerAutoencoder::from_parts(config, arch, params, 1.0, vec![]).unwrap();
        let xs = Tensor::new(vec![4, d], rng.vec32(4 * d)).unwrap();
        let got = ae.reconstruction_error(&xs).unwrap();
        let layer = |v: &[f64], w: &[f32], b: &[f32], relu: bool| -> Vec<f64> {
            (0..b.len())
                .map(|j| {
                    let s = v.iter().enumerate().map(|(t, vt)| vt * f64::from(w[t * b.len() + j])).sum::<f64>() + f64::from(b[j]);
                    if relu { s.max(0.0) } else { s }
                })
                .collect()
        };
        for s in 0..4 {
            let xi: Vec<f64> = xs.sample(s).iter().map(|&v| f64::from(v)).collect();
            let code = layer(&layer(&xi, &p[0], &p[1], true), &p[2], &p[3], false);
            let rec = layer(&layer(&code, &p[4], &p[5], true), &p[6], &p[7], false);
            let want: f64 = xi.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum();
            worst[3] = worst[3].max(rel_err(got[s], want));
        }
    }
    let pass = auroc_mismatch == 0 && worst.iter().all(|&e| e < 1e-5);
    verdict(
        3,
        "oracle equivalence",
        pass,
        format!(
            "AUROC {auroc_mismatch}/100 mismatches vs pairwise; max rel err mmd {:.1e}, matmul {:.1e}, conv {:.1e}, rec_err {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---- desk pipeline

fn run_desk(root: &Path) -> Result<(PathBuf, f64), String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_aelayers"))
        .args(["--preset", "desk", "--threads", "1", "all"])
        .env("AELAYERS_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("desk run failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok((root.join("runs/desk"), start.elapsed().as_secs_f64()))
}

fn artifact<T: serde::de::DeserializeOwned>(run: &Path, rel: &str) -> Result<T, String> {
    read_artifact(&run.join(rel)).map_err(|e| e.to_string())
}

fn end_to_end(run: &Path, seconds: f64) -> Result<Vec<Verdict>, String> {
    let report: EvalReport = artifact(run, "evaluate/report.json")?;
    let get = |k: AttackKind, s: &str| report.auroc(k, s).ok_or(format!("no {s} AUROC for {k}"));
    let mut out = Vec::new();

    let (f, b, p) = (
        get(AttackKind::Fgsm, "supervised_full")?,
        get(AttackKind::Bim, "supervised_full")?,
        get(AttackKind::Pgd, "supervised_full")?,
    );
    out.push(verdict(
        4,
        "supervised detection",
        f >= 0.95 && b >= 0.90 && p >= 0.90 && seconds < 1800.0,
        format!("SVM full latents AUROC FGSM {f:.4} (>= 0.95), BIM {b:.4}, PGD {p:.4} (>= 0.90); desk run {seconds:.0}s (< 1800s)"),
    ));

    let u = get(AttackKind::Fgsm, "unsupervised_compact")?;
    out.push(verdict(5, "unsupervised detection", u >= 0.80, format!("isolation forest compact FGSM AUROC {u:.4} (>= 0.80)")));

    let mut lines = Vec::new();
    let mut h1 = true;
    for k in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd] {
        let s: ImportanceSummary = artifact(run, &format!("importance/{k}.json"))?;
        h1 &= s.importance.rec_err_total > s.importance.lat_norm_total;
        lines.push(format!("{k} rec_err {:.3} vs lat_norm {:.3}", s.importance.rec_err_total, s.importance.lat_norm_total));
    }
    out.push(verdict(6, "reconstruction error dominates importance", h1, lines.join("; ")));

    let mut lines = Vec::new();
    let mut h2 = true;
    for k in [AttackKind::Cw, AttackKind::DeepFool] {
        let s: ImportanceSummary = artifact(run, &format!("importance/{k}.json"))?;
        let (first, last) = (s.depth_profile[0], s.depth_profile[s.depth_profile.len() - 1]);
        h2 &= last >= first;
        lines.push(format!("{k} first tap {first:.3}, deepest tap {last:.3}"));
    }
    out.push(Verdict {
        id: 7,
        title: "depth dominance for CW and DeepFool (soft)",
        pass: h2,
        hard: false,
        detail: lines.join("; "),
    });

    let t: TrajectorySummary = artifact(run, "trajectory/summary.json")?;
    out.push(verdict(
        8,
        "trajectories leave the manifold",
        t.attack == AttackKind::Bim && t.deepest_rec_err_increase >= 0.90,
        format!("fraction {:.3} of {} BIM trajectories raise deepest-tap rec_err at 2ε (>= 0.90)", t.deepest_rec_err_increase, t.samples),
    ));

    let a: AblationStudy = artifact(run, "studies/ablation.json")?;
    let sup = |r: Representation| a.rows.iter().find(|x| x.representation == r).map(|x| x.supervised).ok_or("missing ablation row");
    let (full, both, rec, lat) =
        (sup(Representation::Full)?, sup(Representation::Both)?, sup(Representation::RecErr)?, sup(Representation::LatNorm)?);
    out.push(verdict(
        9,
        "representation ablation ordering",
        a.attack == AttackKind::Fgsm && full >= both - 0.02 && rec >= lat,
        format!("FGSM supervised AUROC full {full:.4}, both {both:.4}, rec_err {rec:.4}, lat_norm {lat:.4}"),
    ));
    Ok(out)
}

fn reproducibility(a: &Path, b: &Path) -> Result<Verdict, String> {
    let mut same = true;
    let mut notes = Vec::new();
    for rel in ["evaluate/report.json", "evaluate/report.csv"] {
        let (x, y) = (std::fs::read(a.join(rel)).map_err(|e| e.to_string())?, std::fs::read(b.join(rel)).map_err(|e| e.to_string())?);
        same &= x == y;
        notes.push(format!("{rel} {}", if x == y { "identical" } else { "differs" }));
    }
    let (ma, mb) = (RunManifest::load(a).map_err(|e| e.to_string())?, RunManifest::load(b).map_err(|e| e.to_string())?);
    let fp = ma.zip(mb).map(|(x, y)| x.fingerprint == y.fingerprint).unwrap_or(false);
    Ok(verdict(10, "reproducibility", same && fp, format!("{}; same fingerprint: {fp}", notes.join(", "))))
}

fn main() -> ExitCode {
    let mut verdicts = vec![gradient_correctness(), oracle_equivalence()];
    let roots = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pipeline = run_desk(roots.0.path()).and_then(|(run, secs)| {
        let mut v = vec![attack_contracts(&run)?];
        v.extend(end_to_end(&run, secs)?);
        let (second, _) = run_desk(roots.1.path())?;
        v.push(reproducibility(&run, &second)?);
        Ok(v)
    });
    match pipeline {
        Ok(v) => verdicts.extend(v),
        Err(e) => {
            for (id, title) in [
                (2, "attack contracts"),
                (4, "supervised detection"),
                (5, "unsupervised detection"),
                (6, "reconstruction error dominates importance"),
                (7, "depth dominance for CW and DeepFool (soft)"),
                (8, "trajectories leave the manifold"),
                (9, "representation ablation ordering"),
                (10, "reproducibility"),
            ] {
                verdicts.push(verdict(id, title, false, format!("pipeline error: {e}")));
            }
        }
    }
    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        let tag = match (v.pass, v.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        println!("[{tag}] {:>2}. {}: {}", v.id, v.title, v.detail);
    }
    if verdicts.iter().any(|v| v.hard && !v.pass) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
