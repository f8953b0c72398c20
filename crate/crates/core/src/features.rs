//! Per-layer manifold features: reconstruction error and latent norm per
//! tap, or the full latent vectors.

use std::path::Path;

use aelayers_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeOutputs, LayerAutoencoder};
use crate::csvio::{parse_f64, Table};
use crate::error::{CoreError, Result};
use crate::net::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Noisy,
    Adversarial,
    Unknown,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Noisy => "noisy",
            Provenance::Adversarial => "adversarial",
            Provenance::Unknown => "unknown",
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Provenance {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        [Provenance::Clean, Provenance::Noisy, Provenance::Adversarial, Provenance::Unknown]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CoreError::Format { offset: 0, detail: format!("unknown provenance '{s}'") })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `(rec_err, lat_norm)` per tap.
    Compact,
    /// Latent coordinates of every tap.
    Full,
}

/// Column subsets used by the detectors and the representation ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Full,
    Both,
    RecErr,
    LatNorm,
}

impl Representation {
    pub const ALL: [Representation; 4] =
        [Representation::Full, Representation::Both, Representation::RecErr, Representation::LatNorm];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Full => "full",
            Representation::Both => "both",
            Representation::RecErr => "rec_err",
            Representation::LatNorm => "lat_norm",
        }
    }
}

/// One autoencoder per tap, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct AeBank {
    pub aes: Vec<LayerAutoencoder>,
}

impl AeBank {
    pub fn get(&self, tap: &str) -> Option<&LayerAutoencoder> {
        self.aes.iter().find(|a| a.config.tap == tap)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.aes.iter().try_for_each(|a| a.save(dir.as_ref()))
    }

    pub fn load(dir: impl AsRef<Path>, taps: &[String]) -> Result<Self> {
        let aes = taps.iter().map(|t| LayerAutoencoder::load(dir.as_ref(), t)).collect::<Result<_>>()?;
        Ok(AeBank { aes })
    }
}

/// Everything the autoencoders say about a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub taps: Vec<String>,
    pub sample_ids: Vec<u64>,
    pub provenance: Vec<Provenance>,
    /// Indexed `[tap]`.
    pub outputs: Vec<AeOutputs>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let outputs = self
            .outputs
            .iter()
            .map(|o| {
                Ok(AeOutputs {
                    rec_err: indices.iter().map(|&i| o.rec_err[i]).collect(),
                    lat_norm: indices.iter().map(|&i| o.lat_norm[i]).collect(),
                    latent: o.latent.select(indices)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FeatureSet {
            taps: self.taps.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            outputs,
        })
    }

    /// Column names for a representation, in layout order.
    pub fn columns(&self, rep: Representation) -> Vec<String> {
        let mut cols = Vec::new();
        for (tap, out) in self.taps.iter().zip(&self.outputs) {
            match rep {
                Representation::Full => {
                    cols.extend((0..out.latent.sample_len()).map(|j| format!("{tap}_z{j}")));
                }
                Representation::Both => {
                    cols.push(format!("{tap}_rec_err"));
                    cols.push(format!("{tap}_lat_norm"));
                }
                Representation::RecErr => cols.push(format!("{tap}_rec_err")),
                Representation::LatNorm => cols.push(format!("{tap}_lat_norm")),
            }
        }
        cols
    }

    pub fn rows(&self, rep: Representation) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let mut row = Vec::new();
                for out in &self.outputs {
                    match rep {
                        Representation::Full => row.extend(out.latent.sample(i).iter().map(|&v| f64::from(v))),
                        Representation::Both => {
                            row.push(out.rec_err[i]);
                            row.push(out.lat_norm[i]);
                        }
                        Representation::RecErr => row.push(out.rec_err[i]),
                        Representation::LatNorm => row.push(out.lat_norm[i]),
                    }
                }
                row
            })
            .collect()
    }

    /// Inverse of [`FeatureSet::matrix`] given both layouts of the same samples.
    pub fn from_matrices(compact: &FeatureMatrix, full: &FeatureMatrix) -> Result<Self> {
        let bad = |m: &str| Err(CoreError::Format { offset: 0, detail: m.to_string() });
        if compact.mode != FeatureMode::Compact || full.mode != FeatureMode::Full {
            return bad("expected one compact and one full feature matrix");
        }
        if compact.sample_ids != full.sample_ids || compact.provenance != full.provenance {
            return bad("compact and full feature matrices list different samples");
        }
        let mut taps = Vec::new();
        for pair in compact.columns.chunks(2) {
            match (pair[0].strip_suffix("_rec_err"), pair.get(1).and_then(|c| c.strip_suffix("_lat_norm"))) {
                (Some(a), Some(b)) if a == b => taps.push(a.to_string()),
                _ => return bad("compact columns must alternate <tap>_rec_err, <tap>_lat_norm"),
            }
        }
        let n = compact.sample_ids.len();
        let mut outputs = Vec::with_capacity(taps.len());
        let mut start = 0;
        for (t, tap) in taps.iter().enumerate() {
            let prefix = format!("{tap}_z");
            let z = full.columns[start..].iter().take_while(|c| c.starts_with(&prefix)).count();
            if z == 0 {
                return bad(&format!("full feature matrix has no latent columns for {tap}"));
            }
            let mut latent = Vec::with_capacity(n * z);
            for row in &full.rows {
                latent.extend(row[start..start + z].iter().map(|&v| v as f32));
            }
            outputs.push(AeOutputs {
                rec_err: compact.rows.iter().map(|r| r[2 * t]).collect(),
                lat_norm: compact.rows.iter().map(|r| r[2 * t + 1]).collect(),
                latent: Tensor::new(vec![n, z], latent)?,
            });
            start += z;
        }
        if start != full.columns.len() {
            return bad("full feature matrix has columns for unknown taps");
        }
        Ok(FeatureSet { taps, sample_ids: compact.sample_ids.clone(), provenance: compact.provenance.clone(), outputs })
    }

    pub fn matrix(&self, mode: FeatureMode) -> FeatureMatrix {
        let rep = match mode {
            FeatureMode::Compact => Representation::Both,
            FeatureMode::Full => Representation::Full,
        };
        FeatureMatrix {
            mode,
            columns: self.columns(rep),
            sample_ids: self.sample_ids.clone(),
            provenance: self.provenance.clone(),
            rows: self.rows(rep),
        }
    }
}

/// Feeds every tap of `x` through its autoencoder.
pub fn extract_feature_set(
    net: &Network,
    bank: &AeBank,
    x: &Tensor<f32>,
    sample_ids: Vec<u64>,
    provenance: Vec<Provenance>,
) -> Result<FeatureSet> {
    if sample_ids.len() != x.batch() || provenance.len() != x.batch() {
        return Err(CoreError::Config("sample ids and provenance must match the batch".into()));
    }
    let taps = net.config().tap_names();
    let aes: Vec<&LayerAutoencoder> = taps
        .iter()
        .map(|t| bank.get(t).ok_or_else(|| CoreError::Config(format!("no autoencoder for tap {t}"))))
        .collect::<Result<_>>()?;
    let (_, acts) = net.forward_with_taps(x)?;
    let outputs = aes.iter().zip(&acts.values).map(|(ae, a)| ae.apply(a)).collect::<Result<_>>()?;
    Ok(FeatureSet { taps, sample_ids, provenance, outputs })
}

/// Feature matrix for `x` with ids `0..N` and unknown provenance.
pub fn extract_features(net: &Network, bank: &AeBank, x: &Tensor<f32>, mode: FeatureMode) -> Result<FeatureMatrix> {
    let n = x.batch();
    Ok(extract_feature_set(net, bank, x, (0..n as u64).collect(), vec![Provenance::Unknown; n])?.matrix(mode))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub mode: FeatureMode,
    pub columns: Vec<String>,
    pub sample_ids: Vec<u64>,
    pub provenance: Vec<Provenance>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["sample_id", "provenance"].into_iter().map(String::from).chain(self.columns.clone()));
        for ((id, p), row) in self.sample_ids.iter().zip(&self.provenance).zip(&self.rows) {
            let mut r = vec![id.to_string(), p.to_string()];
            r.extend(row.iter().map(|v| v.to_string()));
            t.push(r);
        }
        t
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        if t.header.len() < 3 || t.header[0] != "sample_id" || t.header[1] != "provenance" {
            return Err(CoreError::Format { offset: 0, detail: "feature CSV header must start sample_id,provenance".into() });
        }
        let columns: Vec<String> = t.header[2..].to_vec();
        let mode = if columns.iter().all(|c| c.ends_with("_rec_err") || c.ends_with("_lat_norm")) {
            FeatureMode::Compact
        } else {
            FeatureMode::Full
        };
        let mut m = FeatureMatrix { mode, columns, sample_ids: vec![], provenance: vec![], rows: vec![] };
        for r in &t.rows {
            if r.len() != t.header.len() {
                return Err(CoreError::Format { offset: 0, detail: "ragged feature CSV row".into() });
            }
            m.sample_ids.push(r[0].parse().map_err(|_| CoreError::Format { offset: 0, detail: format!("bad id '{}'", r[0]) })?);
            m.provenance.push(r[1].parse()?);
            m.rows.push(r[2..].iter().map(|s| parse_f64(s)).collect::<Result<_>>()?);
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        FeatureMatrix::from_table(&Table::read(path)?)
    }
}
