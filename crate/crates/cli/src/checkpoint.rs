//! Checkpoint directory: `checkpoint.toml` (format version, architecture
//! fingerprint, config echo, tensor index, blob digest) and `tensors.f32`
//! (every tensor's little-endian f32 values, concatenated in index order).
//!
//! Tensors are named `param/<name>`, `running/<layer>/<domain>/{mean,var}`,
//! `fisher/<name>` and `anchor/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use bnanchor_core::ewc::{AnchorSnapshot, FisherDiagonal};
use bnanchor_core::fsio::{f32s_to_le_bytes, le_bytes_to_f32s, read_verified, sha256_hex, write_atomic};
use bnanchor_core::nn::{
    DomainTag, Network, ParamMap, RunningStats, StatSource, ARCHITECTURE_FINGERPRINT,
};
use bnanchor_core::trainer::TrainConfig;
use bnanchor_core::{Error, Tensor};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "checkpoint.toml";
pub const BLOB_FILE: &str = "tensors.f32";
const FORMAT: &str = "bnanchor-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub fisher: Option<FisherDiagonal>,
    pub anchor: Option<AnchorSnapshot>,
    pub config: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    fingerprint: String,
    bn_source: StatSource,
    blob_bytes: u64,
    blob_sha256: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn push(entries: &mut Vec<TensorEntry>, values: &mut Vec<f32>, name: String, shape: &[usize], data: &[f32]) {
    entries.push(TensorEntry {
        name,
        shape: shape.to_vec(),
        offset: values.len(),
    });
    values.extend_from_slice(data);
}

impl Checkpoint {
    pub fn new(network: Network, config: TrainConfig) -> Self {
        Self {
            network,
            fisher: None,
            anchor: None,
            config,
        }
    }

    /// Writes into `dir`, creating `dir` itself but not its parents.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        if !dir.is_dir() {
            std::fs::create_dir(dir)?;
        }
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for (name, t) in self.network.parameters() {
            push(&mut entries, &mut values, format!("param/{name}"), t.shape(), t.data());
        }
        for (layer, bn) in self.network.bn_layers() {
            for d in bn.domains() {
                let s = bn.running_stats(d).expect("listed domain");
                let c = [s.mean.len()];
                push(&mut entries, &mut values, format!("running/{layer}/{d}/mean"), &c, &s.mean);
                push(&mut entries, &mut values, format!("running/{layer}/{d}/var"), &c, &s.var);
            }
        }
        let maps = [("fisher", self.fisher.as_ref().map(|f| &f.0)), ("anchor", self.anchor.as_ref().map(|a| &a.0))];
        for (prefix, map) in maps {
            for (name, t) in map.into_iter().flatten() {
                push(&mut entries, &mut values, format!("{prefix}/{name}"), t.shape(), t.data());
            }
        }
        let blob = f32s_to_le_bytes(&values);
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            fingerprint: ARCHITECTURE_FINGERPRINT.into(),
            bn_source: self.network.bn_source(),
            blob_bytes: blob.len() as u64,
            blob_sha256: sha256_hex(&blob),
            config: self.config,
            tensors: entries,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::State(format!("cannot encode checkpoint manifest: {e}")))?;
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    /// Reads a checkpoint; an architecture mismatch is a usage error, any
    /// structural damage is corruption.
    pub fn load(dir: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Corrupt(format!("checkpoint manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Corrupt(format!(
                "checkpoint is {} v{}, expected {FORMAT} v{VERSION}",
                m.format, m.version
            ))
            .into());
        }
        if m.fingerprint != ARCHITECTURE_FINGERPRINT {
            return Err(CliError::Usage(format!(
                "checkpoint architecture `{}` does not match this build (`{ARCHITECTURE_FINGERPRINT}`)",
                m.fingerprint
            )));
        }
        let values = le_bytes_to_f32s(&read_verified(&dir.join(BLOB_FILE), m.blob_bytes, &m.blob_sha256)?)?;

        let corrupt = |msg: String| CliError::Core(Error::Corrupt(msg));
        let mut params = ParamMap::new();
        let mut fisher = ParamMap::new();
        let mut anchor = ParamMap::new();
        let mut running: Vec<(String, DomainTag, String, Vec<f32>)> = Vec::new();
        for e in &m.tensors {
            let len: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + len)
                .ok_or_else(|| corrupt(format!("tensor `{}` runs past the blob", e.name)))?
                .to_vec();
            let parts: Vec<&str> = e.name.split('/').collect();
            match parts.as_slice() {
                ["param", n] | ["fisher", n] | ["anchor", n] => {
                    let t = Tensor::new(&e.shape, data).map_err(|err| corrupt(format!("{}: {err}", e.name)))?;
                    let map = match parts[0] {
                        "param" => &mut params,
                        "fisher" => &mut fisher,
                        _ => &mut anchor,
                    };
                    map.insert(n.to_string(), t);
                }
                ["running", layer, d, which @ ("mean" | "var")] => {
                    let d: DomainTag = d.parse().map_err(|_| corrupt(format!("bad domain in `{}`", e.name)))?;
                    running.push((layer.to_string(), d, which.to_string(), data));
                }
                _ => return Err(corrupt(format!("unexpected tensor `{}`", e.name))),
            }
        }
        let mut network = Network::from_parameters(&params).map_err(|e| corrupt(e.to_string()))?;
        running.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        for pair in running.chunks(2) {
            let [(layer, d, w1, mean), (l2, d2, w2, var)] = pair else {
                return Err(corrupt("unpaired running statistics".into()));
            };
            if (layer, d) != (l2, d2) || w1 != "mean" || w2 != "var" {
                return Err(corrupt(format!("unpaired running statistics for {layer}/{d}")));
            }
            let bn = match layer.as_str() {
                "bn1" => &mut network.bn1,
                "bn2" => &mut network.bn2,
                _ => return Err(corrupt(format!("unknown layer `{layer}`"))),
            };
            bn.set_running_stats(*d, RunningStats { mean: mean.clone(), var: var.clone() })
                .map_err(|e| corrupt(e.to_string()))?;
        }
        network.set_bn_source(m.bn_source).map_err(|e| corrupt(e.to_string()))?;
        Ok(Self {
            network,
            fisher: (!fisher.is_empty()).then_some(FisherDiagonal(fisher)),
            anchor: (!anchor.is_empty()).then_some(AnchorSnapshot(anchor)),
            config: m.config,
        })
    }
}
