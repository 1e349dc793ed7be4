//! Federation checkpoints.
//!
//! ```text
//! "FPRC"  version:u32  manifest_len:u64  manifest (canonical JSON)  blobs
//! ```
//!
//! The manifest lists every client's parameters (name, shape, shared or
//! personalized) and RNG state. Blobs hold, per client and parameter in
//! manifest order, the values then the momentum buffer as little-endian
//! `f64`, so a save/load cycle is bitwise lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Federation, PartitionedParams, SharedSnapshot};
use crate::model::{ForgeryModel, ModelSpec};
use crate::rng::RngState;
use crate::tensor::{ParamTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"FPRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Shared,
    Personalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub id: usize,
    pub rng: RngState,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub round: usize,
    pub model: ModelSpec,
    pub server_rng: RngState,
    pub clients: Vec<ClientEntry>,
}

/// Decoded parameter values and momentum buffers of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientCheckpoint {
    pub model: ForgeryModel,
    pub partition: PartitionedParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub clients: Vec<ClientCheckpoint>,
}

impl Checkpoint {
    pub fn capture(fed: &Federation) -> Self {
        let clients: Vec<ClientCheckpoint> = fed
            .clients
            .iter()
            .map(|c| {
                // gradients are transient and not stored
                let mut model = c.model().clone();
                model.params_mut().iter_mut().for_each(|p| p.value.clear_grad());
                ClientCheckpoint {
                    model,
                    partition: c.partition().clone(),
                }
            })
            .collect();
        let entries = fed
            .clients
            .iter()
            .zip(&clients)
            .map(|(c, cp)| ClientEntry {
                id: c.id(),
                rng: RngState::capture(c.rng()),
                params: cp
                    .model
                    .params()
                    .iter()
                    .map(|p| ParamEntry {
                        name: p.name.clone(),
                        shape: p.shape().to_vec(),
                        role: if cp.partition.is_shared(&p.name) {
                            ParamRole::Shared
                        } else {
                            ParamRole::Personalized
                        },
                    })
                    .collect(),
            })
            .collect();
        let model = *fed
            .clients
            .first()
            .map(|c| c.model().spec())
            .expect("federation has at least one client");
        Self {
            manifest: Manifest {
                round: fed.round,
                model,
                server_rng: RngState::capture(&fed.server_rng),
                clients: entries,
            },
            clients,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for c in &self.clients {
            for p in c.model.params() {
                for v in p.value.data().iter().chain(&p.velocity) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(Error::format("magic", "expected \"FPRC\""));
        }
        let version = read_u32(bytes, 4, "version")?;
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let len = read_u64(bytes, 8, "manifest length")?;
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("manifest length", format!("{len} exceeds file size")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        manifest.model.validate().map_err(|e| Error::format("model", e.to_string()))?;
        let layout = manifest.model.layout();

        // sizes come from the validated layout, so check them against the
        // remaining bytes before reading
        let per_client: usize = layout.iter().map(|(_, s)| 2 * 8 * s.iter().product::<usize>()).sum();
        let expected = per_client
            .checked_mul(manifest.clients.len())
            .ok_or_else(|| Error::format("clients", "overflow"))?;
        if bytes.len() - end != expected {
            return Err(Error::format(
                "blobs",
                format!("expected {expected} bytes, found {}", bytes.len() - end),
            ));
        }

        let mut pos = end;
        let mut clients = Vec::with_capacity(manifest.clients.len());
        for (i, entry) in manifest.clients.iter().enumerate() {
            if entry.id != i {
                return Err(Error::format("clients", format!("entry {i} has id {}", entry.id)));
            }
            entry.rng.restore()?;
            if entry.params.len() != layout.len() {
                return Err(Error::format("params", format!("client {i} lists {} parameters", entry.params.len())));
            }
            let mut params = Vec::with_capacity(layout.len());
            let mut partition = PartitionedParams {
                shared: Default::default(),
                personalized: Default::default(),
            };
            for (p, (name, shape)) in entry.params.iter().zip(&layout) {
                if &p.name != name || &p.shape != shape {
                    return Err(Error::format(
                        "params",
                        format!("client {i} lists {} {:?}, layout expects {name} {shape:?}", p.name, p.shape),
                    ));
                }
                let n: usize = shape.iter().product();
                let value = read_f64s(&bytes[pos..pos + 8 * n]);
                let velocity = read_f64s(&bytes[pos + 8 * n..pos + 16 * n]);
                pos += 16 * n;
                if velocity.iter().any(|v| !v.is_finite()) {
                    return Err(Error::format("blobs", format!("non-finite momentum in {name}")));
                }
                let value = Tensor::new(shape.clone(), value)
                    .map_err(|e| Error::format("blobs", format!("{name}: {e}")))?;
                let mut param = ParamTensor::new(name.clone(), value);
                param.velocity = velocity;
                params.push(param);
                match p.role {
                    ParamRole::Shared => partition.shared.insert(name.clone()),
                    ParamRole::Personalized => partition.personalized.insert(name.clone()),
                };
            }
            clients.push(ClientCheckpoint {
                model: ForgeryModel::from_params(manifest.model, params)?,
                partition,
            });
        }
        Ok(Self { manifest, clients })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Models in client order, e.g. for cross evaluation.
    pub fn models(&self) -> Vec<&ForgeryModel> {
        self.clients.iter().map(|c| &c.model).collect()
    }

    /// Continues `fed` from this checkpoint. `fed` supplies the client data;
    /// models, RNG streams and the round counter are replaced.
    pub fn restore_into(&self, fed: &mut Federation) -> Result<()> {
        if fed.clients.len() != self.clients.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} clients, federation has {}",
                self.clients.len(),
                fed.clients.len()
            )));
        }
        for (client, cp) in fed.clients.iter().zip(&self.clients) {
            if client.partition() != &cp.partition {
                return Err(Error::Partition(format!(
                    "client {} checkpoint shares {:?}, run shares {:?}",
                    client.id(),
                    cp.partition.shared,
                    client.partition().shared
                )));
            }
        }
        for ((client, cp), entry) in fed.clients.iter_mut().zip(&self.clients).zip(&self.manifest.clients) {
            client.restore(cp.model.clone(), entry.rng.restore()?)?;
        }
        let first = &fed.clients[0];
        fed.global = SharedSnapshot::capture(first.model(), first.partition());
        fed.server_rng = self.manifest.server_rng.restore()?;
        fed.round = self.manifest.round;
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(field.to_string(), "truncated"))
}

fn read_u64(bytes: &[u8], at: usize, field: &str) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::format(field.to_string(), "truncated"))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect()
}
