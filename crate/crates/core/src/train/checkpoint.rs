//! ACKP checkpoint container.
//!
//! Layout: magic `ACKP0001`, little-endian `u32` header length, UTF-8
//! `key = value` header, then raw little-endian f32 payloads in directory
//! order. Directory lines read `tensor = <name> f32 <d0>x<d1>... <offset>`
//! with byte offsets relative to the payload start.

use std::path::Path;

use super::adam::AdamState;
use crate::autodiff::BatchNormState;
use crate::cascade::ViewId;
use crate::error::{Error, Result};
use crate::kv::KvText;
use crate::net::{NamedBatchNorm, Network, NetworkConfig, Param};
use crate::tensor::Tensor;
use crate::volume::NormStats;

pub const ACKP_MAGIC: &[u8; 8] = b"ACKP0001";
const CONFIG_PREFIX: &str = "config.";

/// A trained network plus everything needed to use or resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub view: ViewId,
    /// `None` marks an unnormalized checkpoint.
    pub norm: Option<NormStats>,
    pub adam: Option<AdamState>,
    pub seed: u64,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    /// Statistics for inference; refuses unnormalized checkpoints unless
    /// `allow_unnormalized` is set, in which case the identity is returned.
    pub fn norm_for_inference(&self, allow_unnormalized: bool) -> Result<NormStats> {
        match (&self.norm, allow_unnormalized) {
            (Some(n), _) => Ok(n.clone()),
            (None, true) => Ok(NormStats::identity(self.network.config().input_channels)),
            (None, false) => Err(Error::Unnormalized),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = KvText::new("checkpoint header");
        for line in self.network.config().to_text().lines() {
            let (k, v) = line.split_once('=').expect("config text is key = value");
            kv.push(&format!("{CONFIG_PREFIX}{}", k.trim()), v.trim());
        }
        kv.push("view", self.view);
        kv.push("seed", self.seed);
        kv.push("iteration", self.iteration);
        if let Some(n) = &self.norm {
            n.write_kv(&mut kv);
        }
        let uninit: Vec<&str> =
            self.network.batch_norms().iter().filter(|b| !b.state.initialized).map(|b| b.name.as_str()).collect();
        if !uninit.is_empty() {
            kv.push("bn_uninitialized", uninit.join(" "));
        }
        if let Some(a) = &self.adam {
            kv.push("adam_step", a.step);
        }

        let mut payload: Vec<u8> = Vec::new();
        let mut add = |kv: &mut KvText, name: &str, shape: &[usize], data: &[f32]| {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            kv.push("tensor", format!("{name} f32 {} {}", dims.join("x"), payload.len()));
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for p in self.network.params() {
            add(&mut kv, &p.name, p.value.shape(), p.value.data());
        }
        for b in self.network.batch_norms() {
            add(&mut kv, &format!("bn.{}.mean", b.name), &[b.state.mean.len()], &b.state.mean);
            add(&mut kv, &format!("bn.{}.var", b.name), &[b.state.var.len()], &b.state.var);
        }
        if let Some(a) = &self.adam {
            for (p, (m, v)) in self.network.params().iter().zip(a.m.iter().zip(&a.v)) {
                add(&mut kv, &format!("adam.m.{}", p.name), p.value.shape(), m);
                add(&mut kv, &format!("adam.v.{}", p.name), p.value.shape(), v);
            }
        }
        let header = kv.render();
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(ACKP_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic = bytes.get(..8).unwrap_or(bytes);
        if magic != ACKP_MAGIC {
            if magic.len() == 8 && magic.starts_with(b"ACKP") {
                return Err(Error::UnsupportedVersion {
                    what: "checkpoint",
                    found: String::from_utf8_lossy(&magic[4..]).into_owned(),
                });
            }
            return Err(Error::BadMagic {
                what: "checkpoint",
                expected: String::from_utf8_lossy(ACKP_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let short = || Error::PayloadLength { expected: 12, actual: bytes.len() };
        let hlen = u32::from_le_bytes(bytes.get(8..12).ok_or_else(short)?.try_into().expect("four bytes")) as usize;
        let header =
            bytes.get(12..12 + hlen).ok_or(Error::PayloadLength { expected: 12 + hlen, actual: bytes.len() })?;
        let header = std::str::from_utf8(header)
            .map_err(|_| Error::Format { what: "checkpoint header", detail: "header is not UTF-8".into() })?;
        let kv = KvText::parse(header, "checkpoint header")?;
        let payload = &bytes[12 + hlen..];

        let config_text: String = kv
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = NetworkConfig::from_text(&config_text)?;

        // Directory: name -> (shape, data).
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let mut expected_offset = 0usize;
        for entry in kv.all("tensor") {
            let bad = || kv.bad("tensor", entry);
            let parts: Vec<&str> = entry.split_whitespace().collect();
            let [name, dtype, shape, offset] = parts[..] else {
                return Err(bad());
            };
            if dtype != "f32" {
                return Err(bad());
            }
            let shape: Vec<usize> = shape.split('x').map(|d| d.parse().ok()).collect::<Option<_>>().ok_or_else(bad)?;
            let offset: usize = offset.parse().map_err(|_| bad())?;
            if offset != expected_offset {
                return Err(Error::Format {
                    what: "checkpoint directory",
                    detail: format!("`{name}` at byte {offset}, expected {expected_offset}"),
                });
            }
            let len = shape.iter().product::<usize>() * 4;
            let raw = payload
                .get(offset..offset + len)
                .ok_or(Error::PayloadLength { expected: offset + len, actual: payload.len() })?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            tensors.push((name.to_string(), shape, data));
            expected_offset += len;
        }
        if expected_offset != payload.len() {
            return Err(Error::PayloadLength { expected: expected_offset, actual: payload.len() });
        }

        let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let i = tensors.iter().position(|t| t.0 == name).ok_or_else(|| Error::Format {
                what: "checkpoint directory",
                detail: format!("missing tensor `{name}`"),
            })?;
            let (_, s, d) = tensors.swap_remove(i);
            Ok((s, d))
        };

        let skeleton = Network::<f32>::build(config.clone(), 0)?;
        let mut params = Vec::new();
        for p in skeleton.params() {
            let (shape, data) = take(&p.name)?;
            params.push(Param { name: p.name.clone(), value: Tensor::from_vec(&shape, data)? });
        }
        let uninit: Vec<&str> = kv.get("bn_uninitialized").map(|s| s.split_whitespace().collect()).unwrap_or_default();
        let mut bns = Vec::new();
        for b in skeleton.batch_norms() {
            let (_, mean) = take(&format!("bn.{}.mean", b.name))?;
            let (_, var) = take(&format!("bn.{}.var", b.name))?;
            if mean.len() != b.state.mean.len() || var.len() != b.state.var.len() {
                return Err(Error::shape(format!("batch norm `{}` has the wrong width", b.name)));
            }
            bns.push(NamedBatchNorm {
                name: b.name.clone(),
                state: BatchNormState { mean, var, initialized: !uninit.contains(&b.name.as_str()) },
            });
        }
        let network = Network::from_parts(config, params, bns)?;
        let adam = match kv.get("adam_step") {
            None => None,
            Some(step) => {
                let step = step.parse().map_err(|_| kv.bad("adam_step", step))?;
                let mut m = Vec::new();
                let mut v = Vec::new();
                for p in network.params() {
                    m.push(take(&format!("adam.m.{}", p.name))?.1);
                    v.push(take(&format!("adam.v.{}", p.name))?.1);
                }
                Some(AdamState { step, m, v })
            }
        };
        if let Some((name, _, _)) = tensors.first() {
            return Err(Error::Format {
                what: "checkpoint directory",
                detail: format!("unexpected tensor `{name}` ({} extra)", tensors.len()),
            });
        }
        Ok(Self {
            network,
            view: kv.parse_value("view")?,
            norm: NormStats::read_kv(&kv)?,
            adam,
            seed: kv.parse_value("seed")?,
            iteration: kv.parse_value("iteration")?,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
