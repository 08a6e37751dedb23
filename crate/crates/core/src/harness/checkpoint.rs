//! Versioned binary checkpoints of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KLVLCKPT"
//! version    u32      currently 1
//! header     u32 length, then UTF-8 JSON (CheckpointHeader)
//! agents     u32
//! per agent:
//!   tensors  u32
//!   per tensor:
//!     name   u32 length, then UTF-8 bytes (e.g. "encoder.0", "critic.3")
//!     rank   u32, then rank × u32 dims
//!     data   product(dims) × f64
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffkit::{CellKind, Tensor};
use crate::envs::ActionSpace;
use crate::error::{contract, Error, Result};
use crate::policy::{PolicyBundle, PolicySpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KLVLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub env: String,
    pub algorithm: String,
    pub k: usize,
    pub agents: usize,
    pub obs_width: usize,
    pub latent: usize,
    pub hidden: usize,
    pub actions: ActionSpace,
    pub cell: String,
    pub gaussian_std: f64,
    pub predictor_slots: usize,
}

impl CheckpointHeader {
    pub fn new(env: &str, algorithm: &str, k: usize, agents: usize, spec: &PolicySpec) -> Self {
        Self {
            env: env.to_string(),
            algorithm: algorithm.to_string(),
            k,
            agents,
            obs_width: spec.obs_width,
            latent: spec.latent,
            hidden: spec.hidden,
            actions: spec.actions,
            cell: spec.cell.as_str().to_string(),
            gaussian_std: spec.gaussian_std,
            predictor_slots: spec.predictor_slots,
        }
    }

    pub fn spec(&self) -> Result<PolicySpec> {
        let cell: CellKind = self.cell.parse().map_err(Error::Contract)?;
        Ok(PolicySpec {
            obs_width: self.obs_width,
            latent: self.latent,
            hidden: self.hidden,
            actions: self.actions,
            cell,
            gaussian_std: self.gaussian_std,
            predictor_slots: self.predictor_slots,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub agents: Vec<Vec<(String, Tensor)>>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_checkpoint(header: &CheckpointHeader, bundles: &[&PolicyBundle]) -> Result<Vec<u8>> {
    if bundles.len() != header.agents {
        return contract(format!("header names {} agents, got {}", header.agents, bundles.len()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &serde_json::to_string(header)?)?;
    put_u32(&mut buf, bundles.len())?;
    for b in bundles {
        let named = b.named_tensors();
        put_u32(&mut buf, named.len())?;
        for (name, t) in named {
            put_str(&mut buf, &name)?;
            put_u32(&mut buf, t.shape().len())?;
            for d in t.shape() {
                put_u32(&mut buf, *d)?;
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, bundles: &[&PolicyBundle]) -> Result<()> {
    fs::write(path, encode_checkpoint(header, bundles)?)?;
    Ok(())
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut out = vec![0; n];
        self.0
            .read_exact(&mut out)
            .map_err(|_| Error::Contract("truncated checkpoint".into()))?;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Contract("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return contract("not a checkpoint file (bad magic)");
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return contract(format!("unsupported checkpoint version {version}"));
    }
    let header: CheckpointHeader = serde_json::from_str(&r.string()?)?;
    let count = r.u32()?;
    if count != header.agents {
        return contract(format!("header names {} agents, body holds {count}", header.agents));
    }
    let mut agents = Vec::with_capacity(count);
    for _ in 0..count {
        let tensors = r.u32()?;
        let mut named = Vec::with_capacity(tensors);
        for _ in 0..tensors {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            named.push((name, Tensor::new(shape, data)?));
        }
        agents.push(named);
    }
    if (r.0.position() as usize) != bytes.len() {
        return contract("trailing bytes after checkpoint body");
    }
    Ok(Checkpoint { header, agents })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

impl Checkpoint {
    /// Rebuilds the bundles for `spec`. Every tensor must be present with the
    /// expected name and shape.
    pub fn restore(&self, spec: &PolicySpec, agents: usize) -> Result<Vec<PolicyBundle>> {
        let stored = self.header.spec()?;
        if &stored != spec || self.header.agents != agents {
            return contract(format!(
                "checkpoint architecture ({} agents, {:?}) does not match config ({agents} agents, {:?})",
                self.header.agents, stored, spec
            ));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.agents
            .iter()
            .map(|named| {
                let mut bundle = PolicyBundle::new(spec.clone(), &mut rng)?;
                let names: Vec<(String, Vec<usize>)> = bundle
                    .named_tensors()
                    .into_iter()
                    .map(|(n, t)| (n, t.shape().to_vec()))
                    .collect();
                if names.len() != named.len() {
                    return contract(format!("expected {} tensors, checkpoint has {}", names.len(), named.len()));
                }
                for ((want, shape), (got, t)) in names.iter().zip(named) {
                    if want != got || shape.as_slice() != t.shape() {
                        return contract(format!(
                            "tensor {got} {:?} where {want} {shape:?} was expected",
                            t.shape()
                        ));
                    }
                }
                for (slot, (_, t)) in bundle.all_tensors_mut().into_iter().zip(named) {
                    *slot = t.clone();
                }
                Ok(bundle)
            })
            .collect()
    }
}
