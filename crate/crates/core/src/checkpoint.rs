//! PAMCKPT1 checkpoints.
//!
//! ```text
//! PAMCKPT1\n
//! {"model":...,"config":{...},"params":[[name,[shape]],...],...}\n
//! 0x00
//! little-endian f32 values, parameters in manifest order
//! ```

use std::path::Path;

use pam_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::NetConfig;

pub const CKPT_MAGIC: &str = "PAMCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Box2Mask,
    PropMask,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Box2Mask => "box2mask",
            ModelKind::PropMask => "propmask",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box2mask" => Ok(ModelKind::Box2Mask),
            "propmask" => Ok(ModelKind::PropMask),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelKind,
    pub config: NetConfig,
    pub params: Vec<(String, Vec<usize>)>,
    /// Epochs trained into these weights, including any base checkpoint's.
    #[serde(default)]
    pub epochs: usize,
    /// sha256 of the checkpoint this one was fine-tuned from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: ModelKind, config: NetConfig, params: ParamStore<f32>) -> Self {
        let shapes = params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        Self { manifest: Manifest { model, config, params: shapes, epochs: 0, finetuned_from: None }, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.scalar_count() * 4 + 4096);
        out.extend_from_slice(CKPT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&self.manifest).expect("manifest serializes").as_bytes());
        out.push(b'\n');
        out.push(0);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic = format!("{CKPT_MAGIC}\n");
        let rest = bytes.strip_prefix(magic.as_bytes()).ok_or(Error::BadMagic { expected: CKPT_MAGIC })?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::BadHeader("missing manifest line".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::BadHeader(format!("manifest json: {e}")))?;
        let payload = match rest.get(nl + 1) {
            Some(0) => &rest[nl + 2..],
            Some(_) => return Err(Error::BadHeader("missing 0x00 separator".into())),
            None => return Err(Error::Truncated { expected: 1, found: 0 }),
        };
        let expected: usize = manifest.params.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
        if payload.len() < expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(Error::BadHeader(format!("{} trailing bytes after payload", payload.len() - expected)));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for (name, shape) in &manifest.params {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += n * 4;
            if params.id(name).is_some() {
                return Err(Error::Checkpoint(format!("parameter {name} listed twice")));
            }
            params.add(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        Ok(Self { manifest, params })
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies this checkpoint's values into `store`, which must hold exactly
    /// the same names and shapes in the same order.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((name, dst), (src_name, src)) in store.iter_mut().zip(self.params.iter()) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model {name} {:?}, checkpoint {src_name} {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
