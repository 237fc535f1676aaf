//! Binary tensor container used for weights and cached features.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` length of a
//! JSON header followed by the header bytes, `u32` tensor count, then per
//! tensor: `u32` name length, UTF-8 name, `u32` rank, `rank x u64` dims,
//! raw `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{
    checksum_tensors, BlockWeights, DraftModel, ModelConfig, ModelError, Parameterized, Result,
    RouterActivation, RouterHead, TargetModel,
};

pub const MAGIC: &[u8; 8] = b"SPDRAFT\0";
pub const VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn header_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.clone()).map_err(|e| ModelError::Format(format!("bad header: {e}")))
    }
}

pub fn encode<'a, H: Serialize>(header: &H, tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| ModelError::Format(e.to_string()))?;
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ModelError::Format("length overflow".into()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Container> {
    let mut c = Cursor { buf, pos: 0 };
    if c.bytes(8).map_err(|_| ModelError::Format("bad magic".into()))? != MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let hlen = c.len()?;
    let header = serde_json::from_slice(c.bytes(hlen)?).map_err(|e| ModelError::Format(format!("bad header: {e}")))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.bytes(nlen)?.to_vec()).map_err(|_| ModelError::Format("bad tensor name".into()))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ModelError::Format("tensor too large".into()))?
            / 8;
        let raw = c.bytes(numel * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(ModelError::Format("trailing bytes".into()));
    }
    Ok(Container { header, tensors })
}

pub fn write_file<'a, H: Serialize>(path: &Path, header: &H, tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<()> {
    let bytes = encode(header, tensors)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Container> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: ModelConfig,
    /// Checksum of the target weights a draft was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<RouterActivation>,
}

fn expect_kind(h: &ModelHeader, kind: &str) -> Result<()> {
    if h.kind != kind {
        return Err(ModelError::Format(format!("expected a {kind} file, found {}", h.kind)));
    }
    Ok(())
}

pub fn save_target(model: &TargetModel, path: &Path) -> Result<()> {
    let h = ModelHeader {
        kind: "target".into(),
        config: model.cfg.clone(),
        target_checksum: None,
        activation: None,
    };
    write_file(path, &h, model.named_params())
}

pub fn load_target(path: &Path) -> Result<TargetModel> {
    let mut c = read_file(path)?;
    let h: ModelHeader = c.header_as()?;
    expect_kind(&h, "target")?;
    h.config.validate()?;
    let mut model = TargetModel::init(h.config, 0)?;
    fill(&mut model, &mut c)?;
    Ok(model)
}

pub fn save_draft(model: &DraftModel, target: &TargetModel, path: &Path) -> Result<()> {
    let h = ModelHeader {
        kind: "draft".into(),
        config: model.cfg.clone(),
        target_checksum: Some(target.checksum()),
        activation: None,
    };
    write_file(path, &h, model.named_params())
}

pub fn load_draft(path: &Path, target: &TargetModel) -> Result<DraftModel> {
    let mut c = read_file(path)?;
    let h: ModelHeader = c.header_as()?;
    expect_kind(&h, "draft")?;
    if h.config != target.cfg {
        return Err(ModelError::Format("draft and target configurations differ".into()));
    }
    if h.target_checksum.as_deref() != Some(target.checksum().as_str()) {
        return Err(ModelError::Format("draft was trained against different target weights".into()));
    }
    let d = target.cfg.hidden_size;
    let mut model = DraftModel::from_parts(
        target,
        Tensor::zeros(&[2 * d, d]),
        BlockWeights::init(&target.cfg, 1.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)),
    );
    fill(&mut model, &mut c)?;
    Ok(model)
}

pub fn save_router(router: &RouterHead, config: &ModelConfig, path: &Path) -> Result<()> {
    let h = ModelHeader {
        kind: "router".into(),
        config: config.clone(),
        target_checksum: None,
        activation: Some(router.activation),
    };
    write_file(path, &h, router.named_params())
}

pub fn load_router(path: &Path) -> Result<(RouterHead, ModelConfig)> {
    let mut c = read_file(path)?;
    let h: ModelHeader = c.header_as()?;
    expect_kind(&h, "router")?;
    let w1 = c.take("w1")?;
    let w2 = c.take("w2")?;
    let r = RouterHead::from_weights(w1, w2, h.activation.unwrap_or_default())?;
    if r.num_groups() != h.config.head_groups {
        return Err(ModelError::Format("router group count disagrees with its header".into()));
    }
    Ok((r, h.config))
}

/// Overwrites every named parameter from the container, checking shapes.
fn fill<M: Parameterized>(model: &mut M, c: &mut Container) -> Result<()> {
    for (name, slot) in model.named_params_mut() {
        let t = c.take(&name)?;
        if t.shape() != slot.shape() {
            return Err(ModelError::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some((extra, _)) = c.tensors.first() {
        return Err(ModelError::Format(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Checksum helper for loose tensor lists such as cached features.
pub fn checksum_of(tensors: &[(String, Tensor)]) -> String {
    checksum_tensors(tensors.iter().map(|(n, t)| (n.clone(), t)))
}
