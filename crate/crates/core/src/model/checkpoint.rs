use std::path::Path;

use mpsl_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::model::{ModelConfig, ParamStore};

const MAGIC: &[u8; 8] = b"MPSLCKPT";
const VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of a model config.
pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(t.requires_grad()));
            t.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Decode { offset: 0, msg: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Decode { offset: 8, msg: format!("unsupported checkpoint version {version}") });
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Decode { offset: at, msg: "parameter name is not UTF-8".into() })?;
            let rg = r.take(1)?[0] != 0;
            let (t, used) = Tensor::from_bytes(&r.bytes[r.pos..]).map_err(|e| Error::Decode {
                offset: r.pos,
                msg: e.to_string(),
            })?;
            r.pos += used;
            params.insert(name, t.with_requires_grad(rg));
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode { offset: r.pos, msg: "trailing bytes after checkpoint".into() });
        }
        Ok(Checkpoint { digest, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode { offset: self.pos, msg: format!("truncated, needed {n} more bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let ck = Checkpoint { digest: config_digest(config), params: params.clone() };
    std::fs::write(path, ck.to_bytes()).map_err(io_err(path))
}

/// Loads a checkpoint, rejecting it when it was written for another config.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    if ck.digest != config_digest(config) {
        return Err(Error::Contract(format!("{} was written for a different model config", path.display())));
    }
    Ok(ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SplitModel;

    #[test]
    fn roundtrip() {
        let m = SplitModel::init(&ModelConfig::default()).unwrap();
        let ck = Checkpoint { digest: config_digest(&m.config), params: m.params.clone() };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_truncation() {
        let m = SplitModel::init(&ModelConfig::default()).unwrap();
        let bytes = Checkpoint { digest: [0; 32], params: m.params }.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
