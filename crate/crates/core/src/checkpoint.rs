//! Binary checkpoints: exact `f64` bits, so reloading is lossless.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header,
//! then every parameter's values as little-endian `f64` in header order,
//! then (if present) the optimizer's first and second moments in the same
//! order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Cdrnp, ModelConfig, Vocab};
use crate::training::Adam;

const MAGIC: &[u8; 8] = b"CDRNPCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    vocab: Vocab,
    config_hash: String,
    epoch: usize,
    params: Vec<(String, Vec<usize>)>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Cdrnp,
    pub optimizer: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let header = Header {
            version: VERSION,
            model: self.model.config,
            vocab: self.model.vocab,
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            params: store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                learning_rate: a.learning_rate,
                steps: a.steps(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * store.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in store.iter() {
            put(p.value.data());
        }
        if let Some(adam) = &self.optimizer {
            let (m, v) = adam.moments();
            m.iter().chain(v).for_each(|vals| put(vals));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut rest = &bytes[12 + len..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if rest.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let (head, tail) = rest.split_at(8 * n);
            rest = tail;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut store = ParamStore::new();
        for (name, shape) in &header.params {
            let n = shape.iter().product();
            store.add(name.clone(), Tensor::new(shape.clone(), take(n)?)?)?;
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let sizes: Vec<usize> = header.params.iter().map(|(_, s)| s.iter().product()).collect();
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                Some(Adam::from_state(&store, o.learning_rate, o.steps, m, v)?)
            }
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            model: Cdrnp::from_store(header.model, header.vocab, store)?,
            optimizer,
            epoch: header.epoch,
            config_hash: header.config_hash,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::init_rng;

    fn model() -> Cdrnp {
        let cfg = ModelConfig {
            d: 2,
            hidden: 4,
            ..ModelConfig::default()
        };
        let vocab = Vocab {
            users: 5,
            src_items: 4,
            tgt_items: 3,
        };
        Cdrnp::init(cfg, vocab, &mut init_rng(9)).unwrap()
    }

    #[test]
    fn bit_exact_round_trip() {
        let mut m = model();
        m.store.get_mut(m.store.id("attn.q").unwrap()).value.data_mut()[0] = 0.1 + 0.2;
        let mut adam = Adam::new(&m.store, 0.02);
        for p in m.store.iter_mut() {
            p.grad.fill(0.3);
        }
        adam.step(&mut m.store).unwrap();
        let ck = Checkpoint {
            model: m,
            optimizer: Some(adam.clone()),
            epoch: 4,
            config_hash: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model.store.checksum(), ck.model.store.checksum());
        assert_eq!(back.optimizer.unwrap(), adam);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
    }

    #[test]
    fn without_optimizer() {
        let ck = Checkpoint {
            model: model(),
            optimizer: None,
            epoch: 0,
            config_hash: String::new(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.optimizer.is_none());
    }

    #[test]
    fn corrupt_input_rejected() {
        let ck = Checkpoint {
            model: model(),
            optimizer: None,
            epoch: 0,
            config_hash: String::new(),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
