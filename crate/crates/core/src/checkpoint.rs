//! Named-parameter checkpoint container.
//!
//! ```text
//! magic "TRJCKPT\0" | version u32 | header length u32 | header (key = value text)
//! entry count u32 | per entry: name length u32 | name bytes | tensor
//! ```
//! Tensors use the shard encoding. Optimizer moments are stored as
//! `adam.m.<name>` / `adam.v.<name>` with the update counter in the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::config::{Configurable, KvConfig};
use crate::data::shard::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, DISC_PREFIX};
use crate::params::ParamStore;
use crate::training::adam::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRJCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";
const ADAM_STEP_KEY: &str = "adam_step";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model and run configuration echoed for validation on load.
    pub header: KvConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn corrupt(e: std::io::Error) -> Error {
    Error::Format(format!("truncated or corrupt checkpoint: {e}"))
}

impl Checkpoint {
    /// Model configuration recovered from the header; keys that belong to
    /// other components are skipped.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (k, v) in self.header.iter() {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn has_discriminator(&self) -> bool {
        self.params.iter().any(|(k, _)| k.starts_with(DISC_PREFIX))
    }

    /// Checks that parameter names and shapes are exactly those implied by
    /// the header's model configuration.
    pub fn validate(&self) -> Result<ModelConfig> {
        let cfg = self.model_config()?;
        let expected = param_shapes(&cfg, self.has_discriminator());
        if expected.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, configuration implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .params
                .get(&name)
                .map_err(|_| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, configuration implies {shape:?}",
                    t.shape()
                )));
            }
        }
        if let Some(opt) = &self.optimizer {
            opt.validate_against(&self.params)?;
        }
        Ok(cfg)
    }

    pub fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut header = self.header.clone();
        if let Some(opt) = &self.optimizer {
            header.insert(ADAM_STEP_KEY, opt.step);
        }
        let text = header.to_text();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        w.write_u32::<LE>(text.len() as u32)?;
        w.write_all(text.as_bytes())?;
        let mut entries: Vec<(String, &trajformer_autodiff::Tensor)> =
            self.params.iter().map(|(k, v)| (k.to_string(), v)).collect();
        if let Some(opt) = &self.optimizer {
            entries.extend(opt.first.iter().map(|(k, v)| (format!("{FIRST_MOMENT}{k}"), v)));
            entries.extend(opt.second.iter().map(|(k, v)| (format!("{SECOND_MOMENT}{k}"), v)));
        }
        w.write_u32::<LE>(entries.len() as u32)?;
        for (name, t) in entries {
            w.write_u32::<LE>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LE>().map_err(corrupt)? as usize;
        if len > 1 << 20 {
            return Err(Error::Format("checkpoint header too large".into()));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(corrupt)?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let mut header = KvConfig::parse(&text)?;
        let count = r.read_u32::<LE>().map_err(corrupt)? as usize;
        let mut params = ParamStore::new();
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        for _ in 0..count {
            let n = r.read_u32::<LE>().map_err(corrupt)? as usize;
            if n > 4096 {
                return Err(Error::Format("parameter name too long".into()));
            }
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(corrupt)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let t = read_tensor(r)?;
            if let Some(base) = name.strip_prefix(FIRST_MOMENT) {
                first.insert(base, t);
            } else if let Some(base) = name.strip_prefix(SECOND_MOMENT) {
                second.insert(base, t);
            } else {
                params.insert(name, t);
            }
        }
        let optimizer = match header.remove(ADAM_STEP_KEY) {
            Some(step) => Some(AdamState {
                first,
                second,
                step: step
                    .parse()
                    .map_err(|_| Error::Format(format!("bad optimizer step {step:?}")))?,
            }),
            None => None,
        };
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    /// Atomic write: temporary file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.encode(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads and validates a checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::decode(&mut BufReader::new(file))?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::transformer::TransformerConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            transformer: TransformerConfig {
                d_model: 4,
                heads: 2,
                ff_width: 6,
                encoder_layers: 1,
                decoder_layers: 1,
                dropout: 0.0,
                norm_eps: 1e-5,
            },
            gcn_layers: 1,
            disc_hidden: 3,
        }
    }

    fn header(cfg: &ModelConfig) -> KvConfig {
        let mut kv = KvConfig::default();
        for (k, v) in cfg.to_kv() {
            kv.insert(k, v);
        }
        kv.insert("seed", 4);
        kv
    }

    #[test]
    fn round_trip_with_optimizer() {
        let c = cfg();
        let params = init_params(&c, 3, true);
        let mut opt = AdamState::new(&params);
        opt.step = 17;
        let ckpt = Checkpoint {
            header: header(&c),
            params,
            optimizer: Some(opt),
        };
        let mut buf = Vec::new();
        ckpt.encode(&mut buf).unwrap();
        let back = Checkpoint::decode(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.validate().unwrap(), c);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = cfg();
        let mut h = header(&c);
        h.insert("ff_width", 7);
        let ckpt = Checkpoint {
            header: h,
            params: init_params(&c, 3, false),
            optimizer: None,
        };
        assert!(matches!(ckpt.validate(), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(Checkpoint::decode(&mut &b"not a checkpoint"[..]), Err(Error::Format(_))));
        let c = cfg();
        let ckpt = Checkpoint {
            header: header(&c),
            params: init_params(&c, 3, false),
            optimizer: None,
        };
        let mut buf = Vec::new();
        ckpt.encode(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(Checkpoint::decode(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
