//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "MMVCKPT\0"
//! version      u32      1
//! enc_digest   32 bytes SHA-256 of the encoder config text
//! run_digest   32 bytes SHA-256 of the run config text
//! encoder      u32 length + UTF-8 TOML
//! config       u32 length + UTF-8 TOML (fully resolved run config)
//! step         u64
//! seed         u64
//! adam_t       u64      0 when no optimizer state is stored
//! n_arrays     u32
//! arrays       n_arrays x { u32 name length, name, u32 rank, rank x u32 dims, f32 data }
//! crc32        u32      over every preceding byte
//! ```
//!
//! All integers and reals are little-endian. Optimizer moments are stored as
//! arrays named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::atomic::write_atomic;
use crate::encoder::{check_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::substrate::Tensor;

use super::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"MMVCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    /// Resolved run configuration the checkpoint was produced under.
    pub config: String,
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

pub fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn encoder_text(cfg: &EncoderConfig) -> String {
    toml::to_string(cfg).expect("encoder config serializes")
}

impl Checkpoint {
    pub fn encoder_digest(&self) -> [u8; 32] {
        digest(&encoder_text(&self.encoder))
    }

    pub fn config_digest(&self) -> [u8; 32] {
        digest(&self.config)
    }

    /// Rejects a checkpoint whose encoder differs from `cfg`.
    pub fn expect_encoder(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.encoder_digest() != digest(&encoder_text(cfg)) {
            return Err(Error::Config(format!(
                "checkpoint encoder config hash mismatch: checkpoint has\n{}\nrun expects\n{}",
                encoder_text(&self.encoder),
                encoder_text(cfg)
            )));
        }
        Ok(())
    }

    /// Rejects a checkpoint written under a different run config.
    pub fn expect_config(&self, config: &str) -> Result<()> {
        if self.config_digest() != digest(config) {
            return Err(Error::Config("checkpoint config hash does not match the current run config".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let enc = encoder_text(&self.encoder);
        out.extend_from_slice(&digest(&enc));
        out.extend_from_slice(&digest(&self.config));
        for text in [&enc, &self.config] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.adam.as_ref().map_or(0, |a| a.t).to_le_bytes());

        let mut arrays: Vec<(String, &[usize], &[f32])> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape(), t.data()))
            .collect();
        if let Some(adam) = &self.adam {
            for (prefix, bufs) in [("adam.m/", &adam.m), ("adam.v/", &adam.v)] {
                for ((n, t), b) in self.params.iter().zip(bufs) {
                    arrays.push((format!("{prefix}{n}"), t.shape(), b));
                }
            }
        }
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic (not a checkpoint file)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or corrupt"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let enc_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let run_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let enc_text = r.string()?;
        let config = r.string()?;
        if digest(&enc_text) != enc_digest || digest(&config) != run_digest {
            return Err(bad("config digest does not match embedded config".into()));
        }
        let encoder: EncoderConfig =
            toml::from_str(&enc_text).map_err(|e| bad(format!("embedded encoder config: {e}")))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let adam_t = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("array too large".into()))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(p) = name.strip_prefix("adam.m/") {
                expect_order(&params, m.len(), p)?;
                m.push(data);
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                expect_order(&params, v.len(), p)?;
                v.push(data);
            } else {
                params.insert(name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?)?;
            }
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        check_params(&encoder, &params)?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let state = AdamState { m, v, t: adam_t };
            if !state.matches(&params) {
                return Err(bad("optimizer state does not cover every parameter".into()));
            }
            Some(state)
        };
        Ok(Checkpoint {
            encoder,
            config,
            step,
            seed,
            params,
            adam,
        })
    }
}

fn expect_order(params: &ParamSet, i: usize, name: &str) -> Result<()> {
    if params.names().get(i).map(String::as_str) != Some(name) {
        return Err(Error::Format(format!("checkpoint: optimizer array {name} out of order")));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint: unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint: non-UTF-8 text".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
