//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BCOSDIFF" | version u32 | header length u64 | header JSON
//! parameter count u64 | parameter blob*
//! optimizer flag u8 | [state length u64 | state JSON | m blob* | v blob*]
//! ```
//!
//! The header holds the network config, schedule parameters and vocabulary.
//! A blob is `name length u64 | name | rank u64 | dims u64* | count u64 | f64*`,
//! in parameter declaration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::{Model, UNetConfig};
use crate::prompt::Vocab;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainingState};

pub const MAGIC: &[u8; 8] = b"BCOSDIFF";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    unet: UNetConfig,
    schedule: ScheduleConfig,
    vocab: Vocab,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    config: TrainConfig,
    step: u64,
    initial_loss: Option<f64>,
    over_count: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub schedule: DiffusionSchedule,
    pub training: Option<TrainingState>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_u64(out, t.len() as u64);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(Error::Checkpoint(format!("length {v} exceeds the remaining file")));
        }
        Ok(v as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(self.buf.len())?;
        self.take(n)
    }

    fn blob(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = self.len(16)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len(self.buf.len())?);
        }
        let count = self.len(self.buf.len() / 8)?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config types serialize")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = Header {
            unet: self.model.config.clone(),
            schedule: *self.schedule.config(),
            vocab: self.model.vocab.clone(),
        };
        put_bytes(&mut out, &json(&header));
        let entries = self.model.store.entries();
        put_u64(&mut out, entries.len() as u64);
        for e in entries {
            put_blob(&mut out, &e.name, &e.value);
        }
        match &self.training {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                let h = StateHeader {
                    config: s.config.clone(),
                    step: s.step,
                    initial_loss: s.initial_loss,
                    over_count: s.over_count,
                };
                put_bytes(&mut out, &json(&h));
                for (e, m) in entries.iter().zip(&s.m) {
                    put_blob(&mut out, &format!("m:{}", e.name), m);
                }
                for (e, v) in entries.iter().zip(&s.v) {
                    put_blob(&mut out, &format!("v:{}", e.name), v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header: Header =
            serde_json::from_slice(r.bytes()?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let vocab = header.vocab.reindex()?;
        let schedule = DiffusionSchedule::new(header.schedule)?;
        let mut model = Model::new(header.unet, vocab, 0)?;
        let count = r.len(buf.len())?;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, architecture declares {}",
                model.store.len()
            )));
        }
        for entry in model.store.entries_mut() {
            let (name, t) = r.blob()?;
            if name != entry.name || t.shape() != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {name} {:?}",
                    entry.name,
                    entry.value.shape(),
                    t.shape()
                )));
            }
            entry.value = t;
        }
        let training = match r.take(1)?[0] {
            0 => None,
            1 => {
                let h: StateHeader = serde_json::from_slice(r.bytes()?)
                    .map_err(|e| Error::Checkpoint(format!("optimizer header: {e}")))?;
                let mut read_moments = |prefix: &str| -> Result<Vec<Tensor>> {
                    model
                        .store
                        .entries()
                        .iter()
                        .map(|e| {
                            let (name, t) = r.blob()?;
                            if name != format!("{prefix}:{}", e.name) || t.shape() != e.value.shape() {
                                return Err(Error::Checkpoint(format!("bad optimizer blob {name}")));
                            }
                            Ok(t)
                        })
                        .collect()
                };
                let m = read_moments("m")?;
                let v = read_moments("v")?;
                Some(TrainingState {
                    config: h.config,
                    step: h.step,
                    initial_loss: h.initial_loss,
                    over_count: h.over_count,
                    m,
                    v,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            schedule,
            training,
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Checkpoint::from_bytes(&buf)
    }
}
