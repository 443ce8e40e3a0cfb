//! Single-file checkpoint container.
//!
//! Layout: `b"STARSCKP"`, `u32` version, `u32` section count, then per section
//! `u16` name length, name, `u64` payload length, 32-byte SHA-256 of the
//! payload, payload. All integers little-endian. Sections: `meta` (key=value
//! lines, a blank line, then the config snapshot), `params`, `optimizer`, `rng`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"STARSCKP";
const VERSION: u32 = 1;

/// Hex SHA-256 of a config snapshot.
pub fn config_hash(config_text: &str) -> String {
    hex(&Sha256::digest(config_text.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// Data streams derive from `(seed, step)`, so this pair is the full RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Number of completed training steps.
    pub step: usize,
    pub config_hash: String,
    pub config_text: String,
    /// Every stored tensor (parameters and buffers) by name.
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(ps: &ParamStore, opt: &AdamW, step: usize, seed: u64, config_text: &str) -> Result<Self> {
        let params = ps
            .iter()
            .map(|(n, e)| Ok((n.clone(), e.var.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (n, (m, v)) in &opt.moments {
            first.insert(n.clone(), m.copy()?);
            second.insert(n.clone(), v.copy()?);
        }
        Ok(Self {
            step,
            config_hash: config_hash(config_text),
            config_text: config_text.to_string(),
            params,
            optimizer: OptimizerState {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
                t: opt.t,
                first,
                second,
            },
            rng: RngState {
                seed,
                next_step: step as u64,
            },
        })
    }

    /// Copies parameters into `ps`; every stored name must exist there and vice versa.
    pub fn restore_params(&self, ps: &ParamStore) -> Result<()> {
        for (name, _) in ps.iter() {
            if !self.params.contains_key(name) {
                return Err(Error::Integrity {
                    path: PathBuf::new(),
                    detail: format!("checkpoint lacks parameter {name}"),
                });
            }
        }
        for (name, t) in &self.params {
            if ps.get(name).is_none() {
                return Err(Error::Integrity {
                    path: PathBuf::new(),
                    detail: format!("checkpoint has unknown parameter {name}"),
                });
            }
            ps.assign(name, t)?;
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        let o = &self.optimizer;
        AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            t: o.t,
            moments: o
                .first
                .iter()
                .filter_map(|(n, m)| o.second.get(n).map(|v| (n.clone(), (m.clone(), v.clone()))))
                .collect(),
        }
    }
}

fn put_u16(b: &mut Vec<u8>, v: u16) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u16(b, s.len() as u16);
    b.extend_from_slice(s.as_bytes());
}

fn encode_tensors(map: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    put_u32(&mut b, map.len() as u32);
    for (name, t) in map {
        put_str(&mut b, name);
        let dims = t.dims();
        match t.dtype() {
            DType::F64 => {
                b.push(1);
                b.push(dims.len() as u8);
                dims.iter().for_each(|&d| put_u32(&mut b, d as u32));
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                b.push(0);
                b.push(dims.len() as u8);
                dims.iter().for_each(|&d| put_u32(&mut b, d as u32));
                for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(b)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, what: &str) -> Error {
        Error::Integrity {
            path: self.path.to_path_buf(),
            detail: format!("{what} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let name = self.string()?;
            let code = self.u8()?;
            let ndim = self.u8()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let count: usize = dims.iter().product();
            let t = match code {
                0 => {
                    let raw = self.take(count * 4)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = self.take(count * 8)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                _ => return Err(self.corrupt("unknown tensor dtype")),
            };
            map.insert(name, t);
        }
        Ok(map)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = format!(
        "step={}\nconfig_hash={}\n\n{}",
        ck.step, ck.config_hash, ck.config_text
    );
    let params = encode_tensors(&ck.params)?;
    let mut optimizer = Vec::new();
    let o = &ck.optimizer;
    for v in [o.beta1, o.beta2, o.eps, o.weight_decay] {
        optimizer.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut optimizer, o.t);
    optimizer.extend(encode_tensors(&o.first)?);
    optimizer.extend(encode_tensors(&o.second)?);
    let mut rng = Vec::new();
    put_u64(&mut rng, ck.rng.seed);
    put_u64(&mut rng, ck.rng.next_step);

    let sections: [(&str, &[u8]); 4] = [
        ("meta", meta.as_bytes()),
        ("params", &params),
        ("optimizer", &optimizer),
        ("rng", &rng),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (name, payload) in sections {
        put_str(&mut out, name);
        put_u64(&mut out, payload.len() as u64);
        out.extend_from_slice(&Sha256::digest(payload));
        out.extend_from_slice(payload);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(r.corrupt("unsupported version"));
    }
    let n = r.u32()?;
    let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
    for _ in 0..n {
        let name = r.string()?;
        let len = r.u64()? as usize;
        let digest = r.take(32)?.to_vec();
        let payload = r.take(len)?;
        if Sha256::digest(payload).as_slice() != digest.as_slice() {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: format!("checksum mismatch in section {name}"),
            });
        }
        sections.insert(name, payload);
    }
    let section = |name: &str| -> Result<&[u8]> {
        sections.get(name).copied().ok_or_else(|| Error::Integrity {
            path: path.to_path_buf(),
            detail: format!("missing section {name}"),
        })
    };

    let meta = std::str::from_utf8(section("meta")?).map_err(|_| Error::Integrity {
        path: path.to_path_buf(),
        detail: "meta is not UTF-8".into(),
    })?;
    let (head, config_text) = meta.split_once("\n\n").unwrap_or((meta, ""));
    let mut step = None;
    let mut hash = None;
    for line in head.lines() {
        match line.split_once('=') {
            Some(("step", v)) => step = v.parse::<usize>().ok(),
            Some(("config_hash", v)) => hash = Some(v.to_string()),
            _ => {}
        }
    }
    let (Some(step), Some(config_hash)) = (step, hash) else {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: "meta lacks step or config_hash".into(),
        });
    };

    let params = Reader { buf: section("params")?, pos: 0, path }.tensors()?;
    let mut o = Reader { buf: section("optimizer")?, pos: 0, path };
    let (beta1, beta2, eps, weight_decay) = (o.f64()?, o.f64()?, o.f64()?, o.f64()?);
    let t = o.u64()?;
    let first = o.tensors()?;
    let second = o.tensors()?;
    let mut g = Reader { buf: section("rng")?, pos: 0, path };
    let rng = RngState {
        seed: g.u64()?,
        next_step: g.u64()?,
    };
    Ok(Checkpoint {
        step,
        config_hash,
        config_text: config_text.to_string(),
        params,
        optimizer: OptimizerState {
            beta1,
            beta2,
            eps,
            weight_decay,
            t,
            first,
            second,
        },
        rng,
    })
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint. With `expected_hash`, a checkpoint
/// written under a different config is refused.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes, path)?;
    if let Some(h) = expected_hash {
        if h != ck.config_hash {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: format!(
                    "config hash mismatch: checkpoint has {}, current config is {h}",
                    ck.config_hash
                ),
            });
        }
    }
    Ok(ck)
}
