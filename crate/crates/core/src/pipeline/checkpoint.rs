//! Binary checkpoints and linear-interpolation merging.
//!
//! Layout (little-endian): `"LVLM"`, u32 version, u64 config hash, u64
//! step, u32 tensor count, then per tensor a u32-length-prefixed UTF-8 name,
//! u32 rank, u32 extents and f32 values; finally a u8 optimizer flag
//! followed, when set, by the AdamW step, its five hyperparameters as f64,
//! and per trainable tensor its name and first/second moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Tensor};
use crate::params::{ParamGroup, ParamStore};

pub const MAGIC: &[u8; 4] = b"LVLM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamWConfig,
    /// Trainable tensor names, in moment order.
    pub names: Vec<String>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, cfg: &ModelConfig, step: u64, opt: Option<&AdamW<f32>>) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| {
                let t = Tensor::new(e.tensor.shape().to_vec(), e.tensor.data().to_vec()).expect("valid tensor");
                (e.name.clone(), t)
            })
            .collect();
        let optimizer = opt.filter(|o| o.steps() > 0).map(|o| {
            let (m, v) = o.moments();
            OptimizerState {
                step: o.steps(),
                config: o.config,
                names: store
                    .trainable_ids()
                    .into_iter()
                    .map(|id| store.entry(id).name.clone())
                    .collect(),
                m: m.to_vec(),
                v: v.to_vec(),
            }
        });
        Self {
            config_hash: cfg.hash(),
            step,
            tensors,
            optimizer,
        }
    }

    /// Parameter store for `cfg`; refuses a different config hash unless
    /// `force`.
    pub fn to_store(&self, cfg: &ModelConfig, force: bool) -> Result<ParamStore<f32>> {
        if !force && self.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash {:016x} does not match checkpoint {:016x}",
                cfg.hash(),
                self.config_hash
            )));
        }
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.add(name, t.clone())?;
        }
        Ok(store)
    }

    /// Optimizer state for `store`, whose trainable tensors must match the
    /// saved moment order.
    pub fn restore_optimizer(&self, store: &ParamStore<f32>) -> Result<Option<AdamW<f32>>> {
        let Some(o) = &self.optimizer else {
            return Ok(None);
        };
        let names: Vec<&str> = store
            .trainable_ids()
            .into_iter()
            .map(|id| store.entry(id).name.as_str())
            .collect();
        if names != o.names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Checkpoint("optimizer moments do not match the trainable tensors".into()));
        }
        Ok(Some(AdamW::from_state(o.config, o.step, o.m.clone(), o.v.clone())))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            write_f32s(w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                w.write_all(&o.step.to_le_bytes())?;
                let c = &o.config;
                for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.write_all(&x.to_le_bytes())?;
                }
                write_u32(w, o.names.len())?;
                for ((name, m), v) in o.names.iter().zip(&o.m).zip(&o.v) {
                    write_str(w, name)?;
                    write_u32(w, m.len())?;
                    write_f32s(w, m)?;
                    write_f32s(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = read_u64(r)?;
        let step = read_u64(r)?;
        let n = read_u32(r)?;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(r)?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let data = read_f32s(r, shape.iter().product())?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let step = read_u64(r)?;
                let mut h = [0f64; 5];
                for x in &mut h {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    *x = f64::from_le_bytes(b);
                }
                let k = read_u32(r)?;
                let (mut names, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..k {
                    names.push(read_str(r)?);
                    let len = read_u32(r)?;
                    m.push(read_f32s(r, len)?);
                    v.push(read_f32s(r, len)?);
                }
                Some(OptimizerState {
                    step,
                    config: AdamWConfig {
                        lr: h[0],
                        beta1: h[1],
                        beta2: h[2],
                        eps: h[3],
                        weight_decay: h[4],
                    },
                    names,
                    m,
                    v,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config_hash,
            step,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }
}

/// `θ = w·θ_a + (1−w)·θ_b` for every reasoner, unmerger and LoRA tensor,
/// evaluated as `θ_b + w·(θ_a − θ_b)` so equal inputs merge to themselves
/// bitwise. Backbone tensors must already agree and are copied. Optimizer
/// state survives only when both inputs carry the same state.
pub fn merge_checkpoints(a: &Checkpoint, b: &Checkpoint, w: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Merge(format!("weight {w} outside [0, 1]")));
    }
    if a.config_hash != b.config_hash {
        return Err(Error::Merge("config hashes differ".into()));
    }
    if a.tensors.len() != b.tensors.len() {
        return Err(Error::Merge("tensor tables differ in size".into()));
    }
    let w32 = w as f32;
    let mut tensors = Vec::with_capacity(a.tensors.len());
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Merge(format!("tensor tables differ at {na} / {nb}")));
        }
        let group = ParamGroup::from_name(na).ok_or_else(|| Error::Merge(format!("unknown tensor {na}")))?;
        let t = if group.is_backbone() {
            if !ta.bits_eq(tb) {
                return Err(Error::Merge(format!("backbone tensor {na} differs between checkpoints")));
            }
            ta.clone()
        } else {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| y + w32 * (x - y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        tensors.push((na.clone(), t));
    }
    Ok(Checkpoint {
        config_hash: a.config_hash,
        step: a.step.max(b.step),
        tensors,
        optimizer: if a.optimizer == b.optimizer { a.optimizer.clone() } else { None },
    })
}

fn write_u32(w: &mut impl Write, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Checkpoint("value exceeds u32".into()))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut b = vec![0u8; n * 4];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_backbone, init_feedback};
    use crate::rng::SeedStream;

    fn ckpt(seed: u64) -> Checkpoint {
        let cfg = ModelConfig::micro();
        let mut s: ParamStore<f32> = init_backbone(&cfg, &SeedStream::new(1)).unwrap();
        init_feedback(&mut s, &cfg, &SeedStream::new(seed), true).unwrap();
        Checkpoint::from_store(&s, &cfg, 7, None)
    }

    #[test]
    fn bytes_round_trip() {
        let c = ckpt(2);
        let bytes = c.to_bytes();
        let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"LVLM");
    }

    #[test]
    fn hash_mismatch_refused_unless_forced() {
        let c = ckpt(2);
        let other = ModelConfig::toy();
        assert!(matches!(c.to_store(&other, false), Err(Error::Checkpoint(_))));
        assert!(c.to_store(&other, true).is_ok());
    }

    #[test]
    fn merge_midpoint_and_idempotence() {
        let (a, b) = (ckpt(2), ckpt(3));
        let m = merge_checkpoints(&a, &a, 0.3).unwrap();
        assert_eq!(m.tensors, a.tensors);
        let mid = merge_checkpoints(&a, &b, 0.5).unwrap();
        let x = a.tensor("reasoner.w_g").unwrap().data()[0];
        let y = b.tensor("reasoner.w_g").unwrap().data()[0];
        assert!((mid.tensor("reasoner.w_g").unwrap().data()[0] - (x + y) / 2.0).abs() <= f32::EPSILON * x.abs().max(y.abs()));
        assert!(merge_checkpoints(&a, &b, 1.5).is_err());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = ckpt(2).to_bytes();
        assert!(Checkpoint::read(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
