//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//! `"MMK1"`, version `u32`, config text, seeds, named arrays, tie records.
//! Strings are a `u32` byte length followed by UTF-8. Each array is its
//! name, rank `u32`, extents `u64` each, row-major `f32` payload, and an
//! FNV-1a `u64` checksum of the payload bytes.

use std::path::Path;

use crate::codec::{CodecParams, FeatureNorm};
use crate::error::{Error, Result};
use crate::mformer::MFormerParams;
use crate::ndmath::{ParamStore, Scalar, Tensor};
use crate::rformer::RFormerParams;
use crate::rvq::{Codebook, RvqStack};

use super::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"MMK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointContainer {
    pub config: String,
    pub seeds: Vec<(String, u64)>,
    pub arrays: Vec<NamedArray>,
    /// `(alias, target)`: the alias shares the target's storage.
    pub ties: Vec<(String, String)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn ckpt_err(array: Option<&str>, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        array: array.map(String::from),
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: Option<&str>) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ckpt_err(ctx, "truncated payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, ctx: Option<&str>) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn u64(&mut self, ctx: Option<&str>) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }

    fn string(&mut self, ctx: Option<&str>) -> Result<String> {
        let n = self.u32(ctx)? as usize;
        String::from_utf8(self.take(n, ctx)?.to_vec()).map_err(|_| ckpt_err(ctx, "string is not UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl CheckpointContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend((self.seeds.len() as u32).to_le_bytes());
        for (name, seed) in &self.seeds {
            put_str(&mut out, name);
            out.extend(seed.to_le_bytes());
        }
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend((a.shape.len() as u32).to_le_bytes());
            for &e in &a.shape {
                out.extend((e as u64).to_le_bytes());
            }
            let start = out.len();
            for v in &a.data {
                out.extend(v.to_le_bytes());
            }
            let sum = fnv1a(&out[start..]);
            out.extend(sum.to_le_bytes());
        }
        out.extend((self.ties.len() as u32).to_le_bytes());
        for (alias, target) in &self.ties {
            put_str(&mut out, alias);
            put_str(&mut out, target);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, None).map_err(|_| ckpt_err(None, "file too short for the magic"))? != MAGIC {
            return Err(ckpt_err(None, "bad magic"));
        }
        let version = r.u32(None)?;
        if version != VERSION {
            return Err(ckpt_err(None, format!("unsupported version {version} (expected {VERSION})")));
        }
        let config = r.string(None)?;
        let mut seeds = Vec::new();
        for _ in 0..r.u32(None)? {
            let name = r.string(None)?;
            seeds.push((name.clone(), r.u64(Some(&name))?));
        }
        let mut arrays = Vec::new();
        for _ in 0..r.u32(None)? {
            let name = r.string(None)?;
            let ctx = Some(name.as_str());
            let rank = r.u32(ctx)? as usize;
            let shape = (0..rank).map(|_| r.u64(ctx).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| ckpt_err(ctx, "extent overflow"))?;
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| ckpt_err(ctx, "extent overflow"))?, ctx)?;
            if r.u64(ctx)? != fnv1a(payload) {
                return Err(ckpt_err(ctx, "checksum mismatch"));
            }
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push(NamedArray { name, shape, data });
        }
        let mut ties = Vec::new();
        for _ in 0..r.u32(None)? {
            let alias = r.string(None)?;
            let target = r.string(Some(&alias))?;
            ties.push((alias, target));
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err(None, "trailing bytes after the tie records"));
        }
        Ok(Self {
            config,
            seeds,
            arrays,
            ties,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn seed(&self, name: &str) -> Option<u64> {
        self.seeds.iter().find(|(n, _)| n == name).map(|&(_, s)| s)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    pub fn put<T: Scalar>(&mut self, name: &str, value: &Tensor<T>) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            data: value.data().iter().map(|v| v.to_acc() as f32).collect(),
        });
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ckpt_err(Some(name), "missing array"))?;
        Ok(Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&v| T::of(v as f64)).collect()))
    }

    /// Stores every slot of `store` under `prefix.` and its aliases as ties.
    pub fn put_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, value) in store.iter() {
            self.put(&format!("{prefix}.{name}"), value);
        }
        for (alias, target) in store.aliases() {
            self.ties.push((format!("{prefix}.{alias}"), format!("{prefix}.{target}")));
        }
    }

    /// Rebuilds a store saved by [`put_store`](Self::put_store), checking
    /// it against `template` (names, order, shapes and ties).
    pub fn get_store<T: Scalar>(&self, prefix: &str, template: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, expected) in template.iter() {
            let full = format!("{prefix}.{name}");
            let value = self.get::<T>(&full)?;
            if value.shape() != expected.shape() {
                return Err(ckpt_err(Some(&full), format!("shape {:?}, expected {:?}", value.shape(), expected.shape())));
            }
            store.insert(name, value);
        }
        let stored = self.arrays.iter().filter(|a| a.name.starts_with(&format!("{prefix}."))).count();
        if stored != template.len() {
            return Err(ckpt_err(None, format!("{stored} arrays under '{prefix}', expected {}", template.len())));
        }
        for (alias, target) in template.aliases() {
            let pair = (format!("{prefix}.{alias}"), format!("{prefix}.{target}"));
            if !self.ties.contains(&pair) {
                return Err(ckpt_err(Some(&pair.0), "missing tie record"));
            }
            store.tie(alias, target)?;
        }
        Ok(store)
    }
}

pub fn codec_checkpoint<T: Scalar>(params: &CodecParams<T>, config: &RunConfig, seed: u64) -> CheckpointContainer {
    let mut c = CheckpointContainer {
        config: config.to_text(),
        seeds: vec![("train-rvq".into(), seed)],
        ..Default::default()
    };
    let d = params.norm.mean.len();
    c.put("codec.norm.mean", &Tensor::from_parts(vec![d], params.norm.mean.clone()));
    c.put("codec.norm.scale", &Tensor::from_parts(vec![d], params.norm.scale.clone()));
    c.put_store("codec.net", &params.net);
    for (v, book) in params.stack.layers.iter().enumerate() {
        c.put(&format!("codec.rvq.layer{v}.codes"), &book.codes);
    }
    c
}

pub fn load_codec<T: Scalar>(c: &CheckpointContainer) -> Result<(RunConfig, CodecParams<T>)> {
    let config = c.run_config()?;
    let mut params = CodecParams::<T>::init(&config.codec, &mut crate::ndmath::Rng::new(0))?;
    params.net = c.get_store("codec.net", &params.net)?;
    params.norm = FeatureNorm {
        mean: c.get::<T>("codec.norm.mean")?.data().to_vec(),
        scale: c.get::<T>("codec.norm.scale")?.data().to_vec(),
    };
    if params.norm.mean.len() != config.codec.pose_dim || params.norm.scale.len() != config.codec.pose_dim {
        return Err(ckpt_err(Some("codec.norm.mean"), "length differs from the pose dimension"));
    }
    let mut layers = Vec::new();
    for (v, book) in params.stack.layers.iter().enumerate() {
        let name = format!("codec.rvq.layer{v}.codes");
        let codes = c.get::<T>(&name)?;
        if codes.shape() != book.codes.shape() {
            return Err(ckpt_err(Some(&name), format!("shape {:?}, expected {:?}", codes.shape(), book.codes.shape())));
        }
        layers.push(Codebook::from_codes(codes));
    }
    params.stack = RvqStack {
        layers,
        dropout_q: params.stack.dropout_q,
    };
    Ok((config, params))
}

pub fn mformer_checkpoint<T: Scalar>(params: &MFormerParams<T>, config: &RunConfig, seed: u64) -> CheckpointContainer {
    let mut c = CheckpointContainer {
        config: config.to_text(),
        seeds: vec![("train-masked".into(), seed)],
        ..Default::default()
    };
    c.put_store("mformer", &params.store);
    c
}

pub fn load_mformer<T: Scalar>(c: &CheckpointContainer) -> Result<(RunConfig, MFormerParams<T>)> {
    let config = c.run_config()?;
    let template = MFormerParams::<T>::init(&config.mformer_config(), &mut crate::ndmath::Rng::new(0))?;
    let store = c.get_store("mformer", &template.store)?;
    Ok((config, MFormerParams { config: template.config, store }))
}

pub fn rformer_checkpoint<T: Scalar>(params: &RFormerParams<T>, config: &RunConfig, seed: u64) -> CheckpointContainer {
    let mut c = CheckpointContainer {
        config: config.to_text(),
        seeds: vec![("train-residual".into(), seed)],
        ..Default::default()
    };
    c.put_store("rformer", &params.store);
    c
}

pub fn load_rformer<T: Scalar>(c: &CheckpointContainer) -> Result<(RunConfig, RFormerParams<T>)> {
    let config = c.run_config()?;
    let template = RFormerParams::<T>::init(&config.rformer_config(), &mut crate::ndmath::Rng::new(0))?;
    let store = c.get_store("rformer", &template.store)?;
    Ok((config, RFormerParams { config: template.config, store }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointContainer {
        let mut c = CheckpointContainer {
            config: "run.seed = 3\n".into(),
            seeds: vec![("a".into(), 7)],
            ..Default::default()
        };
        c.put("x", &Tensor::<f32>::from_parts(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]));
        c.ties.push(("y".into(), "x".into()));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = CheckpointContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.seed("a"), Some(7));
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(CheckpointContainer::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CheckpointContainer::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let payload = bytes.windows(4).position(|w| w == 3.5f32.to_le_bytes()).unwrap();
        let mut bad = bytes.clone();
        bad[payload] ^= 1;
        let err = CheckpointContainer::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("'x'") && err.contains("checksum"), "{err}");
        let err = CheckpointContainer::from_bytes(&bytes[..payload]).unwrap_err().to_string();
        assert!(err.contains("'x'") && err.contains("truncated"), "{err}");
    }
}
