//! Named parameter tensors and their on-disk container.
//!
//! # File layout (little-endian, version 1)
//!
//! ```text
//! magic        8 bytes   "MEMOROID"
//! version      u32       1
//! meta_len     u32       length of the JSON metadata in bytes
//! meta         meta_len  UTF-8 JSON object (model kind, m, c, d_o, d_s, ...)
//! count        u32       number of tensors
//! count × {
//!   name_len   u32
//!   name       name_len  UTF-8
//!   ndim       u32       always 2
//!   dims       ndim × u64
//!   payload    Π dims × f64, row-major
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"MEMOROID";
pub const PARAMS_VERSION: u32 = 1;

/// Ordered map from parameter name to a 2-D tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    /// Panics on a missing name; model code only asks for names it created.
    pub fn tensor(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every tensor of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.dim() == vb.dim())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self ← β·self + (1 − β)·source`.
    pub fn polyak_from(&mut self, source: &ParamSet, beta: f64) {
        assert!(
            self.same_structure(source),
            "polyak update needs matching parameter sets"
        );
        for (dst, src) in self.tensors.values_mut().zip(source.tensors.values()) {
            ndarray::Zip::from(dst).and(src).for_each(|d, &s| {
                *d = beta * *d + (1.0 - beta) * s;
            });
        }
    }

    /// Registers every tensor on the tape.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn write_to(&self, mut w: impl Write, meta: &serde_json::Value) -> Result<()> {
        let meta = serde_json::to_vec(meta)?;
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(t.nrows() as u64).to_le_bytes())?;
            w.write_all(&(t.ncols() as u64).to_le_bytes())?;
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<(Self, serde_json::Value)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("not a parameter file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported parameter file version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)?;
            if ndim != 2 {
                return Err(Error::Format(format!("tensor `{name}` has {ndim} dims, expected 2")));
            }
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
            out.insert(name, t);
        }
        Ok((out, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w, meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Tape handles for a [`ParamSet`], looked up by the same names.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients laid out like `like`; parameters off the output's path get
    /// zeros.
    pub fn collect_grads(&self, grads: &Grads, like: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in like.iter() {
            let g = match self.vars.get(name) {
                Some(&v) => grads.get_or_zeros(v, t.dim()),
                None => Array2::zeros(t.dim()),
            };
            out.insert(name, g);
        }
        out
    }
}

/// Uniform initialization in `[-scale, scale]`.
pub fn uniform(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(-scale..=scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.insert("embed.w", uniform(&mut rng, (3, 5), 1.0));
        p.insert("embed.b", uniform(&mut rng, (1, 3), 1.0));
        let meta = serde_json::json!({"kind": "lru", "m": 4});
        let mut buf = Vec::new();
        p.write_to(&mut buf, &meta).unwrap();
        let (q, meta2) = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, meta2);
        assert_eq!(q.names().collect::<Vec<_>>(), vec!["embed.w", "embed.b"]);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let mut p = ParamSet::new();
        p.insert("a", Array2::from_elem((1, 1), 1.5));
        let mut buf = Vec::new();
        p.write_to(&mut buf, &serde_json::json!({})).unwrap();
        assert_eq!(&buf[..8], b"MEMOROID");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes()); // "{}"
        assert_eq!(&buf[buf.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(ParamSet::read_from(&b"NOTMAGIC...."[..]).is_err());
    }

    #[test]
    fn polyak_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut theta = ParamSet::new();
        theta.insert("w", uniform(&mut rng, (2, 2), 1.0));
        let mut phi = theta.zeros_like();
        let before = phi.clone();
        phi.polyak_from(&theta, 1.0);
        assert_eq!(phi, before);
        phi.polyak_from(&theta, 0.0);
        assert_eq!(phi, theta);
    }
}
