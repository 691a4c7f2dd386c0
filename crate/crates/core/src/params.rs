//! Named parameter tensors, their initialisation and the on-disk format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "LASN" | version: u32 | count: u32
//! count × ( name_len: u32 | name: UTF-8 | dims: 4 × u64 | data: numel × f64 )
//! ```
//!
//! Tensors are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"LASN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingNormal,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Stable 64-bit seed derived from the run seed and a parameter name, so each
/// tensor's initial values do not depend on which other tensors exist.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn from_decls(decls: &[ParamDecl], seed: u64) -> Self {
        let mut store = ParamStore::new();
        for d in decls {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(d.shape),
                Init::KaimingNormal => {
                    let fan_in = (d.shape.c * d.shape.h * d.shape.w).max(1);
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive standard deviation");
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &d.name));
                    let data = (0..d.shape.numel()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_vec(d.shape, data).expect("length matches shape")
                }
            };
            store.insert(d.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Fails unless this store holds exactly the declared names and shapes.
    pub fn check_against(&self, decls: &[ParamDecl]) -> Result<()> {
        for d in decls {
            match self.get(&d.name) {
                None => return Err(Error::Config(format!("missing parameter {}", d.name))),
                Some(t) if t.shape() != d.shape => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {}, expected {}",
                        d.name,
                        t.shape(),
                        d.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.len() != decls.len() {
            let extra: Vec<&str> = self
                .names()
                .filter(|n| !decls.iter().any(|d| d.name == *n))
                .collect();
            return Err(Error::Config(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected \"LASN\"".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_owned();
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
            }
            let shape = Shape::from_dims(dims);
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if store.tensors.contains_key(&name) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            store.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameters registered on a tape, looked up by name during a forward pass.
#[derive(Debug)]
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Pairs names with already-recorded leaves, e.g. inside a gradient check.
    pub fn from_vars<'a>(entries: impl IntoIterator<Item = (&'a str, Var<'t>)>) -> Self {
        BoundParams {
            vars: entries.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decls() -> Vec<ParamDecl> {
        vec![
            ParamDecl {
                name: "a.weight".into(),
                shape: Shape::new(64, 64, 3, 3),
                init: Init::KaimingNormal,
            },
            ParamDecl {
                name: "a.bias".into(),
                shape: Shape::new(1, 1, 1, 64),
                init: Init::Zeros,
            },
        ]
    }

    #[test]
    fn init_is_deterministic_and_kaiming_scaled() {
        let a = ParamStore::from_decls(&decls(), 5);
        let b = ParamStore::from_decls(&decls(), 5);
        assert_eq!(a, b);
        assert_ne!(a, ParamStore::from_decls(&decls(), 6));
        let w = a.get("a.weight").unwrap();
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / (64.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
        assert!(a.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_of_a_tensor_ignores_its_neighbours() {
        let full = ParamStore::from_decls(&decls(), 9);
        let only = ParamStore::from_decls(&decls()[..1], 9);
        assert_eq!(full.get("a.weight"), only.get("a.weight"));
    }

    #[test]
    fn byte_format_layout() {
        let mut s = ParamStore::new();
        s.insert("k", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.5, -2.0]).unwrap());
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"LASN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'k');
        assert_eq!(u64::from_le_bytes(b[41..49].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[49..57].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 12 + 4 + 1 + 32 + 16);
        assert_eq!(ParamStore::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn rejects_corrupt_files() {
        let s = ParamStore::from_decls(&decls(), 1);
        let b = s.to_bytes();
        assert!(ParamStore::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(ParamStore::from_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(ParamStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn check_against_reports_mismatches() {
        let s = ParamStore::from_decls(&decls(), 1);
        s.check_against(&decls()).unwrap();
        assert!(s.check_against(&decls()[..1]).is_err());
        let mut d = decls();
        d[1].shape = Shape::new(1, 1, 1, 32);
        assert!(s.check_against(&d).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bytes_round_trip(
                entries in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(-1e6f64..1e6, 1..20), 0..5)
            ) {
                let mut s = ParamStore::new();
                for (k, v) in entries {
                    let n = v.len();
                    s.insert(k, Tensor::from_vec(Shape::new(1, 1, 1, n), v).unwrap());
                }
                prop_assert_eq!(ParamStore::from_bytes(&s.to_bytes()).unwrap(), s);
            }
        }
    }
}
