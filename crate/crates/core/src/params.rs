//! Named parameter storage, binding onto a [`Tape`], and checkpoint files.

use std::collections::HashMap;
use std::fs;
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the first two dimensions.
    Xavier,
    Normal(f64),
}

/// Ordered collection of learnable arrays. Every name is registered once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::invalid(format!("parameter {name} has zero size")));
        }
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let fan_in = shape[0] as f64;
                let fan_out = shape.get(1).copied().unwrap_or(1) as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit)
                    .map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), &p.shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bindings(vars))
    }

    /// Collects the gradient of every bound parameter after `backward`.
    pub fn grads(&self, tape: &Tape, bound: &Bindings) -> Vec<Vec<f64>> {
        bound.0.iter().map(|&v| tape.grad(v).to_vec()).collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies weights from `other`, which must have the identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::invalid(format!(
                    "parameter layout mismatch: {} {:?} vs {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    /// `name<TAB>d0xd1...` per line, in registration order.
    pub fn manifest(&self) -> String {
        self.params
            .iter()
            .map(|p| {
                let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
                format!("{}\t{}\n", p.name, dims.join("x"))
            })
            .collect()
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.by_name.clear();
        for (i, p) in self.params.iter().enumerate() {
            if p.data.len() != p.shape.iter().product::<usize>() {
                return Err(Error::invalid(format!("parameter {} has wrong data length", p.name)));
            }
            if self.by_name.insert(p.name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk container: a format version, an opaque config echo and the
/// named arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format_version: u32,
    pub config: C,
    pub params: Vec<Param>,
}

impl<C: Serialize + for<'de> Deserialize<'de>> Checkpoint<C> {
    /// Writes `path` as JSON and `path` + `.manifest` listing names and shapes.
    pub fn save(config: C, store: &ParamStore, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config,
            params: store.params.clone(),
        };
        let json = serde_json::to_string(&ck)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        let mut manifest_path = path.as_os_str().to_owned();
        manifest_path.push(".manifest");
        fs::write(&manifest_path, store.manifest()).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(C, ParamStore)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint<C> = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        let mut store = ParamStore {
            params: ck.params,
            by_name: HashMap::new(),
        };
        store.rebuild_index()?;
        Ok((ck.config, store))
    }
}
