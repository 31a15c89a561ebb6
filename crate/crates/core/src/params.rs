//! Named parameter storage, initialization, and binary serialization.

use crate::error::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};

/// Role of a parameter; drives weight decay and optimizer membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix: trained, weight-decayed.
    Weight,
    /// Bias vector: trained, no weight decay.
    Bias,
    /// Normalization scale/shift: trained, no weight decay.
    NormScale,
    NormShift,
    /// Running statistic: not trained, updated by the forward pass.
    Buffer,
}

impl ParamKind {
    pub fn trainable(&self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn decayed(&self) -> bool {
        matches!(self, ParamKind::Weight)
    }

    fn tag(&self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Buffer => 4,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Buffer,
            _ => return Err(Error::Data(format!("unknown parameter kind tag {t}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
}

/// Ordered collection of named parameters. Registration order is the
/// deterministic iteration order everywhere (initialization, optimizer
/// updates, serialization).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

const BLOB_MAGIC: &[u8; 8] = b"IWVGPAR1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, kind: ParamKind, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), kind, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self.index[name];
        &self.params[i].value
    }

    pub fn get1(&self, name: &str) -> Array1<f64> {
        self.get(name)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank-1 parameter")
            .to_owned()
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let i = self.index[name];
        assert_eq!(self.params[i].value.shape(), value.shape(), "shape change for {name}");
        self.params[i].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// All parameter values are finite.
    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Binary blob: magic, count, then per parameter name/kind/shape/data
    /// (little-endian f64). Round-trips bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.kind.tag());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Data("parameter blob truncated".into()))?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Data("bad parameter blob magic".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| Error::Data("parameter blob truncated".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("bad parameter name".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|_| Error::Data("parameter blob truncated".into()))?;
            let kind = ParamKind::from_tag(tag[0])?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| Error::Data("parameter blob truncated".into()))?;
                data.push(f64::from_le_bytes(b));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| Error::Data(format!("bad shape for parameter {name}")))?;
            store.register(&name, kind, value);
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Data("parameter blob truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Data("parameter blob truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Helper that registers layers with Glorot-uniform weights, zero biases and
/// identity normalization, drawing from a single deterministic stream.
pub struct ParamBuilder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Dense layer `name.w (fan_in, fan_out)` + `name.b (fan_out)`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
            self.rng.gen_range(-limit..limit)
        });
        self.store.register(&format!("{name}.w"), ParamKind::Weight, w);
        self.store.register(
            &format!("{name}.b"),
            ParamKind::Bias,
            ArrayD::zeros(IxDyn(&[fan_out])),
        );
    }

    /// Batch-norm layer: gamma=1, beta=0, running mean 0, running var 1.
    pub fn batchnorm(&mut self, name: &str, dim: usize) {
        self.store.register(
            &format!("{name}.gamma"),
            ParamKind::NormScale,
            ArrayD::from_elem(IxDyn(&[dim]), 1.0),
        );
        self.store.register(
            &format!("{name}.beta"),
            ParamKind::NormShift,
            ArrayD::zeros(IxDyn(&[dim])),
        );
        self.store.register(
            &format!("{name}.running_mean"),
            ParamKind::Buffer,
            ArrayD::zeros(IxDyn(&[dim])),
        );
        self.store.register(
            &format!("{name}.running_var"),
            ParamKind::Buffer,
            ArrayD::from_elem(IxDyn(&[dim]), 1.0),
        );
    }
}
