use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor_io::{TensorBlob, TensorData};

/// Parameter initializers. Every parameter draws from its own stream derived
/// from the store seed and its name, so creation order never matters.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-b, b]` with `b = gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

fn name_tag(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A named collection of trainable variables shared by reference.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("n_params", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_scalars(&self) -> usize {
        self.vars
            .lock()
            .expect("param lock")
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("param lock").keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param lock").get(name).cloned()
    }

    /// Variables in name order, optionally restricted to a name prefix.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("")
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanIn { fan_in, gain } => {
                use rand::Rng as _;
                let b = gain / (fan_in.max(1) as f64).sqrt();
                let mut r = rng::rng_from(self.seed, &[tag::INIT, name_tag(name)]);
                (0..n).map(|_| r.random_range(-b..=b)).collect()
            }
            Init::Normal { std } => {
                let mut r = rng::rng_from(self.seed, &[tag::INIT, name_tag(name)]);
                rng::normal_vec_f64(&mut r, n).into_iter().map(|v| v * std).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the named variable, creating it on first use.
    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        let t = var.as_tensor().clone();
        self.vars
            .lock()
            .expect("param lock")
            .insert(name.to_string(), var);
        Ok(t)
    }

    /// Copies every variable into a fresh store of another dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let out = ParamStore::new(self.seed, dtype, self.device.clone());
        {
            let src = self.vars.lock().expect("param lock");
            let mut dst = out.vars.lock().expect("param lock");
            for (k, v) in src.iter() {
                dst.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?);
            }
        }
        Ok(out)
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        self.to_dtype(self.dtype)
    }

    pub fn to_blobs(&self, prefix: &str) -> Result<BTreeMap<String, TensorBlob>> {
        let vars = self.vars.lock().expect("param lock");
        let mut out = BTreeMap::new();
        for (k, v) in vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let t = v.as_tensor();
            let shape = t.dims().to_vec();
            let data = match t.dtype() {
                DType::F64 => TensorData::F64(t.flatten_all()?.to_vec1::<f64>()?),
                _ => TensorData::F32(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?),
            };
            out.insert(k.clone(), TensorBlob::new(shape, data)?);
        }
        Ok(out)
    }

    /// Inserts (or overwrites) variables from stored blobs.
    pub fn load_blobs(&self, blobs: &BTreeMap<String, TensorBlob>) -> Result<()> {
        let mut vars = self.vars.lock().expect("param lock");
        for (k, b) in blobs {
            let t = match &b.data {
                TensorData::F32(v) => Tensor::from_slice(v, b.shape.as_slice(), &self.device)?,
                TensorData::F64(v) => Tensor::from_slice(v, b.shape.as_slice(), &self.device)?,
                TensorData::U8(_) => return Err(Error::Format(format!("parameter {k} stored as u8"))),
            }
            .to_dtype(self.dtype)?;
            match vars.get(k) {
                Some(existing) if existing.dims() == t.dims() => existing.set(&t)?,
                Some(existing) => {
                    return Err(Error::shape(format!(
                        "parameter {k}: stored {:?} vs model {:?}",
                        t.dims(),
                        existing.dims()
                    )))
                }
                None => {
                    vars.insert(k.clone(), Var::from_tensor(&t)?);
                }
            }
        }
        Ok(())
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_init(&self.pp(name).prefix, shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
