//! Named parameter collections and the builder that creates or binds them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One complete, ordered set of named parameter arrays.
#[derive(Debug, Clone)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::elem_count).sum()
    }

    pub fn dtype(&self) -> DType {
        self.tensors.first().map_or(DType::F32, Tensor::dtype)
    }

    /// Fails unless `other` has the same names, in the same order, with the
    /// same shapes.
    pub fn ensure_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidArgument(
                "parameter sets have different name inventories".into(),
            ));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Deep copy whose tensors are detached from any autograd tracking.
    pub fn detached_copy(&self) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Ok(t.detach().copy()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: self.names.clone(),
            tensors,
            index: self.index.clone(),
        })
    }

    /// Trainable copies of every tensor.
    pub fn to_vars(&self) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| Ok(Var::from_tensor(&t.detach().copy()?)?))
            .collect()
    }

    /// Binds the current values of `vars` (same order) under this set's names.
    pub fn with_vars(&self, vars: &[Var]) -> Result<Self> {
        self.with_tensors(vars.iter().map(|v| v.as_tensor().clone()).collect())
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        let out = Self {
            names: self.names.clone(),
            tensors,
            index: self.index.clone(),
        };
        self.ensure_congruent(&out)?;
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Ok(t.to_dtype(dtype)?))
            .collect::<Result<Vec<_>>>()?;
        self.with_tensors(tensors)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for t in &self.tensors {
            let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Initial value rule for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±1/sqrt(fan_in)`.
    FanIn(usize),
}

enum Source {
    Create {
        rng: ChaCha8Rng,
        dtype: DType,
        created: Vec<(String, Tensor)>,
    },
    Bind(ModelParams),
}

/// Hands out parameters by hierarchical name, either creating them from a
/// seeded stream or looking them up in an existing [`ModelParams`].
#[derive(Clone)]
pub struct ParamBuilder {
    source: Rc<RefCell<Source>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn create(seed: u64, dtype: DType) -> Self {
        Self {
            source: Rc::new(RefCell::new(Source::Create {
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                created: Vec::new(),
            })),
            prefix: String::new(),
        }
    }

    pub fn bind(params: &ModelParams) -> Self {
        Self {
            source: Rc::new(RefCell::new(Source::Bind(params.clone()))),
            prefix: String::new(),
        }
    }

    pub fn push(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            source: Rc::clone(&self.source),
            prefix,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.push(name).prefix;
        let mut source = self.source.borrow_mut();
        match &mut *source {
            Source::Bind(params) => {
                let t = params.get(&full)?;
                if t.dims() != shape {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {full}: expected shape {shape:?}, found {:?}",
                        t.dims()
                    )));
                }
                Ok(t.clone())
            }
            Source::Create { rng, dtype, created } => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(*dtype)?;
                created.push((full, t.clone()));
                Ok(t)
            }
        }
    }

    /// Parameters created so far, in creation order.
    pub fn into_params(self) -> Result<ModelParams> {
        let source = self.source.borrow();
        match &*source {
            Source::Create { created, .. } => ModelParams::new(created.clone()),
            Source::Bind(params) => Ok(params.clone()),
        }
    }
}
