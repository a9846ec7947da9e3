//! Named, seeded parameter storage shared by every layer of a model.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// He-normal for a layer with the given fan-in.
    Kaiming { fan_in: usize },
    Values(Vec<f64>),
}

/// Ordered collection of trainable variables.
///
/// Layers hold clones of the variables' tensors, which share storage with the
/// `Var`s kept here; optimizer updates through [`ParamStore::vars`] are
/// therefore visible to every layer (and every path) that uses them.
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Normal { std } => self.normal(numel, std),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                self.normal(numel, std)
            }
            Init::Values(v) => {
                if v.len() != numel {
                    return Err(Error::Config(format!(
                        "parameter {name}: {} initial values for {numel} elements",
                        v.len()
                    )));
                }
                v
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let handle = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(handle)
    }

    /// Draws from the store's generator; used for structured initializations
    /// that need randomness outside of [`Init`].
    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Hash of parameter names and shapes: identifies the inference graph.
    pub fn structure_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Hash of names, shapes and values.
    pub fn value_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        a.create("w", &[4, 4], Init::Kaiming { fan_in: 4 }).unwrap();
        b.create("w", &[4, 4], Init::Kaiming { fan_in: 4 }).unwrap();
        assert_eq!(a.value_hash().unwrap(), b.value_hash().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = ParamStore::new(0, DType::F32);
        a.create("w", &[1], Init::Zeros).unwrap();
        assert!(a.create("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn handles_share_storage_with_vars() {
        let mut store = ParamStore::new(0, DType::F64);
        let handle = store.create("w", &[2], Init::Zeros).unwrap();
        let var = store.get("w").unwrap();
        var.set(&Tensor::new(&[1.0f64, 2.0], store.device()).unwrap())
            .unwrap();
        assert_eq!(handle.to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
        assert_eq!(handle.id(), var.as_tensor().id());
    }
}
