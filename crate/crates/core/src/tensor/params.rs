use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NdArray, Real, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: NdArray<T>,
    trainable: bool,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform in `±sqrt(1/fan_in)` (Kaiming-uniform with `a = sqrt(5)`).
    KaimingUniform { fan_in: usize },
}

/// Named, insertion-ordered parameter storage.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    names: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: NdArray<T>, trainable: bool) -> Result<ParamId, TensorError> {
        if self.names.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.names.insert(name.to_string(), id.0);
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(id)
    }

    /// Creates a parameter with the given initialization. Panics on a
    /// duplicate name, which is a programming error in model construction.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
            Init::KaimingUniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            }
        };
        self.insert(name, NdArray::new(shape, data).expect("init shape"), true)
            .expect("unique parameter name")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &NdArray<T> {
        &self.params[id.0].value
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: NdArray<T>) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "ParamSet::set",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Writes queued running statistics.
    pub fn apply_running(&mut self, updates: &[(ParamId, Vec<T>)]) {
        for (id, v) in updates {
            self.get_mut(*id).copy_from_slice(v);
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.params[id.0].value.data_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &NdArray<T>)> + '_ {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", NdArray::zeros(&[2]), true).unwrap();
        assert!(ps.insert("a", NdArray::zeros(&[2]), true).is_err());
    }

    #[test]
    fn shapes_are_immutable() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.insert("a", NdArray::zeros(&[2]), true).unwrap();
        assert!(ps.set(id, NdArray::zeros(&[3])).is_err());
        assert!(ps.set(id, NdArray::full(&[2], 1.0)).is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ps = ParamSet::<f32>::new();
            ps.init("w", &[4, 4], Init::Normal(0.02), &mut rng);
            ps.get(ParamId(0)).clone()
        };
        assert_eq!(mk(), mk());
    }
}
