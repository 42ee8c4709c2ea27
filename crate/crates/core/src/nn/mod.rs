//! Dense tensors, a reverse-mode tape, Adam, gradient checking and
//! checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod tape;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, grad_check, GradCheckReport};
pub use tape::{ConvGeometry, Graph, Padding, Tape, Var};

/// Floating-point element type of tensors: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + 'static
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense array with a gradient accumulator of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> TensorBuf<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if values.len() != numel(&shape) {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        let grad = vec![T::zero(); values.len()];
        Ok(Self {
            shape,
            values,
            grad,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, TensorBuf<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorBuf<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Adds a parameter drawn uniformly from `±1/√fan_in`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..numel(&shape))
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, TensorBuf::new(shape, values)?)
    }

    pub fn get(&self, name: &str) -> Result<&TensorBuf<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorBuf<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBuf<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut TensorBuf<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(|t| t.zero_grad());
    }

    /// Converts every tensor to another element type (gradients reset).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    let values: Vec<U> = t.values.iter().map(|v| U::of(Real::to_f64(*v))).collect();
                    (
                        k.clone(),
                        TensorBuf {
                            shape: t.shape.clone(),
                            grad: vec![U::zero(); values.len()],
                            values,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::<f32>::new();
        p.init_uniform(&mut rng, "w", vec![16, 8], 16).unwrap();
        let w = p.get("w").unwrap();
        assert!(w.values.iter().all(|v| v.abs() <= 0.25));
        assert!(w.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn names_are_sorted_and_unique() {
        let mut p = ParamStore::<f64>::new();
        p.insert("b", TensorBuf::zeros(vec![1])).unwrap();
        p.insert("a.x", TensorBuf::zeros(vec![2])).unwrap();
        assert!(p.insert("b", TensorBuf::zeros(vec![1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a.x", "b"]);
        assert!(matches!(p.get("zzz"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn shape_checked_on_construction() {
        assert!(TensorBuf::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
