//! Flat named parameter storage and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named tensors packed into one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<TensorSpec>,
    data: Vec<T>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            specs: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor drawn from `N(0, std^2)`; `std == 0` gives zeros and
    /// `std < 0` gives ones.
    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            self.data
                .extend((0..len).map(|_| T::lit(normal.sample(rng))));
        } else if std == 0.0 {
            self.data.extend(std::iter::repeat_n(T::zero(), len));
        } else {
            self.data.extend(std::iter::repeat_n(T::one(), len));
        }
        self.specs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        let s = &self.specs[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let s = &self.specs[id.0];
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn spec(&self, id: ParamId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    /// Same layout with converted element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Slice of a flat gradient buffer matching a tensor.
pub fn grad_slice<'a, T>(grads: &'a mut [T], spec: &TensorSpec) -> &'a mut [T] {
    &mut grads[spec.offset..spec.offset + spec.len]
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one flat buffer.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [T], grads: &[T]) {
        self.step += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let bc1 = one - T::lit(cfg.beta1.powi(self.step as i32));
        let bc2 = one - T::lit(cfg.beta2.powi(self.step as i32));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", &[2, 3], 0.0, &mut rng);
        let b = s.add("b", &[4], -1.0, &mut rng);
        assert_eq!(s.len(), 10);
        assert_eq!(s.get(a), &[0.0; 6]);
        assert_eq!(s.get(b), &[1.0; 4]);
        assert_eq!(s.find("b"), Some(b));
        assert_eq!(s.spec(b).offset, 6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut x = vec![3.0f64, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            st.update(&cfg, &mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
