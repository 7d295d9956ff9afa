use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Float, NnError, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter tensor inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
///
/// Every store carries a process-unique id so a graph mixing two models
/// (generator + discriminator) keeps their gradients apart.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<T: Float> PartialEq for ParamStore<T> {
    /// Compares names and values; the store identity is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`.
    pub fn add_he_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces every value with the matching tensor of `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        self.values.clone_from(&other.values);
    }

    /// Binary layout: `u32` count, then per tensor `u32` name length, UTF-8 name,
    /// four `u32` dims and little-endian `f32` values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            for d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in value.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NnError> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32, NnError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let count = u32_of(r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = u32_of(r)? as usize;
            if name_len > 4096 {
                return Err(NnError::Format(format!("parameter name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = u32_of(r)? as usize;
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 28 {
                return Err(NnError::Format(format!("tensor {name} too large: {shape:?}")));
            }
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.add(name, Tensor::from_vec(shape, data));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn serialization_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.add_he_normal("conv.w", [4, 2, 3, 3], 18, &mut rng);
        store.add("conv.b", Tensor::full([1, 4, 1, 1], 0.25));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, store);
        assert_ne!(back.uid(), store.uid());
    }

    #[test]
    fn truncated_archive_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full([1, 1, 2, 2], 1.0));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::<f32>::read_from(&mut buf.as_slice()).is_err());
    }
}
