use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthseg_nn::{Conv2d, Graph, ParamStore, Tensor};

use super::FeatureSet;
use crate::{Error, Result};

pub const EMBEDDING_DIM: usize = 64;

/// Maps a single-channel image to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn seed(&self) -> u64;
    fn dim(&self) -> usize;
    fn embed(&self, image: ArrayView2<f32>) -> Result<Vec<f64>>;
}

/// Untrained convolutional stack with fixed-seed He weights followed by
/// global average pooling.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedder {
    seed: u64,
    net: Option<(ParamStore<f32>, [Conv2d; 3])>,
}

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut e = Self::uninitialized(seed);
        e.initialize();
        e
    }

    pub fn uninitialized(seed: u64) -> Self {
        Self { seed, net: None }
    }

    pub fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::new();
        let layers = [
            Conv2d::new(&mut store, "embed.0", 1, 16, 3, 1, 1, &mut rng),
            Conv2d::new(&mut store, "embed.1", 16, 32, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "embed.2", 32, EMBEDDING_DIM, 3, 2, 1, &mut rng),
        ];
        self.net = Some((store, layers));
    }

    pub fn is_initialized(&self) -> bool {
        self.net.is_some()
    }
}

impl FeatureExtractor for RandomConvEmbedder {
    fn id(&self) -> String {
        format!("random-conv-{EMBEDDING_DIM}")
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn dim(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed(&self, image: ArrayView2<f32>) -> Result<Vec<f64>> {
        let (store, layers) = self
            .net
            .as_ref()
            .ok_or_else(|| Error::State("embedder used before initialize()".into()))?;
        let (h, w) = image.dim();
        let mut g = Graph::inference();
        let mut x = g.input(Tensor::from_vec([1, 1, h, w], image.iter().copied().collect()));
        for layer in layers {
            x = layer.forward(&mut g, store, x);
            x = g.leaky_relu(x, 0.2);
        }
        let pooled = g.global_avg_pool(x);
        Ok(g.value(pooled).data().iter().map(|&v| v as f64).collect())
    }
}

pub fn embed_features(images: &[ArrayView2<f32>], embedder: &dyn FeatureExtractor) -> Result<FeatureSet> {
    let rows = images.iter().map(|im| embedder.embed(*im)).collect::<Result<Vec<_>>>()?;
    FeatureSet::new(rows, embedder.id(), embedder.seed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn images(n: usize) -> Vec<Array2<f32>> {
        (0..n)
            .map(|k| Array2::from_shape_fn((16, 16), |(y, x)| (((y * 3 + x * 5 + k * 7) % 13) as f32) / 12.0))
            .collect()
    }

    #[test]
    fn deterministic_and_stateful() {
        let imgs = images(3);
        let views: Vec<_> = imgs.iter().map(|a| a.view()).collect();
        let a = embed_features(&views, &RandomConvEmbedder::new(7)).unwrap();
        let b = embed_features(&views, &RandomConvEmbedder::new(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), EMBEDDING_DIM);
        let err = embed_features(&views, &RandomConvEmbedder::uninitialized(7)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn shrinkage_only_when_undersampled() {
        let e = RandomConvEmbedder::new(1);
        let few = images(10);
        let many: Vec<Array2<f32>> = (0..65)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(k);
                Array2::from_shape_fn((16, 16), |_| rand::Rng::random::<f32>(&mut r))
            })
            .collect();
        let f_few = embed_features(&few.iter().map(|a| a.view()).collect::<Vec<_>>(), &e).unwrap();
        let f_many = embed_features(&many.iter().map(|a| a.view()).collect::<Vec<_>>(), &e).unwrap();
        assert!(f_few.moments().shrunk);
        let m = f_many.moments();
        assert!(!m.shrunk);
        assert_eq!(m.cov.rank(1e-12 * m.cov.norm()), EMBEDDING_DIM);
    }
}
