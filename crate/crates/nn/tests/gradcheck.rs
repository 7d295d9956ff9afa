//! Central finite differences against the tape for every op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthseg_nn::{
    Adam, AdamConfig, Graph, ParamStore, PatchDiscriminator, PatchDiscriminatorConfig,
    Tensor, UNet, UNetConfig, Var,
};

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks every scalar of every parameter (up to `max_per_param`).
fn check<F>(store: &ParamStore<f64>, max_per_param: usize, build: F)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let eps = 1e-6;
    for id in store.ids() {
        let analytic = grads.get(store, id).expect("every param reaches the loss");
        let len = store.get(id).len();
        let step = (len / max_per_param).max(1);
        for k in (0..len).step_by(step) {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[k] += delta;
                let mut g = Graph::new();
                let l = build(&mut g, &s);
                g.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-3 || (a - numeric).abs() < 1e-8,
                "{}[{k}]: analytic {a} vs numeric {numeric}",
                store.name(id)
            );
        }
    }
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor([2, 3, 2, 2], &mut rng));
    let b = store.add("b", random_tensor([2, 3, 2, 2], &mut rng));
    check(&store, 24, |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let sum = g.add(a, b);
        let diff = g.sub(a, b);
        let prod = g.mul(sum, diff);
        let t = g.tanh(prod);
        let l = g.leaky_relu(t, 0.2);
        let sq = g.square(l);
        let ab = g.abs(diff);
        let sg = g.sigmoid(ab);
        let lg = g.log_clamp(sg, 1e-12);
        let af = g.affine(lg, -2.0, 0.5);
        let m1 = g.mean(sq);
        let pooled = g.global_avg_pool(af);
        let m2 = g.mean(pooled);
        g.add(m1, m2)
    });
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor([2, 2, 4, 4], &mut rng));
    let b = store.add("b", random_tensor([2, 1, 4, 4], &mut rng));
    let w = store.add("w", random_tensor([3, 3, 3, 3], &mut rng));
    let bias = store.add("bias", random_tensor([1, 3, 1, 1], &mut rng));
    let w2 = store.add("w2", random_tensor([2, 3, 4, 4], &mut rng));
    check(&store, 40, |g, s| {
        let (a, b, w, bias, w2) = (g.param(s, a), g.param(s, b), g.param(s, w), g.param(s, bias), g.param(s, w2));
        let cat = g.concat(a, b);
        let c = g.conv2d(cat, w, Some(bias), 1, 1);
        let r = g.relu(c);
        let p = g.max_pool2(r);
        let u = g.upsample2(p);
        let d = g.conv2d(u, w2, None, 2, 1);
        let sq = g.square(d);
        g.mean(sq)
    });
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let logits = store.add("logits", random_tensor([1, 5, 4, 4], &mut rng));
    let labels: Vec<u8> = (0..16).map(|i| (i * 3 % 5) as u8).collect();
    check(&store, 80, |g, s| {
        let l = g.param(s, logits);
        g.softmax_cross_entropy(l, &labels)
    });
}

#[test]
fn dropout_gradient_uses_same_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor([1, 2, 4, 4], &mut rng));
    check(&store, 32, |g, s| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let x = g.param(s, a);
        let d = g.dropout(x, 0.5, &mut mask_rng);
        let sq = g.square(d);
        g.mean(sq)
    });
}

#[test]
fn unet_and_critic_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let unet = UNet::new(
        UNetConfig { in_channels: 1, out_channels: 2, base_width: 2, depth: 2, dropout: 0.0, negative_slope: 0.0 },
        &mut store,
        &mut rng,
    );
    let critic = PatchDiscriminator::new(
        PatchDiscriminatorConfig { in_channels: 2, base_width: 2, downsamples: 1 },
        &mut store,
        &mut rng,
    );
    // Zero biases put whole regions exactly on the ReLU kinks; move off them.
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape();
        let noise = random_tensor(shape, &mut rng);
        for (p, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += 0.1 * n;
        }
    }
    let x = random_tensor([1, 1, 8, 8], &mut rng);
    check(&store, 6, |g, s| {
        let xi = g.input(x.clone());
        let y = unet.forward(g, s, xi, None);
        let d = critic.forward(g, s, y);
        let sq = g.square(d);
        g.mean(sq)
    });
}

#[test]
fn zero_learning_rate_step_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f32>::new();
    let unet = UNet::new(
        UNetConfig { in_channels: 1, out_channels: 1, base_width: 2, depth: 1, dropout: 0.0, negative_slope: 0.0 },
        &mut store,
        &mut rng,
    );
    let before = store.clone();
    let mut opt = Adam::new(AdamConfig::new(0.0), &store);
    let mut g = Graph::new();
    let x = g.input(Tensor::full([1, 1, 4, 4], 0.3));
    let y = unet.forward(&mut g, &store, x, None);
    let l = g.mean(y);
    let grads = g.backward(l);
    opt.step(&mut store, &grads);
    for id in store.ids() {
        let (a, b) = (store.get(id).data(), before.get(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn patch_receptive_field_three_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let d = PatchDiscriminator::new(
        PatchDiscriminatorConfig { in_channels: 2, base_width: 4, downsamples: 2 },
        &mut store,
        &mut rng,
    );
    assert_eq!(d.receptive_field(), 22);
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros([1, 2, 64, 64]));
    let y = d.forward(&mut g, &store, x);
    assert_eq!(g.value(y).shape(), [1, 1, 15, 15]);
}

