//! Tape gradients of the training losses against their closed forms, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthseg::segmentation::cross_entropy_loss;
use synthseg::synthesis::{discriminator_loss, generator_loss, Reconstruction};
use synthseg_nn::{Graph, ParamStore, Tensor};

fn random(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
}

#[test]
fn critic_loss_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [2, 1, 3, 3];
    let mut store = ParamStore::new();
    let zr = store.add("real", random(shape, -3.0, 3.0, &mut rng));
    let zf = store.add("fake", random(shape, -3.0, 3.0, &mut rng));
    let mut g = Graph::new();
    let (vr, vf) = (g.param(&store, zr), g.param(&store, zf));
    let (pr, pf) = (g.sigmoid(vr), g.sigmoid(vf));
    let loss = discriminator_loss(&mut g, pr, pf);
    let n = 18.0;
    let expected: f64 = store.get(zr).data().iter().map(|&z| -sigmoid(z).ln()).sum::<f64>() / n
        + store.get(zf).data().iter().map(|&z| -(1.0 - sigmoid(z)).ln()).sum::<f64>() / n;
    close(g.value(loss).item(), expected);
    let grads = g.backward(loss);
    for (&z, &d) in store.get(zr).data().iter().zip(grads.get(&store, zr).unwrap().data()) {
        close(d, -(1.0 - sigmoid(z)) / n);
    }
    for (&z, &d) in store.get(zf).data().iter().zip(grads.get(&store, zf).unwrap().data()) {
        close(d, sigmoid(z) / n);
    }
}

#[test]
fn generator_loss_gradient_wrt_output_and_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lambda = 100.0;
    for recon in [Reconstruction::L1, Reconstruction::L2] {
        let mut store = ParamStore::new();
        let zf = store.add("critic", random([1, 1, 2, 2], -2.0, 2.0, &mut rng));
        let fake = store.add("fake", random([1, 1, 4, 4], -0.9, 0.9, &mut rng));
        let target = random([1, 1, 4, 4], -0.9, 0.9, &mut rng);
        let mut g = Graph::new();
        let vz = g.param(&store, zf);
        let p = g.sigmoid(vz);
        let vf = g.param(&store, fake);
        let vt = g.input(target.clone());
        let loss = generator_loss(&mut g, p, vf, vt, lambda, recon);
        let grads = g.backward(loss);
        for (&z, &d) in store.get(zf).data().iter().zip(grads.get(&store, zf).unwrap().data()) {
            close(d, -(1.0 - sigmoid(z)) / 4.0);
        }
        let fd = store.get(fake).data();
        for (k, &d) in grads.get(&store, fake).unwrap().data().iter().enumerate() {
            let r = fd[k] - target.data()[k];
            let want = match recon {
                Reconstruction::L1 => lambda * r.signum() / 16.0,
                Reconstruction::L2 => lambda * 2.0 * r / 16.0,
            };
            close(d, want);
        }
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w) = (5, 3, 2);
    let mut store = ParamStore::new();
    let logits = store.add("logits", random([1, c, h, w], -4.0, 4.0, &mut rng));
    let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..c as u8)).collect();
    let mut g = Graph::new();
    let v = g.param(&store, logits);
    let loss = cross_entropy_loss(&mut g, v, &labels).unwrap();
    let grads = g.backward(loss);
    let x = store.get(logits).data();
    let d = grads.get(&store, logits).unwrap().data();
    let px = (h * w) as f64;
    let mut expected_loss = 0.0;
    for i in 0..h * w {
        let z: Vec<f64> = (0..c).map(|k| x[k * h * w + i]).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        expected_loss -= ((z[labels[i] as usize] - m).exp() / s).ln() / px;
        for k in 0..c {
            let p = (z[k] - m).exp() / s;
            let onehot = if k == labels[i] as usize { 1.0 } else { 0.0 };
            close(d[k * h * w + i], (p - onehot) / px);
        }
    }
    close(g.value(loss).item(), expected_loss);
}

#[test]
fn cross_entropy_rejects_foreign_labels() {
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::zeros([1, 5, 1, 2]));
    assert!(cross_entropy_loss(&mut g, v, &[0, 5]).is_err());
    assert!(cross_entropy_loss(&mut g, v, &[0]).is_err());
}
