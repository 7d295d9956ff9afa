use synthseg_nn::{Float, Graph, Var};

use super::Reconstruction;
use crate::{Error, Result};

/// Lower clamp inside every logarithm of the adversarial terms.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-[mean ln D(x, y) + mean ln(1 - D(x, G(x)))]` from critic probabilities,
/// averaged over the patch grid and the batch.
pub fn discriminator_loss<T: Float>(g: &mut Graph<T>, p_real: Var, p_fake: Var) -> Var {
    let log_real = g.log_clamp(p_real, LOG_FLOOR);
    let real_term = g.mean(log_real);
    let one_minus = g.affine(p_fake, -1.0, 1.0);
    let log_fake = g.log_clamp(one_minus, LOG_FLOOR);
    let fake_term = g.mean(log_fake);
    let sum = g.add(real_term, fake_term);
    g.affine(sum, -1.0, 0.0)
}

/// `-mean ln D(x, G(x)) + lambda * mean |G(x) - y|` (or the squared error
/// for [`Reconstruction::L2`]).
pub fn generator_loss<T: Float>(
    g: &mut Graph<T>,
    p_fake: Var,
    fake: Var,
    real: Var,
    lambda: f64,
    reconstruction: Reconstruction,
) -> Var {
    let log_fake = g.log_clamp(p_fake, LOG_FLOOR);
    let adv_mean = g.mean(log_fake);
    let adversarial = g.affine(adv_mean, -1.0, 0.0);
    let diff = g.sub(fake, real);
    let pixel = match reconstruction {
        Reconstruction::L1 => g.abs(diff),
        Reconstruction::L2 => g.square(diff),
    };
    let recon = g.mean(pixel);
    let weighted = g.affine(recon, lambda, 0.0);
    g.add(adversarial, weighted)
}

/// Converts a scalar loss to `f64`, or a numerical error naming the batch.
pub fn check_finite_loss<T: Float>(g: &Graph<T>, loss: Var, batch: usize) -> Result<f64> {
    let v = g.value(loss).item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numerical {
            batch,
            message: format!("loss is {v}"),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use synthseg_nn::Tensor;

    fn half(g: &mut Graph<f64>) -> Var {
        g.input(Tensor::full([2, 1, 3, 3], 0.5))
    }

    #[test]
    fn closed_forms_at_half() {
        let mut g = Graph::<f64>::new();
        let (a, b) = (half(&mut g), half(&mut g));
        let d = discriminator_loss(&mut g, a, b);
        assert!((g.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let y = g.input(Tensor::full([2, 1, 4, 4], 0.3));
        let gl = generator_loss(&mut g, a, y, y, 100.0, Reconstruction::L1);
        assert!((g.value(gl).item() - 2f64.ln()).abs() < 1e-12);

        let shifted = g.input(Tensor::full([2, 1, 4, 4], 0.31));
        let gl = generator_loss(&mut g, a, shifted, y, 100.0, Reconstruction::L1);
        assert!((g.value(gl).item() - (2f64.ln() + 1.0)).abs() < 1e-9);
        let pure = generator_loss(&mut g, a, shifted, y, 0.0, Reconstruction::L1);
        assert!((g.value(pure).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn floor_bounds_the_loss() {
        let mut g = Graph::<f64>::new();
        let zero = g.input(Tensor::full([1, 1, 2, 2], 0.0));
        let one = g.input(Tensor::full([1, 1, 2, 2], 1.0));
        let worst = discriminator_loss(&mut g, zero, one);
        let v = g.value(worst).item();
        assert!((v - 2.0 * -LOG_FLOOR.ln()).abs() < 1e-9);
        let best = discriminator_loss(&mut g, one, zero);
        assert_eq!(g.value(best).item(), 0.0);
        assert!(check_finite_loss(&g, worst, 3).is_ok());
    }
}
