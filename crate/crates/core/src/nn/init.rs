use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Activation, DenseLayer, Mlp, NnError};
use crate::linalg::{Matrix, Scalar};

/// Random network with widths `sizes` (input first). ReLU layers draw weights
/// from `N(0, 2/in)` (He); other layers from `N(0, 2/(in+out))` (Xavier).
/// Biases start at zero.
pub fn init_mlp<T: Scalar>(
    sizes: &[usize],
    activations: &[Activation],
    seed: u64,
) -> Result<Mlp<T>, NnError> {
    if sizes.len() < 2 {
        return Err(NnError::Invalid(
            "need at least an input and an output width".into(),
        ));
    }
    if activations.len() != sizes.len() - 1 {
        return Err(NnError::Invalid(format!(
            "{} activations for {} layers",
            activations.len(),
            sizes.len() - 1
        )));
    }
    if sizes.contains(&0) {
        return Err(NnError::Invalid("layer widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(activations.len());
    for (w, &act) in sizes.windows(2).zip(activations) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let var = match act {
            Activation::Relu => 2.0 / fan_in as f64,
            _ => 2.0 / (fan_in + fan_out) as f64,
        };
        let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64(normal.sample(&mut rng)))
            .collect();
        layers.push(DenseLayer::new(
            Matrix::from_vec(fan_out, fan_in, data),
            vec![T::ZERO; fan_out],
            act,
        )?);
    }
    Mlp::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let acts = [Activation::Relu, Activation::None];
        let a = init_mlp::<f32>(&[6, 4, 2], &acts, 11).unwrap();
        let b = init_mlp::<f32>(&[6, 4, 2], &acts, 11).unwrap();
        let c = init_mlp::<f32>(&[6, 4, 2], &acts, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let net = init_mlp::<f64>(&[5, 3, 1], &[Activation::Relu, Activation::Sigmoid], 2).unwrap();
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn he_variance_for_relu_layer() {
        // 5 seeds × 64·32 weights = 10240 draws.
        let mut draws = Vec::new();
        for seed in 0..5 {
            let net = init_mlp::<f64>(&[64, 32], &[Activation::Relu], seed).unwrap();
            draws.extend_from_slice(net.layers()[0].weight.as_slice());
        }
        assert!(draws.len() >= 10_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // sd of the sample variance is about 2/64 * sqrt(2/n) ≈ 1.4%
        assert!((var / (2.0 / 64.0) - 1.0).abs() < 0.05, "var = {var}");
        assert!(mean.abs() < 4.0 * (2.0f64 / 64.0 / n).sqrt());
    }

    #[test]
    fn xavier_variance_otherwise() {
        let mut draws = Vec::new();
        for seed in 0..5 {
            let net = init_mlp::<f64>(&[64, 32], &[Activation::None], seed).unwrap();
            draws.extend_from_slice(net.layers()[0].weight.as_slice());
        }
        let n = draws.len() as f64;
        let var = draws.iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var / (2.0 / 96.0) - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn rejects_bad_descriptions() {
        assert!(init_mlp::<f32>(&[4], &[], 0).is_err());
        assert!(init_mlp::<f32>(&[4, 2], &[], 0).is_err());
        assert!(init_mlp::<f32>(&[4, 0], &[Activation::None], 0).is_err());
    }
}
