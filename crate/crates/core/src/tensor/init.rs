use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};

/// Weight standard deviation of the original training recipe.
pub const INIT_STD: f64 = 1e-4;

/// i.i.d. `N(0, std^2)` entries.
pub fn gaussian_init<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
    let data = (0..shape.numel())
        .map(|_| normal.sample(rng) as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// How convolution weights are drawn. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum WeightInit {
    /// Every weight from `N(0, std^2)`.
    Gaussian { std: f64 },
    /// Hidden layers from `N(0, 2 / fan_in)`; prediction heads from
    /// `N(0, head_std^2)` so the untrained network starts near its
    /// zero-output fixed point.
    HeHidden { head_std: f64 },
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::HeHidden { head_std: INIT_STD }
    }
}

impl WeightInit {
    pub fn small_gaussian() -> Self {
        WeightInit::Gaussian { std: INIT_STD }
    }

    pub(crate) fn std_for(&self, fan_in: usize, is_head: bool) -> f64 {
        match *self {
            WeightInit::Gaussian { std } => std,
            WeightInit::HeHidden { head_std } if is_head => head_std,
            WeightInit::HeHidden { .. } => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn million_draws_match_requested_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let t = gaussian_init(Shape::new(1000, 10, 10, 10), INIT_STD, &mut rng);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!(mean.abs() < 3.0 * INIT_STD / 1e3, "mean {mean}");
        assert!(
            (var.sqrt() / INIT_STD - 1.0).abs() < 0.05,
            "std {}",
            var.sqrt()
        );
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = gaussian_init(
            Shape::new(4, 3, 3, 3),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let b = gaussian_init(
            Shape::new(4, 3, 3, 3),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        assert_eq!(a, b);
    }
}
