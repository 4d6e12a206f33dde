//! Linear-beta diffusion schedule and the closed-form noising relations.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    /// `betas[k]` for `k = 1..=T`; index 0 is unused and holds 0.
    pub betas: Vec<f64>,
    /// `alpha_bar[0] = 1`, `alpha_bar[k] = ∏_{i ≤ k} (1 − beta_i)`.
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, ModelError> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ModelError::BadRange(format!(
            "steps={steps}, beta_start={beta_start}, beta_end={beta_end}"
        )));
    }
    let mut betas = vec![0.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for k in 1..=steps {
        betas[k] = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (k - 1) as f64 / (steps - 1) as f64
        };
        alpha_bar[k] = alpha_bar[k - 1] * (1.0 - betas[k]);
    }
    Ok(DiffusionSchedule {
        steps,
        betas,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn check_timestep(&self, k: usize) -> Result<(), ModelError> {
        if k == 0 || k > self.steps {
            return Err(ModelError::TimestepOutOfRange(k, self.steps));
        }
        Ok(())
    }
}

/// `A_k = sqrt(ᾱ_k)·A_0 + sqrt(1 − ᾱ_k)·ε`.
pub fn add_noise(
    a0: &Tensor,
    k: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor, ModelError> {
    sched.check_timestep(k)?;
    if a0.shape() != eps.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "noise {:?} vs chunk {:?}",
            eps.shape(),
            a0.shape()
        )));
    }
    let (sa, sn) = (sched.alpha_bar[k].sqrt(), (1.0 - sched.alpha_bar[k]).sqrt());
    let data = a0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(a, e)| sa * a + sn * e)
        .collect();
    Ok(Tensor::from_vec(a0.rows, a0.cols, data))
}

/// `Â_0 = (A_k − sqrt(1 − ᾱ_k)·ε̂) / sqrt(ᾱ_k)`.
pub fn reconstruct_x0(
    ak: &Tensor,
    k: usize,
    eps_hat: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor, ModelError> {
    sched.check_timestep(k)?;
    Ok(reconstruct_with(ak, sched.alpha_bar[k], eps_hat))
}

/// Reconstruction for an explicit `ᾱ`, including the `ᾱ = 1` limit.
pub fn reconstruct_with(ak: &Tensor, alpha_bar: f64, eps_hat: &Tensor) -> Tensor {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = ak
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(a, e)| (a - sn * e) / sa)
        .collect();
    Tensor::from_vec(ak.rows, ak.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_product() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar[1] - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar[0], 1.0);
    }

    #[test]
    fn strictly_decreasing() {
        let s = make_schedule(100, 1e-4, 0.2).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[100] > 0.0);
    }

    #[test]
    fn bad_ranges() {
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn noise_then_reconstruct_is_identity() {
        let s = make_schedule(100, 1e-4, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = normal_tensor(8, 7, 1.0, &mut rng);
        let eps = normal_tensor(8, 7, 1.0, &mut rng);
        for k in [1, 37, 100] {
            let ak = add_noise(&a0, k, &eps, &s).unwrap();
            let back = reconstruct_x0(&ak, k, &eps, &s).unwrap();
            assert!(back.max_abs_diff(&a0) < 1e-9);
        }
        assert!(matches!(
            add_noise(&a0, 0, &eps, &s),
            Err(ModelError::TimestepOutOfRange(0, 100))
        ));
    }

    #[test]
    fn reconstruction_matches_direct_formula() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ak = normal_tensor(4, 7, 1.0, &mut rng);
        let e = normal_tensor(4, 7, 1.0, &mut rng);
        let k = 23;
        let mut ab = 1.0;
        for i in 1..=k {
            ab *= 1.0 - (1e-3 + (0.05 - 1e-3) * (i - 1) as f64 / 49.0);
        }
        let got = reconstruct_x0(&ak, k, &e, &s).unwrap();
        for i in 0..ak.len() {
            let want = (ak.data[i] - (1.0 - ab).sqrt() * e.data[i]) / ab.sqrt();
            assert!((got.data[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        let zero = Tensor::zeros(4, 7);
        assert_eq!(reconstruct_with(&ak, 1.0, &zero), ak);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reconstruction_inverts_noising(
                k in 1usize..=100,
                a0 in proptest::collection::vec(-1.0f64..1.0, 14),
                eps in proptest::collection::vec(-3.0f64..3.0, 14),
            ) {
                let s = make_schedule(100, 1e-4, 0.2).unwrap();
                let a0 = Tensor::from_vec(2, 7, a0);
                let eps = Tensor::from_vec(2, 7, eps);
                let ak = add_noise(&a0, k, &eps, &s).unwrap();
                prop_assert!(reconstruct_x0(&ak, k, &eps, &s).unwrap().max_abs_diff(&a0) < 1e-9);
            }

            #[test]
            fn alpha_bar_is_a_decreasing_product(t in 1usize..300, lo in 1e-5f64..1e-2, span in 0.0f64..0.5) {
                let s = make_schedule(t, lo, lo + span).unwrap();
                prop_assert_eq!(s.alpha_bar.len(), t + 1);
                prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
            }
        }
    }
}
