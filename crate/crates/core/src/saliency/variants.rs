use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{filter_aggregate, filter_profile, kernel_gradient};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{l2_norm, Tensor};

/// Mean raw profile over `n` inputs `x + η`, `η ~ N(0, (noise_frac · (max x − min x))²)`.
pub fn smoothgrad_param_saliency(
    model: &Model,
    image: &Tensor,
    label: usize,
    noise_frac: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("smoothgrad needs at least one draw"));
    }
    if !(noise_frac >= 0.0) {
        return Err(Error::invalid("noise fraction must be non-negative"));
    }
    if noise_frac == 0.0 {
        return filter_profile(model, image, label);
    }
    let (lo, hi) = image.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let std = noise_frac * (hi - lo);
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; model.registry().filter_count()];
    for _ in 0..n {
        let mut noisy = image.clone();
        noisy.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        for (a, p) in acc.iter_mut().zip(filter_profile(model, &noisy, label)?) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackDirection {
    /// Descend the loss (the parameters move toward fixing the sample).
    #[default]
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Radius of the L2 ball around the trained kernel weights.
    pub eps: f64,
    pub steps: usize,
    pub direction: AttackDirection,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { eps: 1e-4, steps: 10, direction: AttackDirection::Minimize }
    }
}

/// Projected normalized-gradient attack on the kernel weights within `‖θ − θ₀‖₂ ≤ ε`;
/// the profile is the filter-wise mean of `|θ* − θ₀|`.
pub fn adversarial_saliency(model: &Model, image: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    if !(cfg.eps > 0.0) || cfg.steps == 0 {
        return Err(Error::invalid("attack needs eps > 0 and at least one step"));
    }
    let theta0 = model.kernel_weights();
    let sign = match cfg.direction {
        AttackDirection::Minimize => -1.0,
        AttackDirection::Maximize => 1.0,
    };
    let step = 2.5 * cfg.eps / cfg.steps as f64;
    // the displacement is tracked directly so |θ* − θ₀| carries no cancellation error
    let mut delta = vec![0.0; theta0.len()];
    for t in 0..cfg.steps {
        let current = if t == 0 {
            model.clone()
        } else {
            let theta: Vec<f64> = theta0.iter().zip(&delta).map(|(a, d)| a + d).collect();
            model.with_kernel_weights(&theta)?
        };
        let (g, _) = kernel_gradient(&current, image, label)?;
        let norm = l2_norm(&g);
        if norm == 0.0 {
            break;
        }
        for (d, gi) in delta.iter_mut().zip(&g) {
            *d += sign * step * gi / norm;
        }
        let dn = l2_norm(&delta);
        if dn > cfg.eps {
            let shrink = cfg.eps / dn;
            delta.iter_mut().for_each(|d| *d *= shrink);
        }
    }
    let abs: Vec<f64> = delta.into_iter().map(f64::abs).collect();
    filter_aggregate(&abs, model.registry())
}

/// `|(1 − α) ∇θ (L + α ‖θ − θ₀‖₁)|` at `θ = θ₀`, taking the L1 subgradient 0 at zero
/// displacement, so the result is `(1 − α)` times the plain profile.
pub fn l1_adversarial_saliency(model: &Model, image: &Tensor, label: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1)"));
    }
    Ok(filter_profile(model, image, label)?.into_iter().map(|v| (1.0 - alpha) * v).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{rank_descending, tests::image};
    use super::*;
    use crate::nn::ModelSpec;
    use crate::tensor::cosine_similarity;

    fn model() -> Model {
        Model::build(&ModelSpec::small_resnet(&[3, 4], 1, [2, 6, 6], 3), 6).unwrap()
    }

    #[test]
    fn smoothgrad_zero_noise_and_determinism() {
        let m = model();
        let img = image([2, 6, 6], 2);
        assert_eq!(smoothgrad_param_saliency(&m, &img, 1, 0.0, 5, 0).unwrap(), filter_profile(&m, &img, 1).unwrap());
        let a = smoothgrad_param_saliency(&m, &img, 1, 0.05, 4, 9).unwrap();
        assert_eq!(a, smoothgrad_param_saliency(&m, &img, 1, 0.05, 4, 9).unwrap());
        assert!(smoothgrad_param_saliency(&m, &img, 1, 0.05, 0, 9).is_err());
    }

    #[test]
    fn one_step_attack_is_collinear_with_gradient() {
        let m = model();
        let img = image([2, 6, 6], 3);
        let plain = filter_profile(&m, &img, 2).unwrap();
        for direction in [AttackDirection::Minimize, AttackDirection::Maximize] {
            let adv = adversarial_saliency(&m, &img, 2, &AttackConfig { eps: 1e-4, steps: 1, direction }).unwrap();
            assert!((cosine_similarity(&plain, &adv) - 1.0).abs() < 1e-9);
            let (rp, ra) = (rank_descending(&plain), rank_descending(&adv));
            for k in 1..=plain.len() {
                let a: std::collections::BTreeSet<_> = rp[..k].iter().collect();
                let b: std::collections::BTreeSet<_> = ra[..k].iter().collect();
                // exact ties in the plain profile may be broken differently after scaling
                assert!(a == b || plain[rp[k - 1]] == plain[ra[k - 1]]);
            }
        }
    }

    #[test]
    fn attack_stays_inside_ball() {
        let m = model();
        let img = image([2, 6, 6], 4);
        let cfg = AttackConfig { eps: 1e-3, steps: 7, direction: AttackDirection::Minimize };
        let adv = adversarial_saliency(&m, &img, 0, &cfg).unwrap();
        // ‖Δ‖₂ ≥ the norm implied by filter means (Jensen), so this bounds the ball
        let implied: f64 = m
            .registry()
            .filters()
            .iter()
            .map(|f| f.alpha.len() as f64 * adv[f.id] * adv[f.id])
            .sum::<f64>()
            .sqrt();
        assert!(implied <= 1e-3 * (1.0 + 1e-12));
        assert!(adversarial_saliency(&m, &img, 0, &AttackConfig { eps: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn l1_variant_scales_plain_profile() {
        let m = model();
        let img = image([2, 6, 6], 5);
        let plain = filter_profile(&m, &img, 0).unwrap();
        assert_eq!(l1_adversarial_saliency(&m, &img, 0, 0.0).unwrap(), plain);
        let l1 = l1_adversarial_saliency(&m, &img, 0, 0.99).unwrap();
        assert!((cosine_similarity(&plain, &l1) - 1.0).abs() < 1e-12);
        assert_eq!(rank_descending(&plain), rank_descending(&l1));
        assert!(l1_adversarial_saliency(&m, &img, 0, 1.0).is_err());
    }
}
