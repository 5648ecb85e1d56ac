mod groups;
mod store;
mod variants;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, GradMode, Tape};
use crate::error::{Error, Result};
use crate::nn::{argmax, BnMode, FilterRegistry, Model};
use crate::tensor::Tensor;

pub use groups::{average_profiles, sorted_per_layer, write_sorted_csv, SortedEntry};
pub use store::{blob_path, load_profiles, save_profiles, ProfileRecord};
pub use variants::{adversarial_saliency, l1_adversarial_saliency, smoothgrad_param_saliency, AttackDirection, AttackConfig};

/// Guard for the per-filter standard deviation in standardization.
pub const STD_EPS: f64 = 1e-12;

/// Which label the saliency loss uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossLabel {
    /// The sample's true label.
    #[default]
    True,
    /// The model's own prediction.
    Predicted,
}

/// Signed gradient of the eval-mode cross-entropy with respect to all conv kernel
/// weights, concatenated in registry order. Also returns the predicted class.
pub fn kernel_gradient(model: &Model, image: &Tensor, label: usize) -> Result<(Vec<f64>, usize)> {
    let tape = Tape::new();
    let vars = model.bind_kernel_weights(&tape)?;
    let x = tape.constant(Tensor::stack(&[image])?)?;
    let logits = model.forward(&vars, x, BnMode::Eval)?.logits;
    let predicted = argmax(logits.value().data());
    let loss = logits.softmax_cross_entropy(&[label])?;
    let kernels = model.kernel_weight_vars(&vars);
    let grads = backward(loss, &kernels, GradMode::First)?;
    let mut out = Vec::with_capacity(model.registry().kernel_weight_count());
    for g in &grads.grads {
        out.extend_from_slice(g.value().data());
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "param_saliency" });
    }
    Ok((out, predicted))
}

/// `s_i = |∂ CE(model(x), y) / ∂ θ_i|` over every conv kernel weight.
pub fn param_saliency(model: &Model, image: &Tensor, label: usize) -> Result<Vec<f64>> {
    Ok(kernel_gradient(model, image, label)?.0.into_iter().map(f64::abs).collect())
}

/// Mean of the parameter saliency over each filter's kernel weights.
pub fn filter_aggregate(values: &[f64], registry: &FilterRegistry) -> Result<Vec<f64>> {
    if values.len() != registry.kernel_weight_count() {
        return Err(Error::shape(
            "filter_aggregate",
            format!("{} values for {} kernel weights", values.len(), registry.kernel_weight_count()),
        ));
    }
    Ok(registry.filters().iter().map(|f| values[f.alpha.clone()].iter().sum::<f64>() / f.alpha.len() as f64).collect())
}

/// Raw filter-wise profile of one sample plus the model's prediction for it.
pub fn filter_profile_with_prediction(
    model: &Model,
    image: &Tensor,
    label: usize,
    which: LossLabel,
) -> Result<(Vec<f64>, usize)> {
    let (grad, predicted) = kernel_gradient(model, image, label)?;
    let (grad, predicted) = match which {
        LossLabel::True => (grad, predicted),
        LossLabel::Predicted if predicted == label => (grad, predicted),
        LossLabel::Predicted => (kernel_gradient(model, image, predicted)?.0, predicted),
    };
    let abs: Vec<f64> = grad.into_iter().map(f64::abs).collect();
    Ok((filter_aggregate(&abs, model.registry())?, predicted))
}

/// Raw filter-wise profile `s̄(x, y)` using the true label.
pub fn filter_profile(model: &Model, image: &Tensor, label: usize) -> Result<Vec<f64>> {
    Ok(filter_profile_with_prediction(model, image, label, LossLabel::True)?.0)
}

/// Raw profiles of many samples, computed in parallel and returned in input order.
pub fn filter_profiles(model: &Model, samples: &[(&Tensor, usize)]) -> Result<Vec<(Vec<f64>, usize)>> {
    samples
        .par_iter()
        .map(|(img, y)| filter_profile_with_prediction(model, img, *y, LossLabel::True))
        .collect()
}

/// Per-filter mean and population standard deviation of raw profiles over a reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Identifies the reference set, e.g. `"val"`.
    pub reference: String,
    pub count: usize,
    pub eps: f64,
}

impl ProfileStats {
    /// Welford accumulation in the given order.
    pub fn from_profiles(profiles: &[Vec<f64>], reference: impl Into<String>) -> Result<Self> {
        let first = profiles.first().ok_or_else(|| Error::Empty("saliency reference set".into()))?;
        let f = first.len();
        let mut mean = vec![0.0; f];
        let mut m2 = vec![0.0; f];
        for (n, p) in profiles.iter().enumerate() {
            if p.len() != f {
                return Err(Error::shape("compute_stats", format!("profile {n} has length {}", p.len())));
            }
            let n1 = (n + 1) as f64;
            for i in 0..f {
                let d = p[i] - mean[i];
                mean[i] += d / n1;
                m2[i] += d * (p[i] - mean[i]);
            }
        }
        let count = profiles.len();
        let std = m2.into_iter().map(|v| (v / count as f64).max(0.0).sqrt()).collect();
        Ok(ProfileStats { mean, std, reference: reference.into(), count, eps: STD_EPS })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// `1 / max(σ, ε)` per filter.
    pub fn inv_std(&self) -> Vec<f64> {
        self.std.iter().map(|s| 1.0 / s.max(self.eps)).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let stats: ProfileStats = serde_json::from_slice(&crate::error::read_artifact(path)?)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if stats.std.len() != stats.mean.len() {
            return Err(Error::format("stats mean/std length mismatch"));
        }
        Ok(stats)
    }
}

/// Profile statistics over `reference`, with profiles computed in parallel and reduced in order.
pub fn compute_stats(model: &Model, reference: &[(&Tensor, usize)], name: &str) -> Result<ProfileStats> {
    if reference.is_empty() {
        return Err(Error::Empty("saliency reference set".into()));
    }
    let profiles: Vec<Vec<f64>> = filter_profiles(model, reference)?.into_iter().map(|(p, _)| p).collect();
    ProfileStats::from_profiles(&profiles, name)
}

/// `ŝ = (s̄ − μ) / max(σ, ε)`.
pub fn standardize(raw: &[f64], stats: &ProfileStats) -> Result<Vec<f64>> {
    if raw.len() != stats.len() {
        return Err(Error::shape("standardize", format!("profile {} vs stats {}", raw.len(), stats.len())));
    }
    Ok(raw.iter().zip(&stats.mean).zip(&stats.std).map(|((s, m), sd)| (s - m) / sd.max(stats.eps)).collect())
}

/// Filter ids ordered by descending value; ties by ascending id.
pub fn rank_descending(profile: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..profile.len()).collect();
    ids.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_gradient;
    use crate::nn::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn image(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_model() -> Model {
        Model::build(&ModelSpec::small_resnet(&[3, 4], 1, [2, 6, 6], 3), 2).unwrap()
    }

    fn loss_at(model: &Model, kernels: &Tensor, img: &Tensor, y: usize) -> Result<f64> {
        let mut m = model.clone();
        let mut off = 0;
        for l in model.registry().layers().to_vec() {
            let n = m.params()[l.param].value.numel();
            m.param_mut(l.param).data_mut().copy_from_slice(&kernels.data()[off..off + n]);
            off += n;
        }
        let tape = Tape::new();
        let vars = m.bind_constants(&tape)?;
        let x = tape.constant(Tensor::stack(&[img])?)?;
        m.forward(&vars, x, BnMode::Eval)?.logits.softmax_cross_entropy(&[y])?.item()
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let m = small_model();
        let img = image([2, 6, 6], 1);
        let s = param_saliency(&m, &img, 1).unwrap();
        assert!(s.iter().all(|&v| v >= 0.0));
        let theta = Tensor::from_vec(m.kernel_weights());
        let fd = finite_diff_gradient(|t| loss_at(&m, t, &img, 1), &theta, 1e-5).unwrap();
        for (a, b) in s.iter().zip(fd.data()) {
            let rel = (a - b.abs()).abs() / b.abs().max(1e-6);
            assert!(rel < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn dead_filter_starves_upstream_weights() {
        // plain net: conv0 (3 filters) → conv1 (2 filters). Prune conv1 filter 0 and cut
        // conv1 filter 1 off from conv0 channel 2, so channel 2 feeds only the dead filter.
        let spec = ModelSpec::plain_cnn(&[3, 2], 1, [1, 4, 4], 2);
        let mut m = Model::build(&spec, 0).unwrap();
        let w1 = m.registry().layers()[1].param;
        for k in 0..9 {
            m.param_mut(w1).data_mut()[(3 + 2) * 9 + k] = 0.0;
        }
        let m = crate::nn::prune_filters(&m, &[3]).unwrap();
        let s = param_saliency(&m, &image([1, 4, 4], 3), 0).unwrap();
        let f2 = &m.registry().filters()[2];
        assert!(s[f2.alpha.clone()].iter().all(|&v| v == 0.0));
        let live = &m.registry().filters()[4];
        assert!(s[live.alpha.clone()].iter().any(|&v| v > 0.0));
    }

    #[test]
    fn aggregation_is_a_mean_per_filter() {
        let m = small_model();
        let reg = m.registry();
        let c = vec![2.5; reg.kernel_weight_count()];
        assert!(filter_aggregate(&c, reg).unwrap().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let ramp: Vec<f64> = (0..reg.kernel_weight_count()).map(|i| i as f64).collect();
        let agg = filter_aggregate(&ramp, reg).unwrap();
        for f in reg.filters() {
            let mut sum = 0.0;
            for i in f.alpha.clone() {
                sum += i as f64;
            }
            assert_eq!(agg[f.id], sum / f.alpha.len() as f64);
        }
        let zeros = filter_aggregate(&vec![0.0; reg.kernel_weight_count()], reg).unwrap();
        assert!(zeros.iter().all(|&v| v == 0.0));
        assert!(filter_aggregate(&[1.0], reg).is_err());
    }

    #[test]
    fn partition_accounting() {
        let m = small_model();
        let s = param_saliency(&m, &image([2, 6, 6], 5), 2).unwrap();
        let agg = filter_aggregate(&s, m.registry()).unwrap();
        let weighted: f64 = m.registry().filters().iter().map(|f| f.alpha.len() as f64 * agg[f.id]).sum();
        let total: f64 = s.iter().sum();
        assert!((weighted - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn stats_single_and_two_point() {
        let p = vec![1.0, 2.0, 3.0];
        let s = ProfileStats::from_profiles(&[p.clone()], "r").unwrap();
        assert_eq!(s.mean, p);
        assert!(s.std.iter().all(|&v| v == 0.0));
        let q = vec![3.0, 2.0, 0.0];
        let s = ProfileStats::from_profiles(&[p.clone(), q.clone()], "r").unwrap();
        for i in 0..3 {
            assert!((s.mean[i] - (p[i] + q[i]) / 2.0).abs() < 1e-15);
            assert!((s.std[i] - (p[i] - q[i]).abs() / 2.0).abs() < 1e-15);
        }
        assert!(matches!(ProfileStats::from_profiles(&[], "r"), Err(Error::Empty(_))));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let profiles: Vec<Vec<f64>> =
            (0..200).map(|_| (0..17).map(|_| rng.random_range(0.0..1.0) * 1e-3 + 0.5).collect()).collect();
        let s = ProfileStats::from_profiles(&profiles, "r").unwrap();
        for i in 0..17 {
            let mean = profiles.iter().map(|p| p[i]).sum::<f64>() / 200.0;
            let var = profiles.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / 200.0;
            assert!((s.mean[i] - mean).abs() < 1e-12);
            assert!((s.std[i] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_guards_and_centers() {
        let s = ProfileStats::from_profiles(&[vec![1.0, 5.0], vec![3.0, 5.0]], "r").unwrap();
        assert_eq!(standardize(&s.mean.clone(), &s).unwrap(), vec![0.0, 0.0]);
        let z = standardize(&[3.0, 6.0], &s).unwrap();
        assert_eq!(z[0], 1.0);
        assert!(z[1].is_finite() && (z[1] - 1e12).abs() < 1.0);
        assert!(standardize(&[1.0], &s).is_err());
    }

    #[test]
    fn model_stats_from_parallel_profiles_are_ordered() {
        let m = small_model();
        let imgs: Vec<Tensor> = (0..6).map(|i| image([2, 6, 6], 100 + i)).collect();
        let refs: Vec<(&Tensor, usize)> = imgs.iter().enumerate().map(|(i, t)| (t, i % 3)).collect();
        let a = compute_stats(&m, &refs, "val").unwrap();
        let serial: Vec<Vec<f64>> = refs.iter().map(|(t, y)| filter_profile(&m, t, *y).unwrap()).collect();
        assert_eq!(a, ProfileStats::from_profiles(&serial, "val").unwrap());
        let z: Vec<Vec<f64>> = serial.iter().map(|p| standardize(p, &a).unwrap()).collect();
        let again = ProfileStats::from_profiles(&z, "z").unwrap();
        for i in 0..a.len() {
            if a.std[i] > a.eps {
                assert!(again.mean[i].abs() < 1e-9);
                assert!((again.std[i] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn predicted_label_option() {
        let m = small_model();
        let img = image([2, 6, 6], 4);
        let (p_true, pred) = filter_profile_with_prediction(&m, &img, 0, LossLabel::True).unwrap();
        let (p_pred, _) = filter_profile_with_prediction(&m, &img, 0, LossLabel::Predicted).unwrap();
        assert_eq!(p_pred, filter_profile(&m, &img, pred).unwrap());
        if pred == 0 {
            assert_eq!(p_true, p_pred);
        }
    }

    #[test]
    fn ranking_ties_by_id() {
        assert_eq!(rank_descending(&[1.0, 3.0, 3.0, 0.5]), vec![1, 2, 0, 3]);
    }
}
