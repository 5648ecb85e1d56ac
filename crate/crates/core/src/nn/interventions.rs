use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::{init_tensor, Model};
use crate::error::{Error, Result};

fn check_filters(model: &Model, filter_ids: &[usize]) -> Result<()> {
    let n = model.registry().filter_count();
    match filter_ids.iter().find(|&&k| k >= n) {
        Some(k) => Err(Error::invalid(format!("filter id {k} out of range (model has {n} filters)"))),
        None => Ok(()),
    }
}

/// Copy of `model` with the selected filters switched off: kernel weights, conv bias,
/// and the matching batchnorm γ and β are all set to zero, so the filter's channel
/// is exactly zero for every input.
pub fn prune_filters(model: &Model, filter_ids: &[usize]) -> Result<Model> {
    check_filters(model, filter_ids)?;
    let mut out = model.clone();
    for &k in filter_ids {
        let f = model.registry().filters()[k].clone();
        let layer = model.registry().layers()[f.layer_id].clone();
        let per = layer.weights_per_filter();
        let w = out.param_mut(layer.param);
        w.data_mut()[f.channel * per..(f.channel + 1) * per].fill(0.0);
        let c = f.companions;
        for elem in [c.conv_bias, c.bn_gamma, c.bn_beta].into_iter().flatten() {
            out.param_mut(elem.param).data_mut()[elem.index] = 0.0;
        }
    }
    Ok(out)
}

/// Copy of `model` with i.i.d. `N(0, noise_std²)` noise added to the kernel weights of
/// the selected filters.
pub fn perturb_filters(model: &Model, filter_ids: &[usize], noise_std: f64, seed: u64) -> Result<Model> {
    check_filters(model, filter_ids)?;
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be a finite non-negative number"));
    }
    let mut out = model.clone();
    if noise_std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &k in filter_ids {
        let f = &model.registry().filters()[k];
        let layer = &model.registry().layers()[f.layer_id];
        let per = layer.weights_per_filter();
        let w = out.param_mut(layer.param);
        for v in &mut w.data_mut()[f.channel * per..(f.channel + 1) * per] {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Copy of `model` with every parameter (and batchnorm buffer) of the listed stages
/// drawn afresh from the initialization distribution. Stages are processed in the
/// order given, each with its own stream derived from `seed`.
pub fn randomize_stages(model: &Model, stage_ids: &[usize], seed: u64) -> Result<Model> {
    let stages = model.stage_names().len();
    if let Some(s) = stage_ids.iter().find(|&&s| s >= stages) {
        return Err(Error::invalid(format!("stage {s} out of range (model has {stages} stages)")));
    }
    let mut out = model.clone();
    for &s in stage_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in 0..model.params().len() {
            let p = &model.params()[i];
            if p.stage == s {
                let fresh = init_tensor(p.kind, p.value.shape(), &mut rng);
                out.set_param(i, fresh);
            }
        }
    }
    Ok(out)
}
