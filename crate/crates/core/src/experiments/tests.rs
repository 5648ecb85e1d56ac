use super::*;
use crate::data::{synth_blobs, SynthConfig};
use crate::nn::ModelSpec;
use crate::profile_index::{ProfileIndex, RowMeta};
use crate::saliency::compute_stats;

struct Fixture {
    model: Model,
    data: Dataset,
    stats: ProfileStats,
}

fn fixture() -> Fixture {
    let cfg = SynthConfig { num_classes: 4, per_class: 6, image_shape: [3, 8, 8], seed: 2, ..Default::default() };
    let data = synth_blobs(&cfg).unwrap();
    let model = Model::build(&ModelSpec::small_resnet(&[4, 6], 1, [3, 8, 8], 4), 1).unwrap();
    let refs: Vec<(&Tensor, usize)> = data.samples.iter().map(|s| (&s.image, s.label)).collect();
    let stats = compute_stats(&model, &refs, "all").unwrap();
    Fixture { model, data, stats }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap()
}

fn config(counts: Vec<usize>) -> SweepConfig {
    SweepConfig { counts, bootstrap_resamples: 200, ..Default::default() }
}

#[test]
fn selection_modes() {
    let p = vec![0.3, -1.0, 2.0, 0.3, 5.0];
    assert_eq!(select_filters(&p, SelectionMode::MostSalient, 3, 0).unwrap(), vec![4, 2, 0]);
    assert_eq!(select_filters(&p, SelectionMode::LeastSalient, 3, 0).unwrap(), vec![1, 0, 3]);
    let r = select_filters(&p, SelectionMode::Random, 4, 9).unwrap();
    let mut sorted = r.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 4);
    assert_eq!(r, select_filters(&p, SelectionMode::Random, 4, 9).unwrap());
    assert!(select_filters(&p, SelectionMode::Random, 6, 9).is_err());
    assert_eq!(counts_from_percent(168, &[2.0, 5.0, 10.0, 20.0, 0.1]), vec![1, 3, 8, 17, 34]);
}

#[test]
fn zero_count_gives_zero_deltas() {
    let f = fixture();
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(6)).unwrap();
    assert!(!pool.is_empty());
    let report = pruning_sweep(&f.model, &pool, &config(vec![0, 3])).unwrap();
    for mode in SelectionMode::ALL {
        let row = report.row(mode, 0).unwrap();
        assert_eq!(row.delta_predicted.mean, 0.0);
        assert_eq!(row.delta_true.mean, 0.0);
        assert_eq!(row.correct_after.mean, 0.0);
    }
    for row in &report.rows {
        for e in [row.delta_predicted, row.delta_true, row.correct_after] {
            assert!(e.low <= e.mean && e.mean <= e.high);
        }
        assert!((0.0..=1.0).contains(&row.correct_after.mean));
        assert_eq!(row.samples, pool.len());
    }
}

#[test]
fn sweeps_are_reproducible_and_leave_model_untouched() {
    let f = fixture();
    let before = f.model.clone();
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(5)).unwrap();
    let a = perturbation_sweep(&f.model, &pool, &config(vec![2, 5]), 1e-3).unwrap();
    let b = perturbation_sweep(&f.model, &pool, &config(vec![2, 5]), 1e-3).unwrap();
    assert_eq!(json(&a), json(&b));
    assert_eq!(f.model, before);
    let zero = perturbation_sweep(&f.model, &pool, &config(vec![2, 5]), 0.0).unwrap();
    assert!(zero.records.iter().all(|r| r.delta_predicted == 0.0 && r.delta_true == 0.0));
}

#[test]
fn correct_pool_tracks_predicted_class() {
    let f = fixture();
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Correct, None).unwrap();
    assert!(!pool.is_empty());
    let r = correct_pool_pruning(&f.model, &pool, &config(vec![1, 4])).unwrap();
    assert_eq!(r.pool, PoolKind::Correct);
    for rec in &r.records {
        assert_eq!(rec.delta_predicted, rec.delta_true);
    }
    let wrong = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(2)).unwrap();
    assert!(correct_pool_pruning(&f.model, &wrong, &config(vec![1])).is_err());
    assert!(pruning_sweep(&f.model, &[], &config(vec![1])).is_err());
}

#[test]
fn report_exports() {
    let f = fixture();
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(3)).unwrap();
    let r = pruning_sweep(&f.model, &pool, &config(vec![1, 2])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_csv(&dir.path().join("r.csv")).unwrap();
    r.write_json(&dir.path().join("r.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let back: ExperimentReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back.rows, r.rows);
    assert!(config(vec![2, 1]).validate(10).is_err());
}

fn neighbor_index(f: &Fixture) -> ProfileIndex {
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, None).unwrap();
    let rows = pool
        .iter()
        .map(|e| (RowMeta { sample_id: e.sample_id, label: e.label, predicted: e.predicted }, e.profile.clone()))
        .collect();
    ProfileIndex::build(rows, f.model.registry().layer_boundaries()).unwrap()
}

#[test]
fn finetune_with_zero_step_changes_nothing() {
    let f = fixture();
    let index = neighbor_index(&f);
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(4)).unwrap();
    let cfg = FinetuneSweepConfig {
        counts: vec![1, 3],
        step_size: 0.0,
        neighbors: 3,
        allow_over_cap: true,
        bootstrap_resamples: 100,
        ..Default::default()
    };
    let r = finetune_sweep(&f.model, &pool, &index, &f.data, &cfg).unwrap();
    assert_eq!(r.rows.len(), 3 * 2 + 1);
    for row in &r.rows {
        assert_eq!(row.self_corrected.mean, 0.0);
        assert_eq!(row.neighbor_corrected.mean, 0.0);
        assert_eq!(row.neighbor_delta_true.mean, 0.0);
    }
    assert!(r.baseline().is_some());
    let capped = FinetuneSweepConfig { allow_over_cap: false, ..cfg };
    assert!(finetune_sweep(&f.model, &pool, &index, &f.data, &capped).is_err());
}

#[test]
fn finetune_step_moves_towards_the_label() {
    let f = fixture();
    let index = neighbor_index(&f);
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(4)).unwrap();
    let cfg = FinetuneSweepConfig {
        modes: vec![SelectionMode::MostSalient],
        counts: vec![2],
        step_size: 5.0,
        neighbors: 3,
        allow_over_cap: true,
        bootstrap_resamples: 100,
        ..Default::default()
    };
    let a = finetune_sweep(&f.model, &pool, &index, &f.data, &cfg).unwrap();
    assert_eq!(json(&a), json(&finetune_sweep(&f.model, &pool, &index, &f.data, &cfg).unwrap()));
    // a large full-network step corrects at least one sample of the pool
    assert!(a.baseline().unwrap().self_corrected.mean > 0.0);
}

#[test]
fn mask_experiment_with_zero_percent_is_neutral() {
    let f = fixture();
    let pool = build_pool(&f.model, &f.data, &f.stats, PoolKind::Misclassified, Some(3)).unwrap();
    let zero = MaskExperimentConfig { percent: 0.0, ..Default::default() };
    let r = mask_dataset_experiment(&f.model, &pool, &f.stats, &zero).unwrap();
    for rec in &r.records {
        assert_eq!(rec.delta_incorrect_salient, 0.0);
        assert_eq!(rec.delta_true_random, 0.0);
        assert_eq!(rec.filter_saliency_salient, rec.filter_saliency_original);
    }
    assert_eq!(r.incorrect_salient.p_value, 1.0);
    let five = mask_dataset_experiment(&f.model, &pool, &f.stats, &MaskExperimentConfig::default()).unwrap();
    // 5% of 64 pixels outside the protected object, rounded up
    for (rec, e) in five.records.iter().zip(&pool) {
        let eligible = 64 - e.object.map_or(0, |o| o.area());
        assert_eq!(rec.masked_pixels, (0.05 * eligible as f64).ceil() as usize);
    }
    let again = mask_dataset_experiment(&f.model, &pool, &f.stats, &MaskExperimentConfig::default()).unwrap();
    assert_eq!(json(&five), json(&again));
}
