use paramsal::data::Rect;
use paramsal::experiments::{bootstrap_ci, counts_from_percent, mean, sign_test};
use paramsal::input_saliency::{
    boost_profile, gaussian_kernel3, mask_top_percent, postprocess_map, random_control_mask, spearman, MaskFill,
    PixelSaliencyMap,
};
use paramsal::nn::{Checkpoint, Model, ModelSpec, TrainingMeta};
use paramsal::profile_index::{NeighborQuery, Pool, ProfileIndex, QueryTarget, RowMeta};
use paramsal::saliency::{rank_descending, standardize, ProfileStats};
use paramsal::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    cols.prop_flat_map(move |c| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, c), rows.clone()))
}

fn saliency_map(h: usize, w: usize, values: Vec<f64>) -> PixelSaliencyMap {
    PixelSaliencyMap { height: h, width: w, values, filters: vec![0], boost: 100.0, postprocessed: false, degenerate: false }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardized_reference_profiles_are_z_scores(profiles in matrix(2..30, 1..12)) {
        let stats = ProfileStats::from_profiles(&profiles, "ref").unwrap();
        let z: Vec<Vec<f64>> = profiles.iter().map(|p| standardize(p, &stats).unwrap()).collect();
        let n = z.len() as f64;
        for i in 0..stats.len() {
            let m = z.iter().map(|r| r[i]).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9, "filter {} mean {}", i, m);
            if stats.std[i] > 1e-6 {
                let sd = (z.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((sd - 1.0).abs() < 1e-6, "filter {} std {}", i, sd);
            }
        }
    }

    #[test]
    fn spearman_is_bounded_symmetric_and_reflexive(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = spearman(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert_eq!(r, spearman(&b, &a).unwrap());
        if a.iter().any(|&v| v != a[0]) {
            prop_assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            // ranks ignore monotone transforms
            let cubed: Vec<f64> = a.iter().map(|v| v * v * v + 2.0 * v).collect();
            prop_assert!((spearman(&a, &cubed).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_descending_is_a_sorted_permutation(values in prop::collection::vec(-3i32..3, 1..50)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let order = rank_descending(&v);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            prop_assert!(v[w[0]] > v[w[1]] || (v[w[0]] == v[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn boosting_scales_only_the_chosen_filters(
        profile in prop::collection::vec(-4.0f64..4.0, 1..40),
        boost in 1.0f64..200.0,
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let mut filters: Vec<usize> = picks.iter().map(|i| i.index(profile.len())).collect();
        filters.sort_unstable();
        filters.dedup();
        let boosted = boost_profile(&profile, &filters, boost).unwrap();
        for (i, (&b, &p)) in boosted.iter().zip(&profile).enumerate() {
            let expected = if filters.contains(&i) { p * boost } else { p };
            prop_assert_eq!(b, expected);
        }
    }

    #[test]
    fn knn_is_ordered_bounded_and_pool_filtered(
        rows in matrix(2..25, 2..9),
        labels in prop::collection::vec((0usize..3, 0usize..3), 25),
        k in 1usize..30,
        pick in any::<prop::sample::Index>(),
    ) {
        let width = rows[0].len();
        let split = width / 2;
        let profiles = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (RowMeta { sample_id: 10 + i, label: labels[i].0, predicted: labels[i].1 }, r.clone()))
            .collect();
        let index = ProfileIndex::build(profiles, vec![0..split, split..width]).unwrap();
        let query_id = 10 + pick.index(rows.len());
        for pool in [Pool::All, Pool::MisclassifiedOnly, Pool::CorrectOnly] {
            let admitted = index
                .meta()
                .iter()
                .filter(|m| m.sample_id != query_id)
                .filter(|m| match pool {
                    Pool::All => true,
                    Pool::MisclassifiedOnly => m.label != m.predicted,
                    Pool::CorrectOnly => m.label == m.predicted,
                })
                .count();
            let q = NeighborQuery { target: QueryTarget::Sample(query_id), k, layer_range: None, pool };
            match index.knn(&q) {
                Ok(res) => {
                    prop_assert_eq!(res.neighbors.len(), k.min(admitted));
                    prop_assert_eq!(res.truncated, k > admitted);
                    prop_assert!(res.neighbors.iter().all(|n| n.sample_id != query_id));
                    for w in res.neighbors.windows(2) {
                        prop_assert!(w[0].similarity >= w[1].similarity);
                    }
                    prop_assert!(res.neighbors.iter().all(|n| n.similarity.abs() <= 1.0 + 1e-12));
                }
                Err(_) => prop_assert_eq!(admitted, 0),
            }
        }
    }

    #[test]
    fn top_percent_mask_takes_the_highest_pixels_outside_protection(
        values in prop::collection::vec(0.0f64..1.0, 30),
        percent in 1.0f64..99.0,
        protect_rows in 0usize..3,
        seed in any::<u64>(),
    ) {
        let (h, w) = (5, 6);
        let image = Tensor::new(vec![2, h, w], (0..60).map(|i| i as f64 + 1.0).collect()).unwrap();
        let protect = (protect_rows > 0).then_some(Rect { top: 0, left: 0, height: protect_rows, width: w });
        let map = saliency_map(h, w, values.clone());
        let out = mask_top_percent(&image, &map, percent, protect.as_ref(), MaskFill::DatasetMean).unwrap();
        let eligible = h * w - protect_rows * w;
        prop_assert_eq!(out.masked, (percent / 100.0 * eligible as f64).ceil() as usize);
        let lowest_masked = (0..h * w).filter(|&i| out.mask[i]).map(|i| values[i]).fold(f64::INFINITY, f64::min);
        for i in 0..h * w {
            if i < protect_rows * w {
                prop_assert!(!out.mask[i]);
            } else if !out.mask[i] {
                prop_assert!(values[i] <= lowest_masked);
            }
            for c in 0..2 {
                let v = out.image.data()[c * h * w + i];
                prop_assert_eq!(v, if out.mask[i] { 0.0 } else { image.data()[c * h * w + i] });
            }
        }
        let control = random_control_mask(&image, out.masked, protect.as_ref(), MaskFill::DatasetMean, seed).unwrap();
        prop_assert_eq!(control.masked, out.masked);
        prop_assert!(control.mask[..protect_rows * w].iter().all(|&m| !m));
    }

    #[test]
    fn postprocessed_maps_lie_in_the_unit_interval(values in prop::collection::vec(0.0f64..10.0, 20), blur in any::<bool>()) {
        let out = postprocess_map(&saliency_map(4, 5, values), 90.0, blur).unwrap();
        prop_assert!(out.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.degenerate || out.values.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn gaussian_stencil_is_normalized_and_symmetric(sigma in 0.1f64..5.0) {
        let k = gaussian_kernel3(sigma);
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(k[4] >= k[1] && k[1] >= k[0]);
        prop_assert_eq!(k[0], k[8]);
        prop_assert_eq!(k[1], k[7]);
    }

    #[test]
    fn bootstrap_interval_brackets_the_sample_range(values in prop::collection::vec(-3.0f64..3.0, 1..40), seed in any::<u64>()) {
        let (lo, hi) = bootstrap_ci(&values, 200, 0.95, seed).unwrap();
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(min <= lo && lo <= hi && hi <= max);
        prop_assert_eq!((lo, hi), bootstrap_ci(&values, 200, 0.95, seed).unwrap());
        prop_assert!(mean(&values).unwrap() >= min);
    }

    #[test]
    fn sign_test_is_a_symmetric_probability(diffs in prop::collection::vec(-1.0f64..1.0, 0..60)) {
        let (p, pos, neg) = sign_test(&diffs).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        let flipped: Vec<f64> = diffs.iter().map(|d| -d).collect();
        prop_assert_eq!(sign_test(&flipped).unwrap(), (p, neg, pos));
    }

    #[test]
    fn percent_counts_are_ascending_unique_and_in_range(
        total in 1usize..500,
        percents in prop::collection::vec(0.0f64..100.0, 1..8),
    ) {
        let counts = counts_from_percent(total, &percents);
        prop_assert!(!counts.is_empty());
        prop_assert!(counts.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(counts.iter().all(|&c| (1..=total).contains(&c)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_round_trip_exactly(seed in any::<u64>(), resnet in any::<bool>(), epochs in 0usize..50) {
        let spec = if resnet {
            ModelSpec::small_resnet(&[3, 5], 1, [2, 8, 8], 4)
        } else {
            ModelSpec::plain_cnn(&[3, 5], 1, [2, 8, 8], 4)
        };
        let mut model = Model::build(&spec, seed).unwrap();
        model.round_to_storage();
        let meta = TrainingMeta { seed, epochs, final_accuracy: 0.5 };
        let bytes = Checkpoint::new(model.clone(), meta.clone()).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.model == model);
        prop_assert_eq!(&back.meta, &meta);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
