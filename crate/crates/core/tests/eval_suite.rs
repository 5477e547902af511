mod common;

use common::{clustered, gaussian_rows, oracle_knn, oracle_recall, set};

use pathryoshka::dataset::synthetic_tile_dataset;
use pathryoshka::eval::*;
use pathryoshka::heads::{build_head_bank, nesting_levels, TeacherDim};
use pathryoshka::model::{build_student, BackboneConfig};
use pathryoshka::rng::stream;
use pathryoshka::teacher::{make_synthetic_teacher, Teacher, TeacherRegistry};
use pathryoshka::trainer::Precision;
use pathryoshka::Error;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn embed_dataset_shapes_duplicates_and_prefix() {
    let student = build_student::<f32>(&BackboneConfig::preset("tiny").unwrap(), 3).unwrap();
    let mut data = synthetic_tile_dataset(1, 2, 5, 240).unwrap();
    data.records[9] = data.records[0].clone();
    let e = embed_dataset(&student, &data, EmbedMode::Cls, 4, "tiny").unwrap();
    assert_eq!((e.len(), e.dim), (10, 96));
    assert_eq!(e.row(0), e.row(9));
    let p = e.prefix(48).unwrap();
    for i in 0..e.len() {
        assert_eq!(p.row(i), &e.row(i)[..48]);
    }
    assert_eq!(p.prefix_dim, Some(48));
    let again = embed_dataset(&student, &data, EmbedMode::Cls, 3, "tiny").unwrap();
    assert_eq!(again.vectors, e.vectors);

    let small = data.subset(&[0, 1]);
    let pt = embed_dataset(&student, &small, EmbedMode::Patch, 2, "tiny").unwrap();
    assert_eq!(pt.len(), 2 * 256);
    assert_eq!(pt.source_ids[255], small.records[0].source_id);
}

#[test]
fn knn_self_match_and_single_class() {
    let rows = gaussian_rows(4, 12, 8);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let train = set(&rows, &labels);
    let test = set(&rows[5..6], &labels[5..6]);
    assert_eq!(knn_classify(&train, &test, 1, 8).unwrap(), 1.0);

    let one = set(&rows, &[2; 12]);
    let queries = set(&gaussian_rows(5, 7, 8), &[0; 7]);
    assert!(knn_predict(&one, &queries, 5, 8).unwrap().iter().all(|&p| p == 2));
}

#[test]
fn knn_rejects_bad_k_and_dim() {
    let rows = gaussian_rows(6, 5, 4);
    let s = set(&rows, &[0, 1, 0, 1, 0]);
    assert!(matches!(knn_classify(&s, &s, 6, 4), Err(Error::InvalidK { k: 6, available: 5 })));
    assert!(matches!(knn_classify(&s, &s, 0, 4), Err(Error::InvalidK { .. })));
    assert!(matches!(knn_classify(&s, &s, 1, 5), Err(Error::InvalidDim { dim: 5, width: 4 })));
    let unlabeled = EmbeddingSet::new(rows.concat(), 4, None, (0..5).map(|i| i.to_string()).collect(), "x").unwrap();
    assert!(matches!(knn_classify(&unlabeled, &s, 1, 4), Err(Error::MissingLabels(_))));
}

#[test]
fn knn_thirty_point_fixture_matches_oracle() {
    let (rows, labels) = clustered(7, 30, 16, 3, 1.5);
    let (train, test) = (&rows[..20], &rows[20..]);
    let pred = knn_predict(&set(train, &labels[..20]), &set(test, &labels[20..]), 10, 16).unwrap();
    assert_eq!(pred, oracle_knn(train, &labels[..20], test, 10, 16));
}

#[test]
fn knn_vote_ties_prefer_closer_then_lower_class() {
    let train = set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1, 0]);
    let near_first = set(&[vec![1.0, 0.1]], &[1]);
    assert_eq!(knn_predict(&train, &near_first, 2, 2).unwrap(), vec![1]);
    let even = set(&[vec![1.0, 1.0]], &[0]);
    assert_eq!(knn_predict(&train, &even, 2, 2).unwrap(), vec![0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn knn_and_recall_match_oracles(seed in any::<u64>(), n in 12usize..60, q in 1usize..40, d in 1usize..12, classes in 1usize..5) {
        let train_rows = gaussian_rows(seed, n, d);
        let test_rows = gaussian_rows(seed ^ 1, q, d);
        let ytr: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
        let yte: Vec<usize> = (0..q).map(|i| i % classes).collect();
        let (tr, te) = (set(&train_rows, &ytr), set(&test_rows, &yte));
        for m in 1..=d {
            for k in [1usize, 5, 10] {
                prop_assert_eq!(knn_predict(&tr, &te, k, m).unwrap(), oracle_knn(&train_rows, &ytr, &test_rows, k, m));
                let ids = &tr.source_ids;
                let r = retrieval_recall(&tr, &tr, k, m).unwrap();
                prop_assert_eq!(r, oracle_recall(&train_rows, &ytr, ids, &train_rows, &ytr, ids, k, m));
            }
        }
    }
}

#[test]
fn recall_self_excluded_full_gallery_is_one() {
    let (rows, labels) = clustered(8, 12, 6, 3, 1.0);
    let s = set(&rows, &labels);
    assert_eq!(retrieval_recall(&s, &s, s.len() - 1, 6).unwrap(), 1.0);
    assert!(matches!(retrieval_recall(&s, &s, 13, 6), Err(Error::InvalidK { .. })));
}

#[test]
fn recall_one_class_gallery() {
    let g = set(&gaussian_rows(9, 8, 4), &[1; 8]);
    let q = EmbeddingSet::new(gaussian_rows(10, 4, 4).concat(), 4, Some(vec![1, 0, 1, 0]), (0..4).map(|i| format!("q{i}")).collect(), "q").unwrap();
    for k in [1, 3, 8] {
        let same = EmbeddingSet::new(q.vectors[..8].to_vec(), 4, Some(vec![1, 0]), q.source_ids[..2].to_vec(), "q").unwrap();
        assert_eq!(retrieval_recall(&same, &g, k, 4).unwrap(), 0.5);
        assert_eq!(retrieval_recall(&q, &g, k, 4).unwrap(), 0.5);
    }
}

#[test]
fn recall_twenty_point_fixture_matches_oracle_and_ignores_order() {
    let (rows, labels) = clustered(11, 20, 8, 4, 2.0);
    let s = set(&rows, &labels);
    let ids = s.source_ids.clone();
    let r = retrieval_recall(&s, &s, 5, 8).unwrap();
    assert_eq!(r, oracle_recall(&rows, &labels, &ids, &rows, &labels, &ids, 5, 8));

    let mut perm: Vec<usize> = (0..20).collect();
    perm.reverse();
    perm.swap(3, 11);
    let g = EmbeddingSet::new(
        perm.iter().flat_map(|&i| rows[i].clone()).collect(),
        8,
        Some(perm.iter().map(|&i| labels[i]).collect()),
        perm.iter().map(|&i| ids[i].clone()).collect(),
        "perm",
    )
    .unwrap();
    assert_eq!(retrieval_recall(&s, &g, 5, 8).unwrap(), r);
}

#[test]
fn random_subset_full_width_and_single_run() {
    let (rows, labels) = clustered(12, 40, 8, 4, 2.0);
    let (tr, te) = (set(&rows[..30], &labels[..30]), set(&rows[30..], &labels[30..]));
    let full = knn_classify(&tr, &te, 5, 8).unwrap();
    let r = random_subset_baseline(&tr, &te, 5, 8, 5, 3).unwrap();
    assert!(r.values.iter().all(|&v| v == full));
    assert_eq!((r.std, r.runs), (0.0, 5));
    assert_eq!(random_subset_baseline(&tr, &te, 5, 3, 1, 3).unwrap().std, 0.0);
    assert!(matches!(random_subset_baseline(&tr, &te, 5, 9, 1, 3), Err(Error::InvalidDim { dim: 9, width: 8 })));
}

#[test]
fn random_subset_single_informative_coordinate() {
    // Coordinate 0 carries the class sign; the rest is noise. A draw of
    // m = 1 hits it with probability 1/d.
    let d = 4;
    let n = 200;
    let mut rng = stream(13, &[]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let mut r: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        r[0] = if c == 0 { 1.0 } else { -1.0 } * rng.random_range(0.5f32..1.5);
        rows.push(r);
        labels.push(c);
    }
    let (tr, te) = (set(&rows[..150], &labels[..150]), set(&rows[150..], &labels[150..]));
    let informative = knn_classify(&tr.columns(&[0]).unwrap(), &te.columns(&[0]).unwrap(), 10, 1).unwrap();
    let chance: f64 = (1..d).map(|c| knn_classify(&tr.columns(&[c]).unwrap(), &te.columns(&[c]).unwrap(), 10, 1).unwrap()).sum::<f64>() / (d - 1) as f64;
    let expected = chance + (informative - chance) / d as f64;
    let r = random_subset_baseline(&tr, &te, 10, 1, 400, 5).unwrap();
    let se = r.std / (r.runs as f64).sqrt();
    assert!((r.mean - expected).abs() < 4.0 * se + 1e-9, "mean {} expected {expected} se {se}", r.mean);
}

#[test]
fn linear_probe_separable_shuffled_and_seeds() {
    let (rows, labels) = clustered(14, 200, 10, 2, 0.3);
    let (tr, te) = (set(&rows[..150], &labels[..150]), set(&rows[150..], &labels[150..]));
    let cfg = LinearProbeConfig {
        epochs: 30,
        ..LinearProbeConfig::default()
    };
    let r = linear_probe(&tr, &te, &cfg).unwrap();
    assert_eq!(r.metric, "balanced_accuracy");
    assert!(r.mean > 0.95, "{r:?}");

    let same = LinearProbeConfig {
        seeds: vec![9; 5],
        ..cfg.clone()
    };
    assert_eq!(linear_probe(&tr, &te, &same).unwrap().std, 0.0);

    let (rows, _) = clustered(15, 400, 10, 4, 0.3);
    let mut rng = stream(16, &[]);
    let noise: Vec<usize> = (0..400).map(|_| rng.random_range(0..4)).collect();
    let (tr, te) = (set(&rows[..300], &noise[..300]), set(&rows[300..], &noise[300..]));
    let r = linear_probe(&tr, &te, &cfg).unwrap();
    let sigma = (0.25f64 * 0.75 / 100.0).sqrt();
    assert_eq!(r.metric, "accuracy");
    assert!((r.mean - 0.25).abs() < 3.0 * sigma, "{r:?}");
}

#[test]
fn linear_probe_rejects_single_class() {
    let rows = gaussian_rows(17, 10, 3);
    let s = set(&rows, &[1; 10]);
    assert!(matches!(linear_probe(&s, &s, &LinearProbeConfig::default()), Err(Error::DegenerateLabels)));
}

#[test]
fn pca_identical_tokens_give_uniform_raster() {
    let tokens = vec![0.3f32; 16 * 5];
    let img = pca_rgb_map(&tokens, 5, 5).unwrap();
    assert_eq!(img.dimensions(), (4, 4));
    assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
}

#[test]
fn pca_two_clusters_split_first_channel() {
    let d = 6;
    let noise = gaussian_rows(18, 64, d);
    let mut tokens = Vec::new();
    for (i, r) in noise.iter().enumerate() {
        let c = if i % 8 < 4 { 5.0 } else { -5.0 };
        tokens.extend(r.iter().enumerate().map(|(j, e)| if j < 2 { c + 0.1 * e } else { 0.1 * e }));
    }
    let img = pca_rgb_map(&tokens, d, d).unwrap();
    for (i, p) in img.pixels().enumerate() {
        if i % 8 < 4 {
            assert!(p.0[0] > 200, "{i} {:?}", p.0);
        } else {
            assert!(p.0[0] < 55, "{i} {:?}", p.0);
        }
    }
}

#[test]
fn pca_is_permutation_equivariant_and_pads_low_rank() {
    let d = 8;
    let rows = gaussian_rows(19, 25, d);
    let img = pca_rgb_map(&rows.concat(), d, d).unwrap();
    let perm: Vec<usize> = (0..25).map(|i| (i * 7) % 25).collect();
    let permuted: Vec<f32> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
    let pimg = pca_rgb_map(&permuted, d, d).unwrap();
    for (pos, &src) in perm.iter().enumerate() {
        let a = pimg.get_pixel((pos % 5) as u32, (pos / 5) as u32).0;
        let b = img.get_pixel((src % 5) as u32, (src / 5) as u32).0;
        for c in 0..3 {
            assert!((a[c] as i32 - b[c] as i32).abs() <= 1);
        }
    }
    let line: Vec<f32> = (0..9).flat_map(|i| [i as f32, 2.0 * i as f32]).collect();
    let img = pca_rgb_map(&line, 2, 2).unwrap();
    assert!(img.pixels().all(|p| p.0[1] == 128 && p.0[2] == 128));
    assert_eq!(img.get_pixel(0, 0).0[0], 0);
    assert_eq!(img.get_pixel(2, 2).0[0], 255);
    assert!(pca_rgb_map(&line[..4], 2, 2).is_err());
    let wide = gaussian_rows(20, 9, 40).concat();
    assert_eq!(pca_rgb_map(&wide, 40, 40).unwrap().dimensions(), (3, 3));
    assert_eq!(upscale(&img, 4).dimensions(), (12, 12));
}

#[test]
fn runtime_profile_reports_every_dim() {
    let rows = knn_runtime_profile(300, &[32, 8], 10, 5, 1).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.repeats == 5 && r.mean_seconds > 0.0));
    assert_eq!(rows[1].dim, 8);
}

fn teachers(n: usize) -> Vec<Box<dyn Teacher>> {
    let reg = TeacherRegistry::default();
    (0..n)
        .map(|i| reg.load(&make_synthetic_teacher(40 + i as u64, 32, 14).unwrap()).unwrap())
        .collect()
}

#[test]
fn teacher_impact_single_image_and_random_heads() {
    let cfg = BackboneConfig::preset("tiny").unwrap();
    let student = build_student::<f32>(&cfg, 21).unwrap();
    let ts = teachers(1);
    let dims = vec![TeacherDim {
        name: ts[0].spec().name.clone(),
        dim: 32,
    }];
    let levels = nesting_levels(96, 3).unwrap();
    let data = synthetic_tile_dataset(2, 2, 1, 224).unwrap();
    let one = data.subset(&[0]);
    let mut summaries = Vec::new();
    for seed in 0..12 {
        let heads = build_head_bank(96, &dims, &levels, seed).unwrap();
        let r = teacher_impact(&student, &heads, &ts, &one, 4).unwrap();
        assert_eq!((r[0].summary.std, r[0].features.std), (0.0, 0.0));
        summaries.push(r[0].summary.mean);
    }
    // Random heads: cosine with a fixed target behaves like the null for
    // random directions in 32 dims (sd ≈ 1/√32).
    let (mean, _) = mean_std(&summaries);
    assert!(mean.abs() < 3.0 / (32f64 * 12.0).sqrt(), "{summaries:?}");
}

#[test]
fn throughput_orders_models_and_reports_fallback() {
    let small = build_student::<f32>(&BackboneConfig::new(1, 48, 3, 16, 0, 224), 1).unwrap();
    let large = build_student::<f32>(&BackboneConfig::new(4, 96, 3, 16, 0, 224), 1).unwrap();
    let cfg = ThroughputConfig {
        batch_size: 8,
        batches: 100,
        warmup: 10,
        ..ThroughputConfig::default()
    };
    let a = throughput_benchmark(&small, &cfg).unwrap();
    let b = throughput_benchmark(&large, &cfg).unwrap();
    assert!(a.mean > b.mean);
    assert_eq!((a.requested, a.precision), (Precision::F16, Precision::F32));
    let again = throughput_benchmark(&small, &cfg).unwrap();
    assert!((again.mean - a.mean).abs() / a.mean < 0.15, "{} vs {}", a.mean, again.mean);
}

#[test]
fn small_preset_runs_over_twice_as_fast_as_base() {
    let cfg = ThroughputConfig {
        batch_size: 1,
        batches: 3,
        warmup: 1,
        ..ThroughputConfig::default()
    };
    let rate = |p: &str| throughput_benchmark(&build_student::<f32>(&BackboneConfig::preset(p).unwrap(), 0).unwrap(), &cfg).unwrap().mean;
    let (s, b) = (rate("S"), rate("B"));
    assert!(s / b > 2.0, "S {s:.3} img/s vs B {b:.3} img/s");
}
