use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssdml::data::{load_csv, make_blobs, BlobConfig, Dataset};
use ssdml::eval::{recall_at_k_with, DEFAULT_RECALL_KS};
use ssdml::graph::{build_knn_with, neighbor_matrix, seed_affinity};
use ssdml::linalg::random_matrix;
use ssdml::mining::mine_triplets_with;
use ssdml::propagation::{propagate_direct_with, propagate_iterative_with, symmetrize, AffinityMatrix};
use ssdml::trainer::{evaluate_checkpoint_with, identity_model, train_with, Method, Model, TrainConfig};
use ssdml::{Error, Exec};

fn small_blobs(seed: u64) -> Dataset {
    make_blobs(&BlobConfig {
        n_classes: 4,
        per_class: 40,
        d_signal: 3,
        d_noise: 6,
        signal_sep: 5.0,
        noise_sigma: 2.0,
        seed,
    })
    .unwrap()
}

#[test]
fn training_beats_its_initial_model_on_blobs() {
    let ds = make_blobs(&BlobConfig::default()).unwrap();
    let cfg = TrainConfig {
        labeled_per_class: Some(10),
        max_epochs: 10,
        ..Default::default()
    };
    let model = train_with(&ds, &cfg, Exec::Sequential).unwrap();
    let initial = model.history[0].val_r1;
    let best = model.history[model.best_epoch].val_r1;
    assert!(model.best_epoch >= 1);
    assert!(best > initial, "best {best} vs initial {initial}");
}

#[test]
fn kernels_agree_across_execution_modes() {
    let ds = small_blobs(3).retain_labels_per_class(3, 1);
    let mut graphs = Vec::new();
    let mut props = Vec::new();
    let mut mined = Vec::new();
    let mut recalls = Vec::new();
    let labels: Vec<usize> = small_blobs(3).labels.iter().map(|y| y.unwrap()).collect();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let g = build_knn_with(&ds.features, 6, exec).unwrap();
        let q = neighbor_matrix(&g);
        let w0 = seed_affinity(&ds.labels);
        let direct = propagate_direct_with(&q, &w0, 0.9, exec).unwrap();
        let iter = propagate_iterative_with(&q, &w0, 0.9, 1e-12, 10_000, exec).unwrap();
        let aff = AffinityMatrix {
            w: symmetrize(&direct),
            gamma: 0.9,
        };
        let anchors: Vec<usize> = (0..ds.len()).collect();
        mined.push(mine_triplets_with(&aff, &g, &anchors, exec).unwrap());
        recalls.push(recall_at_k_with(&ds.features, &labels, &DEFAULT_RECALL_KS, exec).unwrap());
        props.push((direct, iter.w));
        graphs.push(g);
    }
    assert_eq!(graphs[0], graphs[1]);
    assert_eq!(props[0], props[1]);
    assert_eq!(mined[0], mined[1]);
    assert_eq!(recalls[0], recalls[1]);
}

#[test]
fn training_is_identical_in_both_execution_modes() {
    let ds = small_blobs(5);
    let cfg = TrainConfig {
        labeled_per_class: Some(5),
        max_epochs: 3,
        epochs_per_partition: 2,
        partition_size: 60,
        ..Default::default()
    };
    let a = train_with(&ds, &cfg, Exec::Sequential).unwrap();
    let b = train_with(&ds, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.metric, b.metric);
    assert_eq!(a.encoder, b.encoder);
}

#[test]
fn saved_models_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_blobs(9);
    for method in [Method::Ours, Method::Seraph, Method::Lrml] {
        let cfg = TrainConfig {
            method,
            max_epochs: 2,
            labeled_per_class: Some(6),
            ..Default::default()
        };
        let model = train_with(&ds, &cfg, Exec::Sequential).unwrap();
        let path = dir.path().join(format!("{method}.model"));
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.metric, model.metric);
        assert_eq!(back.encoder, model.encoder);
        assert_eq!(back.config, model.config);
        assert_eq!(back.history, model.history);
        assert_eq!(back.best_epoch, model.best_epoch);
        let ks = [1, 2];
        let r1 = evaluate_checkpoint_with(&model, &ds, &ks, 4, Exec::Sequential).unwrap();
        let r2 = evaluate_checkpoint_with(&back, &ds, &ks, 4, Exec::Sequential).unwrap();
        assert_eq!(r1, r2);
    }
}

#[test]
fn csv_round_trip_keeps_features_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = small_blobs(2);
    ds.labels[3] = None;
    let path = dir.path().join("d.csv");
    ds.write_csv(&path).unwrap();
    let back = load_csv(&path, Some("label")).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn identity_model_scores_raw_features() {
    let ds = small_blobs(1);
    let cfg = TrainConfig::default();
    let report = evaluate_checkpoint_with(&identity_model(ds.dim(), &cfg), &ds, &[1, 4], 0, Exec::Sequential).unwrap();
    let labels: Vec<usize> = ds.labels.iter().map(|y| y.unwrap()).collect();
    let raw = recall_at_k_with(&ds.features, &labels, &[1, 4], Exec::Sequential).unwrap();
    assert_eq!(report.recall_at, raw);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let ds = small_blobs(1);
    let model = identity_model(ds.dim() + 1, &TrainConfig::default());
    let err = evaluate_checkpoint_with(&model, &ds, &[1], 0, Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
}

#[test]
fn unlabeled_data_cannot_train() {
    let x: DMatrix<f64> = random_matrix(20, 3, &mut ChaCha8Rng::seed_from_u64(0));
    let ds = Dataset::new(x, vec![None; 20]).unwrap();
    assert!(matches!(
        train_with(&ds, &TrainConfig::default(), Exec::Sequential),
        Err(Error::Config(_))
    ));
}
