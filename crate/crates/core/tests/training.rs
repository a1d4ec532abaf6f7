mod common;

use common::{benchmark_config, benchmark_data};
use dgm::config::{GraphFn, GraphMode, LayerSpec, ModelConfig, Schedule};
use dgm::data::{make_splits, Masks, SplitScheme};
use dgm::losses::cross_entropy;
use dgm::model::{Model, ModelDims, ModelInputs};
use dgm::rng::DgmRng;
use dgm::tensor::{Array, Tape};
use dgm::train::{predict_stochastic, prepare, run_inductive, run_transductive, train};

fn with_split(ds: dgm::data::NodeDataset, scheme: SplitScheme, seed: u64) -> dgm::data::NodeDataset {
    let masks = make_splits(&ds, scheme, seed).unwrap().remove(0);
    ds.with_masks(masks).unwrap()
}

#[test]
fn two_node_single_layer_uses_the_forced_edges() {
    let config = ModelConfig {
        edge_hidden: 3,
        layers: vec![LayerSpec {
            k: 1,
            graph_width: 2,
            node_width: 3,
            graph_fn: GraphFn::Identity,
        }],
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        node_dim: 2,
        graph_dim: 1,
        classes: 2,
    };
    let model = Model::new(config, dims, 4).unwrap();
    let inputs = ModelInputs {
        node: Array::from_rows(&[[0.5, -1.0], [1.5, 0.25]]).unwrap(),
        graph: Array::from_rows(&[[0.0], [3.0]]).unwrap(),
    };
    let tape = Tape::new();
    let pass = model.forward(&tape, &inputs, &DgmRng::new(0)).unwrap();
    let edges: Vec<(usize, usize)> = pass.layers[0].graph.edges().map(|(i, j, _)| (i, j)).collect();
    assert_eq!(edges, vec![(0, 1), (1, 0)]);
    let loss = cross_entropy(&pass.logits, &[0, 1], &[true, true]).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for ((name, _), leaf) in model.params.iter().zip(&pass.params) {
        if name.contains("node_conv") && name.ends_with("weight") {
            assert!(grads.get_or_zeros(leaf).data().iter().any(|&g| g != 0.0), "{name}");
        }
    }
}

#[test]
fn mdgm_graphs_ignore_node_features() {
    let config = ModelConfig {
        graph_mode: GraphMode::Mdgm,
        edge_hidden: 4,
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        node_dim: 4,
        graph_dim: 2,
        classes: 3,
    };
    let model = Model::new(config, dims, 1).unwrap();
    let mut rng = DgmRng::new(8);
    let mut draw = |rows, cols| {
        let data = (0..rows * cols).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        Array::new(vec![rows, cols], data).unwrap()
    };
    let graph = draw(12, 2);
    let node = draw(12, 4);
    let moved = draw(12, 4);
    let probs = |node: Array| {
        let tape = Tape::new();
        let inputs = ModelInputs {
            node,
            graph: graph.clone(),
        };
        let pass = model.forward(&tape, &inputs, &DgmRng::new(3)).unwrap();
        pass.layers.iter().map(|l| l.probs.probs.to_array()).collect::<Vec<_>>()
    };
    assert_eq!(probs(node), probs(moved));
}

#[test]
fn knn_predictions_do_not_depend_on_repeats() {
    let mut config = benchmark_config(0).knn_baseline();
    config.epochs = 20;
    let ds = with_split(benchmark_data(0), SplitScheme::Transductive, 0);
    let out = run_transductive(&config, &ds).unwrap();
    let inputs = ModelInputs::from_dataset(&out.dataset, &config).unwrap();
    let once = predict_stochastic(&out.model, &inputs, 1, 5).unwrap();
    for repeats in [2, 7] {
        assert_eq!(predict_stochastic(&out.model, &inputs, repeats, 11).unwrap(), once);
    }
}

#[test]
fn knn_baseline_loss_decreases_within_fifty_epochs() {
    let mut config = benchmark_config(0).knn_baseline();
    config.epochs = 50;
    let ds = with_split(benchmark_data(0), SplitScheme::Transductive, 0);
    let out = run_transductive(&config, &ds).unwrap();
    let h = &out.history.epochs;
    assert!(h.iter().all(|e| e.graph_loss == 0.0));
    assert!(h[49].task_loss < h[0].task_loss, "{} -> {}", h[0].task_loss, h[49].task_loss);
}

#[test]
fn averaging_more_passes_agrees_more_often() {
    let mut config = benchmark_config(0);
    config.epochs = 60;
    let ds = with_split(benchmark_data(0), SplitScheme::Transductive, 0);
    let out = run_transductive(&config, &ds).unwrap();
    let inputs = ModelInputs::from_dataset(&out.dataset, &config).unwrap();
    let agreement = |repeats: usize| -> f64 {
        (0..20u64)
            .map(|s| {
                let a = predict_stochastic(&out.model, &inputs, repeats, 2 * s).unwrap();
                let b = predict_stochastic(&out.model, &inputs, repeats, 2 * s + 1).unwrap();
                a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
            })
            .sum::<f64>()
            / 20.0
    };
    let (one, sixteen) = (agreement(1), agreement(16));
    assert!(sixteen >= one, "agreement {one} at 1 pass, {sixteen} at 16");
}

#[test]
fn unseen_nodes_never_influence_training() {
    let mut config = benchmark_config(2);
    config.epochs = 15;
    config.standardize = true;
    let ds = with_split(benchmark_data(2), SplitScheme::Inductive, 2);
    let mut scrambled = ds.clone();
    let mut rng = DgmRng::new(99);
    for i in (0..ds.num_nodes()).filter(|&i| ds.masks.unseen[i]) {
        scrambled.labels[i] = (scrambled.labels[i] + 1) % ds.class_count;
        let d1 = scrambled.modality1.cols();
        scrambled.modality1.data_mut()[i * d1..(i + 1) * d1].iter_mut().for_each(|v| *v = 50.0 * rng.uniform());
        let m2 = scrambled.modality2.as_mut().unwrap();
        let d2 = m2.cols();
        m2.data_mut()[i * d2..(i + 1) * d2].iter_mut().for_each(|v| *v = -50.0 * rng.uniform());
    }
    let a = run_inductive(&config, &ds).unwrap();
    let b = run_inductive(&config, &scrambled).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn standardisation_only_sees_seen_training_rows() {
    let mut config = benchmark_config(1);
    config.standardize = true;
    let ds = with_split(benchmark_data(1), SplitScheme::Inductive, 1);
    let mut shifted = ds.clone();
    let d1 = shifted.modality1.cols();
    for i in (0..ds.num_nodes()).filter(|&i| !ds.masks.train[i]) {
        shifted.modality1.data_mut()[i * d1] += 1e3;
    }
    let a = prepare(&ds, &config).unwrap();
    let b = prepare(&shifted, &config).unwrap();
    let train_rows: Vec<usize> = (0..ds.num_nodes()).filter(|&i| ds.masks.train[i]).collect();
    assert_eq!(a.modality1.select_rows(&train_rows), b.modality1.select_rows(&train_rows));
}

#[test]
fn fixed_seed_gives_identical_runs() {
    let mut config = benchmark_config(3);
    config.epochs = 12;
    let ds = with_split(benchmark_data(3), SplitScheme::Transductive, 3);
    let a = run_transductive(&config, &ds).unwrap();
    let b = run_transductive(&config, &ds).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.evaluation, b.evaluation);
    assert_eq!(a.model.params, b.model.params);
    let history_bits = |h: &dgm::train::History| -> Vec<u64> {
        h.epochs.iter().flat_map(|e| [e.task_loss.to_bits(), e.graph_loss.to_bits()]).collect()
    };
    assert_eq!(history_bits(&a.history), history_bits(&b.history));
}

#[test]
fn schedule_levels_reach_the_history() {
    let mut config = benchmark_config(0);
    config.epochs = 6;
    config.schedule = Schedule {
        levels: vec![0.02, 0.005],
        boundaries: vec![4],
    };
    let ds = with_split(benchmark_data(0), SplitScheme::Transductive, 0);
    let model = Model::new(config.clone(), Model::dims_for(&ds, &config).unwrap(), 0).unwrap();
    let (_, history) = train(model, &prepare(&ds, &config).unwrap()).unwrap();
    let lrs: Vec<f64> = history.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![0.02, 0.02, 0.02, 0.02, 0.005, 0.005]);
    for e in &history.epochs {
        assert!(e.homophily.iter().flatten().all(|h| (0.0..=1.0).contains(h)));
    }
}

#[test]
fn empty_training_mask_is_an_error() {
    let ds = benchmark_data(0).with_masks(Masks::empty(common::NODES)).unwrap();
    assert!(run_transductive(&benchmark_config(0), &ds).is_err());
}
