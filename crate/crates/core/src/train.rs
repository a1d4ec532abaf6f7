//! Optimisation loop, stochastic inference and evaluation protocols for
//! node classification.

use serde::{Deserialize, Serialize};

use crate::config::{GraphMode, ModelConfig};
use crate::data::{make_splits, select_features, standardize, Masks, NodeDataset, SplitScheme};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, graph_loss, per_class_accuracy, total_loss, GraphLossInputs};
use crate::metrics::{accuracy, argmax_rows, homophily};
use crate::model::{Model, ModelInputs, ParamSet};
use crate::rng::DgmRng;
use crate::tensor::{Array, Tape};

const TRAIN_STREAM: u64 = 0x7a41;
const PREDICT_STREAM: u64 = 0x9e3d;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.values().map(|a| vec![0.0; a.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update `θ ← θ − lr · m̂ / (sqrt(v̂) + ε)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Structure(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, g) in grads.iter().enumerate() {
            let value = params.by_index_mut(i);
            if g.shape() != value.shape() {
                return Err(Error::shape("Adam::step", g.shape(), value.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (e, (w, &gi)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * gi;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[e] / c1) / ((v[e] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Statistics of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub graph_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Per layer, mean probability of the sampled edges.
    pub mean_edge_prob: Vec<f64>,
    /// Per layer, share of sampled edges between training nodes that join
    /// equal labels.
    pub homophily: Vec<Option<f64>>,
    pub temperature: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Applies standardisation and feature selection as configured, fitting
/// both on the training rows only.
pub fn prepare(ds: &NodeDataset, config: &ModelConfig) -> Result<NodeDataset> {
    let mut out = if config.standardize { standardize(ds)? } else { ds.clone() };
    if let Some(target) = config.select_features {
        out = select_features(&out, target)?;
    }
    Ok(out)
}

/// Labels and masks for one optimisation step.
pub(crate) struct Targets<'a> {
    pub labels: &'a [usize],
    pub train: &'a [bool],
    pub val: &'a [bool],
    pub classes: usize,
}

/// One full-batch step at `epoch`'s learning rate; the record describes the
/// parameters before the update.
pub(crate) fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    inputs: &ModelInputs,
    targets: &Targets<'_>,
    epoch: usize,
    rng: &DgmRng,
) -> Result<EpochRecord> {
    let config = &model.config;
    let lr = config.schedule.lr_at(epoch);
    let tape = Tape::new();
    let pass = model.forward(&tape, inputs, rng)?;
    let train = targets.train;
    let labels = targets.labels;
    let task = cross_entropy(&pass.logits, labels, train)?;
    let predictions = argmax_rows(&pass.logits.to_array());
    let class_accuracy = per_class_accuracy(&predictions, labels, train, targets.classes);
    let graph = if config.lambda > 0.0 && config.graph_mode != GraphMode::Knn {
        graph_loss(&GraphLossInputs {
            predictions: &predictions,
            labels,
            mask: train,
            layers: pass.layers.iter().map(|o| (&o.probs, &o.graph)).collect(),
            class_accuracy: &class_accuracy,
            last_layer_only: config.graph_loss_last_layer_only,
        })?
    } else {
        tape.scalar(0.0)
    };
    let loss = total_loss(&task, &graph, config.lambda)?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!(
            "loss became {} at epoch {epoch} (task {}, graph {})",
            loss.item(),
            task.item(),
            graph.item()
        )));
    }
    let grads = tape.backward(&loss)?;
    let grads: Vec<Array> = pass.params.iter().map(|p| grads.get_or_zeros(p)).collect();
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        let name = model.params.names().nth(bad).unwrap_or("?").to_string();
        return Err(Error::Numeric(format!("non-finite gradient for {name} at epoch {epoch}")));
    }
    let record = EpochRecord {
        epoch,
        lr,
        task_loss: task.item(),
        graph_loss: graph.item(),
        train_accuracy: accuracy(&predictions, labels, train)?,
        val_accuracy: accuracy(&predictions, labels, targets.val).ok(),
        mean_edge_prob: pass.layers.iter().map(|o| o.graph.mean_edge_prob()).collect(),
        homophily: pass.layers.iter().map(|o| homophily(&o.graph, labels, train)).collect(),
        temperature: model.temperatures(),
    };
    adam.step(&mut model.params, &grads, lr)?;
    Ok(record)
}

/// Trains for `config.epochs` full-batch epochs on the training mask of `ds`.
/// Sampling noise comes from a stream of `config.seed`, so runs are
/// reproducible.
pub fn train(mut model: Model, ds: &NodeDataset) -> Result<(Model, History)> {
    if Masks::count(&ds.masks.train) == 0 {
        return Err(Error::Empty("training mask"));
    }
    let inputs = ModelInputs::from_dataset(ds, &model.config)?;
    let rng = DgmRng::new(model.config.seed).split(TRAIN_STREAM);
    let mut adam = Adam::new(&model.params);
    let mut history = History::default();
    let mut best: Option<(f64, ParamSet)> = None;
    for epoch in 0..model.config.epochs {
        let targets = Targets {
            labels: &ds.labels,
            train: &ds.masks.train,
            val: &ds.masks.val,
            classes: ds.class_count,
        };
        let before = model.config.keep_best_val.then(|| model.params.clone());
        let record = train_step(&mut model, &mut adam, &inputs, &targets, epoch, &rng.split(epoch as u64))?;
        log::debug!(
            "epoch {epoch}: task {:.4} graph {:.4} train acc {:.3}",
            record.task_loss,
            record.graph_loss,
            record.train_accuracy
        );
        if let (Some(params), Some(val)) = (before, record.val_accuracy) {
            if best.as_ref().is_none_or(|(b, _)| val > *b) {
                best = Some((val, params));
            }
        }
        history.epochs.push(record);
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// Sum over `repeats` stochastic passes of the softmax output (`N × C`).
pub fn predict_scores(model: &Model, inputs: &ModelInputs, repeats: usize, seed: u64) -> Result<Array> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let rng = DgmRng::new(seed).split(PREDICT_STREAM);
    let mut total: Option<Array> = None;
    for r in 0..repeats {
        let tape = Tape::new();
        let pass = model.forward(&tape, inputs, &rng.split(r as u64))?;
        let probs = pass.logits.log_softmax()?.exp().to_array();
        total = Some(match total {
            None => probs,
            Some(mut acc) => {
                acc.data_mut().iter_mut().zip(probs.data()).for_each(|(a, p)| *a += p);
                acc
            }
        });
    }
    Ok(total.expect("at least one repeat"))
}

/// Class predictions from [`predict_scores`]; ties go to the lowest class.
pub fn predict_stochastic(model: &Model, inputs: &ModelInputs, repeats: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_scores(model, inputs, repeats, seed)?))
}

/// Scores of a trained model on one mask of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &Model, ds: &NodeDataset, mask: &[bool], repeats: usize, seed: u64) -> Result<Evaluation> {
    let inputs = ModelInputs::from_dataset(ds, &model.config)?;
    let predictions = predict_stochastic(model, &inputs, repeats, seed)?;
    Ok(Evaluation {
        accuracy: accuracy(&predictions, &ds.labels, mask)?,
        per_class_accuracy: per_class_accuracy(&predictions, &ds.labels, mask, ds.class_count),
        predictions,
    })
}

/// Evaluates frozen parameters over every node of `ds`, scoring only the
/// unseen mask. With no unseen nodes this is the test-mask evaluation.
pub fn evaluate_inductive(model: &Model, ds: &NodeDataset, repeats: usize, seed: u64) -> Result<Evaluation> {
    let m = &ds.masks;
    if (0..ds.num_nodes()).any(|i| m.unseen[i] && (m.train[i] || m.val[i])) {
        return Err(Error::Data("unseen nodes overlap the training or validation mask".into()));
    }
    if Masks::count(&m.unseen) == 0 {
        return evaluate(model, ds, &m.test, repeats, seed);
    }
    evaluate(model, ds, &m.unseen, repeats, seed)
}

/// Result of a train-then-test run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub history: History,
    pub evaluation: Evaluation,
    /// The preprocessed dataset the model was trained on (every node).
    pub dataset: NodeDataset,
}

fn fresh_model(config: &ModelConfig, ds: &NodeDataset) -> Result<Model> {
    Model::new(config.clone(), Model::dims_for(ds, config)?, config.seed)
}

/// Trains on the training mask, then scores the test mask.
pub fn run_transductive(config: &ModelConfig, ds: &NodeDataset) -> Result<RunOutcome> {
    let ds = prepare(ds, config)?;
    let (model, history) = train(fresh_model(config, &ds)?, &ds)?;
    let evaluation = evaluate(&model, &ds, &ds.masks.test, config.repeats, config.seed)?;
    Ok(RunOutcome {
        model,
        history,
        evaluation,
        dataset: ds,
    })
}

/// Trains on the graph with the unseen nodes removed, then scores the unseen
/// nodes with every node present and the parameters frozen.
pub fn run_inductive(config: &ModelConfig, ds: &NodeDataset) -> Result<RunOutcome> {
    let ds = prepare(ds, config)?;
    let seen = ds.subset(&ds.seen_indices());
    let (model, history) = train(fresh_model(config, &seen)?, &seen)?;
    let evaluation = evaluate_inductive(&model, &ds, config.repeats, config.seed)?;
    Ok(RunOutcome {
        model,
        history,
        evaluation,
        dataset: ds,
    })
}

/// Per-fold test accuracy of a k-fold run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub fold_accuracy: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl CrossValidation {
    pub fn from_folds(fold_accuracy: Vec<f64>) -> Self {
        let k = fold_accuracy.len() as f64;
        let mean = fold_accuracy.iter().sum::<f64>() / k;
        let std = if fold_accuracy.len() > 1 {
            (fold_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            fold_accuracy,
            mean,
            std,
        }
    }
}

/// Stratified k-fold evaluation of an arbitrary fit-and-predict routine.
/// `fit_predict` receives the dataset with the fold's masks and returns a
/// prediction for every node; only the fold's test nodes are scored.
pub fn cross_validate_with<F>(ds: &NodeDataset, folds: usize, seed: u64, mut fit_predict: F) -> Result<CrossValidation>
where
    F: FnMut(usize, &NodeDataset) -> Result<Vec<usize>>,
{
    let splits = make_splits(ds, SplitScheme::KFold { folds }, seed)?;
    let mut accs = Vec::with_capacity(folds);
    for (f, masks) in splits.into_iter().enumerate() {
        let fold = ds.clone().with_masks(masks)?;
        let pred = fit_predict(f, &fold)?;
        accs.push(accuracy(&pred, &fold.labels, &fold.masks.test)?);
    }
    Ok(CrossValidation::from_folds(accs))
}

/// Stratified k-fold evaluation of the configured model.
pub fn cross_validate(config: &ModelConfig, ds: &NodeDataset, folds: usize) -> Result<CrossValidation> {
    cross_validate_with(ds, folds, config.seed, |f, fold| {
        let fold = prepare(fold, config)?;
        let (model, _) = train(fresh_model(config, &fold)?, &fold)?;
        log::info!("fold {f} trained");
        let inputs = ModelInputs::from_dataset(&fold, config)?;
        predict_stochastic(&model, &inputs, config.repeats, config.seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GraphFn, LayerSpec, NodeConv, Schedule};
    use crate::data::{synth_clusters, ClusterSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            edge_hidden: 8,
            layers: vec![
                LayerSpec {
                    k: 3,
                    graph_width: 4,
                    node_width: 8,
                    graph_fn: GraphFn::Identity,
                },
                LayerSpec {
                    k: 3,
                    graph_width: 4,
                    node_width: 8,
                    graph_fn: GraphFn::EdgeConv,
                },
            ],
            epochs: 30,
            schedule: Schedule::constant(0.01),
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> NodeDataset {
        let ds = synth_clusters(&ClusterSpec::new(40, 2, 3, 2, 4.0, 0.5, 1)).unwrap();
        let masks = make_splits(&ds, SplitScheme::Transductive, 1).unwrap().remove(0);
        ds.with_masks(masks).unwrap()
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut params = ParamSet::from_entries(vec![("w".into(), Array::vector(vec![1.0, -2.0, 0.5]))]);
        let mut adam = Adam::new(&params);
        let grads = vec![Array::vector(vec![3.0, -0.01, 1e-3])];
        adam.step(&mut params, &grads, 0.01).unwrap();
        let moved: Vec<f64> = params.by_index(0).data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        for (d, s) in moved.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - 0.01 * s).abs() < 1e-6, "{d}");
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let ds = tiny_data();
        let config = ModelConfig {
            epochs: 0,
            ..tiny_config()
        };
        let model = fresh_model(&config, &ds).unwrap();
        let (trained, history) = train(model.clone(), &ds).unwrap();
        assert_eq!(trained.params, model.params);
        assert!(history.epochs.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let ds = tiny_data();
        let config = tiny_config();
        let (a, ha) = train(fresh_model(&config, &ds).unwrap(), &ds).unwrap();
        let (b, hb) = train(fresh_model(&config, &ds).unwrap(), &ds).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ha, hb);
        let first = &ha.epochs[0];
        let last = ha.last().unwrap();
        assert!(last.task_loss < first.task_loss);
        assert_eq!(last.temperature.len(), 2);
        assert!(last.mean_edge_prob.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn empty_train_mask_is_rejected() {
        let ds = tiny_data();
        let model = fresh_model(&tiny_config(), &ds).unwrap();
        let ds = ds.clone().with_masks(Masks::empty(40)).unwrap();
        assert!(train(model, &ds).is_err());
    }

    #[test]
    fn inductive_evaluation_rejects_overlap() {
        let ds = tiny_data();
        let model = fresh_model(&tiny_config(), &ds).unwrap();
        let mut masks = ds.masks.clone();
        masks.unseen[0] = true;
        masks.train[0] = true;
        let mut overlapping = ds.clone();
        overlapping.masks = masks;
        assert!(evaluate_inductive(&model, &overlapping, 2, 0).is_err());
    }

    #[test]
    fn inductive_without_unseen_nodes_scores_the_test_mask() {
        let ds = tiny_data();
        let model = fresh_model(&tiny_config(), &ds).unwrap();
        assert_eq!(Masks::count(&ds.masks.unseen), 0);
        let inductive = evaluate_inductive(&model, &ds, 3, 9).unwrap();
        let transductive = evaluate(&model, &ds, &ds.masks.test, 3, 9).unwrap();
        assert_eq!(inductive, transductive);
    }

    #[test]
    fn knn_mode_has_no_graph_loss() {
        let ds = tiny_data();
        let config = ModelConfig {
            epochs: 3,
            node_conv: NodeConv::Sgcn,
            ..tiny_config().knn_baseline()
        };
        let (_, history) = train(fresh_model(&config, &ds).unwrap(), &ds).unwrap();
        assert!(history.epochs.iter().all(|e| e.graph_loss == 0.0));
    }

    #[test]
    fn constant_predictor_matches_majority_share_per_fold() {
        let ds = synth_clusters(&ClusterSpec::new(53, 3, 2, 2, 1.0, 1.0, 4)).unwrap();
        let mut counts = [0usize; 3];
        ds.labels.iter().for_each(|&l| counts[l] += 1);
        let majority = (0..3).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let mut shares = Vec::new();
        let cv = cross_validate_with(&ds, 10, 0, |_, fold| {
            let test: Vec<usize> = (0..53).filter(|&i| fold.masks.test[i]).collect();
            let hits = test.iter().filter(|&&i| fold.labels[i] == majority).count();
            shares.push(hits as f64 / test.len() as f64);
            Ok(vec![majority; 53])
        })
        .unwrap();
        assert_eq!(cv.fold_accuracy, shares);
        assert_eq!(cv.fold_accuracy.len(), 10);
    }
}
