//! Part segmentation of point clouds: one graph per shape, coordinates on
//! both branches.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{PointCloudSet, Shape};
use crate::error::{Error, Result};
use crate::metrics::mean_iou;
use crate::model::{Model, ModelDims, ModelInputs};
use crate::rng::DgmRng;
use crate::train::{predict_scores, train_step, Adam, Targets};

const SEGMENT_STREAM: u64 = 0x5e6f;

/// Mean statistics over the shapes visited in one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEpoch {
    pub epoch: usize,
    pub task_loss: f64,
    pub graph_loss: f64,
    pub point_accuracy: f64,
}

fn shape_inputs(shape: &Shape) -> ModelInputs {
    ModelInputs {
        node: shape.points.clone(),
        graph: shape.points.clone(),
    }
}

/// Trains one model over the shapes at `train_idx`, one optimisation step
/// per shape, visiting shapes in a fresh random order each epoch.
pub fn train_segmentation(
    config: &ModelConfig,
    set: &PointCloudSet,
    train_idx: &[usize],
) -> Result<(Model, Vec<SegmentEpoch>)> {
    if train_idx.is_empty() {
        return Err(Error::Empty("training shapes"));
    }
    let dims = ModelDims {
        node_dim: 3,
        graph_dim: 3,
        classes: set.part_count(),
    };
    let mut model = Model::new(config.clone(), dims, config.seed)?;
    let mut adam = Adam::new(&model.params);
    let rng = DgmRng::new(config.seed).split(SEGMENT_STREAM);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_idx.to_vec();
        let epoch_rng = rng.split(epoch as u64);
        epoch_rng.split(u64::MAX).shuffle(&mut order);
        let (mut task, mut graph, mut acc) = (0.0, 0.0, 0.0);
        for (step, &s) in order.iter().enumerate() {
            let shape = &set.shapes[s];
            let all = vec![true; shape.parts.len()];
            let none = vec![false; shape.parts.len()];
            let targets = Targets {
                labels: &shape.parts,
                train: &all,
                val: &none,
                classes: dims.classes,
            };
            let inputs = shape_inputs(shape);
            let record = train_step(&mut model, &mut adam, &inputs, &targets, epoch, &epoch_rng.split(step as u64))?;
            task += record.task_loss;
            graph += record.graph_loss;
            acc += record.train_accuracy;
        }
        let m = order.len() as f64;
        history.push(SegmentEpoch {
            epoch,
            task_loss: task / m,
            graph_loss: graph / m,
            point_accuracy: acc / m,
        });
    }
    Ok((model, history))
}

/// Part label per point: summed softmax over `repeats` passes, argmax
/// restricted to the shape's category part set.
pub fn predict_parts(model: &Model, set: &PointCloudSet, shape: &Shape, repeats: usize, seed: u64) -> Result<Vec<usize>> {
    let scores = predict_scores(model, &shape_inputs(shape), repeats, seed)?;
    let mut parts = set.part_set(shape).to_vec();
    parts.sort_unstable();
    if parts.is_empty() {
        return Err(Error::Data(format!("shape {} has an empty part set", shape.name)));
    }
    Ok((0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = parts[0];
            for &p in &parts[1..] {
                if row[p] > row[best] {
                    best = p;
                }
            }
            best
        })
        .collect())
}

/// Mean IoU over the shapes at `idx`.
pub fn evaluate_segmentation(model: &Model, set: &PointCloudSet, idx: &[usize], repeats: usize, seed: u64) -> Result<f64> {
    let mut pred = Vec::with_capacity(idx.len());
    let mut truth = Vec::with_capacity(idx.len());
    let mut part_sets = Vec::with_capacity(idx.len());
    for &s in idx {
        let shape = &set.shapes[s];
        pred.push(predict_parts(model, set, shape, repeats, seed)?);
        truth.push(shape.parts.clone());
        part_sets.push(set.part_set(shape).to_vec());
    }
    mean_iou(&pred, &truth, &part_sets)
}
