//! Task losses and the class-balanced graph loss that trains the edge
//! probabilities through the discrete sampler.

use crate::dgm::EdgeProbabilityMatrix;
use crate::error::{Error, Result};
use crate::graph::SampledGraph;
use crate::tensor::{Array, Tensor};

/// Bounds applied to the summed log-probability of a node's sampled edges.
pub const LOG_PRODUCT_MIN: f64 = -60.0;
pub const LOG_PRODUCT_MAX: f64 = 0.0;

/// Mean over masked rows of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<Tensor> {
    let shape = logits.shape();
    let (n, c) = match shape.as_slice() {
        [n, c] => (*n, *c),
        _ => return Err(Error::shape("cross_entropy", &shape, &[labels.len(), 0])),
    };
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape("cross_entropy", &[n, c], &[labels.len(), mask.len()]));
    }
    let mut idx = Vec::new();
    for i in (0..n).filter(|&i| mask[i]) {
        if labels[i] >= c {
            return Err(Error::Index { index: labels[i], len: c });
        }
        idx.push(i * c + labels[i]);
    }
    if idx.is_empty() {
        return Err(Error::Empty("cross_entropy mask"));
    }
    Ok(logits.log_softmax()?.gather_elements(&idx)?.mean(None)?.neg())
}

/// `acc_α = #{i ∈ mask : ỹ_i = α, y_i = α} / #{i ∈ mask : ỹ_i = α}`; classes
/// absent from the mask get 0.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], mask: &[bool], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for i in (0..truth.len()).filter(|&i| mask[i]) {
        total[truth[i]] += 1;
        if pred[i] == truth[i] {
            hit[truth[i]] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
}

/// Class-balanced reward weight: `acc − 1` for a correct prediction, `acc`
/// otherwise.
pub fn reward_weight(correct: bool, class_accuracy: f64) -> f64 {
    if correct {
        class_accuracy - 1.0
    } else {
        class_accuracy
    }
}

/// Everything the graph loss reads from one forward pass.
pub struct GraphLossInputs<'a> {
    pub predictions: &'a [usize],
    pub labels: &'a [usize],
    /// Nodes that contribute (the training nodes).
    pub mask: &'a [bool],
    /// Per-layer probabilities and the graph sampled from them.
    pub layers: Vec<(&'a EdgeProbabilityMatrix, &'a SampledGraph)>,
    /// Constant per-class accuracy; see [`per_class_accuracy`].
    pub class_accuracy: &'a [f64],
    /// Use only the final layer's edges in the product.
    pub last_layer_only: bool,
}

/// `Σ_i δ(y_i, ỹ_i) · Π_l Π_{j:(i,j)∈E_l} p_ij`, with the product taken as
/// `exp(clamp(Σ log max(p, ε), −60, 0))`. Only the probabilities carry
/// gradient.
pub fn graph_loss(inputs: &GraphLossInputs<'_>) -> Result<Tensor> {
    let layers: &[(&EdgeProbabilityMatrix, &SampledGraph)] = if inputs.last_layer_only {
        inputs.layers.last().map(std::slice::from_ref).unwrap_or(&[])
    } else {
        &inputs.layers
    };
    let Some((first, _)) = layers.first() else {
        return Err(Error::Structure("graph loss needs at least one layer of edge probabilities".into()));
    };
    let tape = first.probs.tape().clone();
    let n = inputs.labels.len();
    let nodes: Vec<usize> = (0..n).filter(|&i| inputs.mask[i]).collect();
    if nodes.is_empty() {
        return Ok(tape.scalar(0.0));
    }

    let mut log_product: Option<Tensor> = None;
    for (probs, graph) in layers {
        if graph.num_nodes() != n || probs.num_nodes() != n {
            return Err(Error::Structure(format!(
                "graph loss layer has {} nodes, labels have {n}",
                graph.num_nodes()
            )));
        }
        let mut flat = Vec::new();
        let mut owner = Vec::new();
        for (pos, &i) in nodes.iter().enumerate() {
            if graph.degree(i) == 0 {
                return Err(Error::Structure(format!("node {i} has no sampled edges")));
            }
            for &j in graph.neighbors(i) {
                flat.push(i * n + j);
                owner.push(pos);
            }
        }
        let m = flat.len();
        let per_node = probs
            .probs
            .gather_elements(&flat)?
            .log_clamped()
            .reshape(vec![m, 1])?
            .scatter_add_rows(&owner, nodes.len())?;
        log_product = Some(match log_product {
            None => per_node,
            Some(acc) => acc.add(&per_node)?,
        });
    }
    let product = log_product
        .expect("at least one layer")
        .clamp(LOG_PRODUCT_MIN, LOG_PRODUCT_MAX)
        .exp();
    let delta: Vec<f64> = nodes
        .iter()
        .map(|&i| {
            let class = inputs.labels[i];
            reward_weight(inputs.predictions[i] == class, inputs.class_accuracy[class])
        })
        .collect();
    let delta = tape.constant(&Array::new(vec![nodes.len(), 1], delta)?);
    product.mul(&delta)?.sum(None)
}

/// `task + λ · graph`.
pub fn total_loss(task: &Tensor, graph: &Tensor, lambda: f64) -> Result<Tensor> {
    task.add(&graph.scale(lambda))
}

/// `Σ_i ‖w_i − w̃_i‖²` over the supplied rows.
pub fn zero_shot_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("zero_shot_loss", &pred.shape(), &target.shape()));
    }
    let diff = pred.sub(target)?;
    diff.mul(&diff)?.sum(None)
}

/// Index of the class representation closest to `w` in Euclidean distance;
/// ties go to the lower index.
pub fn nearest_representation(w: &[f64], representations: &Array) -> usize {
    let mut best = (f64::INFINITY, 0);
    for c in 0..representations.rows() {
        let d: f64 = representations
            .row(c)
            .iter()
            .zip(w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}
