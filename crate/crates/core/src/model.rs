//! Stacked DGM layers with their node-branch convolutions and a linear
//! classification head.

use serde::{Deserialize, Serialize};

use crate::config::{GraphFn, GraphMode, ModelConfig, NodeConv};
use crate::data::NodeDataset;
use crate::dgm::{dgm_forward, DgmOutput, GraphFeature, Selection};
use crate::error::{Error, Result};
use crate::graph::SampledGraph;
use crate::layers::{edge_conv, glorot, sgcn_conv, EdgeConvParams, Linear, Mlp, SgcnParams, SGCN_SLOPE};
use crate::rng::DgmRng;
use crate::tensor::{Array, Tape, Tensor};

const INIT_STREAM: u64 = 0x1a17;

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Array)>,
}

impl ParamSet {
    fn push(&mut self, name: String, value: Array) -> usize {
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &Array> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn by_index(&self, i: usize) -> &Array {
        &self.entries[i].1
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Array {
        &mut self.entries[i].1
    }

    pub fn from_entries(entries: Vec<(String, Array)>) -> Self {
        Self { entries }
    }

    pub fn into_entries(self) -> Vec<(String, Array)> {
        self.entries
    }

    /// Replaces every value with the matching entry of `other`; names and
    /// shapes must agree exactly.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, value), (other_name, other_value)) in self.entries.iter_mut().zip(&other.entries) {
            if name != other_name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {other_name}")));
            }
            if value.shape() != other_value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    other_value.shape(),
                    value.shape()
                )));
            }
            *value = other_value.clone();
        }
        Ok(())
    }
}

/// Input and output sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub node_dim: usize,
    pub graph_dim: usize,
    pub classes: usize,
}

/// Feature matrices fed to the two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub node: Array,
    pub graph: Array,
}

impl ModelInputs {
    pub fn from_dataset(ds: &NodeDataset, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            node: ds.features(config.node_modality)?,
            graph: ds.features(config.graph_modality)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node.rows()
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct EdgeConvIds {
    hidden: LinearIds,
    out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
enum FeaturePlan {
    Identity,
    Mlp(EdgeConvIds),
    EdgeConv(EdgeConvIds),
}

#[derive(Clone, Copy, Debug)]
enum NodePlan {
    EdgeConv(EdgeConvIds),
    Sgcn { theta: usize },
}

#[derive(Clone, Copy, Debug)]
struct LayerPlan {
    log_t: usize,
    feature: FeaturePlan,
    node: NodePlan,
    k: usize,
}

/// A built model: configuration, sizes, parameters and the layout that maps
/// parameters onto layers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamSet,
    plan: Vec<LayerPlan>,
    head: LinearIds,
}

/// Everything produced by one stochastic forward pass.
pub struct ForwardPass {
    pub logits: Tensor,
    pub layers: Vec<DgmOutput>,
    /// Parameter leaves, in [`ParamSet`] order.
    pub params: Vec<Tensor>,
}

impl ForwardPass {
    pub fn graphs(&self) -> Vec<&SampledGraph> {
        self.layers.iter().map(|l| &l.graph).collect()
    }
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut DgmRng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let w = self.params.push(format!("{name}.weight"), glorot(fan_in, fan_out, self.rng));
        let b = self.params.push(format!("{name}.bias"), Array::zeros(vec![fan_out]));
        LinearIds { w, b }
    }

    fn two_layer(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> EdgeConvIds {
        EdgeConvIds {
            hidden: self.linear(&format!("{name}.hidden"), fan_in, hidden),
            out: self.linear(&format!("{name}.out"), hidden, fan_out),
        }
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases, `t = 1` in every layer.
    pub fn new(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.node_dim == 0 || dims.graph_dim == 0 || dims.classes == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {dims:?}")));
        }
        let mut rng = DgmRng::new(seed).split(INIT_STREAM);
        let mut b = Builder {
            params: ParamSet::default(),
            rng: &mut rng,
        };
        let mut plan = Vec::with_capacity(config.layers.len());
        let mut node_in = dims.node_dim;
        let mut hat_prev = 0;
        for (l, spec) in config.layers.iter().enumerate() {
            let graph_in = match (l, config.graph_mode) {
                (_, GraphMode::Knn) => node_in,
                (0, _) => dims.graph_dim,
                (_, GraphMode::Dgm) => hat_prev + node_in,
                (_, GraphMode::Mdgm) => hat_prev,
            };
            let graph_fn = if config.graph_mode == GraphMode::Knn {
                GraphFn::Identity
            } else {
                spec.graph_fn
            };
            let log_t = b.params.push(format!("layer{l}.log_temperature"), Array::scalar(0.0));
            let feature = match graph_fn {
                GraphFn::Identity => FeaturePlan::Identity,
                GraphFn::Mlp => FeaturePlan::Mlp(b.two_layer(
                    &format!("layer{l}.graph_mlp"),
                    graph_in,
                    config.edge_hidden,
                    spec.graph_width,
                )),
                GraphFn::EdgeConv => FeaturePlan::EdgeConv(b.two_layer(
                    &format!("layer{l}.graph_conv"),
                    2 * graph_in,
                    config.edge_hidden,
                    spec.graph_width,
                )),
            };
            hat_prev = if graph_fn == GraphFn::Identity {
                graph_in
            } else {
                spec.graph_width
            };
            let node = match config.node_conv {
                NodeConv::EdgeConv => NodePlan::EdgeConv(b.two_layer(
                    &format!("layer{l}.node_conv"),
                    2 * node_in,
                    config.edge_hidden,
                    spec.node_width,
                )),
                NodeConv::Sgcn => {
                    let theta = b
                        .params
                        .push(format!("layer{l}.sgcn.theta"), glorot(node_in, spec.node_width, b.rng));
                    NodePlan::Sgcn { theta }
                }
            };
            node_in = spec.node_width;
            plan.push(LayerPlan {
                log_t,
                feature,
                node,
                k: spec.k,
            });
        }
        let head = b.linear("head", node_in, dims.classes);
        let params = b.params;
        Ok(Self {
            config,
            dims,
            params,
            plan,
            head,
        })
    }

    /// Sizes taken from a dataset and this configuration's modalities.
    pub fn dims_for(ds: &NodeDataset, config: &ModelConfig) -> Result<ModelDims> {
        let inputs = ModelInputs::from_dataset(ds, config)?;
        Ok(ModelDims {
            node_dim: inputs.node.cols(),
            graph_dim: inputs.graph.cols(),
            classes: ds.class_count,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.plan.len()
    }

    /// Current `t` of every layer.
    pub fn temperatures(&self) -> Vec<f64> {
        self.plan
            .iter()
            .map(|p| self.params.by_index(p.log_t).data()[0].exp())
            .collect()
    }

    /// Records every parameter on `tape` and runs [`Model::forward_with`].
    pub fn forward(&self, tape: &Tape, inputs: &ModelInputs, rng: &DgmRng) -> Result<ForwardPass> {
        let params: Vec<Tensor> = self.params.values().map(|a| tape.param(a)).collect();
        self.forward_with(tape, params, inputs, rng)
    }

    /// Forward pass with caller-supplied parameter leaves. Layer `l` draws
    /// its sampling noise from `rng.split(l)`, so a pass is reproducible from
    /// `rng` alone.
    pub fn forward_with(
        &self,
        tape: &Tape,
        params: Vec<Tensor>,
        inputs: &ModelInputs,
        rng: &DgmRng,
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(Error::Structure(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if inputs.node.cols() != self.dims.node_dim || inputs.graph.cols() != self.dims.graph_dim {
            return Err(Error::shape(
                "Model::forward",
                &[inputs.node.cols(), inputs.graph.cols()],
                &[self.dims.node_dim, self.dims.graph_dim],
            ));
        }
        if inputs.node.rows() != inputs.graph.rows() {
            return Err(Error::shape("Model::forward", inputs.node.shape(), inputs.graph.shape()));
        }
        let p = |i: usize| params[i].clone();
        let linear = |ids: LinearIds| Linear {
            weight: p(ids.w),
            bias: p(ids.b),
        };
        let two_layer = |ids: EdgeConvIds| EdgeConvParams {
            hidden: linear(ids.hidden),
            out: linear(ids.out),
        };
        let selection = if self.config.graph_mode == GraphMode::Knn {
            Selection::Knn
        } else {
            Selection::Gumbel
        };

        let mut x = tape.constant(&inputs.node);
        let graph_input = tape.constant(&inputs.graph);
        let mut outputs: Vec<DgmOutput> = Vec::with_capacity(self.plan.len());
        for (l, layer) in self.plan.iter().enumerate() {
            let x_g = match (outputs.last(), self.config.graph_mode) {
                (_, GraphMode::Knn) => x.clone(),
                (None, _) => graph_input.clone(),
                (Some(prev), GraphMode::Dgm) => {
                    let node_part = if self.config.detach_node_features {
                        x.detach()
                    } else {
                        x.clone()
                    };
                    prev.x_hat.concat(&node_part)?
                }
                (Some(prev), GraphMode::Mdgm) => prev.x_hat.clone(),
            };
            let feature = match layer.feature {
                FeaturePlan::Identity => GraphFeature::Identity,
                FeaturePlan::Mlp(ids) => GraphFeature::Mlp(Mlp {
                    layers: vec![linear(ids.hidden), linear(ids.out)],
                    final_relu: false,
                }),
                FeaturePlan::EdgeConv(ids) => GraphFeature::EdgeConv(two_layer(ids)),
            };
            let temperature = p(layer.log_t).exp();
            let mut layer_rng = rng.split(l as u64);
            let out = dgm_forward(
                &x_g,
                outputs.last().map(|o| &o.graph),
                &feature,
                &temperature,
                layer.k,
                &mut layer_rng,
                selection,
            )?;
            x = match layer.node {
                NodePlan::EdgeConv(ids) => edge_conv(&x, &out.graph, &two_layer(ids))?.relu(),
                NodePlan::Sgcn { theta } => sgcn_conv(
                    &x,
                    &out.graph,
                    &SgcnParams {
                        theta: p(theta),
                        slope: SGCN_SLOPE,
                    },
                )?,
            };
            outputs.push(out);
        }
        let logits = linear(self.head).forward(&x)?;
        Ok(ForwardPass {
            logits,
            layers: outputs,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;

    fn small_config(mode: GraphMode, conv: NodeConv) -> ModelConfig {
        let mut c = ModelConfig {
            graph_mode: mode,
            node_conv: conv,
            edge_hidden: 4,
            ..ModelConfig::default()
        };
        c.layers = vec![
            LayerSpec {
                k: 2,
                graph_width: 3,
                node_width: 5,
                graph_fn: GraphFn::Identity,
            },
            LayerSpec {
                k: 2,
                graph_width: 3,
                node_width: 4,
                graph_fn: GraphFn::EdgeConv,
            },
        ];
        c
    }

    fn inputs(n: usize) -> ModelInputs {
        let node = Array::new(vec![n, 2], (0..2 * n).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let graph = Array::new(vec![n, 3], (0..3 * n).map(|v| (v as f64 * 0.61).cos()).collect()).unwrap();
        ModelInputs { node, graph }
    }

    const DIMS: ModelDims = ModelDims {
        node_dim: 2,
        graph_dim: 3,
        classes: 3,
    };

    #[test]
    fn parameter_layout_per_mode() {
        let dgm = Model::new(small_config(GraphMode::Dgm, NodeConv::EdgeConv), DIMS, 0).unwrap();
        // layer 1 graph conv sees [x̂ (3) | x (5)] twice over
        assert_eq!(dgm.params.get("layer1.graph_conv.hidden.weight").unwrap().shape(), &[16, 4]);
        let mdgm = Model::new(small_config(GraphMode::Mdgm, NodeConv::EdgeConv), DIMS, 0).unwrap();
        assert_eq!(mdgm.params.get("layer1.graph_conv.hidden.weight").unwrap().shape(), &[6, 4]);
        let knn = Model::new(small_config(GraphMode::Knn, NodeConv::Sgcn), DIMS, 0).unwrap();
        assert!(knn.params.get("layer1.graph_conv.hidden.weight").is_none());
        assert_eq!(knn.params.get("layer1.sgcn.theta").unwrap().shape(), &[5, 4]);
        assert_eq!(knn.params.get("head.weight").unwrap().shape(), &[4, 3]);
        assert_eq!(dgm.temperatures(), vec![1.0, 1.0]);
        assert!(dgm.params.get("head.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for mode in [GraphMode::Dgm, GraphMode::Mdgm, GraphMode::Knn] {
            for conv in [NodeConv::EdgeConv, NodeConv::Sgcn] {
                let model = Model::new(small_config(mode, conv), DIMS, 1).unwrap();
                let run = |seed| {
                    let tape = Tape::new();
                    let pass = model.forward(&tape, &inputs(7), &DgmRng::new(seed)).unwrap();
                    assert_eq!(pass.layers.len(), 2);
                    assert!(pass.graphs().iter().all(|g| g.uniform_degree() == Some(2)));
                    pass.logits.to_array()
                };
                let a = run(3);
                assert_eq!(a.shape(), &[7, 3]);
                assert!(a.is_finite());
                assert_eq!(a, run(3));
            }
        }
    }

    #[test]
    fn task_loss_leaves_temperature_without_gradient() {
        let model = Model::new(small_config(GraphMode::Dgm, NodeConv::EdgeConv), DIMS, 2).unwrap();
        let tape = Tape::new();
        let pass = model.forward(&tape, &inputs(6), &DgmRng::new(0)).unwrap();
        let loss = crate::losses::cross_entropy(&pass.logits, &[0, 1, 2, 0, 1, 2], &[true; 6]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for l in 0..2 {
            let g = grads.get_or_zeros(&pass.params[model.plan[l].log_t]);
            assert_eq!(g.data(), &[0.0]);
        }
        // the graph branch parameters receive nothing from the task loss either
        let idx = model.params.names().position(|n| n == "layer1.graph_conv.out.weight").unwrap();
        assert!(grads.get_or_zeros(&pass.params[idx]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let model = Model::new(small_config(GraphMode::Dgm, NodeConv::EdgeConv), DIMS, 0).unwrap();
        let mut bad = inputs(5);
        bad.node = Array::zeros(vec![5, 4]);
        assert!(model.forward(&Tape::new(), &bad, &DgmRng::new(0)).is_err());
        let mut other = model.params.clone();
        let renamed: Vec<(String, Array)> = other
            .clone()
            .into_entries()
            .into_iter()
            .map(|(n, a)| (format!("x{n}"), a))
            .collect();
        assert!(other.assign(&ParamSet::from_entries(renamed)).is_err());
    }
}
