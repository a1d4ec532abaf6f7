//! Model and optimisation settings, loaded from TOML.

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

/// How the graph branch is fed and how neighbours are selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Graph features of later layers are `[x̂_g | x]`.
    Dgm,
    /// Graph features of later layers are `x̂_g` only.
    Mdgm,
    /// Deterministic k-nearest neighbours on the current node features at
    /// every layer, without a graph loss; the graph modality is unused.
    Knn,
}

/// Graph-representation function `f_θ` of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFn {
    Identity,
    Mlp,
    EdgeConv,
}

/// Node-branch convolution `g_φ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeConv {
    EdgeConv,
    Sgcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub k: usize,
    /// Output width of `f_θ`; unused by the identity function.
    pub graph_width: usize,
    /// Output width of `g_φ`.
    pub node_width: usize,
    pub graph_fn: GraphFn,
}

/// Piecewise-constant learning rate: `levels[i]` applies from
/// `boundaries[i - 1]` (inclusive) up to `boundaries[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub levels: Vec<f64>,
    pub boundaries: Vec<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            levels: vec![0.01, 0.001, 0.0001],
            boundaries: vec![100, 200],
        }
    }
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            levels: vec![lr],
            boundaries: vec![],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let i = self.boundaries.iter().take_while(|&&b| epoch >= b).count();
        self.levels[i]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.len() != self.boundaries.len() + 1 {
            return Err(Error::Config("schedule needs one more level than boundaries".into()));
        }
        if self.levels.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.levels.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("learning rates must not increase".into()));
        }
        if self.boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("schedule boundaries must increase".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub graph_mode: GraphMode,
    pub node_conv: NodeConv,
    pub node_modality: Modality,
    pub graph_modality: Modality,
    pub layers: Vec<LayerSpec>,
    /// Hidden width of the EdgeConv edge function.
    pub edge_hidden: usize,
    /// Weight of the graph loss.
    pub lambda: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Restrict the graph-loss product to the final layer.
    pub graph_loss_last_layer_only: bool,
    /// Stop graph-loss gradients at the node-feature half of `[x̂_g | x]`.
    pub detach_node_features: bool,
    pub standardize: bool,
    pub select_features: Option<usize>,
    /// Stochastic forward passes averaged at inference.
    pub repeats: usize,
    /// Keep the parameters of the epoch with the best validation accuracy.
    pub keep_best_val: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            graph_mode: GraphMode::Dgm,
            node_conv: NodeConv::EdgeConv,
            node_modality: Modality::M1,
            graph_modality: Modality::M2,
            layers: vec![
                LayerSpec {
                    k: 5,
                    graph_width: 16,
                    node_width: 32,
                    graph_fn: GraphFn::Identity,
                },
                LayerSpec {
                    k: 5,
                    graph_width: 16,
                    node_width: 32,
                    graph_fn: GraphFn::EdgeConv,
                },
            ],
            edge_hidden: 32,
            lambda: 1.0,
            epochs: 300,
            schedule: Schedule::default(),
            seed: 0,
            graph_loss_last_layer_only: false,
            detach_node_features: false,
            standardize: true,
            select_features: None,
            repeats: 8,
            keep_best_val: false,
        }
    }
}

impl ModelConfig {
    /// Point-cloud segmentation preset: `k = 20`, coordinates feed both
    /// branches.
    pub fn pointcloud() -> Self {
        let mut c = Self {
            node_modality: Modality::M1,
            graph_modality: Modality::M1,
            standardize: false,
            ..Self::default()
        };
        c.layers.iter_mut().for_each(|l| l.k = 20);
        c
    }

    /// Zero-shot preset: `k = 3` with the SGCN node convolution.
    pub fn zero_shot() -> Self {
        let mut c = Self {
            node_conv: NodeConv::Sgcn,
            ..Self::default()
        };
        c.layers.iter_mut().for_each(|l| l.k = 3);
        c
    }

    /// Baseline variant of this configuration: kNN selection and no graph
    /// loss.
    pub fn knn_baseline(&self) -> Self {
        Self {
            graph_mode: GraphMode::Knn,
            lambda: 0.0,
            ..self.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("at least one layer is required".into()))?;
        if first.graph_fn != GraphFn::Identity {
            return Err(Error::Config("the first layer's graph function must be identity".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.k == 0 {
                return Err(Error::Config(format!("layer {i}: k must be at least 1")));
            }
            if l.node_width == 0 || (l.graph_fn != GraphFn::Identity && l.graph_width == 0) {
                return Err(Error::Config(format!("layer {i}: widths must be positive")));
            }
        }
        if self.edge_hidden == 0 {
            return Err(Error::Config("edge_hidden must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a non-negative number".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.select_features == Some(0) {
            return Err(Error::Config("select_features must be positive".into()));
        }
        self.schedule.validate()
    }
}
