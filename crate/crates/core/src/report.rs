//! Machine-readable run reports. Keys are written in sorted order so equal
//! runs produce byte-identical files.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::train::{CrossValidation, History};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `transductive`, `inductive`, `crossval` or `segmentation`.
    pub protocol: String,
    pub seed: u64,
    pub config: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_accuracy: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crossval: Option<CrossValidation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline_crossval: Option<CrossValidation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_task_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_graph_loss: Option<f64>,
    /// Per-layer homophily of the last training epoch's graphs.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub homophily: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub temperature: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_secs: Option<f64>,
}

impl MetricsReport {
    pub fn new(protocol: &str, config: &ModelConfig) -> Self {
        Self {
            protocol: protocol.to_string(),
            seed: config.seed,
            config: Some(config.clone()),
            ..Self::default()
        }
    }

    /// Copies the final-epoch losses, homophily and temperatures.
    pub fn with_history(mut self, history: &History) -> Self {
        if let Some(last) = history.last() {
            self.final_task_loss = Some(last.task_loss);
            self.final_graph_loss = Some(last.graph_loss);
            self.homophily = last.homophily.clone();
            self.temperature = last.temperature.clone();
        }
        self
    }

    /// Pretty JSON with keys sorted at every level, newline-terminated.
    pub fn to_json(&self) -> Result<String> {
        // serde_json's map keeps keys ordered, so a round trip through Value sorts them
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
