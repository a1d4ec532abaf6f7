//! The differentiable graph module: graph-representation features, the
//! Gaussian-kernel edge probabilities `p_ij = exp(−t‖x̂_i − x̂_j‖²)`, and a
//! Gumbel-Top-k sampler that draws a fixed in-degree graph from them.
//!
//! Sampling reads detached values. Gradients reach the probabilities only
//! through the graph loss, never through the sampled indices.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::SampledGraph;
use crate::layers::{edge_conv, EdgeConvParams, Mlp};
use crate::rng::DgmRng;
use crate::tensor::Tensor;

/// Edge probabilities of one layer, kept alongside their log-domain form.
#[derive(Clone, Debug)]
pub struct EdgeProbabilityMatrix {
    /// `N × N`, entries in `[0, 1]`, unit diagonal.
    pub probs: Tensor,
    /// `−t · ‖x̂_i − x̂_j‖²`; used for sampling so distant pairs never
    /// underflow to a tie.
    pub log_probs: Tensor,
    pub temperature: Tensor,
}

impl EdgeProbabilityMatrix {
    pub fn num_nodes(&self) -> usize {
        self.probs.shape()[0]
    }
}

/// Computes `p_ij = exp(−t ‖x̂_i − x̂_j‖²)`; differentiable in `x_hat` and `t`.
pub fn edge_probabilities(x_hat: &Tensor, temperature: &Tensor) -> Result<EdgeProbabilityMatrix> {
    if temperature.numel() != 1 {
        return Err(Error::shape("edge_probabilities", &temperature.shape(), &[1]));
    }
    if temperature.item() <= 0.0 {
        return Err(Error::Domain {
            op: "edge_probabilities",
            detail: format!("temperature {} is not positive", temperature.item()),
        });
    }
    let dist = x_hat.pairwise_sq_dist()?;
    let log_probs = dist.mul(temperature)?.neg();
    let probs = log_probs.exp();
    Ok(EdgeProbabilityMatrix {
        probs,
        log_probs,
        temperature: temperature.clone(),
    })
}

/// Uniform draws `q ∈ (0, 1)`, one per (node, candidate) pair.
#[derive(Clone, Debug)]
pub struct GumbelNoise {
    n: usize,
    q: Vec<f64>,
}

impl GumbelNoise {
    pub fn draw(n: usize, rng: &mut DgmRng) -> Self {
        let q = (0..n * n).map(|_| rng.uniform_open()).collect();
        Self { n, q }
    }

    /// Every entry equal to `q`; sampling then collapses to the kNN rule.
    pub fn constant(n: usize, q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain {
                op: "GumbelNoise::constant",
                detail: format!("q = {q} is outside (0, 1)"),
            });
        }
        Ok(Self { n, q: vec![q; n * n] })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    fn perturbation(&self, i: usize, j: usize) -> f64 {
        -(-self.q[i * self.n + j].ln()).ln()
    }
}

fn effective_degree(n: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::Structure(format!("cannot sample a graph over {n} node(s)")));
    }
    if k >= n {
        log::warn!("requested in-degree {k} with only {n} nodes; clamping to {}", n - 1);
        return Ok(n - 1);
    }
    Ok(k)
}

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn select(p: &EdgeProbabilityMatrix, k: usize, noise: Option<&GumbelNoise>) -> Result<SampledGraph> {
    let n = p.num_nodes();
    let k = effective_degree(n, k)?;
    if let Some(noise) = noise {
        if noise.n != n {
            return Err(Error::shape("gumbel_top_k", &[n, n], &[noise.n, noise.n]));
        }
    }
    let probs = p.probs.to_array();
    let log_probs = p.log_probs.to_array();
    let mut rows = Vec::with_capacity(n);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        scored.clear();
        let lp = log_probs.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let s = match noise {
                Some(noise) => lp[j] + noise.perturbation(i, j),
                None => lp[j],
            };
            scored.push((s, j));
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_score_then_index);
        }
        let mut chosen: Vec<usize> = scored[..k].iter().map(|&(_, j)| j).collect();
        chosen.sort_unstable();
        let pr = probs.row(i);
        rows.push(chosen.into_iter().map(|j| (j, pr[j])).collect());
    }
    Ok(SampledGraph::from_sorted_rows(rows))
}

/// Draws `k` in-edges per node from the first `k` entries of
/// `argsort(log p_i − log(−log q))`, excluding the node itself. Ties go to the
/// lower candidate index. `k ≥ N` is clamped to `N − 1`.
pub fn gumbel_top_k(p: &EdgeProbabilityMatrix, k: usize, rng: &mut DgmRng) -> Result<SampledGraph> {
    let noise = GumbelNoise::draw(p.num_nodes(), rng);
    select(p, k, Some(&noise))
}

/// [`gumbel_top_k`] with caller-supplied noise.
pub fn gumbel_top_k_with_noise(p: &EdgeProbabilityMatrix, k: usize, noise: &GumbelNoise) -> Result<SampledGraph> {
    select(p, k, Some(noise))
}

/// Deterministic top-k by probability (equivalently by distance).
pub fn knn_baseline(p: &EdgeProbabilityMatrix, k: usize) -> Result<SampledGraph> {
    select(p, k, None)
}

/// Neighbour selection rule for a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Gumbel,
    Knn,
}

/// Graph-representation feature function `f_θ`.
#[derive(Clone, Debug)]
pub enum GraphFeature {
    Identity,
    Mlp(Mlp),
    EdgeConv(EdgeConvParams),
}

#[derive(Clone, Debug)]
pub struct DgmOutput {
    pub x_hat: Tensor,
    pub probs: EdgeProbabilityMatrix,
    pub graph: SampledGraph,
}

/// One DGM block: `x̂ = f_θ(E_in, x_g)`, then a graph sampled from
/// `P(x̂)`.
pub fn dgm_forward(
    x_g: &Tensor,
    edges_in: Option<&SampledGraph>,
    f: &GraphFeature,
    temperature: &Tensor,
    k: usize,
    rng: &mut DgmRng,
    selection: Selection,
) -> Result<DgmOutput> {
    let x_hat = match f {
        GraphFeature::Identity => x_g.clone(),
        GraphFeature::Mlp(mlp) => mlp.forward(x_g)?,
        GraphFeature::EdgeConv(params) => {
            let g = edges_in.ok_or_else(|| Error::Config("edge_conv graph features need an input graph".into()))?;
            edge_conv(x_g, g, params)?
        }
    };
    let probs = edge_probabilities(&x_hat, temperature)?;
    let graph = match selection {
        Selection::Gumbel => gumbel_top_k(&probs, k, rng)?,
        Selection::Knn => knn_baseline(&probs, k)?,
    };
    Ok(DgmOutput { x_hat, probs, graph })
}
