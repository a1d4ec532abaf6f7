//! Self-checks: tape gradients against finite differences, and the sampler
//! against its closed-form selection probabilities.

use serde::Serialize;

use crate::config::{GraphFn, LayerSpec, ModelConfig, Schedule};
use crate::dgm::{edge_probabilities, gumbel_top_k, gumbel_top_k_with_noise, knn_baseline, GumbelNoise};
use crate::error::Result;
use crate::graph::SampledGraph;
use crate::layers::{edge_conv, sgcn_conv, EdgeConvParams, SgcnParams, SGCN_SLOPE};
use crate::losses::{cross_entropy, graph_loss, per_class_accuracy, total_loss, GraphLossInputs};
use crate::metrics::argmax_rows;
use crate::model::{Model, ModelDims, ModelInputs};
use crate::rng::DgmRng;
use crate::tensor::{check_gradient_multi, Array, GradReport, Tape, Tensor};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
/// Significance level of the sampler's goodness-of-fit test.
pub const SAMPLE_ALPHA: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub report: GradReport,
}

/// Values spread over `(lo, hi)` without landing near zero, so relu-type
/// kinks are never straddled by a finite-difference step.
fn spread(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Array {
    let mut rng = DgmRng::new(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let v = lo + (hi - lo) * rng.uniform();
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect();
    Array::new(vec![rows, cols], data).expect("shape")
}

fn ring(n: usize, k: usize) -> SampledGraph {
    let edges = (0..n).flat_map(|i| (1..=k).map(move |s| (i, (i + s) % n, 1.0))).collect();
    SampledGraph::from_edges(n, edges).expect("ring graph")
}

type OpCase = (&'static str, Vec<Array>, Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>);

fn op_cases() -> Vec<OpCase> {
    let a = || spread(3, 4, 1, -2.0, 2.0);
    let b = || spread(3, 4, 2, -2.0, 2.0);
    let pos = || spread(3, 4, 3, 0.2, 2.0);
    let w = || spread(4, 2, 4, -2.0, 2.0);
    // weighted sum so every element's gradient differs
    let wsum = |t: &Tape, x: Tensor| -> Result<Tensor> {
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let c = t.constant(&Array::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?);
        x.mul(&c)?.sum(None)
    };
    vec![
        ("matmul", vec![a(), w()], Box::new(move |t, x| wsum(t, x[0].matmul(&x[1])?))),
        ("add", vec![a(), b()], Box::new(move |t, x| wsum(t, x[0].add(&x[1])?))),
        ("sub", vec![a(), b()], Box::new(move |t, x| wsum(t, x[0].sub(&x[1])?))),
        ("mul", vec![a(), b()], Box::new(move |t, x| wsum(t, x[0].mul(&x[1])?))),
        (
            "mul_scalar",
            vec![a(), Array::scalar(0.7)],
            Box::new(move |t, x| wsum(t, x[0].mul(&x[1])?)),
        ),
        (
            "add_row",
            vec![a(), Array::vector(vec![0.1, -0.2, 0.3, 0.4])],
            Box::new(move |t, x| wsum(t, x[0].add_row(&x[1])?)),
        ),
        ("scale", vec![a()], Box::new(move |t, x| wsum(t, x[0].scale(-1.5)))),
        ("exp", vec![a()], Box::new(move |t, x| wsum(t, x[0].exp()))),
        ("log", vec![pos()], Box::new(move |t, x| wsum(t, x[0].log()?))),
        ("log_clamped", vec![pos()], Box::new(move |t, x| wsum(t, x[0].log_clamped()))),
        ("neg", vec![a()], Box::new(move |t, x| wsum(t, x[0].neg()))),
        ("relu", vec![a()], Box::new(move |t, x| wsum(t, x[0].relu()))),
        ("leaky_relu", vec![a()], Box::new(move |t, x| wsum(t, x[0].leaky_relu(SGCN_SLOPE)))),
        ("clamp", vec![a()], Box::new(move |t, x| wsum(t, x[0].clamp(-0.5, 0.5)))),
        ("sum_rows", vec![a()], Box::new(move |t, x| wsum(t, x[0].sum(Some(0))?))),
        ("mean_cols", vec![a()], Box::new(move |t, x| wsum(t, x[0].mean(Some(1))?))),
        ("max_cols", vec![a()], Box::new(move |t, x| wsum(t, x[0].max(Some(1))?))),
        ("concat", vec![a(), w().select_rows(&[0, 1, 2])], Box::new(move |t, x| wsum(t, x[0].concat(&x[1])?))),
        ("gather_rows", vec![a()], Box::new(move |t, x| wsum(t, x[0].gather_rows(&[2, 0, 2, 1])?))),
        (
            "scatter_add_rows",
            vec![a()],
            Box::new(move |t, x| wsum(t, x[0].scatter_add_rows(&[1, 1, 0], 2)?)),
        ),
        (
            "gather_elements",
            vec![a()],
            Box::new(move |t, x| wsum(t, x[0].gather_elements(&[0, 5, 5, 11])?)),
        ),
        ("reshape", vec![a()], Box::new(move |t, x| wsum(t, x[0].reshape(vec![4, 3])?))),
        ("pairwise_sq_dist", vec![a()], Box::new(move |t, x| wsum(t, x[0].pairwise_sq_dist()?))),
        ("log_softmax", vec![a()], Box::new(move |t, x| wsum(t, x[0].log_softmax()?))),
        (
            "edge_probabilities",
            vec![spread(5, 2, 6, -2.0, 2.0), Array::scalar(1.3)],
            Box::new(move |t, x| wsum(t, edge_probabilities(&x[0], &x[1])?.probs)),
        ),
        (
            "edge_conv",
            vec![
                spread(5, 2, 7, -2.0, 2.0),
                spread(4, 3, 8, -2.0, 2.0),
                Array::vector(vec![0.1, 0.2, -0.1]),
                spread(3, 2, 9, -2.0, 2.0),
                Array::vector(vec![0.05, -0.05]),
            ],
            Box::new(move |t, x| {
                let params = EdgeConvParams {
                    hidden: crate::layers::Linear {
                        weight: x[1].clone(),
                        bias: x[2].clone(),
                    },
                    out: crate::layers::Linear {
                        weight: x[3].clone(),
                        bias: x[4].clone(),
                    },
                };
                wsum(t, edge_conv(&x[0], &ring(5, 2), &params)?)
            }),
        ),
        (
            "sgcn_conv",
            vec![spread(5, 3, 10, -2.0, 2.0), spread(3, 2, 11, -2.0, 2.0)],
            Box::new(move |t, x| {
                let params = SgcnParams {
                    theta: x[1].clone(),
                    slope: SGCN_SLOPE,
                };
                wsum(t, sgcn_conv(&x[0], &ring(5, 2), &params)?)
            }),
        ),
        (
            "cross_entropy",
            vec![a()],
            Box::new(|_, x| cross_entropy(&x[0], &[1, 3, 0], &[true, false, true])),
        ),
        (
            "graph_loss",
            vec![spread(5, 2, 12, -2.0, 2.0), Array::scalar(0.8)],
            Box::new(move |_, x| {
                let p = edge_probabilities(&x[0], &x[1])?;
                let g = ring(5, 2);
                let labels = [0, 1, 0, 1, 1];
                let pred = [0, 0, 0, 1, 0];
                let mask = [true, true, true, true, false];
                let acc = per_class_accuracy(&pred, &labels, &mask, 2);
                graph_loss(&GraphLossInputs {
                    predictions: &pred,
                    labels: &labels,
                    mask: &mask,
                    layers: vec![(&p, &g)],
                    class_accuracy: &acc,
                    last_layer_only: false,
                })
            }),
        ),
    ]
}

/// The two-layer stack used by the end-to-end check.
pub fn small_stack(seed: u64) -> Result<(Model, ModelInputs, Vec<usize>)> {
    let config = ModelConfig {
        edge_hidden: 4,
        layers: vec![
            LayerSpec {
                k: 2,
                graph_width: 3,
                node_width: 4,
                graph_fn: GraphFn::Identity,
            },
            LayerSpec {
                k: 2,
                graph_width: 3,
                node_width: 4,
                graph_fn: GraphFn::EdgeConv,
            },
        ],
        schedule: Schedule::constant(0.01),
        seed,
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        node_dim: 2,
        graph_dim: 3,
        classes: 3,
    };
    let mut model = Model::new(config, dims, seed)?;
    // move t off its initial value so its gradient is exercised at a generic point
    for l in 0..model.num_layers() {
        let name = format!("layer{l}.log_temperature");
        let idx = model.params.names().position(|n| n == name).expect("temperature");
        model.params.by_index_mut(idx).data_mut()[0] = -0.3 + 0.2 * l as f64;
    }
    // a zero head bias leaves nodes with all-zero features tied across classes,
    // and a finite-difference step would then flip their predicted class
    let bias = model.params.names().position(|n| n == "head.bias").expect("head bias");
    model.params.by_index_mut(bias).data_mut().copy_from_slice(&[0.02, -0.01, 0.035]);
    let inputs = ModelInputs {
        node: spread(6, 2, seed ^ 0x11, -1.0, 1.0),
        graph: spread(6, 3, seed ^ 0x22, -1.0, 1.0),
    };
    Ok((model, inputs, vec![0, 1, 2, 0, 1, 2]))
}

/// Task plus graph loss of the small stack for fixed sampling noise.
pub fn stack_loss(model: &Model, inputs: &ModelInputs, labels: &[usize], tape: &Tape, params: &[Tensor]) -> Result<Tensor> {
    let pass = model.forward_with(tape, params.to_vec(), inputs, &DgmRng::new(model.config.seed))?;
    let mask = vec![true; labels.len()];
    let task = cross_entropy(&pass.logits, labels, &mask)?;
    let pred = argmax_rows(&pass.logits.to_array());
    let acc = per_class_accuracy(&pred, labels, &mask, model.dims.classes);
    let graph = graph_loss(&GraphLossInputs {
        predictions: &pred,
        labels,
        mask: &mask,
        layers: pass.layers.iter().map(|o| (&o.probs, &o.graph)).collect(),
        class_accuracy: &acc,
        last_layer_only: false,
    })?;
    total_loss(&task, &graph, model.config.lambda)
}

/// Finite-difference checks of every differentiable op and of the full
/// two-layer stack (6 nodes, `k = 2`).
pub fn gradient_suite() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        let report = check_gradient_multi(|t, x| f(t, x), &inputs, GRAD_STEP, GRAD_TOL)?;
        out.push(GradCheck {
            name: name.to_string(),
            report,
        });
    }
    let (model, inputs, labels) = small_stack(0)?;
    let params: Vec<Array> = model.params.values().cloned().collect();
    let report = check_gradient_multi(
        |t, x| stack_loss(&model, &inputs, &labels, t, x),
        &params,
        GRAD_STEP,
        GRAD_TOL,
    )?;
    out.push(GradCheck {
        name: "dgm_stack".into(),
        report,
    });
    Ok(out)
}

/// Goodness of fit of observed counts against expected probabilities.
#[derive(Clone, Debug, Serialize)]
pub struct SampleCheck {
    pub name: String,
    pub draws: usize,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub p_value: f64,
    pub passed: bool,
}

/// Four points where node 0's candidates 1, 2, 3 have edge probabilities
/// `probs` at `t = 1`; each candidate sits on its own axis.
pub fn star_probabilities(tape: &Tape, probs: [f64; 3]) -> Result<crate::dgm::EdgeProbabilityMatrix> {
    let mut data = vec![0.0; 12];
    for (j, p) in probs.iter().enumerate() {
        data[(j + 1) * 3 + j] = (-p.ln()).sqrt();
    }
    edge_probabilities(&tape.constant(&Array::new(vec![4, 3], data)?), &tape.scalar(1.0))
}

/// Upper tail of the χ² distribution with two degrees of freedom.
fn chi2_two_dof_tail(x: f64) -> f64 {
    (-x / 2.0).exp()
}

/// Frequency with which node 0 selects each candidate at `k = 1`.
pub fn selection_frequencies(probs: [f64; 3], draws: usize, seed: u64) -> Result<[usize; 3]> {
    let tape = Tape::new();
    let p = star_probabilities(&tape, probs)?;
    let mut rng = DgmRng::new(seed);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let g = gumbel_top_k(&p, 1, &mut rng)?;
        counts[g.neighbors(0)[0] - 1] += 1;
    }
    Ok(counts)
}

/// Share of draws in which node 0 includes candidate 1 at `k = 2`.
pub fn inclusion_rate(probs: [f64; 3], draws: usize, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let p = star_probabilities(&tape, probs)?;
    let mut rng = DgmRng::new(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        hits += usize::from(gumbel_top_k(&p, 2, &mut rng)?.neighbors(0).contains(&1));
    }
    Ok(hits as f64 / draws as f64)
}

/// Single-edge marginals against `p / Σp`, inclusion monotonicity in one
/// probability, and the constant-noise collapse onto kNN.
pub fn sampling_suite(draws: usize, seed: u64) -> Result<Vec<SampleCheck>> {
    let probs = [0.7, 0.2, 0.1];
    let counts = selection_frequencies(probs, draws, seed)?;
    let total: f64 = probs.iter().sum();
    let expected: Vec<f64> = probs.iter().map(|p| p / total).collect();
    let statistic: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&c, &e)| {
            let e = e * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = chi2_two_dof_tail(statistic);
    let mut out = vec![SampleCheck {
        name: "marginals_k1".into(),
        draws,
        observed: counts.iter().map(|&c| c as f64 / draws as f64).collect(),
        expected,
        statistic,
        p_value,
        passed: p_value >= SAMPLE_ALPHA,
    }];

    let levels = [0.1, 0.3, 0.5, 0.7, 0.9];
    let per_level = (draws / levels.len()).max(1);
    let rates = levels
        .iter()
        .enumerate()
        .map(|(i, &p01)| inclusion_rate([p01, 0.4, 0.4], per_level, seed.wrapping_add(i as u64 + 1)))
        .collect::<Result<Vec<f64>>>()?;
    let worst_drop = rates.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    out.push(SampleCheck {
        name: "inclusion_monotone_k2".into(),
        draws: per_level * levels.len(),
        observed: rates,
        expected: levels.to_vec(),
        statistic: worst_drop,
        p_value: f64::NAN,
        passed: worst_drop <= 0.01,
    });

    let tape = Tape::new();
    let x = tape.constant(&spread(8, 2, seed, -1.0, 1.0));
    let p = edge_probabilities(&x, &tape.scalar(1.0))?;
    let noise = GumbelNoise::constant(8, 0.5)?;
    let collapsed = gumbel_top_k_with_noise(&p, 3, &noise)? == knn_baseline(&p, 3)?;
    out.push(SampleCheck {
        name: "constant_noise_is_knn".into(),
        draws: 1,
        observed: vec![f64::from(u8::from(collapsed))],
        expected: vec![1.0],
        statistic: 0.0,
        p_value: f64::NAN,
        passed: collapsed,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_check_passes() {
        for check in gradient_suite().unwrap() {
            assert!(
                check.report.passed(),
                "{}: max relative error {}",
                check.name,
                check.report.max_rel_error
            );
        }
    }

    #[test]
    fn stack_instance_exercises_the_graph_loss() {
        let (model, inputs, labels) = small_stack(0).unwrap();
        let tape = Tape::new();
        let params: Vec<Tensor> = model.params.values().map(|a| tape.param(a)).collect();
        let pass = model.forward_with(&tape, params.clone(), &inputs, &DgmRng::new(0)).unwrap();
        let pred = argmax_rows(&pass.logits.to_array());
        let acc = per_class_accuracy(&pred, &labels, &[true; 6], 3);
        assert!(acc.iter().any(|&a| a > 0.0 && a < 1.0), "{acc:?}");
        let grads = tape.backward(&stack_loss(&model, &inputs, &labels, &tape, &params).unwrap()).unwrap();
        let t_grads: Vec<f64> = model
            .params
            .names()
            .zip(&params)
            .filter(|(n, _)| n.ends_with("log_temperature"))
            .map(|(_, p)| grads.get_or_zeros(p).data()[0])
            .collect();
        assert!(t_grads.iter().all(|&g| g != 0.0), "{t_grads:?}");
    }

    #[test]
    fn star_layout_reproduces_probabilities() {
        let tape = Tape::new();
        let p = star_probabilities(&tape, [0.7, 0.2, 0.1]).unwrap().probs.to_array();
        for (j, want) in [0.7, 0.2, 0.1].iter().enumerate() {
            assert!((p.get(0, j + 1) - want).abs() < 1e-12);
        }
    }
}
