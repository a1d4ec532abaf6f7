//! Graph convolutions used on both branches: EdgeConv with sum aggregation,
//! the degree-normalised SGCN convolution, and a plain perceptron block.

use crate::error::{Error, Result};
use crate::graph::SampledGraph;
use crate::tensor::{Array, Tape, Tensor};

/// Leaky-relu slope of the SGCN convolution.
pub const SGCN_SLOPE: f64 = 0.2;

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Affine layers with relu between them; `final_relu` also rectifies the
/// output of the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() || self.final_relu {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Edge function `h(x_i, x_j) = W2 relu(W1 [x_i | x_j − x_i] + b1) + b2`.
#[derive(Clone, Debug)]
pub struct EdgeConvParams {
    pub hidden: Linear,
    pub out: Linear,
}

fn edge_endpoints(g: &SampledGraph, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if g.num_nodes() != n {
        return Err(Error::Structure(format!(
            "graph has {} nodes but features have {n} rows",
            g.num_nodes()
        )));
    }
    if let Some(i) = (0..n).find(|&i| g.degree(i) == 0) {
        return Err(Error::Structure(format!("node {i} has no in-edges")));
    }
    let mut sources = Vec::with_capacity(g.num_edges());
    let mut targets = Vec::with_capacity(g.num_edges());
    for (i, j, _) in g.edges() {
        sources.push(i);
        targets.push(j);
    }
    Ok((sources, targets))
}

/// `out_i = Σ_{j:(i,j)∈E} h(x_i, x_j)`. Edges are visited in sorted `(i, j)`
/// order, so the result does not depend on how the edge list was supplied.
pub fn edge_conv(x: &Tensor, g: &SampledGraph, params: &EdgeConvParams) -> Result<Tensor> {
    let n = x.shape()[0];
    let (sources, targets) = edge_endpoints(g, n)?;
    let xi = x.gather_rows(&sources)?;
    let xj = x.gather_rows(&targets)?;
    let input = xi.concat(&xj.sub(&xi)?)?;
    let h = params.hidden.forward(&input)?.relu();
    let h = params.out.forward(&h)?;
    h.scatter_add_rows(&sources, n)
}

#[derive(Clone, Debug)]
pub struct SgcnParams {
    pub theta: Tensor,
    pub slope: f64,
}

/// `σ(D⁻¹ A X Θ)`: mean of in-neighbour features, mapped by `Θ`, then
/// leaky-relu.
pub fn sgcn_conv(x: &Tensor, g: &SampledGraph, params: &SgcnParams) -> Result<Tensor> {
    let n = x.shape()[0];
    let (sources, targets) = edge_endpoints(g, n)?;
    let k = g
        .uniform_degree()
        .ok_or_else(|| Error::Structure("sgcn_conv needs a uniform in-degree".into()))?;
    let mean = x
        .gather_rows(&targets)?
        .scatter_add_rows(&sources, n)?
        .scale(1.0 / k as f64);
    Ok(mean.matmul(&params.theta)?.leaky_relu(params.slope))
}

/// Glorot-uniform weight matrix: `U[−a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut crate::rng::DgmRng) -> Array {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect();
    Array::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Records a [`Linear`] from weight and bias arrays as differentiable leaves.
pub fn linear_param(tape: &Tape, weight: &Array, bias: &Array) -> Linear {
    Linear {
        weight: tape.param(weight),
        bias: tape.param(bias),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradient_multi;

    fn graph(n: usize, edges: &[(usize, usize)]) -> SampledGraph {
        SampledGraph::from_edges(n, edges.iter().map(|&(i, j)| (i, j, 1.0)).collect()).unwrap()
    }

    fn rows(r: &[&[f64]]) -> Array {
        Array::from_rows(r).unwrap()
    }

    fn const_linear(tape: &Tape, w: Array, b: Array) -> Linear {
        Linear {
            weight: tape.constant(&w),
            bias: tape.constant(&b),
        }
    }

    fn passthrough(tape: &Tape, d: usize) -> EdgeConvParams {
        // [x_i | x_j − x_i] · [[I],[I]] = x_j
        let mut w1 = Array::zeros(vec![2 * d, d]);
        for c in 0..d {
            w1.data_mut()[c * d + c] = 1.0;
            w1.data_mut()[(d + c) * d + c] = 1.0;
        }
        EdgeConvParams {
            hidden: const_linear(tape, w1, Array::zeros(vec![d])),
            out: const_linear(tape, Array::identity(d), Array::zeros(vec![d])),
        }
    }

    #[test]
    fn edge_conv_passthrough_sums_neighbours() {
        let tape = Tape::new();
        let x = tape.constant(&rows(&[&[0., 0.], &[1., 2.], &[3., 4.]]));
        let g = graph(3, &[(0, 1), (0, 2), (1, 2), (1, 0), (2, 0), (2, 1)]);
        let out = edge_conv(&x, &g, &passthrough(&tape, 2)).unwrap().to_array();
        assert_eq!(out.row(0), &[4., 6.]);
    }

    #[test]
    fn edge_conv_zero_final_layer_gives_zero_rows() {
        let tape = Tape::new();
        let x = tape.constant(&rows(&[&[0.5, -1.], &[1., 2.], &[3., 4.]]));
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)]);
        let mut p = passthrough(&tape, 2);
        p.out = const_linear(&tape, Array::zeros(vec![2, 2]), Array::zeros(vec![2]));
        let out = edge_conv(&x, &g, &p).unwrap().to_array();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_conv_rejects_isolated_node() {
        let tape = Tape::new();
        let x = tape.constant(&rows(&[&[0.], &[1.], &[2.]]));
        let g = graph(3, &[(0, 1), (1, 0)]);
        assert!(matches!(edge_conv(&x, &g, &passthrough(&tape, 1)), Err(Error::Structure(_))));
    }

    #[test]
    fn sgcn_examples() {
        let tape = Tape::new();
        let x = tape.constant(&rows(&[&[0., 0.], &[2., 0.], &[0., 2.]]));
        let g = graph(3, &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        let id = SgcnParams {
            theta: tape.constant(&Array::identity(2)),
            slope: SGCN_SLOPE,
        };
        let out = sgcn_conv(&x, &g, &id).unwrap().to_array();
        assert_eq!(out.row(0), &[1., 1.]);

        let zero = SgcnParams {
            theta: tape.constant(&Array::zeros(vec![2, 2])),
            slope: SGCN_SLOPE,
        };
        assert!(sgcn_conv(&x, &g, &zero).unwrap().to_array().data().iter().all(|&v| v == 0.0));

        // neighbour mean (−1, 4) → (−0.2, 4)
        let y = tape.constant(&rows(&[&[9., 9.], &[-2., 4.], &[0., 4.]]));
        let g1 = graph(3, &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        let out = sgcn_conv(&y, &g1, &id).unwrap().to_array();
        assert!((out.get(0, 0) + 0.2).abs() < 1e-15);
        assert_eq!(out.get(0, 1), 4.0);
    }

    #[test]
    fn sgcn_requires_uniform_degree() {
        let tape = Tape::new();
        let x = tape.constant(&rows(&[&[0.], &[1.], &[2.]]));
        let g = graph(3, &[(0, 1), (0, 2), (1, 0), (2, 0)]);
        let p = SgcnParams {
            theta: tape.constant(&Array::identity(1)),
            slope: SGCN_SLOPE,
        };
        assert!(matches!(sgcn_conv(&x, &g, &p), Err(Error::Structure(_))));
    }

    #[test]
    fn mlp_identity_and_zero_weights() {
        let tape = Tape::new();
        let x = tape.constant(&rows(&[&[1., -2.], &[3., 0.5]]));
        let id = Mlp {
            layers: vec![const_linear(&tape, Array::identity(2), Array::zeros(vec![2]))],
            final_relu: false,
        };
        assert_eq!(id.forward(&x).unwrap().to_array(), x.to_array());
        let zero = Mlp {
            layers: vec![const_linear(
                &tape,
                Array::zeros(vec![2, 3]),
                Array::vector(vec![0.1, 0.2, 0.3]),
            )],
            final_relu: false,
        };
        let out = zero.forward(&x).unwrap().to_array();
        assert_eq!(out.row(0), &[0.1, 0.2, 0.3]);
        assert_eq!(out.row(1), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn mlp_gradient_check() {
        let mut rng = crate::rng::DgmRng::new(3);
        let x = glorot(4, 3, &mut rng);
        let w1 = glorot(3, 5, &mut rng);
        let b1 = Array::vector(vec![0.05, -0.1, 0.2, 0.3, 0.1]);
        let w2 = glorot(5, 2, &mut rng);
        let b2 = Array::vector(vec![0.1, -0.2]);
        let rep = check_gradient_multi(
            |_, v| {
                let mlp = Mlp {
                    layers: vec![
                        Linear { weight: v[1].clone(), bias: v[2].clone() },
                        Linear { weight: v[3].clone(), bias: v[4].clone() },
                    ],
                    final_relu: false,
                };
                let y = mlp.forward(&v[0])?;
                y.mul(&y)?.sum(None)
            },
            &[x, w1, b1, w2, b2],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "max rel err {}", rep.max_rel_error);
    }
}
