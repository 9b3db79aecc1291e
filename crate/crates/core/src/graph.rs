//! Per-frame scene graphs and the graph convolution block that embeds agent
//! coordinates before the temporal model.

use rand::Rng;
use trajformer_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{init_linear, linear, Bound, ParamStore};

/// Maximum Euclidean distance between neighbouring agents, in meters.
pub const NEIGHBOR_RADIUS_M: f64 = 30.0;
/// Maximum lane-index difference between neighbouring agents.
pub const MAX_LANE_OFFSET: i64 = 1;

/// Neighbourhood rule: within 30 m and in the same or an adjacent lane.
pub fn is_neighbor(a: [f64; 2], lane_a: i64, b: [f64; 2], lane_b: i64) -> bool {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    d <= NEIGHBOR_RADIUS_M && (lane_a - lane_b).abs() <= MAX_LANE_OFFSET
}

/// Symmetric 0/1 adjacency with self-loops and its degree normalization
/// `D^{-1/2} A D^{-1/2}`. Padding agents have all-zero rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    adjacency: Tensor,
    norm_adjacency: Tensor,
}

impl SceneGraph {
    /// Normalizes a symmetric 0/1 adjacency matrix that already carries
    /// self-loops for every real agent.
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let n = adjacency.shape()[0];
        if adjacency.shape() != [n, n] {
            return Err(Error::Contract(format!(
                "adjacency must be square, got {:?}",
                adjacency.shape()
            )));
        }
        let a = adjacency.data();
        let degree: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        // sqrt of the product keeps entries like 1/2 exact.
        let norm = Tensor::from_fn([n, n], |k| {
            let (i, j) = (k / n, k % n);
            if a[k] == 0.0 {
                0.0
            } else {
                a[k] / (degree[i] * degree[j]).sqrt()
            }
        });
        Ok(Self {
            adjacency,
            norm_adjacency: norm,
        })
    }

    /// Graph with self-loops only for the unmasked agents.
    pub fn isolated(mask: &[bool]) -> Self {
        let n = mask.len();
        let adj = Tensor::from_fn([n, n], |k| {
            let (i, j) = (k / n, k % n);
            if i == j && mask[i] {
                1.0
            } else {
                0.0
            }
        });
        Self::from_adjacency(adj).expect("square by construction")
    }

    pub fn agents(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn norm_adjacency(&self) -> &Tensor {
        &self.norm_adjacency
    }
}

/// Builds the graph for one frame from metric positions.
pub fn build_scene_graph(positions: &[[f64; 2]], lanes: &[i64], mask: &[bool]) -> Result<SceneGraph> {
    let n = positions.len();
    if lanes.len() != n || mask.len() != n || n == 0 {
        return Err(Error::Contract(format!(
            "scene graph needs matching non-empty inputs, got {n} positions, {} lanes, {} mask flags",
            lanes.len(),
            mask.len()
        )));
    }
    let adj = Tensor::from_fn([n, n], |k| {
        let (i, j) = (k / n, k % n);
        let linked = mask[i]
            && mask[j]
            && (i == j || is_neighbor(positions[i], lanes[i], positions[j], lanes[j]));
        if linked {
            1.0
        } else {
            0.0
        }
    });
    SceneGraph::from_adjacency(adj)
}

/// Graph convolution stack `H' = relu(Â · H · W + b)` applied frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnBlock {
    pub prefix: String,
    pub in_features: usize,
    pub width: usize,
    pub layers: usize,
}

impl GcnBlock {
    pub fn new(prefix: impl Into<String>, in_features: usize, width: usize, layers: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_features,
            width,
            layers,
        }
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.in_features } else { self.width };
        (fan_in, self.width)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 0..self.layers {
            let (fi, fo) = self.layer_dims(l);
            init_linear(store, rng, &format!("{}.{l}", self.prefix), fi, fo);
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.layers)
            .flat_map(|l| {
                let (fi, fo) = self.layer_dims(l);
                [
                    (format!("{}.{l}.weight", self.prefix), vec![fi, fo]),
                    (format!("{}.{l}.bias", self.prefix), vec![fo]),
                ]
            })
            .collect()
    }

    /// `features`: `[frames × n × in_features]`; `norm_adjacency`: constant
    /// `[frames × n × n]`. Returns `[frames·n × width]` with padding rows
    /// (zero diagonal in the adjacency) forced to zero.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, norm_adjacency: Var) -> Result<Var> {
        let fs = tape.shape(features).to_vec();
        let adj_shape = tape.shape(norm_adjacency).to_vec();
        if fs.len() != 3 || fs[2] != self.in_features || adj_shape != [fs[0], fs[1], fs[1]] {
            return Err(trajformer_autodiff::TensorError::ShapeMismatch {
                op: "gcn_forward",
                lhs: fs,
                rhs: adj_shape,
            }
            .into());
        }
        let (frames, n) = (fs[0], fs[1]);
        let keep = {
            let adj = tape.value(norm_adjacency).data();
            let width = self.width;
            Tensor::from_fn([frames * n, width], |k| {
                let row = k / width;
                let (f, i) = (row / n, row % n);
                if adj[(f * n + i) * n + i] != 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let keep = tape.constant(keep);
        let mut h = features;
        for l in 0..self.layers {
            let mixed = tape.batch_matmul(norm_adjacency, h, false)?;
            let width = tape.shape(mixed)[2];
            let flat = tape.reshape(mixed, &[frames * n, width])?;
            let z = linear(tape, p, &format!("{}.{l}", self.prefix), flat)?;
            let a = tape.relu(z);
            let masked = tape.mul(a, keep)?;
            h = if l + 1 == self.layers {
                masked
            } else {
                tape.reshape(masked, &[frames, n, self.width])?
            };
        }
        Ok(h)
    }
}

/// Single-frame convenience wrapper: `[n × in_features]` → `[n × width]`.
pub fn gcn_forward(tape: &mut Tape, p: &Bound, block: &GcnBlock, frame_features: Var, graph: &SceneGraph) -> Result<Var> {
    let s = tape.shape(frame_features).to_vec();
    if s.len() != 2 || s[0] != graph.agents() {
        return Err(trajformer_autodiff::TensorError::ShapeMismatch {
            op: "gcn_forward",
            lhs: s,
            rhs: graph.norm_adjacency().shape().to_vec(),
        }
        .into());
    }
    let x = tape.reshape(frame_features, &[1, s[0], s[1]])?;
    let n = graph.agents();
    let adj = graph.norm_adjacency().clone().reshape([1, n, n])?;
    let adj = tape.constant(adj);
    block.forward(tape, p, x, adj)
}
