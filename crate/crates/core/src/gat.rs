//! Two-layer graph-attention intervention over the four feature streams.
//!
//! Each snippet contributes a fully connected graph (self-loops included)
//! over four nodes in the order `[O_query, F_query, O_exemplar, F_exemplar]`.
//! Snippets are not connected to each other, so all snippets are processed
//! as one block-diagonal graph of `4·T` nodes.
//!
//! Layer 1:  `F¹_i = ELU(Σ_j α_ij Θ x_j)`
//! Layer 2:  `F²_i = ELU(Σ_j α′_ij W′ F¹_j) + λ F¹_i`
//!
//! with `α_ij = softmax_j(aᵀ LeakyReLU(Θ_s x_i + Θ_t x_j))`. The refined
//! fused-node rows of `F²` are the deconfounded features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::Sample;
use crate::numerics::{glorot, Graph, ParamStore, Tensor, Var, LEAKY_SLOPE};

pub const NODES_PER_SNIPPET: usize = 4;
pub const NODE_LABELS: [&str; NODES_PER_SNIPPET] = ["qo", "qf", "eo", "ef"];
pub const DEFAULT_ATTN_DIM: usize = 8;
pub const LAMBDA_INIT: f64 = 0.5;
const INIT_JITTER: f64 = 0.1;

/// Row index of the query / exemplar fused node within a snippet block.
const QUERY_FUSED: usize = 1;
const EXEMPLAR_FUSED: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatLayer {
    First,
    Second,
}

impl GatLayer {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::First => "gat.layer1",
            Self::Second => "gat.layer2",
        }
    }

    /// Name of the propagation matrix (`Θ` or `W′`).
    pub fn weight_name(self) -> String {
        match self {
            Self::First => format!("{}.theta", self.prefix()),
            Self::Second => format!("{}.weight", self.prefix()),
        }
    }

    fn name(self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix())
    }
}

pub const LAMBDA: &str = "gat.lambda";

/// `Θ_t ≈ −Θ_s` and `a ≤ 0` at initialisation, so every node starts by
/// attending most to nodes resembling itself rather than uniformly. The
/// jitter keeps self-loop pre-activations off the LeakyReLU kink.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, h: usize) -> Result<()> {
    for layer in [GatLayer::First, GatLayer::Second] {
        store.insert(layer.weight_name(), glorot(rng, d, d))?;
        let src = glorot(rng, d, h);
        let jitter = glorot(rng, d, h);
        let dst = src.zip_map(&jitter, |s, j| INIT_JITTER * j - s);
        store.insert(layer.name("theta_dst"), dst)?;
        store.insert(layer.name("theta_src"), src)?;
        store.insert(layer.name("attn"), glorot(rng, h, 1).map(|v| -v.abs()))?;
    }
    store.insert(LAMBDA, Tensor::scalar(LAMBDA_INIT))
}

/// Stacks the four streams into `4T × D` node features, snippet-major.
pub fn build_nodes(qo: &Tensor, qf: &Tensor, eo: &Tensor, ef: &Tensor) -> Result<Tensor> {
    let (t, d) = (qo.rows(), qo.cols());
    for s in [qf, eo, ef] {
        if s.rows() != t || s.cols() != d {
            return Err(Error::Shape {
                op: "build_nodes",
                lhs: qo.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
    }
    let mut data = Vec::with_capacity(4 * t * d);
    for i in 0..t {
        for s in [qo, qf, eo, ef] {
            data.extend_from_slice(s.row(i));
        }
    }
    Tensor::matrix(NODES_PER_SNIPPET * t, d, data)
}

fn check_nodes(g: &Graph, x: Var) -> Result<()> {
    let rows = g.value(x).rows();
    if rows == 0 || rows % NODES_PER_SNIPPET != 0 {
        return Err(Error::invalid(format!(
            "node tensor needs a multiple of {NODES_PER_SNIPPET} rows, got {rows}"
        )));
    }
    if !g.value(x).is_finite() {
        return Err(Error::NonFinite("GAT node features".into()));
    }
    Ok(())
}

/// Attention coefficients `α` as a `4T × 4` matrix of per-node rows.
pub fn attention_on(g: &mut Graph, store: &ParamStore, layer: GatLayer, x: Var) -> Result<Var> {
    check_nodes(g, x)?;
    let src = g.param(store, &layer.name("theta_src"))?;
    let dst = g.param(store, &layer.name("theta_dst"))?;
    let attn = g.param(store, &layer.name("attn"))?;
    let p = g.matmul(x, src)?;
    let q = g.matmul(x, dst)?;
    let pairs = g.pairwise_sum(p, q, NODES_PER_SNIPPET)?;
    let act = g.leaky_relu(pairs, LEAKY_SLOPE);
    let logits = g.matmul(act, attn)?;
    let rows = g.value(x).rows();
    let logits = g.reshape(logits, vec![rows, NODES_PER_SNIPPET])?;
    g.softmax_rows(logits, None)
}

/// One attention layer: returns `(ELU(Σ α W x), α)`.
pub fn layer_on(g: &mut Graph, store: &ParamStore, layer: GatLayer, x: Var) -> Result<(Var, Var)> {
    let alpha = attention_on(g, store, layer, x)?;
    let w = g.param(store, &layer.weight_name())?;
    let v = g.matmul(x, w)?;
    let agg = g.block_aggregate(alpha, v, NODES_PER_SNIPPET)?;
    Ok((g.elu(agg), alpha))
}

/// Graph handles produced by [`deconfound_on`].
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    pub query: Var,
    pub exemplar: Var,
    pub layer1: Var,
    pub refined: Var,
    pub alpha1: Var,
    pub alpha2: Var,
}

/// Runs both layers on `4T × D` node features.
pub fn deconfound_on(g: &mut Graph, store: &ParamStore, nodes: Var) -> Result<GatOutput> {
    let (f1, alpha1) = layer_on(g, store, GatLayer::First, nodes)?;
    let (propagated, alpha2) = layer_on(g, store, GatLayer::Second, f1)?;
    let lambda = g.param(store, LAMBDA)?;
    let residual = g.scale_by(f1, lambda)?;
    let f2 = g.add(propagated, residual)?;

    let t = g.value(nodes).rows() / NODES_PER_SNIPPET;
    let q_idx: Vec<usize> = (0..t).map(|i| i * NODES_PER_SNIPPET + QUERY_FUSED).collect();
    let e_idx: Vec<usize> = (0..t)
        .map(|i| i * NODES_PER_SNIPPET + EXEMPLAR_FUSED)
        .collect();
    let query = g.gather_rows(f2, &q_idx)?;
    let exemplar = g.gather_rows(f2, &e_idx)?;
    Ok(GatOutput {
        query,
        exemplar,
        layer1: f1,
        refined: f2,
        alpha1,
        alpha2,
    })
}

/// Snippet-averaged `4 × 4` attention from a `4T × 4` coefficient matrix.
pub fn summarize_attention(alpha: &Tensor) -> Tensor {
    let t = alpha.rows() / NODES_PER_SNIPPET;
    let mut out = Tensor::zeros(NODES_PER_SNIPPET, NODES_PER_SNIPPET);
    for s in 0..t {
        for i in 0..NODES_PER_SNIPPET {
            for j in 0..NODES_PER_SNIPPET {
                let v = out.get(i, j) + alpha.get(s * NODES_PER_SNIPPET + i, j) / t as f64;
                out.set(i, j, v);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeconfoundedFeatures {
    pub query: Tensor,
    pub exemplar: Tensor,
    /// Mean first-layer attention between stream types over snippets.
    pub attention: Tensor,
}

/// `α` for plain node features (`4T × D`).
pub fn attention_coeffs(nodes: &Tensor, store: &ParamStore, layer: GatLayer) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(nodes.clone());
    let a = attention_on(&mut g, store, layer, x)?;
    Ok(g.value(a).clone())
}

/// One layer applied to plain node features.
pub fn gat_layer(nodes: &Tensor, store: &ParamStore, layer: GatLayer) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(nodes.clone());
    let (out, _) = layer_on(&mut g, store, layer, x)?;
    Ok(g.value(out).clone())
}

pub fn deconfound(sample: &Sample, store: &ParamStore) -> Result<DeconfoundedFeatures> {
    let nodes = build_nodes(
        &sample.query_original,
        &sample.query_fused,
        &sample.exemplar_original,
        &sample.exemplar_fused,
    )?;
    let mut g = Graph::new();
    let x = g.constant(nodes);
    let out = deconfound_on(&mut g, store, x)?;
    Ok(DeconfoundedFeatures {
        query: g.value(out.query).clone(),
        exemplar: g.value(out.exemplar).clone(),
        attention: summarize_attention(g.value(out.alpha1)),
    })
}
