//! Prediction heads: transition parser (TAP), toy mask head (SAP) and the
//! contrastive score regressor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot, Graph, ParamStore, Tensor, Var};
use crate::tca::{StageBoundaries, STAGES};

pub const TAP_WEIGHT: &str = "tap.weight";
pub const TAP_BIAS: &str = "tap.bias";
pub const SAP_WEIGHT: &str = "sap.weight";
pub const SAP_BIAS: &str = "sap.bias";
pub const FC1_WEIGHT: &str = "regressor.fc1.weight";
pub const FC1_BIAS: &str = "regressor.fc1.bias";
pub const FC2_WEIGHT: &str = "regressor.fc2.weight";
pub const FC2_BIAS: &str = "regressor.fc2.bias";

/// Per-stage weights on the regressor's difference pathway.
pub const STAGE_WEIGHTS: [f64; STAGES] = [3.0, 5.0, 2.0];

pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, mask_dim: usize) -> Result<()> {
    store.insert(TAP_WEIGHT, glorot(rng, d, 2))?;
    store.insert(TAP_BIAS, Tensor::zeros(1, 2))?;
    store.insert(SAP_WEIGHT, glorot(rng, d, mask_dim))?;
    store.insert(SAP_BIAS, Tensor::zeros(1, mask_dim))?;
    store.insert(FC1_WEIGHT, glorot(rng, STAGES * d, 2 * d))?;
    store.insert(FC1_BIAS, Tensor::zeros(1, 2 * d))?;
    store.insert(FC2_WEIGHT, glorot(rng, 2 * d, 1))?;
    store.insert(FC2_BIAS, Tensor::zeros(1, 1))
}

fn linear_on(g: &mut Graph, store: &ParamStore, x: Var, weight: &str, bias: &str) -> Result<Var> {
    let w = g.param(store, weight)?;
    let b = g.param(store, bias)?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// `T × 2` transition probabilities (forward→twist, twist→entry).
pub fn tap_on(g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
    let z = linear_on(g, store, features, TAP_WEIGHT, TAP_BIAS)?;
    Ok(g.sigmoid(z))
}

/// `T × D_m` mask logits.
pub fn sap_on(g: &mut Graph, store: &ParamStore, original: Var) -> Result<Var> {
    linear_on(g, store, original, SAP_WEIGHT, SAP_BIAS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionProbs {
    pub p: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub logits: Tensor,
}

pub fn tap_head(features: &Tensor, store: &ParamStore) -> Result<TransitionProbs> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let p = tap_on(&mut g, store, x)?;
    Ok(TransitionProbs {
        p: g.value(p).clone(),
    })
}

pub fn sap_head(original: &Tensor, store: &ParamStore) -> Result<MaskLogits> {
    let mut g = Graph::new();
    let x = g.constant(original.clone());
    let l = sap_on(&mut g, store, x)?;
    Ok(MaskLogits {
        logits: g.value(l).clone(),
    })
}

/// One-hot transition targets: column 0 at `t1`, column 1 at `t2`.
pub fn transition_targets(b: StageBoundaries, len: usize) -> Result<Tensor> {
    b.check(len)?;
    let mut t = Tensor::zeros(len, 2);
    t.set(b.t1, 0, 1.0);
    t.set(b.t2, 1, 1.0);
    Ok(t)
}

fn first_argmax(col: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in col {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Turns transition probabilities into valid boundaries.
///
/// `t1` is the earliest argmax of column 0, pulled into `[1, T-2]` so that
/// every stage keeps at least one snippet; `t2` is the earliest argmax of
/// column 1 among indices after `t1`.
pub fn decode_boundaries(p: &TransitionProbs) -> Result<StageBoundaries> {
    let len = p.p.rows();
    if len < STAGES || p.p.cols() != 2 {
        return Err(Error::invalid(format!(
            "cannot decode boundaries from {:?} (need T ≥ 3 and two columns)",
            p.p.shape()
        )));
    }
    let t1 = first_argmax((0..len).map(|t| (t, p.p.get(t, 0)))).expect("len ≥ 3");
    let t1 = t1.clamp(1, len - 2);
    let t2 = first_argmax((t1 + 1..len).map(|t| (t, p.p.get(t, 1)))).expect("t1 ≤ T-2");
    StageBoundaries::new(t1, t2, len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    /// Raw stage weights; normalised to mean 1 before use.
    pub stage_weights: [f64; STAGES],
    /// Score units per unit of network output.
    pub score_scale: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            stage_weights: STAGE_WEIGHTS,
            score_scale: 100.0,
        }
    }
}

impl RegressorConfig {
    pub fn normalized_weights(&self) -> [f64; STAGES] {
        let mean = self.stage_weights.iter().sum::<f64>() / STAGES as f64;
        self.stage_weights.map(|w| w / mean)
    }
}

/// Weighted per-stage differences `w_s (q_s − e_s)`, flattened to `1 × 3D`.
pub fn stage_differences_on(
    g: &mut Graph,
    refined_q: Var,
    refined_e: Var,
    cfg: &RegressorConfig,
) -> Result<Var> {
    let diff = g.sub(refined_q, refined_e)?;
    let (rows, d) = (g.value(diff).rows(), g.value(diff).cols());
    if rows != STAGES {
        return Err(Error::Shape {
            op: "regress_score",
            lhs: vec![STAGES, d],
            rhs: g.value(diff).shape().to_vec(),
        });
    }
    let w = cfg.normalized_weights();
    let wt = Tensor::matrix(
        STAGES,
        d,
        (0..STAGES * d).map(|i| w[i / d]).collect(),
    )?;
    let wt = g.constant(wt);
    let weighted = g.mul(diff, wt)?;
    g.reshape(weighted, vec![1, STAGES * d])
}

/// Network output in normalised units (multiply by `score_scale` for points).
pub fn regress_on(
    g: &mut Graph,
    store: &ParamStore,
    refined_q: Var,
    refined_e: Var,
    cfg: &RegressorConfig,
) -> Result<Var> {
    let x = stage_differences_on(g, refined_q, refined_e, cfg)?;
    let h = linear_on(g, store, x, FC1_WEIGHT, FC1_BIAS)?;
    let h = g.elu(h);
    linear_on(g, store, h, FC2_WEIGHT, FC2_BIAS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub delta: f64,
    pub y_query: f64,
    pub y_exemplar: f64,
}

impl ScorePrediction {
    pub fn new(delta: f64, y_exemplar: f64) -> Self {
        Self {
            delta,
            y_query: y_exemplar + delta,
            y_exemplar,
        }
    }
}

pub fn regress_score(
    refined_q: &Tensor,
    refined_e: &Tensor,
    y_exemplar: f64,
    store: &ParamStore,
    cfg: &RegressorConfig,
) -> Result<ScorePrediction> {
    let mut g = Graph::new();
    let q = g.constant(refined_q.clone());
    let e = g.constant(refined_e.clone());
    let out = regress_on(&mut g, store, q, e, cfg)?;
    Ok(ScorePrediction::new(
        g.value(out).item() * cfg.score_scale,
        y_exemplar,
    ))
}
