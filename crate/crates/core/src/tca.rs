//! Stage decomposition and temporal causal attention.
//!
//! Snippet features are mean-pooled into forward/twist/entry stage vectors
//! `S` (3 × D), then refined by one masked multi-head self-attention block:
//!
//! `refined = LayerNorm(S + concat_h(softmax(Q_h K_hᵀ/√d_h + M) V_h) W_o)`
//!
//! where `M` lets stage `i` attend only to stages `j ≤ i`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{causal_mask, glorot, Graph, ParamStore, Tensor, Var};

pub const STAGES: usize = 3;
pub const DEFAULT_HEADS: usize = 2;
pub const WEAK_TRANSITION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Forward,
    Twist,
    Entry,
}

impl Stage {
    pub const ALL: [Stage; STAGES] = [Stage::Forward, Stage::Twist, Stage::Entry];

    pub fn label(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Twist => "twist",
            Self::Entry => "entry",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Snippet indices where twist and entry begin: `0 < t1 < t2 < T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageBoundaries {
    pub t1: usize,
    pub t2: usize,
}

impl StageBoundaries {
    pub fn new(t1: usize, t2: usize, len: usize) -> Result<Self> {
        let b = Self { t1, t2 };
        b.check(len)?;
        Ok(b)
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if 0 < self.t1 && self.t1 < self.t2 && self.t2 < len {
            Ok(())
        } else {
            Err(Error::Boundaries {
                t1: self.t1,
                t2: self.t2,
                len,
            })
        }
    }

    /// Half-open snippet ranges of the three stages.
    pub fn intervals(&self, len: usize) -> [(usize, usize); STAGES] {
        [(0, self.t1), (self.t1, self.t2), (self.t2, len)]
    }

    /// `3 × T` averaging matrix that pools snippets into stages.
    pub fn pooling_matrix(&self, len: usize) -> Result<Tensor> {
        self.check(len)?;
        let mut m = Tensor::zeros(STAGES, len);
        for (s, (a, b)) in self.intervals(len).into_iter().enumerate() {
            let w = 1.0 / (b - a) as f64;
            for t in a..b {
                m.set(s, t, w);
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    /// Rows ordered forward, twist, entry.
    pub values: Tensor,
    pub boundaries: StageBoundaries,
}

pub fn pool_on(g: &mut Graph, features: Var, b: StageBoundaries) -> Result<Var> {
    let t = g.value(features).rows();
    let p = g.constant(b.pooling_matrix(t)?);
    g.matmul(p, features)
}

pub fn pool_stages(features: &Tensor, b: StageBoundaries) -> Result<StageFeatures> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let s = pool_on(&mut g, x, b)?;
    Ok(StageFeatures {
        values: g.value(s).clone(),
        boundaries: b,
    })
}

fn head_name(h: usize, leaf: &str) -> String {
    format!("tca.head{h}.{leaf}")
}

pub const OUTPUT: &str = "tca.output";
pub const NORM_SCALE: &str = "tca.norm.scale";
pub const NORM_SHIFT: &str = "tca.norm.shift";

pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "feature dim {d} is not divisible by {heads} attention heads"
        )));
    }
    let dh = d / heads;
    for h in 0..heads {
        for leaf in ["query", "key", "value"] {
            store.insert(head_name(h, leaf), glorot(rng, d, dh))?;
        }
    }
    store.insert(OUTPUT, glorot(rng, heads * dh, d))?;
    store.insert(NORM_SCALE, Tensor::full(1, d, 1.0))?;
    store.insert(NORM_SHIFT, Tensor::zeros(1, d))
}

/// Number of attention heads present in `store`.
pub fn head_count(store: &ParamStore) -> usize {
    (0..)
        .take_while(|&h| store.contains(&head_name(h, "query")))
        .count()
}

#[derive(Clone, Debug)]
pub struct TcaOutput {
    pub refined: Var,
    /// Per-head `3 × 3` attention.
    pub attention: Vec<Var>,
}

/// Per-head masked attention weights for stage features `s`.
pub fn scores_on(g: &mut Graph, store: &ParamStore, s: Var) -> Result<Vec<(Var, Var)>> {
    if !g.value(s).is_finite() {
        return Err(Error::NonFinite("stage features".into()));
    }
    let heads = head_count(store);
    if heads == 0 {
        return Err(Error::UnknownParameter(head_name(0, "query")));
    }
    let n = g.value(s).rows();
    let mask = causal_mask(n);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = g.param(store, &head_name(h, "query"))?;
        let wk = g.param(store, &head_name(h, "key"))?;
        let wv = g.param(store, &head_name(h, "value"))?;
        let q = g.matmul(s, wq)?;
        let k = g.matmul(s, wk)?;
        let v = g.matmul(s, wv)?;
        let dh = g.value(q).cols() as f64;
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / dh.sqrt());
        let a = g.softmax_rows(logits, Some(&mask))?;
        out.push((a, v));
    }
    Ok(out)
}

pub fn tca_on(g: &mut Graph, store: &ParamStore, s: Var) -> Result<TcaOutput> {
    let heads = scores_on(g, store, s)?;
    let mut parts = Vec::with_capacity(heads.len());
    for &(a, v) in &heads {
        parts.push(g.matmul(a, v)?);
    }
    let cat = g.concat_cols(&parts)?;
    let wo = g.param(store, OUTPUT)?;
    let attended = g.matmul(cat, wo)?;
    let residual = g.add(s, attended)?;
    let scale = g.param(store, NORM_SCALE)?;
    let shift = g.param(store, NORM_SHIFT)?;
    let refined = g.layer_norm(residual, scale, shift)?;
    Ok(TcaOutput {
        refined,
        attention: heads.into_iter().map(|(a, _)| a).collect(),
    })
}

/// Per-head attention matrices for plain stage features.
pub fn tca_scores(s: &Tensor, store: &ParamStore) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(s.clone());
    let heads = scores_on(&mut g, store, x)?;
    Ok(heads.into_iter().map(|(a, _)| g.value(a).clone()).collect())
}

/// Refined stage features plus the head-averaged attention matrix.
pub fn tca_forward(s: &Tensor, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(s.clone());
    let out = tca_on(&mut g, store, x)?;
    let mean = mean_attention(&out.attention.iter().map(|&a| g.value(a).clone()).collect::<Vec<_>>());
    Ok((g.value(out.refined).clone(), mean))
}

pub fn mean_attention(heads: &[Tensor]) -> Tensor {
    let mut acc = heads[0].map(|_| 0.0);
    for h in heads {
        acc = acc.zip_map(h, |a, b| a + b);
    }
    let n = heads.len() as f64;
    acc.map(|v| v / n)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageInfluence {
    pub source: Stage,
    pub target: Stage,
    pub weight: f64,
    pub weak: bool,
}

/// Lists `source → target` influences read from row `target`, column
/// `source` of a causal attention matrix. Zero weights are skipped;
/// cross-stage transitions below `threshold` are marked weak.
pub fn stage_influence(a: &Tensor, threshold: f64) -> Result<Vec<StageInfluence>> {
    if a.rows() != STAGES || a.cols() != STAGES {
        return Err(Error::invalid(format!(
            "stage attention must be 3×3, got {:?}",
            a.shape()
        )));
    }
    let mut out = Vec::new();
    for (i, target) in Stage::ALL.into_iter().enumerate() {
        for (j, source) in Stage::ALL.into_iter().enumerate().take(i + 1) {
            let weight = a.get(i, j);
            if weight == 0.0 {
                continue;
            }
            out.push(StageInfluence {
                source,
                target,
                weight,
                weak: j < i && weight < threshold,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize, heads: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), d, heads).unwrap();
        s
    }

    #[test]
    fn boundaries_validate() {
        assert!(StageBoundaries::new(1, 2, 3).is_ok());
        for (t1, t2, len) in [(0, 2, 3), (2, 2, 5), (1, 3, 3), (3, 1, 5)] {
            assert!(matches!(
                StageBoundaries::new(t1, t2, len),
                Err(Error::Boundaries { .. })
            ));
        }
    }

    #[test]
    fn singleton_pools_are_identity() {
        let x = glorot(&mut ChaCha8Rng::seed_from_u64(1), 3, 4);
        let s = pool_stages(&x, StageBoundaries::new(1, 2, 3).unwrap()).unwrap();
        assert_eq!(s.values, x);
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let x = Tensor::full(9, 4, 2.5);
        let s = pool_stages(&x, StageBoundaries::new(2, 7, 9).unwrap()).unwrap();
        assert!(s.values.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn first_row_attends_to_itself() {
        let s = store(4, 2, 3);
        let x = glorot(&mut ChaCha8Rng::seed_from_u64(4), 3, 4);
        for a in tca_scores(&x, &s).unwrap() {
            assert_eq!(a.row(0), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn zero_query_key_gives_prefix_uniform() {
        let mut s = store(4, 2, 3);
        for h in 0..2 {
            s.get_mut(&head_name(h, "query")).unwrap().data_mut().fill(0.0);
            s.get_mut(&head_name(h, "key")).unwrap().data_mut().fill(0.0);
        }
        let x = glorot(&mut ChaCha8Rng::seed_from_u64(4), 3, 4);
        for a in tca_scores(&x, &s).unwrap() {
            assert_eq!(a.row(1), &[0.5, 0.5, 0.0]);
            for v in a.row(2) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_projections_reduce_to_layer_norm() {
        let mut s = store(4, 2, 3);
        s.get_mut(OUTPUT).unwrap().data_mut().fill(0.0);
        let x = glorot(&mut ChaCha8Rng::seed_from_u64(4), 3, 4);
        let (refined, _) = tca_forward(&x, &s).unwrap();
        let ln = crate::numerics::layer_norm(&x, s.get(NORM_SCALE).unwrap(), s.get(NORM_SHIFT).unwrap())
            .unwrap();
        assert_eq!(refined, ln);
    }

    #[test]
    fn identical_rows_stay_identical() {
        let s = store(4, 2, 8);
        let row = [0.3, -0.1, 0.8, -0.5];
        let x = Tensor::matrix(3, 4, row.repeat(3)).unwrap();
        let (refined, _) = tca_forward(&x, &s).unwrap();
        for r in 1..3 {
            assert!(refined.row(r).iter().zip(refined.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut s = ParamStore::new();
        assert!(init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(0), 5, 2).is_err());
    }

    #[test]
    fn influence_report() {
        let id = stage_influence(&Tensor::identity(3), WEAK_TRANSITION).unwrap();
        assert_eq!(id.len(), 3);
        assert!(id.iter().all(|r| r.source == r.target && r.weight == 1.0));

        let third = 1.0 / 3.0;
        let a = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![third, third, third],
        ])
        .unwrap();
        let rows = stage_influence(&a, WEAK_TRANSITION).unwrap();
        let entry: Vec<_> = rows.iter().filter(|r| r.target == Stage::Entry).collect();
        assert_eq!(entry.len(), 3);
        assert!(entry.iter().all(|r| r.weight == third && !r.weak));

        let a = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![0.5, 0.05, 0.45],
        ])
        .unwrap();
        let rows = stage_influence(&a, WEAK_TRANSITION).unwrap();
        let weak: Vec<_> = rows.iter().filter(|r| r.weak).collect();
        assert_eq!(weak.len(), 1);
        assert_eq!((weak[0].source, weak[0].target), (Stage::Twist, Stage::Entry));
    }
}
