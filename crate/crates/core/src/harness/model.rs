//! Variant-aware forward pass and the per-sample training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::fusion::Sample;
use crate::gat::{self, build_nodes, deconfound_on, summarize_attention};
use crate::heads::{self, decode_boundaries, regress_on, tap_on, sap_on, transition_targets};
use crate::heads::{MaskLogits, ScorePrediction, TransitionProbs};
use crate::losses::{self, bce_on, focal_on, mse_on, weighted_total_on, LossBreakdown};
use crate::losses::{FOCAL_ALPHA, FOCAL_GAMMA, LOG_VARIANCES};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::tca::{self, mean_attention, pool_on, tca_on, StageBoundaries};

/// RNG stream per module so shared modules start identical across variants.
const GAT_STREAM: u64 = 10;
const TCA_STREAM: u64 = 11;
const HEADS_STREAM: u64 = 12;

/// Parameters for `cfg.variant`; absent modules contribute no names.
pub fn init_model(cfg: &RunConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.data.dim;
    let mut store = ParamStore::new();
    let rng = |stream| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(stream);
        r
    };
    if cfg.variant.uses_gat() {
        gat::init_params(&mut store, &mut rng(GAT_STREAM), d, cfg.attn_dim)?;
    }
    if cfg.variant.uses_tca() {
        tca::init_params(&mut store, &mut rng(TCA_STREAM), d, cfg.tca_heads)?;
    }
    heads::init_params(&mut store, &mut rng(HEADS_STREAM), d, cfg.data.mask_dim())?;
    losses::init_params(&mut store)?;
    Ok(store)
}

/// Checks that `store` holds exactly the modules of `variant`.
pub fn check_variant(store: &ParamStore, variant: Variant) -> Result<()> {
    let has_gat = store.contains(gat::LAMBDA);
    let has_tca = store.contains(tca::OUTPUT);
    if has_gat != variant.uses_gat() || has_tca != variant.uses_tca() {
        return Err(Error::invalid(format!(
            "parameters (gat: {has_gat}, tca: {has_tca}) do not match variant {variant}"
        )));
    }
    Ok(())
}

/// Which stage boundaries pool the snippet features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundaries {
    /// Ground-truth boundaries (teacher forcing).
    Given(StageBoundaries, StageBoundaries),
    /// Decoded from the transition head.
    Decoded,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Score difference in normalised units (`1 × 1`).
    pub delta: Var,
    pub tap_query: Var,
    pub tap_exemplar: Var,
    pub sap_query: Var,
    pub sap_exemplar: Var,
    pub boundaries: (StageBoundaries, StageBoundaries),
    /// `4T × 4` first-layer coefficients.
    pub gat_alpha: Option<Var>,
    /// Query-video per-head `3 × 3` attention.
    pub tca_query: Option<Vec<Var>>,
}

pub fn forward_on(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    sample: &Sample,
    boundaries: Boundaries,
) -> Result<ForwardVars> {
    let variant = cfg.variant;
    let (feat_q, feat_e, gat_alpha) = if variant.uses_gat() {
        let nodes = build_nodes(
            &sample.query_original,
            &sample.query_fused,
            &sample.exemplar_original,
            &sample.exemplar_fused,
        )?;
        let x = g.constant(nodes);
        let out = deconfound_on(g, store, x)?;
        (out.query, out.exemplar, Some(out.alpha1))
    } else {
        let q = g.constant(sample.query_fused.clone());
        let e = g.constant(sample.exemplar_fused.clone());
        (q, e, None)
    };

    let tap_query = tap_on(g, store, feat_q)?;
    let tap_exemplar = tap_on(g, store, feat_e)?;
    let qo = g.constant(sample.query_original.clone());
    let eo = g.constant(sample.exemplar_original.clone());
    let sap_query = sap_on(g, store, qo)?;
    let sap_exemplar = sap_on(g, store, eo)?;

    let (bq, be) = match boundaries {
        Boundaries::Given(q, e) => (q, e),
        Boundaries::Decoded => (
            decode_boundaries(&TransitionProbs {
                p: g.value(tap_query).clone(),
            })?,
            decode_boundaries(&TransitionProbs {
                p: g.value(tap_exemplar).clone(),
            })?,
        ),
    };
    let mut s_q = pool_on(g, feat_q, bq)?;
    let mut s_e = pool_on(g, feat_e, be)?;
    let mut tca_query = None;
    if variant.uses_tca() {
        let oq = tca_on(g, store, s_q)?;
        let oe = tca_on(g, store, s_e)?;
        s_q = oq.refined;
        s_e = oe.refined;
        tca_query = Some(oq.attention);
    }
    let delta = regress_on(g, store, s_q, s_e, &cfg.regressor())?;
    Ok(ForwardVars {
        delta,
        tap_query,
        tap_exemplar,
        sap_query,
        sap_exemplar,
        boundaries: (bq, be),
        gat_alpha,
        tca_query,
    })
}

/// Per-sample loss handles; `total` is the uncertainty-weighted objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_sap: Var,
    pub l_tap: Var,
    pub l_reg: Var,
    pub total: Var,
}

fn average(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Teacher-forced forward pass plus the three task losses of one sample.
pub fn sample_loss_on(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    sample: &Sample,
) -> Result<LossVars> {
    let t = sample.snippets();
    let fwd = forward_on(
        g,
        store,
        cfg,
        sample,
        Boundaries::Given(sample.query_boundaries, sample.exemplar_boundaries),
    )?;

    let scale = cfg.regressor().score_scale;
    let target = g.constant(Tensor::scalar((sample.y_query - sample.y_exemplar) / scale));
    let l_reg = mse_on(g, fwd.delta, target)?;

    let tq = transition_targets(sample.query_boundaries, t)?;
    let te = transition_targets(sample.exemplar_boundaries, t)?;
    let a = bce_on(g, fwd.tap_query, &tq)?;
    let b = bce_on(g, fwd.tap_exemplar, &te)?;
    let l_tap = average(g, a, b)?;

    let a = focal_on(g, fwd.sap_query, &sample.query_mask_targets, Some(FOCAL_ALPHA), FOCAL_GAMMA)?;
    let b = focal_on(
        g,
        fwd.sap_exemplar,
        &sample.exemplar_mask_targets,
        Some(FOCAL_ALPHA),
        FOCAL_GAMMA,
    )?;
    let l_sap = average(g, a, b)?;

    let parts = g.concat_cols(&[l_sap, l_tap, l_reg])?;
    let log_var = g.param(store, LOG_VARIANCES)?;
    let total = weighted_total_on(g, parts, log_var)?;
    Ok(LossVars {
        l_sap,
        l_tap,
        l_reg,
        total,
    })
}

/// Mean objective over `samples` on a single graph (used for gradient checks).
pub fn batch_loss_on(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    samples: &[Sample],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for s in samples {
        let l = sample_loss_on(g, store, cfg, s)?.total;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok(g.scale(sum, 1.0 / samples.len() as f64))
}

/// Mean attention summaries of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `4 × 4` over node types `qo, qf, eo, ef`.
    pub gat: Option<Tensor>,
    /// `3 × 3` over stages of the query video, averaged over heads.
    pub tca: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub score: ScorePrediction,
    pub transitions: TransitionProbs,
    pub masks: MaskLogits,
    pub boundaries: StageBoundaries,
    pub attention: AttentionRecord,
}

/// Inference forward pass; boundaries are decoded unless given.
pub fn forward(
    sample: &Sample,
    store: &ParamStore,
    cfg: &RunConfig,
    boundaries: Boundaries,
) -> Result<Prediction> {
    check_variant(store, cfg.variant)?;
    let mut g = Graph::new();
    let fwd = forward_on(&mut g, store, cfg, sample, boundaries)?;
    let delta = g.value(fwd.delta).item() * cfg.regressor().score_scale;
    let attention = AttentionRecord {
        gat: fwd.gat_alpha.map(|a| summarize_attention(g.value(a))),
        tca: fwd.tca_query.as_ref().map(|heads| {
            mean_attention(&heads.iter().map(|&a| g.value(a).clone()).collect::<Vec<_>>())
        }),
    };
    Ok(Prediction {
        score: ScorePrediction::new(delta, sample.y_exemplar),
        transitions: TransitionProbs {
            p: g.value(fwd.tap_query).clone(),
        },
        masks: MaskLogits {
            logits: g.value(fwd.sap_query).clone(),
        },
        boundaries: fwd.boundaries.0,
        attention,
    })
}

/// Per-sample losses and parameter gradients of the objective.
pub fn sample_gradients(
    store: &ParamStore,
    cfg: &RunConfig,
    sample: &Sample,
) -> Result<(LossBreakdown, Vec<(String, Tensor)>)> {
    let mut g = Graph::new();
    let l = sample_loss_on(&mut g, store, cfg, sample)?;
    let breakdown = LossBreakdown {
        l_sap: g.value(l.l_sap).item(),
        l_tap: g.value(l.l_tap).item(),
        l_reg: g.value(l.l_reg).item(),
        weighted_total: g.value(l.total).item(),
        log_variances: {
            let s = store.get(LOG_VARIANCES)?.data();
            [s[0], s[1], s[2]]
        },
    };
    if !breakdown.weighted_total.is_finite() {
        return Err(Error::NonFinite(format!("loss of sample {}", sample.id)));
    }
    let grads = g.backward(l.total)?;
    Ok((breakdown, g.param_grads(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenConfig};

    fn cfg(variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            data: GenConfig {
                n_train: 4,
                n_test: 2,
                snippets: 5,
                dim: 8,
                ..GenConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn variant_isolation() {
        for v in Variant::ALL {
            let s = init_model(&cfg(v)).unwrap();
            let names: Vec<&str> = s.names().collect();
            assert_eq!(names.iter().any(|n| n.starts_with("gat.")), v.uses_gat(), "{v}");
            assert_eq!(names.iter().any(|n| n.starts_with("tca.")), v.uses_tca(), "{v}");
            check_variant(&s, v).unwrap();
        }
        let full = init_model(&cfg(Variant::Full)).unwrap();
        assert!(check_variant(&full, Variant::Baseline).is_err());
    }

    #[test]
    fn shared_modules_start_identical() {
        let a = init_model(&cfg(Variant::Baseline)).unwrap();
        let b = init_model(&cfg(Variant::Full)).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(b.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn dead_network_predicts_exemplar_score() {
        let c = cfg(Variant::Full);
        let mut store = init_model(&c).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let (train, _) = generate(&c.data).unwrap();
        let s = &train.samples[0];
        let p = forward(s, &store, &c, Boundaries::Decoded).unwrap();
        assert_eq!(p.score.delta, 0.0);
        assert_eq!(p.score.y_query, s.y_exemplar);
    }

    #[test]
    fn attention_record_shapes() {
        let c = cfg(Variant::Full);
        let store = init_model(&c).unwrap();
        let (train, _) = generate(&c.data).unwrap();
        let p = forward(&train.samples[0], &store, &c, Boundaries::Decoded).unwrap();
        assert_eq!(p.attention.gat.unwrap().shape(), &[4, 4]);
        assert_eq!(p.attention.tca.unwrap().shape(), &[3, 3]);
        let base = cfg(Variant::Baseline);
        let store = init_model(&base).unwrap();
        let p = forward(&train.samples[0], &store, &base, Boundaries::Decoded).unwrap();
        assert_eq!(p.attention, AttentionRecord { gat: None, tca: None });
    }
}
