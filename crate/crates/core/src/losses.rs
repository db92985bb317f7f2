//! Mask focal loss, transition BCE, score MSE and their uncertainty-weighted
//! sum `Σ_i exp(−s_i)·L_i + s_i` with learnable log-variances `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLAMP: f64 = 1e-7;
/// `1 × 3` log-variances ordered (sap, tap, reg).
pub const LOG_VARIANCES: &str = "loss.log_var";

pub fn init_params(store: &mut ParamStore) -> Result<()> {
    store.insert(LOG_VARIANCES, Tensor::zeros(1, 3))
}

fn check_targets(g: &Graph, pred: Var, targets: &Tensor) -> Result<()> {
    let p = g.value(pred);
    if p.as_matrix_shape() != targets.as_matrix_shape() {
        return Err(Error::Shape {
            op: "loss",
            lhs: p.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!("target {bad} is not in {{0, 1}}")));
    }
    Ok(())
}

/// Mean of `−α_t (1 − p_t)^γ log p_t` over elements, `p = sigmoid(logit)`.
///
/// `α_t` is `alpha` on positives and `1 − alpha` on negatives; `None`
/// disables class weighting (`α_t ≡ 1`).
pub fn focal_on(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    alpha: Option<f64>,
    gamma: f64,
) -> Result<Var> {
    check_targets(g, logits, targets)?;
    if alpha.is_some_and(|a| !(a > 0.0 && a <= 1.0)) || !(gamma >= 0.0) {
        return Err(Error::invalid(format!(
            "focal loss needs alpha in (0, 1] and gamma ≥ 0, got {alpha:?}, {gamma}"
        )));
    }
    // s = 2t − 1 turns p_t into sigmoid(s·z) and 1 − p_t into sigmoid(−s·z)
    let sign = g.constant(targets.map(|t| 2.0 * t - 1.0));
    let neg_sign = g.constant(targets.map(|t| 1.0 - 2.0 * t));
    let weights = g.constant(targets.map(|t| match alpha {
        None => -1.0,
        Some(a) if t == 1.0 => -a,
        Some(a) => a - 1.0,
    }));

    let sz = g.mul(logits, sign)?;
    let log_pt = g.log_sigmoid(sz);
    let per_elem = if gamma == 0.0 {
        g.mul(log_pt, weights)?
    } else {
        let nz = g.mul(logits, neg_sign)?;
        let one_minus = g.sigmoid(nz);
        let modulator = g.powf(one_minus, gamma);
        let weighted = g.mul(modulator, weights)?;
        g.mul(weighted, log_pt)?
    };
    Ok(g.mean(per_elem))
}

/// Mean binary cross-entropy on probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_on(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    check_targets(g, probs, targets)?;
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let one_minus = g.scale(p, -1.0);
    let ones = g.constant(targets.map(|_| 1.0));
    let one_minus = g.add(one_minus, ones)?;
    let log_q = g.log(one_minus);
    let t = g.constant(targets.map(|t| -t));
    let u = g.constant(targets.map(|t| t - 1.0));
    let a = g.mul(log_p, t)?;
    let b = g.mul(log_q, u)?;
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

pub fn mse_on(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `Σ exp(−s_i)·l_i + s_i` for `l` and `s` both `1 × 3`.
pub fn weighted_total_on(g: &mut Graph, losses: Var, log_var: Var) -> Result<Var> {
    let neg = g.scale(log_var, -1.0);
    let precision = g.exp(neg);
    let weighted = g.mul(precision, losses)?;
    let terms = g.add(weighted, log_var)?;
    Ok(g.sum(terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sap: f64,
    pub l_tap: f64,
    pub l_reg: f64,
    pub weighted_total: f64,
    pub log_variances: [f64; 3],
}

fn scalar_graph(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

pub fn focal_loss(logits: &Tensor, targets: &Tensor, alpha: Option<f64>, gamma: f64) -> Result<f64> {
    scalar_graph(|g| {
        let z = g.constant(logits.clone());
        focal_on(g, z, targets, alpha, gamma)
    })
}

pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    scalar_graph(|g| {
        let p = g.constant(probs.clone());
        bce_on(g, p, targets)
    })
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Shape {
            op: "mse_loss",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    scalar_graph(|g| {
        let p = g.constant(Tensor::matrix(1, pred.len(), pred.to_vec())?);
        let t = g.constant(Tensor::matrix(1, target.len(), target.to_vec())?);
        mse_on(g, p, t)
    })
}

pub fn uncertainty_weighted_total(l: [f64; 3], s: [f64; 3]) -> Result<f64> {
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss components".into()));
    }
    scalar_graph(|g| {
        let l = g.constant(Tensor::matrix(1, 3, l.to_vec())?);
        let s = g.constant(Tensor::matrix(1, 3, s.to_vec())?);
        weighted_total_on(g, l, s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn focal_reduces_to_bce_without_class_weights() {
        let z = row(&[0.3, -1.2, 2.0, 0.0]);
        let t = row(&[1.0, 0.0, 0.0, 1.0]);
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let f = focal_loss(&z, &t, None, 0.0).unwrap();
        assert!((f - bce_loss(&p, &t).unwrap()).abs() < 1e-10);

        // alpha = 1 is the same thing when every target is positive
        let ones = row(&[1.0; 4]);
        let f1 = focal_loss(&z, &ones, Some(1.0), 0.0).unwrap();
        assert!((f1 - bce_loss(&p, &ones).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn focal_examples() {
        let big = row(&[800.0]);
        assert_eq!(focal_loss(&big, &row(&[1.0]), Some(0.25), 2.0).unwrap(), 0.0);
        let v = focal_loss(&row(&[0.0]), &row(&[1.0]), Some(0.25), 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * LN_2).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_rejects_bad_targets() {
        assert!(focal_loss(&row(&[0.0]), &row(&[0.5]), Some(0.25), 2.0).is_err());
        assert!(focal_loss(&row(&[0.0]), &row(&[1.0]), Some(0.0), 2.0).is_err());
    }

    #[test]
    fn bce_examples() {
        let t = row(&[1.0, 0.0, 1.0]);
        assert!(bce_loss(&t, &t).unwrap() < 1e-6);
        let half = bce_loss(&row(&[0.5, 0.5]), &row(&[1.0, 0.0])).unwrap();
        assert!((half - LN_2).abs() < 1e-15);
        let v = bce_loss(&row(&[0.9, 0.2]), &row(&[1.0, 0.0])).unwrap();
        assert!((v - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 0.16425).abs() < 1e-5);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse_loss(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(mse_loss(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weighted_total_examples() {
        assert_eq!(uncertainty_weighted_total([0.5, 1.5, 2.0], [0.0; 3]).unwrap(), 4.0);
        assert_eq!(uncertainty_weighted_total([0.0; 3], [1.0; 3]).unwrap(), 3.0);
        let v = uncertainty_weighted_total([1.0, 2.0, 3.0], [0.0, LN_2, LN_2]).unwrap();
        assert!((v - (1.0 + 1.0 + LN_2 + 1.5 + LN_2)).abs() < 1e-14);
        assert!((v - 4.886).abs() < 1e-3);
    }
}
