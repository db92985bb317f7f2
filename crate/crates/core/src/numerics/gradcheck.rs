use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Coordinates checked per parameter when it has more scalars than this.
pub const SAMPLED_COORDS: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub parameter: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `loss` with central finite
/// differences on every parameter in `store`.
///
/// The relative error of a parameter is `max_k |a_k − n_k|` divided by
/// `max(max_k |a_k|, max_k |n_k|, 1e-8)` over its checked coordinates, so
/// coordinates whose true gradient is zero are judged against the
/// tensor's gradient scale rather than against finite-difference roundoff.
///
/// `loss` records a scalar on the supplied graph, binding parameters via
/// [`Graph::param`]. It must be deterministic.
pub fn grad_check<F>(loss: F, store: &ParamStore, epsilon: f64, tol: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("grad_check epsilon must be positive"));
    }
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic: std::collections::HashMap<String, _> =
        g.param_grads(&grads).into_iter().collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, s)?;
        let x = g.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFinite("grad_check loss evaluation".into()));
        }
        Ok(x)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut probe = store.clone();
    let mut reports = Vec::new();
    for (name, value) in store.iter() {
        let n = value.len();
        let coords: Vec<usize> = if n > SAMPLED_COORDS {
            let mut c = sample(&mut rng, n, SAMPLED_COORDS).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        let zero = value.map(|_| 0.0);
        let a = analytic.get(name).unwrap_or(&zero);

        let (mut max_diff, mut scale) = (0.0f64, 1e-8f64);
        for &i in &coords {
            let orig = value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let an = a.data()[i];
            max_diff = max_diff.max((an - numeric).abs());
            scale = scale.max(an.abs()).max(numeric.abs());
        }
        let max_rel = max_diff / scale;
        reports.push(GradCheckReport {
            parameter: name.to_string(),
            max_rel_error: max_rel,
            tolerance: tol,
            passed: max_rel <= tol,
            coords_checked: coords.len(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(3.0)).unwrap();
        let reports = grad_check(
            |g, s| {
                let t = g.param(s, "theta")?;
                g.mul(t, t)
            },
            &store,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].passed, "{reports:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(3.0)).unwrap();
        let reports = grad_check(
            |g, s| {
                g.param(s, "theta")?;
                Ok(g.constant(Tensor::scalar(4.0)))
            },
            &store,
            1e-6,
            1e-12,
        )
        .unwrap();
        assert_eq!(reports[0].max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // kink of the clamp sits exactly on theta
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(1.0)).unwrap();
        let reports = grad_check(
            |g, s| {
                let t = g.param(s, "theta")?;
                let c = g.clamp(t, 1.0, 2.0);
                g.mul(c, c)
            },
            &store,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!reports[0].passed);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(
            |g, s| {
                let t = g.param(s, "theta")?;
                Ok(g.log(t))
            },
            &store,
            1e-6,
            1e-4,
        );
        assert!(r.is_err());
    }
}
