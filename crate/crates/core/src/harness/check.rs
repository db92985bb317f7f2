use super::config::{RunConfig, Variant};
use super::model::{batch_loss_on, init_model};
use crate::error::Result;
use crate::fusion::Sample;
use crate::numerics::{grad_check, GradCheckReport};
use crate::synthdata::{generate, GenConfig};

/// Central-difference step for whole-model checks, `2⁻²⁴`. A power of two
/// keeps `θ ± ε` exact, so a shift shared by query and exemplar cancels
/// bit-exactly; the small step keeps probes clear of LeakyReLU kinks.
pub const GRAD_EPSILON: f64 = 1.0 / 16_777_216.0;

/// A small model (D = 8, T = 5) and a two-sample batch for gradient checks.
pub fn grad_check_setup(variant: Variant, seed: u64) -> Result<(RunConfig, Vec<Sample>)> {
    let cfg = RunConfig {
        variant,
        seed,
        data: GenConfig {
            seed,
            n_train: 2,
            n_test: 0,
            snippets: 5,
            dim: 8,
            ..GenConfig::default()
        },
        ..RunConfig::default()
    };
    let (train, _) = generate(&cfg.data)?;
    Ok((cfg, train.samples))
}

/// Checks the mean weighted loss over `batch` at the initialisation of `cfg`.
pub fn grad_check_model(cfg: &RunConfig, batch: &[Sample], tol: f64) -> Result<Vec<GradCheckReport>> {
    let store = init_model(cfg)?;
    grad_check(|g, s| batch_loss_on(g, s, cfg, batch), &store, GRAD_EPSILON, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_passes() {
        for v in Variant::ALL {
            let (cfg, batch) = grad_check_setup(v, 3).unwrap();
            let reports = grad_check_model(&cfg, &batch, 1e-4).unwrap();
            assert!(!reports.is_empty());
            let bad: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
            assert!(bad.is_empty(), "{v}: {bad:?}");
        }
    }
}
