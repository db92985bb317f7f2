//! Finite-difference check of every parameter's gradient for each variant
//! on a two-pair batch (D = 8, T = 5).

use std::time::Instant;

use aqa_causal::harness::{grad_check_model, grad_check_setup, Variant};

fn main() -> aqa_causal::Result<()> {
    for v in Variant::ALL {
        let start = Instant::now();
        let (cfg, batch) = grad_check_setup(v, 0)?;
        let reports = grad_check_model(&cfg, &batch, 1e-4)?;
        let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("parameters");
        println!(
            "{v:<9} {:>2}/{} pass  worst {} {:.2e}  ({:.2?})",
            reports.iter().filter(|r| r.passed).count(),
            reports.len(),
            worst.parameter,
            worst.max_rel_error,
            start.elapsed()
        );
    }
    Ok(())
}
