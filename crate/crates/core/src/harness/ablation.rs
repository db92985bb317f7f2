use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::train::{evaluate, train};
use crate::error::{Error, Result};
use crate::fusion::Sample;
use crate::metrics::MetricReport;
use crate::synthdata::generate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricReport,
}

/// Test-set metrics of every variant trained on the same data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

pub const CSV_HEADER: &str = "variant,rho,r_l2_x100,aiou@0.5,aiou@0.75";

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&MetricReport> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.report)
    }

    pub fn is_complete(&self) -> bool {
        Variant::ALL.iter().all(|&v| self.get(v).is_some())
            && self.rows.iter().all(|r| {
                let m = &r.report;
                [m.rho, m.r_l2_x100, m.aiou_at(0.5), m.aiou_at(0.75)]
                    .iter()
                    .all(|x| x.is_finite())
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.report;
            writeln!(
                out,
                "{},{},{},{},{}",
                r.variant,
                m.rho,
                m.r_l2_x100,
                m.aiou_at(0.5),
                m.aiou_at(0.75)
            )
            .expect("write to String");
        }
        out
    }

    /// Fixed-width text table, one row per variant.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>8} {:>12} {:>10} {:>10}\n",
            "Method", "rho", "R-l2(x100)", "AIoU@0.5", "AIoU@0.75"
        );
        out.push_str(&"-".repeat(54));
        out.push('\n');
        for r in &self.rows {
            let m = &r.report;
            writeln!(
                out,
                "{:<10} {:>8.4} {:>12.4} {:>10.4} {:>10.4}",
                r.variant.key(),
                m.rho,
                m.r_l2_x100,
                m.aiou_at(0.5),
                m.aiou_at(0.75)
            )
            .expect("write to String");
        }
        out
    }
}

/// Trains `variants` on `train_set` and evaluates on `test_set`.
/// Variants train concurrently; each run is independently deterministic.
pub fn run_variants(
    base: &RunConfig,
    variants: &[Variant],
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<AblationReport> {
    if test_set.is_empty() {
        return Err(Error::invalid("ablation needs a non-empty test set"));
    }
    let rows = variants
        .par_iter()
        .map(|&v| {
            let ck = train(&base.with_variant(v), train_set, None, None)?;
            Ok(AblationRow {
                variant: v,
                report: evaluate(&ck, test_set)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        seed: base.seed,
        rows,
    })
}

/// Generates data from `base.data` and runs all four variants.
pub fn run_ablation(base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    let (train_set, test_set) = generate(&base.data)?;
    run_variants(base, &Variant::ALL, &train_set.samples, &test_set.samples)
}
