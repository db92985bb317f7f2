//! Trains one variant on a generated benchmark and evaluates it on the test split.
//!
//! cargo run --release --example train_eval -- [variant] [seed] [c_train] [c_test] [epochs]

use std::time::Instant;

use aqa_causal::harness::{evaluate, train, RunConfig, Variant};
use aqa_causal::synthdata::{generate, GenConfig};

fn main() -> aqa_causal::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let variant: Variant = arg(0, "full").parse()?;
    let seed: u64 = arg(1, "0").parse().expect("seed");
    let cfg = RunConfig {
        variant,
        seed,
        epochs: arg(4, "20").parse().expect("epochs"),
        data: GenConfig {
            seed,
            c_train: arg(2, "0").parse().expect("c_train"),
            c_test: arg(3, "0").parse().expect("c_test"),
            ..GenConfig::default()
        },
        ..RunConfig::default()
    };
    let (train_set, test_set) = generate(&cfg.data)?;
    let start = Instant::now();
    let mut hook = |r: &aqa_causal::harness::EpochRecord| {
        let v = r.validation.as_ref().expect("validation set given");
        println!(
            "epoch {:>2}  L_sap {:.4}  L_tap {:.4}  L_reg {:.5}  total {:.4}  | test rho {:.4}  R-l2 {:.4}  AIoU@0.5 {:.3}",
            r.epoch, r.train.l_sap, r.train.l_tap, r.train.l_reg, r.train.weighted_total,
            v.rho, v.r_l2_x100, v.aiou_at(0.5)
        );
    };
    let ck = train(&cfg, &train_set.samples, Some(&test_set.samples), Some(&mut hook))?;
    println!("trained {variant} in {:.1?}", start.elapsed());
    let train_report = evaluate(&ck, &train_set.samples)?;
    let test_report = evaluate(&ck, &test_set.samples)?;
    println!("train: {}", serde_json::to_string(&train_report.flat())?);
    println!("test:  {}", serde_json::to_string(&test_report.flat())?);
    Ok(())
}
