//! Trains all four variants on one benchmark and prints the table.
//!
//! cargo run --release --example ablation -- [seed] [c_train] [c_test] [epochs]

use aqa_causal::harness::{run_ablation, RunConfig};
use aqa_causal::synthdata::GenConfig;

fn main() -> aqa_causal::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let seed: u64 = arg(0, "0").parse().expect("seed");
    let cfg = RunConfig {
        seed,
        epochs: arg(3, "20").parse().expect("epochs"),
        data: GenConfig {
            seed,
            c_train: arg(1, "0").parse().expect("c_train"),
            c_test: arg(2, "0").parse().expect("c_test"),
            ..GenConfig::default()
        },
        ..RunConfig::default()
    };
    let report = run_ablation(&cfg)?;
    print!("{}", report.render_table());
    println!("\n{}", report.to_csv());
    Ok(())
}
