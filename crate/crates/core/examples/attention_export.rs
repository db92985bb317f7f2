//! Trains the full model briefly, exports attention CSVs for a few test
//! pairs and prints the forward-stage failure-propagation comparison.
//!
//! cargo run --release --example attention_export -- [out_dir]

use std::path::PathBuf;

use aqa_causal::harness::{export_attention, train, RunConfig};
use aqa_causal::synthdata::{generate, GenConfig};
use aqa_causal::tca::Stage;

fn main() -> aqa_causal::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "attention_out".into()).into();
    let cfg = RunConfig {
        epochs: 5,
        data: GenConfig { n_train: 200, n_test: 20, ..GenConfig::default() },
        ..RunConfig::default()
    };
    let (train_set, test_set) = generate(&cfg.data)?;
    let ck = train(&cfg, &train_set.samples, None, None)?;
    let summary = export_attention(&ck, &test_set.samples[..8], &out)?;
    println!("wrote {} files under {}", summary.files.len(), out.display());

    if let Some(gat) = &summary.gat_mean {
        println!("mean GAT attention, fused query row: {:?}", gat.row(1));
    }
    if let Some(f) = &summary.failure {
        for i in 0..3 {
            let row = |m: &aqa_causal::numerics::Tensor| m.row(i)[..=i].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
            println!("{:>8}: clean [{}]  corrupted [{}]", Stage::ALL[i].label(), row(&f.clean), row(&f.corrupted));
        }
        for (stage, shift) in f.forward_influence_shift() {
            println!("forward -> {stage}: {shift:+.4}");
        }
    }
    Ok(())
}
