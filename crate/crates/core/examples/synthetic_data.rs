//! Generates a confounded benchmark, writes it as JSONL, reads it back and
//! measures how strongly the background confounder tracks the score.
//!
//! cargo run --release --example synthetic_data -- [c_train] [c_test]

use aqa_causal::synthdata::{generate, read_dataset, write_dataset, Dataset, GenConfig};

fn corr(set: &Dataset) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = set
        .samples
        .iter()
        .map(|s| (s.confounder.expect("generated").0, s.y_query))
        .unzip();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn main() -> aqa_causal::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("number")).collect();
    let cfg = GenConfig {
        c_train: args.first().copied().unwrap_or(0.9),
        c_test: args.get(1).copied().unwrap_or(0.0),
        ..GenConfig::default()
    };
    let (train, test) = generate(&cfg)?;
    let dir = tempfile::tempdir()?;
    for set in [&train, &test] {
        let path = dir.path().join(format!("{:?}.jsonl", set.split).to_lowercase());
        write_dataset(set, &path)?;
        let back = read_dataset(&path)?;
        assert_eq!(&back, set);
        println!(
            "{:?}: {} pairs, {} bytes, corr(confounder, score) = {:+.3}",
            set.split,
            set.samples.len(),
            std::fs::metadata(&path)?.len(),
            corr(set)
        );
    }
    let s = &train.samples[0];
    println!(
        "first pair: type {}, y_query {:.2}, y_exemplar {:.2}, query stages at {:?}",
        s.action_type, s.y_query, s.y_exemplar, s.query_boundaries
    );
    Ok(())
}
