//! Sigmoid fusion versus the two-layer GAT intervention on one generated
//! pair: fused-feature magnitudes, the 4×4 stream attention and λ.

use aqa_causal::gat::{deconfound, init_params, LAMBDA, NODE_LABELS};
use aqa_causal::gat::DEFAULT_ATTN_DIM;
use aqa_causal::numerics::ParamStore;
use aqa_causal::synthdata::{generate, GenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aqa_causal::Result<()> {
    let cfg = GenConfig {
        n_train: 1,
        n_test: 0,
        c_train: 0.9,
        ..GenConfig::default()
    };
    let (train, _) = generate(&cfg)?;
    let s = &train.samples[0];
    let half = cfg.mask_dim();

    let mean_abs = |t: &aqa_causal::numerics::Tensor, fg: bool| {
        let cols = if fg { 0..half } else { half..cfg.dim };
        let n = (t.rows() * cols.len()) as f64;
        (0..t.rows())
            .flat_map(|i| cols.clone().map(move |k| (i, k)))
            .map(|(i, k)| t.get(i, k).abs())
            .sum::<f64>()
            / n
    };
    println!("query |O| foreground {:.3}  background {:.3}", mean_abs(&s.query_original, true), mean_abs(&s.query_original, false));
    println!("query |F| foreground {:.3}  background {:.3}", mean_abs(&s.query_fused, true), mean_abs(&s.query_fused, false));

    let mut store = ParamStore::new();
    init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg.dim, DEFAULT_ATTN_DIM)?;
    let out = deconfound(s, &store)?;
    println!("refined query {:?}, exemplar {:?}, lambda {}", out.query.shape(), out.exemplar.shape(), store.get(LAMBDA)?.item());
    println!("mean layer-1 attention (rows attend to columns):");
    println!("      {}", NODE_LABELS.map(|l| format!("{l:>7}")).join(""));
    for (i, l) in NODE_LABELS.iter().enumerate() {
        let row: String = out.attention.row(i).iter().map(|v| format!("{v:>7.3}")).collect();
        println!("  {l:>3} {row}");
    }
    Ok(())
}
