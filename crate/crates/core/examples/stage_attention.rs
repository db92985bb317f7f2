//! Pools a video into forward/twist/entry stages and refines them with
//! causal stage attention; shows the masked 3×3 matrix and that editing
//! the entry stage leaves earlier stages untouched.

use aqa_causal::numerics::ParamStore;
use aqa_causal::synthdata::{generate, GenConfig};
use aqa_causal::tca::{init_params, pool_stages, stage_influence, tca_forward, Stage, DEFAULT_HEADS, WEAK_TRANSITION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aqa_causal::Result<()> {
    let cfg = GenConfig { n_train: 1, n_test: 0, ..GenConfig::default() };
    let (train, _) = generate(&cfg)?;
    let s = &train.samples[0];
    let stages = pool_stages(&s.query_fused, s.query_boundaries)?;
    println!("boundaries t1={} t2={} over T={}", stages.boundaries.t1, stages.boundaries.t2, s.snippets());

    let mut store = ParamStore::new();
    init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1), cfg.dim, DEFAULT_HEADS)?;
    let (refined, attn) = tca_forward(&stages.values, &store)?;
    for (i, st) in Stage::ALL.iter().enumerate() {
        let row: String = attn.row(i).iter().map(|v| format!("{v:>8.4}")).collect();
        println!("{:>8} {row}", st.label());
    }
    for inf in stage_influence(&attn, WEAK_TRANSITION)? {
        println!("{} -> {}: {:.4}{}", inf.source, inf.target, inf.weight, if inf.weak { " (weak)" } else { "" });
    }

    let mut edited = stages.values.clone();
    for k in 0..edited.cols() {
        edited.set(2, k, edited.get(2, k) + 10.0);
    }
    let (refined2, _) = tca_forward(&edited, &store)?;
    let moved = |r: usize| (0..refined.cols()).map(|k| (refined.get(r, k) - refined2.get(r, k)).abs()).fold(0.0, f64::max);
    println!("entry edited: forward moved {:.1e}, twist moved {:.1e}, entry moved {:.3}", moved(0), moved(1), moved(2));
    Ok(())
}
