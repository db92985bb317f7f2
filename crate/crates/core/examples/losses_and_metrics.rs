//! Loss functions and evaluation metrics on small hand-made inputs.

use aqa_causal::losses::{bce_loss, focal_loss, mse_loss, uncertainty_weighted_total, FOCAL_ALPHA, FOCAL_GAMMA};
use aqa_causal::metrics::{aiou, relative_l2, spearman, AIOU_THRESHOLDS};
use aqa_causal::numerics::Tensor;

fn main() -> aqa_causal::Result<()> {
    let logits = Tensor::from_rows(&[vec![2.0, -1.0], vec![-3.0, 0.5]])?;
    let targets = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    println!("focal (alpha {FOCAL_ALPHA}, gamma {FOCAL_GAMMA}): {:.6}", focal_loss(&logits, &targets, Some(FOCAL_ALPHA), FOCAL_GAMMA)?);
    println!("focal gamma 0, no alpha:       {:.6}", focal_loss(&logits, &targets, None, 0.0)?);
    let probs = logits.map(|z| 1.0 / (1.0 + (-z).exp()));
    println!("bce on sigmoid(logits):        {:.6}", bce_loss(&probs, &targets)?);
    println!("mse:                           {:.6}", mse_loss(&[1.0, 2.0], &[1.5, 1.0])?);
    println!("weighted total, s = 0:         {:.6}", uncertainty_weighted_total([0.2, 0.3, 0.1], [0.0; 3])?);

    let y = [10.0, 40.0, 55.0, 70.0, 95.0];
    let good = [12.0, 38.0, 60.0, 69.0, 90.0];
    let tied = [20.0, 20.0, 50.0, 50.0, 80.0];
    println!("spearman good {:.4}, with ties {:.4}", spearman(&y, &good)?, spearman(&y, &tied)?);
    println!("R-l2 x100 good {:.4}", relative_l2(&y, &good)?);

    let truth = vec![[(0, 3), (3, 6), (6, 9)]; 2];
    let pred = vec![[(0, 3), (3, 6), (6, 9)], [(0, 4), (4, 6), (6, 9)]];
    for (k, v) in aiou(&truth, &pred, &AIOU_THRESHOLDS)? {
        println!("{k}: {v}");
    }
    Ok(())
}
