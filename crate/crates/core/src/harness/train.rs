use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AdamConfig, RunConfig};
use super::model::{check_variant, forward, init_model, sample_gradients, Boundaries};
use crate::error::{Error, Result};
use crate::fusion::Sample;
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate_records, MetricReport, PredictionRecord};
use crate::numerics::{ParamStore, Tensor};
use crate::synthdata::epoch_order;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters trained at the head learning rate; everything else is trunk.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("tap.") || name.starts_with("sap.")
}

/// Adam with decoupled first/second moments per parameter.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    /// One update; `lr` maps a parameter name to its learning rate.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| g.map(|_| 0.0));
            let v = self.v.entry(name.clone()).or_insert_with(|| g.map(|_| 0.0));
            let rate = lr(name);
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let grad = gd[i] + c.weight_decay * pd[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * grad;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * grad * grad;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                pd[i] -= rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over training samples.
    pub train: LossBreakdown,
    pub validation: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub params: ParamStore,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        check_variant(&ck.params, ck.config.variant)?;
        Ok(ck)
    }

    /// Writes the history as one JSON object per line.
    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.history {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Mean losses and gradients over a batch. Per-sample work runs in
/// parallel; reduction follows batch order so results are deterministic.
fn batch_step(
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &[&Sample],
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let per_sample: Vec<_> = batch
        .par_iter()
        .map(|s| sample_gradients(store, cfg, s))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut sum = LossBreakdown::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, g) in per_sample {
        sum.l_sap += l.l_sap / n;
        sum.l_tap += l.l_tap / n;
        sum.l_reg += l.l_reg / n;
        sum.weighted_total += l.weighted_total / n;
        sum.log_variances = l.log_variances;
        for (name, t) in g {
            let t = t.map(|v| v / n);
            match grads.get_mut(&name) {
                Some(acc) => *acc = acc.zip_map(&t, |a, b| a + b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    Ok((sum, grads))
}

/// Called after every epoch with the record just appended.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Mini-batch training with per-epoch seeded shuffling.
///
/// On a non-finite loss the error carries the checkpoint of the last
/// completed epoch.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    validation: Option<&[Sample]>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut store = init_model(cfg)?;
    let mut adam = Adam::new(cfg.adam);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let lr = |name: &str| {
        if is_head_param(name) {
            cfg.lr_heads
        } else {
            cfg.lr_trunk
        }
    };
    let snapshot = |store: &ParamStore, epoch: usize, history: &[EpochRecord]| Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: store.clone(),
        epoch,
        history: history.to_vec(),
    };

    for epoch in 0..cfg.epochs {
        let epoch_start = store.clone();
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut totals = LossBreakdown::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = batch_step(&store, cfg, &batch).and_then(|(l, g)| {
                if g.values().all(Tensor::is_finite) {
                    Ok((l, g))
                } else {
                    Err(Error::NonFinite("gradient".into()))
                }
            });
            let (l, g) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(snapshot(&epoch_start, epoch, &history)),
                    })
                }
                Err(e) => return Err(e),
            };
            let k = batch.len() as f64;
            totals.l_sap += l.l_sap * k;
            totals.l_tap += l.l_tap * k;
            totals.l_reg += l.l_reg * k;
            totals.weighted_total += l.weighted_total * k;
            seen += batch.len();
            adam.update(&mut store, &g, lr)?;
        }
        let n = seen as f64;
        let s = store.get(crate::losses::LOG_VARIANCES)?.data();
        let train_loss = LossBreakdown {
            l_sap: totals.l_sap / n,
            l_tap: totals.l_tap / n,
            l_reg: totals.l_reg / n,
            weighted_total: totals.weighted_total / n,
            log_variances: [s[0], s[1], s[2]],
        };
        let validation = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_params(&store, cfg, v)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            validation,
        });
        if let Some(h) = hook.as_mut() {
            h(history.last().expect("just pushed"));
        }
    }
    Ok(snapshot(&store, cfg.epochs, &history))
}

/// Per-sample predictions with decoded boundaries.
pub fn predict(store: &ParamStore, cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<PredictionRecord>> {
    samples
        .par_iter()
        .map(|s| {
            let p = forward(s, store, cfg, Boundaries::Decoded)?;
            let t = s.snippets();
            Ok(PredictionRecord {
                id: s.id,
                y_true: s.y_query,
                y_pred: p.score.y_query,
                intervals_true: s.query_boundaries.intervals(t),
                intervals_pred: p.boundaries.intervals(t),
            })
        })
        .collect()
}

pub fn evaluate_params(store: &ParamStore, cfg: &RunConfig, samples: &[Sample]) -> Result<MetricReport> {
    evaluate_records(&predict(store, cfg, samples)?)
}

/// Metrics on `samples` without teacher forcing.
pub fn evaluate(ck: &Checkpoint, samples: &[Sample]) -> Result<MetricReport> {
    evaluate_params(&ck.params, &ck.config, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Variant;
    use crate::synthdata::{generate, GenConfig};

    fn small(variant: Variant, epochs: usize) -> RunConfig {
        RunConfig {
            variant,
            epochs,
            batch_size: 4,
            data: GenConfig {
                n_train: 12,
                n_test: 6,
                snippets: 6,
                dim: 8,
                ..GenConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::matrix(1, 2, vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut store, &grads, |_| 0.1).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let cfg = small(Variant::Full, 0);
        let (train_set, _) = generate(&cfg.data).unwrap();
        let ck = train(&cfg, &train_set.samples, None, None).unwrap();
        assert_eq!(ck.params, init_model(&cfg).unwrap());
        assert!(ck.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reloadable() {
        let cfg = small(Variant::Full, 2);
        let (tr, te) = generate(&cfg.data).unwrap();
        let a = train(&cfg, &tr.samples, Some(&te.samples), None).unwrap();
        let b = train(&cfg, &tr.samples, Some(&te.samples), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 2);
        assert!(a.history[1].validation.is_some());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        a.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, a);
        assert_eq!(evaluate(&back, &te.samples).unwrap(), evaluate(&a, &te.samples).unwrap());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(train(&small(Variant::Baseline, 1), &[], None, None).is_err());
    }
}
