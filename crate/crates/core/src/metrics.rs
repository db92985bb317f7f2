//! Score and boundary metrics: Spearman's ρ, relative ℓ2 (×100) and AIoU@τ.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tca::STAGES;

pub const AIOU_THRESHOLDS: [f64; 2] = [0.5, 0.75];

/// Half-open snippet interval `[start, end)`.
pub type Interval = (usize, usize);
pub type StageIntervals = [Interval; STAGES];

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![y_true.len()],
            rhs: vec![y_pred.len()],
        });
    }
    if y_true.len() < 2 {
        return Err(Error::invalid("metrics need at least two samples"));
    }
    if y_true.iter().chain(y_pred).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Pearson correlation of average ranks.
pub fn spearman(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    pearson(&average_ranks(y_true), &average_ranks(y_pred))
}

/// `100 · mean((|y − ŷ| / (max y − min y))²)` over the ground-truth range.
pub fn relative_l2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let max = y_true.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y_true.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return Err(Error::UndefinedCorrelation("ground-truth scores have zero range"));
    }
    let n = y_true.len() as f64;
    let mse: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| ((y - p).abs() / range).powi(2))
        .sum::<f64>()
        / n;
    Ok(100.0 * mse)
}

fn interval_iou(a: Interval, b: Interval) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

/// Mean over stages of interval IoU for one sample.
pub fn sample_iou(truth: &StageIntervals, pred: &StageIntervals) -> Result<f64> {
    for iv in truth.iter().chain(pred) {
        if iv.1 <= iv.0 {
            return Err(Error::invalid(format!("empty interval {iv:?}")));
        }
    }
    Ok(truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| interval_iou(t, p))
        .sum::<f64>()
        / STAGES as f64)
}

/// Fraction of samples whose mean stage IoU is at least each threshold.
/// Keys are formatted as `aiou@<τ>`.
pub fn aiou(
    truth: &[StageIntervals],
    pred: &[StageIntervals],
    thresholds: &[f64],
) -> Result<BTreeMap<String, f64>> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape {
            op: "aiou",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    let ious = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| sample_iou(t, p))
        .collect::<Result<Vec<_>>>()?;
    let n = ious.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let hits = ious.iter().filter(|&&iou| iou >= tau).count();
            (aiou_key(tau), hits as f64 / n)
        })
        .collect())
}

pub fn aiou_key(tau: f64) -> String {
    format!("aiou@{tau}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rho: f64,
    pub r_l2_x100: f64,
    pub aiou: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn aiou_at(&self, tau: f64) -> f64 {
        self.aiou.get(&aiou_key(tau)).copied().unwrap_or(f64::NAN)
    }

    /// Flat `{rho, r_l2_x100, aiou@0.5, aiou@0.75}` view.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = self.aiou.clone();
        m.insert("rho".into(), self.rho);
        m.insert("r_l2_x100".into(), self.r_l2_x100);
        m
    }
}

/// Per-sample predictions, one JSON object per line in prediction files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub y_true: f64,
    pub y_pred: f64,
    pub intervals_true: StageIntervals,
    pub intervals_pred: StageIntervals,
}

pub fn evaluate_records(records: &[PredictionRecord]) -> Result<MetricReport> {
    let y_true: Vec<f64> = records.iter().map(|r| r.y_true).collect();
    let y_pred: Vec<f64> = records.iter().map(|r| r.y_pred).collect();
    let it: Vec<StageIntervals> = records.iter().map(|r| r.intervals_true).collect();
    let ip: Vec<StageIntervals> = records.iter().map(|r| r.intervals_pred).collect();
    Ok(MetricReport {
        rho: spearman(&y_true, &y_pred)?,
        r_l2_x100: relative_l2(&y_true, &y_pred)?,
        aiou: aiou(&it, &ip, &AIOU_THRESHOLDS)?,
    })
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&y, &y).unwrap(), 1.0);
        let rev: Vec<f64> = y.iter().rev().copied().collect();
        assert_eq!(spearman(&y, &rev).unwrap(), -1.0);
        let p = [1.0, 3.0, 2.0, 4.0, 5.0];
        assert!((spearman(&y, &p).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn relative_l2_examples() {
        let y = [3.0, 8.0, 1.0];
        assert_eq!(relative_l2(&y, &y).unwrap(), 0.0);
        assert!((relative_l2(&[0.0, 100.0], &[10.0, 100.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(relative_l2(&[5.0, 5.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aiou_examples() {
        let a: StageIntervals = [(0, 3), (3, 6), (6, 9)];
        let m = aiou(&[a], &[a], &AIOU_THRESHOLDS).unwrap();
        assert_eq!(m["aiou@0.5"], 1.0);
        assert_eq!(m["aiou@0.75"], 1.0);

        // every predicted stage sits inside a different true stage
        let disjoint: StageIntervals = [(6, 9), (0, 3), (3, 6)];
        let m = aiou(&[a], &[disjoint], &AIOU_THRESHOLDS).unwrap();
        assert_eq!(m["aiou@0.5"], 0.0);
        assert_eq!(m["aiou@0.75"], 0.0);

        // IoUs 1, 0.5 and 0.3 average to 0.6
        let t: StageIntervals = [(0, 4), (4, 6), (6, 16)];
        let p: StageIntervals = [(0, 4), (4, 8), (8, 11)];
        assert!((sample_iou(&t, &p).unwrap() - 0.6).abs() < 1e-12);
        let m = aiou(&[t], &[p], &AIOU_THRESHOLDS).unwrap();
        assert_eq!(m["aiou@0.5"], 1.0);
        assert_eq!(m["aiou@0.75"], 0.0);
    }

    #[test]
    fn empty_interval_is_error() {
        let a: StageIntervals = [(0, 3), (3, 3), (3, 9)];
        assert!(aiou(&[a], &[a], &AIOU_THRESHOLDS).is_err());
    }

    #[test]
    fn prediction_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.jsonl");
        let recs = vec![
            PredictionRecord {
                id: 1,
                y_true: 40.0,
                y_pred: 42.5,
                intervals_true: [(0, 3), (3, 6), (6, 9)],
                intervals_pred: [(0, 2), (2, 6), (6, 9)],
            },
            PredictionRecord {
                id: 2,
                y_true: 70.0,
                y_pred: 66.0,
                intervals_true: [(0, 3), (3, 6), (6, 9)],
                intervals_pred: [(0, 3), (3, 6), (6, 9)],
            },
        ];
        write_predictions(&path, &recs).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, recs);
        let report = evaluate_records(&back).unwrap();
        assert_eq!(report.rho, 1.0);
        let keys: Vec<_> = report.flat().into_keys().collect();
        assert_eq!(keys, ["aiou@0.5", "aiou@0.75", "r_l2_x100", "rho"]);
    }
}
