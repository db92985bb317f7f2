//! CSV export of GAT and TCA attention, plus a paired clean/corrupted
//! comparison of how the forward stage influences later stages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::model::{forward, Boundaries};
use super::train::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{sigmoid_fuse, FeatureStream, Sample, StreamId};
use crate::gat::NODE_LABELS;
use crate::numerics::Tensor;
use crate::tca::{Stage, STAGES};

/// Standard deviation of the noise replacing corrupted forward-stage snippets.
pub const CORRUPTION_STD: f64 = 3.0;

pub const GAT_FILE: &str = "gat_attention.csv";
pub const TCA_FILE: &str = "tca_attention.csv";
pub const GAT_SUMMARY_FILE: &str = "gat_attention_summary.csv";
pub const TCA_SUMMARY_FILE: &str = "tca_attention_summary.csv";
pub const FAILURE_FILE: &str = "failure_propagation.csv";

pub fn matrix_csv(labels: &[&str], m: &Tensor) -> String {
    let mut out = String::new();
    out.push_str("from\\to");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in m.row(i) {
            write!(out, ",{v}").expect("write to String");
        }
        out.push('\n');
    }
    out
}

/// Mean query-stage attention `A[target][source]` with and without
/// corrupted forward-stage input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailurePropagation {
    pub samples: usize,
    pub clean: Tensor,
    pub corrupted: Tensor,
}

impl FailurePropagation {
    /// `corrupted − clean` attention from the forward stage to each later stage.
    pub fn forward_influence_shift(&self) -> Vec<(Stage, f64)> {
        (1..STAGES)
            .map(|i| (Stage::ALL[i], self.corrupted.get(i, 0) - self.clean.get(i, 0)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,source,clean,corrupted,signed_difference\n");
        for i in 0..STAGES {
            for j in 0..=i {
                let (c, k) = (self.clean.get(i, j), self.corrupted.get(i, j));
                writeln!(
                    out,
                    "{},{},{c},{k},{}",
                    Stage::ALL[i],
                    Stage::ALL[j],
                    k - c
                )
                .expect("write to String");
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    pub gat_mean: Option<Tensor>,
    pub tca_mean: Option<Tensor>,
    pub failure: Option<FailurePropagation>,
}

/// Replaces the query's forward-stage snippets with seeded noise.
pub fn corrupt_forward_stage(sample: &Sample, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.id);
    let noise = Normal::new(0.0, CORRUPTION_STD).expect("positive std");
    let mut out = sample.clone();
    for i in 0..sample.query_boundaries.t1 {
        for t in [&mut out.query_original, &mut out.query_mask] {
            for k in 0..t.cols() {
                t.set(i, k, noise.sample(&mut rng));
            }
        }
    }
    out.query_fused = sigmoid_fuse(
        &FeatureStream::new(StreamId::QueryOriginal, out.query_original.clone())?,
        &FeatureStream::new(StreamId::QueryMask, out.query_mask.clone())?,
    )?
    .values;
    Ok(out)
}

fn mean(ms: &[Tensor]) -> Option<Tensor> {
    let first = ms.first()?;
    let mut acc = first.map(|_| 0.0);
    for m in ms {
        acc = acc.zip_map(m, |a, b| a + b);
    }
    Some(acc.map(|v| v / ms.len() as f64))
}

fn write(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text)?;
    files.push(path);
    Ok(())
}

/// Writes per-sample attention CSVs under `dir/sample_<id>/`, summaries
/// averaged over samples and, when TCA is present, the failure report.
pub fn export_attention(ck: &Checkpoint, samples: &[Sample], dir: &Path) -> Result<ExportSummary> {
    let cfg = &ck.config;
    if !cfg.variant.uses_gat() && !cfg.variant.uses_tca() {
        return Err(Error::invalid(format!(
            "variant {} has no attention module to export",
            cfg.variant
        )));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no samples to export"));
    }
    std::fs::create_dir_all(dir)?;
    let stage_labels: Vec<&str> = Stage::ALL.iter().map(|s| s.label()).collect();
    let mut files = Vec::new();
    let (mut gats, mut tcas, mut corrupted) = (Vec::new(), Vec::new(), Vec::new());

    for s in samples {
        let given = Boundaries::Given(s.query_boundaries, s.exemplar_boundaries);
        let p = forward(s, &ck.params, cfg, given)?;
        let sub = dir.join(format!("sample_{:05}", s.id));
        std::fs::create_dir_all(&sub)?;
        if let Some(a) = p.attention.gat {
            write(sub.join(GAT_FILE), &matrix_csv(&NODE_LABELS, &a), &mut files)?;
            gats.push(a);
        }
        if let Some(a) = p.attention.tca {
            write(sub.join(TCA_FILE), &matrix_csv(&stage_labels, &a), &mut files)?;
            tcas.push(a);
            let bad = corrupt_forward_stage(s, cfg.seed)?;
            let pc = forward(&bad, &ck.params, cfg, given)?;
            corrupted.push(pc.attention.tca.expect("variant has TCA"));
        }
    }

    let gat_mean = mean(&gats);
    let tca_mean = mean(&tcas);
    if let Some(m) = &gat_mean {
        write(dir.join(GAT_SUMMARY_FILE), &matrix_csv(&NODE_LABELS, m), &mut files)?;
    }
    if let Some(m) = &tca_mean {
        write(dir.join(TCA_SUMMARY_FILE), &matrix_csv(&stage_labels, m), &mut files)?;
    }
    let failure = match (&tca_mean, mean(&corrupted)) {
        (Some(clean), Some(bad)) => {
            let f = FailurePropagation {
                samples: samples.len(),
                clean: clean.clone(),
                corrupted: bad,
            };
            write(dir.join(FAILURE_FILE), &f.to_csv(), &mut files)?;
            Some(f)
        }
        _ => None,
    };
    Ok(ExportSummary {
        files,
        gat_mean,
        tca_mean,
        failure,
    })
}

/// Parses a labelled square matrix written by [`matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file"))?;
    let labels: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        for cell in line.split(',').skip(1) {
            data.push(cell.parse::<f64>().map_err(|e| err(i + 2, &e.to_string()))?);
        }
    }
    let n = labels.len();
    Ok((labels, Tensor::matrix(n, n, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::matrix(2, 2, vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, matrix_csv(&["a", "b"], &m)).unwrap();
        let (labels, back) = read_matrix_csv(&path).unwrap();
        assert_eq!(labels, ["a", "b"]);
        assert_eq!(back, m);
    }

    #[test]
    fn failure_report_lists_lower_triangle() {
        let clean = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5]).unwrap();
        let corrupted =
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.7, 0.3, 0.0, 0.4, 0.2, 0.4]).unwrap();
        let f = FailurePropagation {
            samples: 1,
            clean,
            corrupted,
        };
        assert_eq!(f.to_csv().lines().count(), 7);
        let shift = f.forward_influence_shift();
        assert!((shift[0].1 - 0.2).abs() < 1e-12);
        assert!((shift[1].1 - 0.2).abs() < 1e-12);
    }
}
