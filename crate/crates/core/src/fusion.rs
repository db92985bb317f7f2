//! Input feature streams and the sigmoid-gated fusion baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::tca::StageBoundaries;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamId {
    QueryOriginal,
    QueryMask,
    ExemplarOriginal,
    ExemplarMask,
}

impl StreamId {
    pub const ALL: [StreamId; 4] = [
        Self::QueryOriginal,
        Self::QueryMask,
        Self::ExemplarOriginal,
        Self::ExemplarMask,
    ];

    /// Short key used in dataset files.
    pub fn key(self) -> &'static str {
        match self {
            Self::QueryOriginal => "qo",
            Self::QueryMask => "qm",
            Self::ExemplarOriginal => "eo",
            Self::ExemplarMask => "em",
        }
    }

    pub fn video(self) -> Video {
        match self {
            Self::QueryOriginal | Self::QueryMask => Video::Query,
            Self::ExemplarOriginal | Self::ExemplarMask => Video::Exemplar,
        }
    }

    pub fn is_mask(self) -> bool {
        matches!(self, Self::QueryMask | Self::ExemplarMask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Video {
    Query,
    Exemplar,
}

/// `T × D` features of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub id: StreamId,
    pub values: Tensor,
}

impl FeatureStream {
    pub fn new(id: StreamId, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "stream {} must be a T×D matrix, got {:?}",
                id.key(),
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite(format!("stream {}", id.key())));
        }
        Ok(Self { id, values })
    }

    pub fn snippets(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedStream {
    pub video: Video,
    pub values: Tensor,
}

/// `F = O ⊙ sigmoid(M)` elementwise.
pub fn sigmoid_fuse(original: &FeatureStream, mask: &FeatureStream) -> Result<FusedStream> {
    if original.id.is_mask() || !mask.id.is_mask() {
        return Err(Error::invalid("sigmoid_fuse expects (original, mask) streams"));
    }
    if original.id.video() != mask.id.video() {
        return Err(Error::invalid(format!(
            "cannot fuse {} with {}: different videos",
            original.id.key(),
            mask.id.key()
        )));
    }
    let mut g = Graph::new();
    let o = g.constant(original.values.clone());
    let m = g.constant(mask.values.clone());
    let f = fuse_on(&mut g, o, m)?;
    Ok(FusedStream {
        video: original.id.video(),
        values: g.value(f).clone(),
    })
}

/// Differentiable fusion on a graph.
pub fn fuse_on(g: &mut Graph, original: Var, mask: Var) -> Result<Var> {
    let gate = g.sigmoid(mask);
    g.mul(original, gate)
}

/// One query/exemplar pair with all supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub action_type: u32,
    pub query_original: Tensor,
    pub query_mask: Tensor,
    pub exemplar_original: Tensor,
    pub exemplar_mask: Tensor,
    pub query_fused: Tensor,
    pub exemplar_fused: Tensor,
    pub query_boundaries: StageBoundaries,
    pub exemplar_boundaries: StageBoundaries,
    pub query_mask_targets: Tensor,
    pub exemplar_mask_targets: Tensor,
    pub y_query: f64,
    pub y_exemplar: f64,
    /// Background confounder values `(query, exemplar)` when known.
    pub confounder: Option<(f64, f64)>,
}

/// Everything about a sample except its feature streams.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub id: u64,
    pub action_type: u32,
    pub query_boundaries: StageBoundaries,
    pub exemplar_boundaries: StageBoundaries,
    pub query_mask_targets: Tensor,
    pub exemplar_mask_targets: Tensor,
    pub y_query: f64,
    pub y_exemplar: f64,
    pub confounder: Option<(f64, f64)>,
}

impl Sample {
    pub fn snippets(&self) -> usize {
        self.query_original.rows()
    }

    pub fn dim(&self) -> usize {
        self.query_original.cols()
    }

    pub fn stream(&self, id: StreamId) -> &Tensor {
        match id {
            StreamId::QueryOriginal => &self.query_original,
            StreamId::QueryMask => &self.query_mask,
            StreamId::ExemplarOriginal => &self.exemplar_original,
            StreamId::ExemplarMask => &self.exemplar_mask,
        }
    }
}

/// Assembles a [`Sample`] from its four streams and precomputes fusion.
pub fn make_sample(streams: Vec<FeatureStream>, meta: SampleMeta) -> Result<Sample> {
    let take = |id: StreamId| -> Result<FeatureStream> {
        let mut found = streams.iter().filter(|s| s.id == id);
        let s = found.next().ok_or(Error::MissingStream(id.key()))?;
        if found.next().is_some() {
            return Err(Error::invalid(format!("stream {} given twice", id.key())));
        }
        Ok(s.clone())
    };
    let [qo, qm, eo, em] = StreamId::ALL.map(take);
    let (qo, qm, eo, em) = (qo?, qm?, eo?, em?);

    let (t, d) = (qo.snippets(), qo.dim());
    for s in [&qm, &eo, &em] {
        if s.snippets() != t || s.dim() != d {
            return Err(Error::Shape {
                op: "make_sample",
                lhs: qo.values.shape().to_vec(),
                rhs: s.values.shape().to_vec(),
            });
        }
    }
    meta.query_boundaries.check(t)?;
    meta.exemplar_boundaries.check(t)?;
    for m in [&meta.query_mask_targets, &meta.exemplar_mask_targets] {
        if m.rows() != t {
            return Err(Error::Shape {
                op: "make_sample mask targets",
                lhs: qo.values.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask targets must be 0/1"));
        }
    }

    let qf = sigmoid_fuse(&qo, &qm)?;
    let ef = sigmoid_fuse(&eo, &em)?;
    Ok(Sample {
        id: meta.id,
        action_type: meta.action_type,
        query_original: qo.values,
        query_mask: qm.values,
        exemplar_original: eo.values,
        exemplar_mask: em.values,
        query_fused: qf.values,
        exemplar_fused: ef.values,
        query_boundaries: meta.query_boundaries,
        exemplar_boundaries: meta.exemplar_boundaries,
        query_mask_targets: meta.query_mask_targets,
        exemplar_mask_targets: meta.exemplar_mask_targets,
        y_query: meta.y_query,
        y_exemplar: meta.y_exemplar,
        confounder: meta.confounder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore};

    fn stream(id: StreamId, rows: &[Vec<f64>]) -> FeatureStream {
        FeatureStream::new(id, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn zero_mask_halves() {
        let o = stream(StreamId::QueryOriginal, &[vec![2.0, -4.0], vec![1.0, 0.5]]);
        let m = stream(StreamId::QueryMask, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let f = sigmoid_fuse(&o, &m).unwrap();
        assert_eq!(f.values.data(), &[1.0, -2.0, 0.5, 0.25]);
        assert_eq!(f.video, Video::Query);
    }

    #[test]
    fn saturated_gate_passes_original() {
        let o = stream(StreamId::ExemplarOriginal, &[vec![2.0, -4.0]]);
        let m = stream(StreamId::ExemplarMask, &[vec![100.0, 100.0]]);
        let f = sigmoid_fuse(&o, &m).unwrap();
        assert!(f.values.max_abs_diff(&o.values) < 1e-10);
    }

    #[test]
    fn closed_form_gate() {
        let o = stream(StreamId::QueryOriginal, &[vec![2.0, -2.0]]);
        let m = stream(StreamId::QueryMask, &[vec![3f64.ln(), 0.0]]);
        let f = sigmoid_fuse(&o, &m).unwrap();
        assert!((f.values.get(0, 0) - 1.5).abs() < 1e-15);
        assert!((f.values.get(0, 1) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_cross_video_and_shape_mismatch() {
        let o = stream(StreamId::QueryOriginal, &[vec![1.0, 1.0]]);
        let m = stream(StreamId::ExemplarMask, &[vec![1.0, 1.0]]);
        assert!(sigmoid_fuse(&o, &m).is_err());
        let m2 = stream(StreamId::QueryMask, &[vec![1.0, 1.0, 1.0]]);
        assert!(matches!(sigmoid_fuse(&o, &m2), Err(Error::Shape { .. })));
    }

    #[test]
    fn fusion_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("o", Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap())
            .unwrap();
        store
            .insert("m", Tensor::from_rows(&[vec![-0.4, 0.9], vec![0.1, -1.3]]).unwrap())
            .unwrap();
        let reports = grad_check(
            |g, s| {
                let o = g.param(s, "o")?;
                let m = g.param(s, "m")?;
                let f = fuse_on(g, o, m)?;
                let sq = g.mul(f, f)?;
                Ok(g.sum(sq))
            },
            &store,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(reports.iter().all(|r| r.passed), "{reports:?}");
    }

    fn meta(t: usize) -> SampleMeta {
        let b = StageBoundaries::new(1, 2, t).unwrap();
        SampleMeta {
            id: 0,
            action_type: 0,
            query_boundaries: b,
            exemplar_boundaries: b,
            query_mask_targets: Tensor::zeros(t, 2),
            exemplar_mask_targets: Tensor::zeros(t, 2),
            y_query: 50.0,
            y_exemplar: 40.0,
            confounder: None,
        }
    }

    fn streams(t: usize, skip: Option<StreamId>) -> Vec<FeatureStream> {
        StreamId::ALL
            .into_iter()
            .filter(|&id| Some(id) != skip)
            .map(|id| FeatureStream::new(id, Tensor::full(t, 4, 0.5)).unwrap())
            .collect()
    }

    #[test]
    fn make_sample_examples() {
        let s = make_sample(streams(9, None), meta(9)).unwrap();
        assert_eq!(s.query_fused.shape(), &[9, 4]);
        assert_eq!(s.exemplar_fused.shape(), &[9, 4]);

        assert!(matches!(
            make_sample(streams(9, Some(StreamId::ExemplarMask)), meta(9)),
            Err(Error::MissingStream("em"))
        ));

        let mut bad = streams(9, Some(StreamId::ExemplarMask));
        bad.push(FeatureStream::new(StreamId::ExemplarMask, Tensor::full(8, 4, 0.5)).unwrap());
        assert!(make_sample(bad, meta(9)).is_err());
    }
}
