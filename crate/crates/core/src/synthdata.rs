//! Seeded generator of confounded query/exemplar pairs and the JSON-lines
//! dataset format.
//!
//! Foreground channels (first `D/2` dims, present in both streams) carry a
//! per-stage action code, the stage quality along a quality direction and a
//! transition signature at each stage boundary; the mask stream adds a
//! positive offset so that sigmoid fusion passes the foreground. Background channels (last
//! `D/2` dims) carry, in the original stream only, an environment vector
//! shared by the pair plus a per-video confounder `z` whose correlation
//! with the video's own score is the configured strength.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{make_sample, FeatureStream, Sample, SampleMeta, StreamId};
use crate::numerics::Tensor;
use crate::tca::{StageBoundaries, STAGES};

pub const FORMAT_VERSION: u32 = 1;
pub const ACTION_TYPES: usize = 3;
/// Score = `s_min + range · Σ_s w_s q_s`, `q_s ~ U(0, 1)`.
pub const QUALITY_WEIGHTS: [f64; STAGES] = [0.3, 0.5, 0.2];

const FG_NOISE: f64 = 0.1;
const MASK_NOISE: f64 = 0.1;
/// Keeps the sigmoid gate mostly open on foreground channels.
const MASK_OFFSET: f64 = 3.0;
const BG_NOISE: f64 = 0.1;
const CODE_SCALE: f64 = 0.5;
const QUALITY_SCALE: f64 = 1.5;
const SIGNATURE_SCALE: f64 = 1.5;
const ENV_SCALE: f64 = 0.5;
const CONFOUNDER_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub snippets: usize,
    pub dim: usize,
    pub score_min: f64,
    pub score_max: f64,
    pub c_train: f64,
    pub c_test: f64,
    /// Maximum boundary displacement in snippets.
    pub jitter: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 800,
            n_test: 200,
            snippets: 9,
            dim: 16,
            score_min: 0.0,
            score_max: 100.0,
            c_train: 0.0,
            c_test: 0.0,
            jitter: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snippets < STAGES {
            return Err(Error::invalid(format!("T = {} < 3", self.snippets)));
        }
        if self.dim < 4 || self.dim % 2 != 0 {
            return Err(Error::invalid(format!("D = {} must be even and ≥ 4", self.dim)));
        }
        if !(self.score_min < self.score_max) {
            return Err(Error::invalid("score_min must be below score_max"));
        }
        for c in [self.c_train, self.c_test] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!("confounder strength {c} outside [0, 1]")));
            }
        }
        if self.jitter > 1 {
            return Err(Error::invalid("boundary jitter is at most ±1 snippet"));
        }
        Ok(())
    }

    pub fn mask_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn score_range(&self) -> f64 {
        self.score_max - self.score_min
    }

    /// Mean and standard deviation of the score distribution.
    pub fn score_moments(&self) -> (f64, f64) {
        let var_q = QUALITY_WEIGHTS.iter().map(|w| w * w).sum::<f64>() / 12.0;
        (
            self.score_min + 0.5 * self.score_range(),
            self.score_range() * var_q.sqrt(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub config: GenConfig,
    pub samples: Vec<Sample>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect()
}

fn unit_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    let v = normal_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| scale * x / norm).collect()
}

/// Fixed directions shared by train and test splits. Action types differ
/// only in their per-stage codes.
struct World {
    codes: Vec<Vec<Vec<f64>>>,
    quality: Vec<Vec<f64>>,
    signatures: [Vec<f64>; 2],
    confounder_dir: Vec<f64>,
}

impl World {
    fn new(rng: &mut ChaCha8Rng, half: usize) -> Self {
        let codes = (0..ACTION_TYPES)
            .map(|_| (0..STAGES).map(|_| normal_vec(rng, half, CODE_SCALE)).collect())
            .collect();
        let quality = (0..STAGES).map(|_| unit_vec(rng, half, QUALITY_SCALE)).collect();
        let signatures = [
            unit_vec(rng, half, SIGNATURE_SCALE),
            unit_vec(rng, half, SIGNATURE_SCALE),
        ];
        let confounder_dir = unit_vec(rng, half, CONFOUNDER_SCALE * (half as f64).sqrt());
        Self {
            codes,
            quality,
            signatures,
            confounder_dir,
        }
    }
}

struct Video {
    original: Tensor,
    mask: Tensor,
    targets: Tensor,
    boundaries: StageBoundaries,
    y: f64,
    z: f64,
}

fn boundaries<R: Rng>(rng: &mut R, t: usize, jitter: usize) -> StageBoundaries {
    let mut draw = |nominal: usize| -> isize {
        let j = jitter as isize;
        nominal as isize + rng.gen_range(-j..=j)
    };
    let t1 = draw(t / 3).clamp(1, t as isize - 2) as usize;
    let t2 = draw(2 * t / 3).clamp(t1 as isize + 1, t as isize - 1) as usize;
    StageBoundaries { t1, t2 }
}

fn video<R: Rng>(
    rng: &mut R,
    cfg: &GenConfig,
    world: &World,
    action: usize,
    env: &[f64],
    strength: f64,
) -> Video {
    let (t, d, half) = (cfg.snippets, cfg.dim, cfg.dim / 2);
    let codes = &world.codes[action];
    let q: Vec<f64> = (0..STAGES).map(|_| rng.gen::<f64>()).collect();
    let y = cfg.score_min
        + cfg.score_range() * q.iter().zip(QUALITY_WEIGHTS).map(|(a, w)| a * w).sum::<f64>();
    let (mean, std) = cfg.score_moments();
    let eps: f64 = StandardNormal.sample(rng);
    let z = strength * (y - mean) / std + (1.0 - strength * strength).sqrt() * eps;
    let b = boundaries(rng, t, cfg.jitter);

    let mut original = Tensor::zeros(t, d);
    let mut mask = Tensor::zeros(t, d);
    let mut targets = Tensor::zeros(t, half);
    for i in 0..t {
        let stage = if i < b.t1 { 0 } else if i < b.t2 { 1 } else { 2 };
        for k in 0..half {
            let mut clean = codes[stage][k] + (q[stage] - 0.5) * world.quality[stage][k];
            if i == b.t1 {
                clean += world.signatures[0][k];
            }
            if i == b.t2 {
                clean += world.signatures[1][k];
            }
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            original.set(i, k, clean + FG_NOISE * n1);
            mask.set(i, k, MASK_OFFSET + clean + MASK_NOISE * n2);
            targets.set(i, k, if clean > 0.0 { 1.0 } else { 0.0 });
        }
        for k in 0..half {
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            original.set(
                i,
                half + k,
                env[k] + z * world.confounder_dir[k] + BG_NOISE * n1,
            );
            mask.set(i, half + k, MASK_NOISE * n2);
        }
    }
    Video {
        original,
        mask,
        targets,
        boundaries: b,
        y,
        z,
    }
}

fn pair(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    world: &World,
    id: u64,
    strength: f64,
) -> Result<Sample> {
    let action = rng.gen_range(0..ACTION_TYPES);
    let env = normal_vec(rng, cfg.dim / 2, ENV_SCALE);
    let q = video(rng, cfg, world, action, &env, strength);
    let e = video(rng, cfg, world, action, &env, strength);
    let streams = vec![
        FeatureStream::new(StreamId::QueryOriginal, q.original)?,
        FeatureStream::new(StreamId::QueryMask, q.mask)?,
        FeatureStream::new(StreamId::ExemplarOriginal, e.original)?,
        FeatureStream::new(StreamId::ExemplarMask, e.mask)?,
    ];
    make_sample(
        streams,
        SampleMeta {
            id,
            action_type: action as u32,
            query_boundaries: q.boundaries,
            exemplar_boundaries: e.boundaries,
            query_mask_targets: q.targets,
            exemplar_mask_targets: e.targets,
            y_query: q.y,
            y_exemplar: e.y,
            confounder: Some((q.z, e.z)),
        },
    )
}

fn split(cfg: &GenConfig, world: &World, which: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (stream, n, strength, base) = match which {
        Split::Train => (1, cfg.n_train, cfg.c_train, 0),
        Split::Test => (2, cfg.n_test, cfg.c_test, cfg.n_train as u64),
    };
    rng.set_stream(stream);
    let samples = (0..n)
        .map(|i| pair(&mut rng, cfg, world, base + i as u64, strength))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split: which,
        config: cfg.clone(),
        samples,
    })
}

/// Train and test splits; action-type prototypes are shared between them.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(&mut rng, cfg.dim / 2);
    Ok((split(cfg, &world, Split::Train)?, split(cfg, &world, Split::Test)?))
}

/// Deterministic shuffled order of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    split: Split,
    count: usize,
    config: GenConfig,
}

#[derive(Serialize, Deserialize)]
struct Streams {
    qo: Tensor,
    qm: Tensor,
    eo: Tensor,
    em: Tensor,
}

#[derive(Serialize, Deserialize)]
struct MaskTargets {
    query: Tensor,
    exemplar: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    action_type: u32,
    streams: Streams,
    boundaries: StageBoundaries,
    exemplar_boundaries: StageBoundaries,
    mask_targets: MaskTargets,
    y_query: f64,
    y_exemplar: f64,
    #[serde(default)]
    confounder: Option<(f64, f64)>,
}

const FORMAT_NAME: &str = "aqa-synthetic-pairs";

impl Record {
    fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id,
            action_type: s.action_type,
            streams: Streams {
                qo: s.query_original.clone(),
                qm: s.query_mask.clone(),
                eo: s.exemplar_original.clone(),
                em: s.exemplar_mask.clone(),
            },
            boundaries: s.query_boundaries,
            exemplar_boundaries: s.exemplar_boundaries,
            mask_targets: MaskTargets {
                query: s.query_mask_targets.clone(),
                exemplar: s.exemplar_mask_targets.clone(),
            },
            y_query: s.y_query,
            y_exemplar: s.y_exemplar,
            confounder: s.confounder,
        }
    }

    fn into_sample(self) -> Result<Sample> {
        let st = self.streams;
        make_sample(
            vec![
                FeatureStream::new(StreamId::QueryOriginal, st.qo)?,
                FeatureStream::new(StreamId::QueryMask, st.qm)?,
                FeatureStream::new(StreamId::ExemplarOriginal, st.eo)?,
                FeatureStream::new(StreamId::ExemplarMask, st.em)?,
            ],
            SampleMeta {
                id: self.id,
                action_type: self.action_type,
                query_boundaries: self.boundaries,
                exemplar_boundaries: self.exemplar_boundaries,
                query_mask_targets: self.mask_targets.query,
                exemplar_mask_targets: self.mask_targets.exemplar,
                y_query: self.y_query,
                y_exemplar: self.y_exemplar,
                confounder: self.confounder,
            },
        )
    }
}

pub fn write_dataset(set: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        split: set.split,
        count: set.samples.len(),
        config: set.config.clone(),
    };
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for s in &set.samples {
        serde_json::to_writer(&mut f, &Record::from_sample(s))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        samples.push(rec.into_sample().map_err(|e| parse_err(n, e.to_string()))?);
    }
    if samples.len() != header.count {
        return Err(parse_err(
            samples.len() + 1,
            format!("header announces {} samples, found {}", header.count, samples.len()),
        ));
    }
    Ok(Dataset {
        split: header.split,
        config: header.config,
        samples,
    })
}
