//! Videos of utterances, JSONL interchange, padding into masked batches,
//! video-level splits.

pub mod synth;

use std::borrow::Borrow;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Modality, ModelDims, VideoInput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use synth::{synth_generate, InteractionMode, SyntheticSpec};

/// Longest accepted video.
pub const MAX_UTTERANCES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: video {video:?}: {reason}")]
    Schema { line: usize, video: String, reason: String },
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
    /// 0 negative, 1 positive.
    pub label: u8,
    /// Raw sentiment intensity; non-negative iff `label == 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.text.len(), self.audio.len(), self.video.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Video {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Checks everything that does not depend on other videos.
    pub fn validate(&self) -> Result<(), String> {
        if self.utterances.is_empty() || self.utterances.len() > MAX_UTTERANCES {
            return Err(format!(
                "{} utterances; expected 1..={MAX_UTTERANCES}",
                self.utterances.len()
            ));
        }
        let dims = self.utterances[0].dims();
        for (i, u) in self.utterances.iter().enumerate() {
            if u.dims() != dims {
                return Err(format!("utterance {i} has dims {:?}, expected {dims:?}", u.dims()));
            }
            if u.label > 1 {
                return Err(format!("utterance {i} label {} not in {{0, 1}}", u.label));
            }
            if let Some(s) = u.score {
                if (s >= 0.0) != (u.label == 1) {
                    return Err(format!("utterance {i} score {s} disagrees with label {}", u.label));
                }
            }
            if Modality::ALL
                .iter()
                .any(|&m| u.features(m).iter().any(|v| !v.is_finite()))
            {
                return Err(format!("utterance {i} has a non-finite feature"));
            }
        }
        Ok(())
    }

    /// `u x d_M` feature matrix for one modality.
    pub fn matrix<T: Scalar>(&self, m: Modality) -> Tensor<T> {
        let rows: Vec<&[f64]> = self.utterances.iter().map(|u| u.features(m)).collect();
        Tensor::from_rows(&rows)
    }
}

/// Per-modality feature widths shared by a dataset, if it is non-empty.
pub fn dataset_dims(videos: &[Video]) -> Option<[usize; 3]> {
    videos.first().and_then(|v| v.utterances.first()).map(Utterance::dims)
}

/// Model dimensions for a dataset and a GRU hidden size.
pub fn model_dims(videos: &[Video], hidden: usize) -> Option<ModelDims> {
    dataset_dims(videos).map(|[t, a, v]| ModelDims::new(t, a, v, hidden))
}

pub fn total_utterances(videos: &[Video]) -> usize {
    videos.iter().map(Video::len).sum()
}

/// Parses one video per non-blank line, validating each and checking that
/// every utterance in the stream shares the same per-modality widths.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<Video>, DataError> {
    let mut videos = Vec::new();
    let mut dims: Option<[usize; 3]> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: format!("line {line_no}"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let video: Video = serde_json::from_str(&line).map_err(|source| DataError::Parse { line: line_no, source })?;
        let schema = |reason: String| DataError::Schema {
            line: line_no,
            video: video.id.clone(),
            reason,
        };
        video.validate().map_err(schema)?;
        let vd = video.utterances[0].dims();
        match dims {
            None => dims = Some(vd),
            Some(d) if d != vd => {
                return Err(schema(format!("dims {vd:?} differ from dataset dims {d:?}")));
            }
            Some(_) => {}
        }
        videos.push(video);
    }
    Ok(videos)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Video>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(BufReader::new(file))
}

pub fn write_dataset(mut writer: impl Write, videos: &[Video]) -> std::io::Result<()> {
    for v in videos {
        serde_json::to_writer(&mut writer, v)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_dataset(path: impl AsRef<Path>, videos: &[Video]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_dataset(BufWriter::new(file), videos).map_err(io)
}

/// Videos zero-padded to a common length, with masks marking real utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// Per video, one `max_len x d_M` matrix per modality.
    pub features: Vec<[Tensor<T>; 3]>,
    pub masks: Vec<Vec<bool>>,
    /// Labels per position; padded positions hold 0.
    pub labels: Vec<Vec<u8>>,
    pub max_len: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input(&self, i: usize) -> VideoInput<'_, T> {
        let f = &self.features[i];
        VideoInput {
            features: [&f[0], &f[1], &f[2]],
            mask: &self.masks[i],
        }
    }

    /// Class targets for the loss, `None` at padded positions.
    pub fn targets(&self, i: usize) -> Vec<Option<usize>> {
        self.labels[i]
            .iter()
            .zip(&self.masks[i])
            .map(|(&l, &m)| m.then_some(l as usize))
            .collect()
    }

    pub fn real_utterances(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

pub fn pad_batch<T: Scalar, V: Borrow<Video>>(videos: &[V]) -> Result<Batch<T>, DataError> {
    let first = videos
        .first()
        .ok_or_else(|| DataError::Contract("pad_batch: empty video list".into()))?
        .borrow();
    let dims = first
        .utterances
        .first()
        .ok_or_else(|| DataError::Contract(format!("pad_batch: video {:?} is empty", first.id)))?
        .dims();
    let max_len = videos.iter().map(|v| v.borrow().len()).max().unwrap_or(0);
    let mut batch = Batch {
        ids: Vec::with_capacity(videos.len()),
        features: Vec::with_capacity(videos.len()),
        masks: Vec::with_capacity(videos.len()),
        labels: Vec::with_capacity(videos.len()),
        max_len,
    };
    for v in videos {
        let v = v.borrow();
        if v.is_empty() || v.utterances.iter().any(|u| u.dims() != dims) {
            return Err(DataError::Contract(format!(
                "pad_batch: video {:?} is empty or does not match dims {dims:?}",
                v.id
            )));
        }
        let features = [0, 1, 2].map(|k| {
            let m = Modality::ALL[k];
            let mut t = Tensor::zeros(max_len, dims[k]);
            for (r, u) in v.utterances.iter().enumerate() {
                for (c, &x) in u.features(m).iter().enumerate() {
                    t.set(r, c, T::of(x));
                }
            }
            t
        });
        let mut mask = vec![false; max_len];
        mask[..v.len()].fill(true);
        let mut labels = vec![0u8; max_len];
        for (l, u) in labels.iter_mut().zip(&v.utterances) {
            *l = u.label;
        }
        batch.ids.push(v.id.clone());
        batch.features.push(features);
        batch.masks.push(mask);
        batch.labels.push(labels);
    }
    Ok(batch)
}

/// `(train, val, test)`.
pub type Splits = (Vec<Video>, Vec<Video>, Vec<Video>);

/// Seeded video-level shuffle into `(train, val, test)` with the given
/// fractions. The test split takes whatever rounding leaves over.
pub fn split(videos: &[Video], fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Contract(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = videos.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| idx.iter().map(|&i| videos[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}
