//! Frozen entry-embedding matrices built from averaged definition encodings.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Container, StoredTensor};
use crate::dictionary::DictionaryDataset;
use crate::encoder::{embed_sentence, EncoderParams, PoolingStrategy};
use crate::error::{Error, Result};
use crate::geometry::{ica_transform, IcaConfig, IcaOutcome};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

const CHECKPOINT_KIND: &str = "entry-matrix";

/// How definition encodings are pooled before averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntryPooling {
    /// Average of CLS vectors.
    Ac,
    /// Average of mean-pooled vectors.
    Amp,
}

impl EntryPooling {
    pub fn sentence_pooling(self) -> PoolingStrategy {
        match self {
            EntryPooling::Ac => PoolingStrategy::Cls,
            EntryPooling::Amp => PoolingStrategy::Mean,
        }
    }
}

impl fmt::Display for EntryPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryPooling::Ac => "AC",
            EntryPooling::Amp => "AMP",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BuilderTag {
    pub pooling: EntryPooling,
    pub ica: bool,
}

impl fmt::Display for BuilderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ica {
            write!(f, "ICA({})", self.pooling)
        } else {
            write!(f, "{}", self.pooling)
        }
    }
}

/// `n x d` matrix; row `i` belongs to dataset entry `i`. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryEmbeddingMatrix {
    weights: DMatrix<f64>,
    builder_tag: BuilderTag,
    source_encoder_fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub truncated_definitions: usize,
}

/// Encode every definition as `[CLS] definition [SEP]`, pool, and average per entry.
pub fn build_entry_matrix<T: Scalar>(
    encoder: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    dataset: &DictionaryDataset,
    pooling: EntryPooling,
) -> Result<(EntryEmbeddingMatrix, BuildReport)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot build entry embeddings from an empty dataset".into()));
    }
    let strategy = pooling.sentence_pooling();
    let d = encoder.config.d_model;
    let rows: Vec<(Vec<f64>, usize)> = dataset
        .entries()
        .par_iter()
        .map(|entry| {
            let mut sum = vec![0.0f64; d];
            let mut truncated = 0;
            for def in &entry.definitions {
                let (v, cut) = embed_sentence(encoder, tokenizer, def, &strategy)?;
                truncated += usize::from(cut);
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x.as_f64();
                }
            }
            let m = entry.definitions.len() as f64;
            Ok((sum.into_iter().map(|s| s / m).collect(), truncated))
        })
        .collect::<Result<_>>()?;

    let truncated_definitions = rows.iter().map(|r| r.1).sum();
    if truncated_definitions > 0 {
        log::warn!(
            "{truncated_definitions} definitions exceeded max_position {} and were truncated",
            encoder.config.max_position
        );
    }
    let n = rows.len();
    let weights = DMatrix::from_row_iterator(n, d, rows.into_iter().flat_map(|r| r.0));
    let matrix = EntryEmbeddingMatrix::new(
        weights,
        BuilderTag { pooling, ica: false },
        encoder.fingerprint(),
    )?;
    Ok((matrix, BuildReport { truncated_definitions }))
}

impl EntryEmbeddingMatrix {
    pub fn new(weights: DMatrix<f64>, builder_tag: BuilderTag, source_encoder_fingerprint: String) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::invalid("entry matrix must be non-empty"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("entry matrix".into()));
        }
        Ok(Self {
            weights,
            builder_tag,
            source_encoder_fingerprint,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn n_entries(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn builder_tag(&self) -> BuilderTag {
        self.builder_tag
    }

    pub fn source_encoder_fingerprint(&self) -> &str {
        &self.source_encoder_fingerprint
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.weights.row(i).iter().copied().collect()
    }

    /// Row-major copy converted to `T`, shaped `[n, d]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (n, d) = self.weights.shape();
        let data = (0..n)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| T::from_f64_lossy(self.weights[(i, j)]))
            .collect();
        Tensor::new(vec![n, d], data).expect("shape matches data")
    }

    /// Content hash over tag, source fingerprint and every weight bit.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.builder_tag.to_string().as_bytes());
        h.update(self.source_encoder_fingerprint.as_bytes());
        h.update((self.weights.nrows() as u64).to_le_bytes());
        h.update((self.weights.ncols() as u64).to_le_bytes());
        for i in 0..self.weights.nrows() {
            for v in self.weights.row(i).iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// The ICA-transformed candidate of this matrix.
    pub fn ica_transformed(&self, config: &IcaConfig) -> Result<(Self, IcaOutcome)> {
        if self.builder_tag.ica {
            return Err(Error::invalid("matrix is already ICA-transformed"));
        }
        let outcome = ica_transform(&self.weights, config)?;
        let matrix = Self::new(
            outcome.sources.clone(),
            BuilderTag {
                pooling: self.builder_tag.pooling,
                ica: true,
            },
            self.source_encoder_fingerprint.clone(),
        )?;
        Ok((matrix, outcome))
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "builder_tag": self.builder_tag,
            "builder_label": self.builder_tag.to_string(),
            "source_encoder_fingerprint": self.source_encoder_fingerprint,
            "fingerprint": self.fingerprint(),
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        c.push("weights", self.to_tensor::<f64>());
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected an entry matrix, found {}", c.kind)));
        }
        let tag: BuilderTag = serde_json::from_value(c.metadata["builder_tag"].clone())?;
        let source = c.metadata["source_encoder_fingerprint"]
            .as_str()
            .ok_or_else(|| Error::Format("entry matrix lacks a source fingerprint".into()))?
            .to_string();
        let t = match c.take("weights")? {
            StoredTensor::F64(t) => t,
            StoredTensor::F32(_) => return Err(Error::Format("entry matrix weights must be f64".into())),
        };
        let [n, d] = t.shape() else {
            return Err(Error::Format("entry matrix weights must be 2-d".into()));
        };
        let weights = DMatrix::from_row_slice(*n, *d, t.data());
        let out = Self::new(weights, tag, source)?;
        if let Some(stored) = c.metadata["fingerprint"].as_str() {
            if stored != out.fingerprint() {
                return Err(Error::Format("entry matrix fingerprint does not match its weights".into()));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}
