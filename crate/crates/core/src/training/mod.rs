//! The definition-to-entry training objective, one-epoch training, encoding
//! combination search, multi-seed statistics and Progressive Separate Training.

mod pst;

pub use pst::{
    pst_run, BaselineRecord, BranchRecord, FinalBranch, PstPlan, PstState, SeedRecord, StepRecord,
    StsEvaluator,
};

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionaryDataset;
use crate::encoder::{pool_on_tape, prepare_input, EncoderParams, PoolingStrategy};
use crate::entry_embed::{EntryEmbeddingMatrix, EntryPooling};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{linear_decay, AdamW, AdamWConfig, Tape, Var};
use crate::tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SentencePooling {
    Cls,
    Mean,
}

impl SentencePooling {
    pub fn strategy(self) -> PoolingStrategy {
        match self {
            SentencePooling::Cls => PoolingStrategy::Cls,
            SentencePooling::Mean => PoolingStrategy::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodingCombination {
    pub sentence_pooling: SentencePooling,
    pub entry_type: EntryPooling,
}

impl EncodingCombination {
    /// All four combinations, in tie-breaking priority order.
    pub const ALL: [EncodingCombination; 4] = [
        EncodingCombination::new(SentencePooling::Cls, EntryPooling::Amp),
        EncodingCombination::new(SentencePooling::Mean, EntryPooling::Amp),
        EncodingCombination::new(SentencePooling::Cls, EntryPooling::Ac),
        EncodingCombination::new(SentencePooling::Mean, EntryPooling::Ac),
    ];

    pub const fn new(sentence_pooling: SentencePooling, entry_type: EntryPooling) -> Self {
        Self {
            sentence_pooling,
            entry_type,
        }
    }

    fn priority(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

impl fmt::Display for EncodingCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.sentence_pooling {
            SentencePooling::Cls => "CLS",
            SentencePooling::Mean => "Mean",
        };
        write!(f, "({p}, {})", self.entry_type)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 16,
            seed: 0,
            epochs: 1,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs != 1 {
            return Err(Error::invalid(format!("training runs exactly one epoch (got {})", self.epochs)));
        }
        if ![16, 32].contains(&self.batch_size) {
            return Err(Error::invalid(format!("batch size must be 16 or 32 (got {})", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("bad learning rate {}", self.learning_rate)));
        }
        AdamWConfig {
            learning_rate: self.learning_rate,
            ..self.optimizer
        }
        .validate()
    }
}

/// Cross entropy of `softmax(X h)` against `target`. `x` is the frozen `[n, d]`
/// entry matrix, `h` a `[1, d]` projected sentence; only `h` should carry gradient.
pub fn defsent_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, h: Var, target: usize) -> Result<Var> {
    let logits = tape.matmul_bt(h, x)?;
    tape.cross_entropy(logits, target)
}

/// Loss value for one `(X, h, target)` instance in 64-bit arithmetic.
pub fn defsent_loss_value(matrix: &EntryEmbeddingMatrix, h: &[f64], target: usize) -> Result<f64> {
    if h.len() != matrix.dim() {
        return Err(Error::ShapeMismatch {
            op: "defsent_loss",
            lhs: vec![matrix.n_entries(), matrix.dim()],
            rhs: vec![1, h.len()],
        });
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.tensor(&matrix.to_tensor());
    let hv = tape.constant(vec![1, h.len()], h.to_vec())?;
    let loss = defsent_loss(&mut tape, x, hv, target)?;
    Ok(tape.value(loss)[0])
}

/// Forward one (definition, entry) pair through encoder, pooling, pooler and
/// loss on `tape`. Returns the parameter variables and the loss.
pub fn pair_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    x: Var,
    definition: &str,
    target: usize,
    pooling: SentencePooling,
) -> Result<(Vec<Var>, Var)> {
    let strategy = pooling.strategy();
    let input = prepare_input(tokenizer, definition, &strategy, encoder.config.max_position)?;
    let mask = vec![T::one(); input.ids.len()];
    let vars = encoder.register(tape, true);
    let hidden = encoder.hidden_on_tape(tape, &vars, &input.ids, &mask)?;
    let pooled = pool_on_tape(tape, hidden, &mask, &strategy, input.mask_index)?;
    let h = encoder.pooler_on_tape(tape, &vars, pooled)?;
    let loss = defsent_loss(tape, x, h, target)?;
    Ok((vars, loss))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: EncoderParams<T>,
    /// Mean loss of each optimizer step.
    pub losses: Vec<f64>,
}

/// One epoch over the shuffled pairs of `dataset`, starting from a copy of `base`.
/// The entry matrix is read-only throughout.
pub fn train_one_epoch<T: Scalar>(
    base: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    matrix: &EntryEmbeddingMatrix,
    dataset: &DictionaryDataset,
    combination: EncodingCombination,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if matrix.builder_tag().pooling != combination.entry_type {
        return Err(Error::invalid(format!(
            "entry matrix was built as {} but the combination asks for {}",
            matrix.builder_tag(),
            combination.entry_type
        )));
    }
    if matrix.n_entries() != dataset.len() || matrix.dim() != base.config.d_model {
        return Err(Error::ShapeMismatch {
            op: "train_one_epoch",
            lhs: vec![matrix.n_entries(), matrix.dim()],
            rhs: vec![dataset.len(), base.config.d_model],
        });
    }
    let x_tensor = matrix.to_tensor::<T>();
    let mut encoder = base.clone();
    let mut optimizer = AdamW::new(
        &encoder.params,
        AdamWConfig {
            learning_rate: config.learning_rate,
            ..config.optimizer
        },
        EncoderParams::<T>::is_trainable,
        EncoderParams::<T>::decays,
    )?;
    let pairs = dataset.pair_iterator(config.seed)?;
    let total_steps = pairs.len().div_ceil(config.batch_size);
    let mut losses = Vec::with_capacity(total_steps);

    for (step, batch) in pairs.chunks(config.batch_size).enumerate() {
        encoder.params.zero_grad();
        let weight = T::from_f64_lossy(1.0 / batch.len() as f64);
        let mut batch_loss = 0.0;
        for &(target, definition) in batch {
            let mut tape = Tape::new();
            let x = tape.tensor(&x_tensor);
            let (vars, loss) =
                pair_loss_on_tape(&mut tape, &encoder, tokenizer, x, definition, target, combination.sentence_pooling)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at optimizer step {step}")));
            }
            batch_loss += value;
            let scaled = tape.scale(loss, weight);
            let grads = tape.backward(scaled)?;
            for (i, &v) in vars.iter().enumerate() {
                grads.accumulate_into(v, encoder.params.tensor_at_mut(i))?;
            }
        }
        let lr = linear_decay(config.learning_rate, step, total_steps);
        optimizer
            .step(&mut encoder.params, lr)
            .map_err(|e| Error::Numeric(format!("optimizer step {step}: {e}")))?;
        losses.push(batch_loss / batch.len() as f64);
    }
    encoder.params.zero_grad();
    Ok(TrainOutcome {
        params: encoder,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: EncodingCombination,
    pub scores: Vec<(EncodingCombination, f64)>,
}

/// Highest score wins; ties go to the combination listed first in [`EncodingCombination::ALL`].
pub fn select_best_combination(scores: &[(EncodingCombination, f64)]) -> Result<EncodingCombination> {
    scores
        .iter()
        .filter(|(_, s)| s.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.priority().cmp(&a.0.priority())))
        .map(|(c, _)| *c)
        .ok_or_else(|| Error::invalid("no finite grid-search scores"))
}

/// Train every combination once with the same seed and pick the best dev score.
pub fn grid_search_combination<T: Scalar>(
    base: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    dataset: &DictionaryDataset,
    config: &TrainConfig,
    dev_evaluator: impl Fn(&EncoderParams<T>, SentencePooling) -> Result<f64> + Sync,
) -> Result<GridSearchResult> {
    grid_search_with_source(base, base, tokenizer, dataset, config, dev_evaluator)
}

/// Grid search whose entry matrices come from `source` while training starts from `base`.
pub fn grid_search_with_source<T: Scalar>(
    base: &EncoderParams<T>,
    source: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    dataset: &DictionaryDataset,
    config: &TrainConfig,
    dev_evaluator: impl Fn(&EncoderParams<T>, SentencePooling) -> Result<f64> + Sync,
) -> Result<GridSearchResult> {
    let matrices: Vec<(EntryPooling, EntryEmbeddingMatrix)> = [EntryPooling::Amp, EntryPooling::Ac]
        .into_iter()
        .map(|p| Ok((p, crate::entry_embed::build_entry_matrix(source, tokenizer, dataset, p)?.0)))
        .collect::<Result<_>>()?;
    let scores: Vec<(EncodingCombination, f64)> = EncodingCombination::ALL
        .par_iter()
        .map(|&combo| {
            let matrix = &matrices.iter().find(|(p, _)| *p == combo.entry_type).expect("built").1;
            let trained = train_one_epoch(base, tokenizer, matrix, dataset, combo, config)?;
            Ok((combo, dev_evaluator(&trained.params, combo.sentence_pooling)?))
        })
        .collect::<Result<_>>()?;
    Ok(GridSearchResult {
        best: select_best_combination(&scores)?,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub std: f64,
    pub best_seed: u64,
    pub best_index: usize,
}

impl SeedSummary {
    pub fn from_scores(seeds: &[u64], scores: &[f64]) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != scores.len() {
            return Err(Error::invalid("need one score per seed and at least one seed"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let best_index = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty");
        Ok(Self {
            seeds: seeds.to_vec(),
            scores: scores.to_vec(),
            mean,
            std,
            best_seed: seeds[best_index],
            best_index,
        })
    }
}

/// Run `runner` once per seed (in parallel on the current rayon pool). The
/// runner returns a selection score and a payload; payloads come back in seed order.
pub fn multi_seed<R: Send>(
    seeds: &[u64],
    runner: impl Fn(u64) -> Result<(f64, R)> + Sync,
) -> Result<(SeedSummary, Vec<R>)> {
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(Error::invalid("seeds must be distinct"));
    }
    let results: Vec<(f64, R)> = seeds.par_iter().map(|&s| runner(s)).collect::<Result<_>>()?;
    let scores: Vec<f64> = results.iter().map(|r| r.0).collect();
    let summary = SeedSummary::from_scores(seeds, &scores)?;
    Ok((summary, results.into_iter().map(|r| r.1).collect()))
}
