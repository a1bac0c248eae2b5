use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{Tokenizer, CLS_ID, MASK, MASK_ID, SEP_ID};

/// Sentence slot marker inside a prompt template.
pub const SENTENCE_SLOT: &str = "{sentence}";

/// A prompt with one sentence slot and exactly one `[MASK]` token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: "this sentence : \" {sentence} \" means [MASK] .".to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches(SENTENCE_SLOT).count() != 1 {
            return Err(Error::invalid("prompt template needs exactly one {sentence} slot"));
        }
        if text.matches(MASK).count() != 1 {
            return Err(Error::invalid("prompt template needs exactly one [MASK] token"));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Plain words of the template, for inclusion in a vocabulary.
    pub fn words(&self) -> Vec<String> {
        self.text
            .replace(SENTENCE_SLOT, " ")
            .replace(MASK, " ")
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    fn piece_ids(tokenizer: &Tokenizer, piece: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut parts = piece.split(MASK).peekable();
        while let Some(part) = parts.next() {
            out.extend(tokenizer.encode(part));
            if parts.peek().is_some() {
                out.push(MASK_ID);
            }
        }
        out
    }

    /// Token ids before and after the sentence slot (no `[CLS]`/`[SEP]`).
    pub fn split_ids(&self, tokenizer: &Tokenizer) -> (Vec<usize>, Vec<usize>) {
        let (before, after) = self
            .text
            .split_once(SENTENCE_SLOT)
            .expect("validated template has a slot");
        (
            Self::piece_ids(tokenizer, before),
            Self::piece_ids(tokenizer, after),
        )
    }

    /// Wrapped length for a one-token sentence, `[CLS]` and `[SEP]` included.
    pub fn len(&self, tokenizer: &Tokenizer) -> usize {
        let (a, b) = self.split_ids(tokenizer);
        a.len() + b.len() + 3
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolingStrategy {
    Cls,
    Mean,
    Prompt { template: PromptTemplate },
}

impl PoolingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PoolingStrategy::Cls => "cls",
            PoolingStrategy::Mean => "mean",
            PoolingStrategy::Prompt { .. } => "prompt",
        }
    }
}

/// `[CLS] prefix sentence suffix [SEP]` and the position of the `[MASK]` token.
pub fn wrap_prompt(
    tokenizer: &Tokenizer,
    sentence_ids: &[usize],
    template: &PromptTemplate,
    max_position: usize,
) -> Result<(Vec<usize>, usize)> {
    let (before, after) = template.split_ids(tokenizer);
    let mut ids = Vec::with_capacity(before.len() + sentence_ids.len() + after.len() + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(&before);
    ids.extend_from_slice(sentence_ids);
    ids.extend_from_slice(&after);
    ids.push(SEP_ID);
    if ids.len() > max_position {
        return Err(Error::invalid(format!(
            "wrapped prompt has {} tokens, max_position is {max_position}",
            ids.len()
        )));
    }
    let mask_index = match before.iter().position(|&t| t == MASK_ID) {
        Some(p) => 1 + p,
        None => {
            let p = after
                .iter()
                .position(|&t| t == MASK_ID)
                .expect("validated template carries one mask");
            1 + before.len() + sentence_ids.len() + p
        }
    };
    Ok((ids, mask_index))
}

fn check_mask<T: Scalar>(rows: usize, mask: &[T]) -> Result<()> {
    if mask.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "pool",
            lhs: vec![rows],
            rhs: vec![mask.len()],
        });
    }
    if mask.iter().all(|&m| m == T::zero()) {
        return Err(Error::invalid("pooling over an all-zero attention mask"));
    }
    Ok(())
}

/// Pool `[len, d]` hidden states into one vector.
pub fn pool<T: Scalar>(
    hidden: &Tensor<T>,
    mask: &[T],
    strategy: &PoolingStrategy,
    mask_index: Option<usize>,
) -> Result<Vec<T>> {
    let [rows, cols] = hidden.shape() else {
        return Err(Error::invalid("pooling expects a [len, d] matrix"));
    };
    let (rows, cols) = (*rows, *cols);
    check_mask(rows, mask)?;
    let data = hidden.data();
    match strategy {
        PoolingStrategy::Cls => Ok(data[..cols].to_vec()),
        PoolingStrategy::Mean => {
            let count = mask.iter().copied().sum::<T>();
            let mut out = vec![T::zero(); cols];
            for (r, &m) in mask.iter().enumerate() {
                if m != T::zero() {
                    for (o, &v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                        *o = *o + m * v;
                    }
                }
            }
            Ok(out.into_iter().map(|v| v / count).collect())
        }
        PoolingStrategy::Prompt { .. } => {
            let idx = mask_index.ok_or_else(|| Error::invalid("prompt pooling needs a mask index"))?;
            if idx >= rows {
                return Err(Error::invalid(format!("mask index {idx} out of range")));
            }
            Ok(data[idx * cols..(idx + 1) * cols].to_vec())
        }
    }
}

/// Tape version of [`pool`]; returns a `[1, d]` row.
pub fn pool_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: Var,
    mask: &[T],
    strategy: &PoolingStrategy,
    mask_index: Option<usize>,
) -> Result<Var> {
    let rows = tape.shape(hidden)[0];
    check_mask(rows, mask)?;
    match strategy {
        PoolingStrategy::Cls => tape.select_row(hidden, 0),
        PoolingStrategy::Mean => tape.masked_mean(hidden, mask),
        PoolingStrategy::Prompt { .. } => {
            let idx = mask_index.ok_or_else(|| Error::invalid("prompt pooling needs a mask index"))?;
            tape.select_row(hidden, idx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tok() -> Tokenizer {
        let t = PromptTemplate::default();
        let words = t.words();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        Tokenizer::build(["new york is a big city", "the cat sat"], 1, 100, &refs).unwrap()
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new("no slot [MASK]").is_err());
        assert!(PromptTemplate::new("{sentence} no mask").is_err());
        assert!(PromptTemplate::new("{sentence} [MASK] [MASK]").is_err());
        assert!(PromptTemplate::new("[MASK] is {sentence}").is_ok());
    }

    #[test]
    fn one_token_sentence_fills_template_length() {
        let t = tok();
        let tpl = PromptTemplate::default();
        let s = t.encode("cat");
        let (ids, idx) = wrap_prompt(&t, &s, &tpl, 64).unwrap();
        assert_eq!(ids.len(), tpl.len(&t));
        assert_eq!(ids[idx], MASK_ID);
    }

    #[test]
    fn mask_index_addresses_mask_for_leading_mask() {
        let t = tok();
        let tpl = PromptTemplate::new("[MASK] means {sentence}").unwrap();
        let (ids, idx) = wrap_prompt(&t, &t.encode("the cat sat"), &tpl, 64).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(ids[idx], MASK_ID);
    }

    #[test]
    fn template_positions_are_shared_across_sentences() {
        let t = tok();
        let tpl = PromptTemplate::default();
        let a = t.encode("new york is a big city");
        let b = t.encode("the cat sat");
        let (ia, ma) = wrap_prompt(&t, &a, &tpl, 64).unwrap();
        let (ib, mb) = wrap_prompt(&t, &b, &tpl, 64).unwrap();
        let (before, after) = tpl.split_ids(&t);
        let p = before.len() + 1;
        assert_eq!(ia[..p], ib[..p]);
        assert_eq!(ia[p + a.len()..], ib[p + b.len()..]);
        assert_eq!(ia.len() - ma, ib.len() - mb);
        assert_eq!(after.len() + 1 + p + a.len(), ia.len());
    }

    #[test]
    fn wrapping_too_long_is_rejected() {
        let t = tok();
        let long = vec![5; 60];
        assert!(wrap_prompt(&t, &long, &PromptTemplate::default(), 64).is_err());
    }

    #[test]
    fn mean_and_cls_cases() {
        let v = [0.5, -1.0, 2.0];
        let hidden = Tensor::new(vec![4, 3], v.repeat(4)).unwrap();
        let mean = pool(&hidden, &[1.0, 1.0, 1.0, 1.0], &PoolingStrategy::Mean, None).unwrap();
        assert_eq!(mean, v.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hidden = Tensor::new(vec![5, 3], data.clone()).unwrap();
        let only_first = pool(&hidden, &[1.0, 0.0, 0.0, 0.0, 0.0], &PoolingStrategy::Mean, None).unwrap();
        let cls = pool(&hidden, &[1.0; 5], &PoolingStrategy::Cls, None).unwrap();
        assert_eq!(only_first, cls);

        let mean = pool(&hidden, &[1.0, 1.0, 1.0, 0.0, 0.0], &PoolingStrategy::Mean, None).unwrap();
        for j in 0..3 {
            let oracle = (data[j] + data[3 + j] + data[6 + j]) / 3.0;
            assert!((mean[j] - oracle).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_errors() {
        let hidden = Tensor::<f32>::zeros(vec![3, 2]);
        let prompt = PoolingStrategy::Prompt {
            template: PromptTemplate::default(),
        };
        assert!(pool(&hidden, &[1.0; 3], &prompt, None).is_err());
        assert!(pool(&hidden, &[0.0; 3], &PoolingStrategy::Mean, None).is_err());
        assert_eq!(pool(&hidden, &[1.0; 3], &prompt, Some(2)).unwrap(), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn mean_pooling_is_permutation_equivariant(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..8),
            seed in any::<u64>(),
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let a = pool(&Tensor::new(vec![n, 3], flat).unwrap(), &vec![1.0; n], &PoolingStrategy::Mean, None).unwrap();
            let mut perm = rows.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let flat: Vec<f64> = perm.iter().flatten().copied().collect();
            let b = pool(&Tensor::new(vec![n, 3], flat).unwrap(), &vec![1.0; n], &PoolingStrategy::Mean, None).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
