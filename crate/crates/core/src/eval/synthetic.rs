//! A synthetic semantic world: latent concepts, concept-tilted token
//! distributions, a generated dictionary and graded STS pairs.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{cosine, evaluate_set, write_sts_tsv, StsPair};
use crate::dictionary::DictionaryDataset;
use crate::error::{Error, Result};
use crate::seed::derived_rng;
use crate::tokenizer::{split_words, Tokenizer};

const FUNCTION_WORDS: [&str; 32] = [
    "a", "an", "the", "of", "to", "in", "on", "at", "by", "for", "with", "from", "and", "or",
    "that", "which", "who", "is", "are", "be", "as", "it", "its", "into", "some", "any", "one",
    "something", "used", "being", "not", "very",
];

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "su", "ra", "te", "vo", "di", "pa", "zu", "ri", "go", "fe", "ba",
    "ni", "to", "sha", "ke", "mu",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_entries: usize,
    pub vocab_size: usize,
    pub min_definitions: usize,
    pub max_definitions: usize,
    pub n_test_pairs: usize,
    pub n_dev_pairs: usize,
    pub latent_dim: usize,
    pub n_clusters: usize,
    /// Scale of the within-cluster perturbation of a concept.
    pub cluster_spread: f64,
    /// Tilt of token sampling toward the concept (`p(t) ∝ exp(beta z·u_t)`).
    pub beta: f64,
    pub function_word_rate: f64,
    pub min_length: usize,
    pub max_length: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_entries: 256,
            vocab_size: 2000,
            min_definitions: 2,
            max_definitions: 4,
            n_test_pairs: 400,
            n_dev_pairs: 200,
            latent_dim: 16,
            n_clusters: 16,
            cluster_spread: 0.6,
            beta: 12.0,
            function_word_rate: 0.1,
            min_length: 8,
            max_length: 16,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.n_entries < 16 {
            return fail(format!("n_entries must be >= 16 (got {})", self.n_entries));
        }
        let min_vocab = (10.0 * (self.n_entries as f64).sqrt()).ceil() as usize;
        if self.vocab_size < min_vocab || self.vocab_size <= FUNCTION_WORDS.len() + 1 {
            return fail(format!(
                "vocab_size {} too small for {} entries (need >= {min_vocab} and > {})",
                self.vocab_size,
                self.n_entries,
                FUNCTION_WORDS.len() + 1
            ));
        }
        if self.min_definitions == 0 || self.min_definitions > self.max_definitions {
            return fail("definition count range must satisfy 1 <= min <= max".into());
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return fail("sentence length range must satisfy 1 <= min <= max".into());
        }
        if self.latent_dim < 2 || self.n_clusters == 0 {
            return fail("latent_dim must be >= 2 and n_clusters >= 1".into());
        }
        if self.n_test_pairs < 2 || self.n_dev_pairs < 2 {
            return fail("each STS split needs at least two pairs".into());
        }
        if !(0.0..1.0).contains(&self.function_word_rate)
            || !self.beta.is_finite()
            || !(self.cluster_spread >= 0.0)
        {
            return fail("function_word_rate must be in [0, 1); beta and cluster_spread finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    /// Unit latent vector per entry, aligned with dictionary entry ids.
    pub entry_latents: Vec<Vec<f64>>,
    /// Content words followed by function words.
    pub vocabulary: Vec<String>,
    /// Latent vector per vocabulary word; `None` for function words.
    pub token_latents: Vec<Option<Vec<f64>>>,
    pub dictionary: DictionaryDataset,
    pub dev: Vec<StsPair>,
    pub test: Vec<StsPair>,
    word_index: HashMap<String, usize>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn content_word(i: usize) -> String {
    // base-20 syllable spelling keeps words alphabetic and unique
    let mut word = String::new();
    let mut x = i;
    for _ in 0..3 {
        word.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    if x > 0 {
        word.push_str(&x.to_string());
    }
    word
}

/// Gold similarity of two concepts: their latent cosine, clipped to [0, 1].
pub fn gold(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).expect("non-zero latents").clamp(0.0, 1.0)
}

struct Sampler<'a> {
    config: &'a SyntheticConfig,
    content_latents: &'a [Vec<f64>],
    content_words: &'a [String],
}

impl Sampler<'_> {
    fn sentence(&self, rng: &mut ChaCha8Rng, z: &[f64]) -> String {
        let weights: Vec<f64> = self
            .content_latents
            .iter()
            .map(|u| (self.config.beta * u.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).exp())
            .collect();
        let content = WeightedIndex::new(&weights).expect("positive weights");
        let len = rng.random_range(self.config.min_length..=self.config.max_length);
        let mut words = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 && rng.random_bool(self.config.function_word_rate) {
                words.push(FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())]);
            } else {
                words.push(self.content_words[content.sample(rng)].as_str());
            }
        }
        words.join(" ")
    }

    fn concept(&self, rng: &mut ChaCha8Rng, centers: &[Vec<f64>]) -> Vec<f64> {
        let c = &centers[rng.random_range(0..centers.len())];
        let k = c.len() as f64;
        let g = gaussian(rng, c.len());
        unit(c.iter().zip(g).map(|(a, b)| a + self.config.cluster_spread * b / k.sqrt()).collect())
    }

    fn fresh(&self, rng: &mut ChaCha8Rng, z: &[f64], forbidden: &HashSet<String>) -> String {
        loop {
            let s = self.sentence(rng, z);
            if !forbidden.contains(&s) {
                return s;
            }
        }
    }
}

const GOLD_BINS: usize = 10;

/// Entry pairs with non-negative latent cosine, grouped into equal-width gold bins.
fn binned_entry_pairs(latents: &[Vec<f64>]) -> Vec<Vec<(usize, usize)>> {
    let mut bins = vec![Vec::new(); GOLD_BINS];
    for a in 0..latents.len() {
        for b in a + 1..latents.len() {
            let c = cosine(&latents[a], &latents[b]).expect("unit vectors");
            if c >= 0.0 {
                bins[((c * GOLD_BINS as f64) as usize).min(GOLD_BINS - 1)].push((a, b));
            }
        }
    }
    bins
}

/// `n` entry pairs cycling over the non-empty gold bins.
fn stratified_pairs(rng: &mut ChaCha8Rng, bins: &[Vec<(usize, usize)>], n: usize) -> Vec<(usize, usize)> {
    let filled: Vec<&Vec<(usize, usize)>> = bins.iter().filter(|b| !b.is_empty()).collect();
    (0..n)
        .map(|i| {
            let bin = filled[i % filled.len()];
            bin[rng.random_range(0..bin.len())]
        })
        .collect()
}

impl SyntheticWorld {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let k = config.latent_dim;
        let n_content = config.vocab_size - FUNCTION_WORDS.len();
        let mut rng = derived_rng(config.seed, "synthetic-latents", 0);
        let centers: Vec<Vec<f64>> = (0..config.n_clusters).map(|_| unit(gaussian(&mut rng, k))).collect();
        let content_latents: Vec<Vec<f64>> = (0..n_content).map(|_| unit(gaussian(&mut rng, k))).collect();
        let content_words: Vec<String> = (0..n_content).map(content_word).collect();
        let sampler = Sampler {
            config: &config,
            content_latents: &content_latents,
            content_words: &content_words,
        };
        let entry_latents: Vec<Vec<f64>> =
            (0..config.n_entries).map(|_| sampler.concept(&mut rng, &centers)).collect();

        let mut rng = derived_rng(config.seed, "synthetic-dictionary", 0);
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut train_sentences = HashSet::new();
        for (i, z) in entry_latents.iter().enumerate() {
            let m = rng.random_range(config.min_definitions..=config.max_definitions);
            let surface = format!("entry{i:04}");
            let mut made = 0;
            while made < m {
                let s = sampler.sentence(&mut rng, z);
                if train_sentences.insert(s.clone()) {
                    pairs.push((surface.clone(), s));
                    made += 1;
                }
            }
        }
        let dictionary =
            DictionaryDataset::from_pairs(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())), "synthetic");

        let mut rng = derived_rng(config.seed, "synthetic-sts", 0);
        let bins = binned_entry_pairs(&entry_latents);
        let split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<StsPair> {
            stratified_pairs(rng, &bins, n)
                .into_iter()
                .map(|(a, b)| StsPair {
                    sentence_a: sampler.fresh(rng, &entry_latents[a], &train_sentences),
                    sentence_b: sampler.fresh(rng, &entry_latents[b], &train_sentences),
                    gold_score: gold(&entry_latents[a], &entry_latents[b]),
                })
                .collect()
        };
        let dev = split(config.n_dev_pairs, &mut rng);
        let test = split(config.n_test_pairs, &mut rng);

        let mut vocabulary = content_words;
        vocabulary.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        let mut token_latents: Vec<Option<Vec<f64>>> = content_latents.into_iter().map(Some).collect();
        token_latents.extend(FUNCTION_WORDS.iter().map(|_| None));
        let word_index = vocabulary.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let world = Self {
            config,
            entry_latents,
            vocabulary,
            token_latents,
            dictionary,
            dev,
            test,
            word_index,
        };
        world.check_disjoint()?;
        Ok(world)
    }

    fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<&str> = self
            .dictionary
            .entries()
            .iter()
            .flat_map(|e| e.definitions.iter().map(String::as_str))
            .collect();
        let leaked = self
            .dev
            .iter()
            .chain(&self.test)
            .flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()])
            .any(|s| train.contains(s));
        if leaked {
            return Err(Error::Data("an STS sentence also appears as a training definition".into()));
        }
        Ok(())
    }

    /// A fresh sentence pair for entries `a` and `b`, drawn with `seed`.
    pub fn sample_pair(&self, a: usize, b: usize, seed: u64) -> StsPair {
        let content: Vec<(usize, &Vec<f64>)> = self
            .token_latents
            .iter()
            .enumerate()
            .filter_map(|(i, u)| u.as_ref().map(|u| (i, u)))
            .collect();
        let content_latents: Vec<Vec<f64>> = content.iter().map(|(_, u)| (*u).clone()).collect();
        let content_words: Vec<String> = content.iter().map(|(i, _)| self.vocabulary[*i].clone()).collect();
        let sampler = Sampler {
            config: &self.config,
            content_latents: &content_latents,
            content_words: &content_words,
        };
        let mut rng = derived_rng(seed, "synthetic-pair", 0);
        StsPair {
            sentence_a: sampler.sentence(&mut rng, &self.entry_latents[a]),
            sentence_b: sampler.sentence(&mut rng, &self.entry_latents[b]),
            gold_score: gold(&self.entry_latents[a], &self.entry_latents[b]),
        }
    }

    /// Tokenizer covering the whole world vocabulary.
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_words(self.vocabulary.iter().map(String::as_str))
    }

    /// Sum of the latent vectors of a sentence's content words.
    pub fn bag_of_latents(&self, sentence: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.config.latent_dim];
        for w in split_words(sentence) {
            if let Some(Some(u)) = self.word_index.get(&w).map(|&i| &self.token_latents[i]) {
                acc.iter_mut().zip(u).for_each(|(a, b)| *a += b);
            }
        }
        Ok(acc)
    }

    /// Spearman ρ×100 of the bag-of-latent-token embedder on `pairs`.
    pub fn oracle_score(&self, pairs: &[StsPair]) -> Result<f64> {
        evaluate_set(pairs, |s| self.bag_of_latents(s))
    }

    /// Write `dictionary.jsonl`, `sts_dev.tsv`, `sts_test.tsv` and `vocab.json`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: Vec<u8>| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        write("dictionary.jsonl", self.dictionary.to_jsonl_string().into_bytes())?;
        for (name, pairs) in [("sts_dev.tsv", &self.dev), ("sts_test.tsv", &self.test)] {
            let mut buf = Vec::new();
            write_sts_tsv(pairs, &mut buf).expect("writing to memory");
            write(name, buf)?;
        }
        write("vocab.json", serde_json::to_vec_pretty(&self.vocabulary)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_entries: 32,
            vocab_size: 300,
            n_test_pairs: 60,
            n_dev_pairs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn gold_of_entry_pairs() {
        let mut w = SyntheticWorld::generate(small()).unwrap();
        w.entry_latents[1] = w.entry_latents[0].clone();
        assert!((w.sample_pair(0, 1, 3).gold_score - 1.0).abs() < 1e-12);
        let k = w.config.latent_dim;
        w.entry_latents[2] = (0..k).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        w.entry_latents[3] = (0..k).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
        assert_eq!(w.sample_pair(2, 3, 3).gold_score, 0.0);
    }

    #[test]
    fn gold_bins_are_covered() {
        let w = SyntheticWorld::generate(SyntheticConfig::default()).unwrap();
        let mut hit = [false; GOLD_BINS];
        for p in &w.test {
            hit[((p.gold_score * GOLD_BINS as f64) as usize).min(GOLD_BINS - 1)] = true;
        }
        assert!(hit.iter().filter(|&&h| h).count() >= 8);
    }

    #[test]
    fn world_shape_and_determinism() {
        let w = SyntheticWorld::generate(small()).unwrap();
        assert_eq!(w.dictionary.len(), 32);
        for e in w.dictionary.entries() {
            assert!((2..=4).contains(&e.definitions.len()));
        }
        assert_eq!(w.dev.len(), 30);
        assert_eq!(w.test.len(), 60);
        assert_eq!(w.tokenizer().len(), 300 + 5);
        assert!(w.test.iter().all(|p| (0.0..=1.0).contains(&p.gold_score)));
        let again = SyntheticWorld::generate(small()).unwrap();
        assert_eq!(again.test, w.test);
        assert_eq!(again.dictionary, w.dictionary);
    }

    #[test]
    fn every_generated_word_is_in_vocabulary() {
        let w = SyntheticWorld::generate(small()).unwrap();
        let tok = w.tokenizer();
        for e in w.dictionary.entries() {
            for d in &e.definitions {
                assert!(tok.encode(d).iter().all(|&id| id != crate::tokenizer::UNK_ID));
            }
        }
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        let bad = |c: SyntheticConfig| SyntheticWorld::generate(c).is_err();
        assert!(bad(SyntheticConfig { n_entries: 8, ..small() }));
        assert!(bad(SyntheticConfig { vocab_size: 40, ..small() }));
        assert!(bad(SyntheticConfig { min_definitions: 3, max_definitions: 2, ..small() }));
    }

    #[test]
    fn default_world_is_learnable_by_the_oracle() {
        let w = SyntheticWorld::generate(SyntheticConfig::default()).unwrap();
        let rho = w.oracle_score(&w.test).unwrap();
        assert!(rho >= 60.0, "oracle rho x100 = {rho}");
    }

    #[test]
    fn files_are_written() {
        let w = SyntheticWorld::generate(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_files(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("sts_test.tsv")).unwrap();
        let back = super::super::read_sts_tsv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 60);
        let (ds, _) = DictionaryDataset::parse(
            fs::read(dir.path().join("dictionary.jsonl")).unwrap().as_slice(),
            crate::dictionary::InputFormat::Jsonl,
            "synthetic",
        )
        .unwrap();
        assert_eq!(ds.n_definitions(), w.dictionary.n_definitions());
    }
}
