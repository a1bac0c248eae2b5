//! STS evaluation: cosine similarity, Spearman rank correlation, and a
//! synthetic semantic world with graded similarity pairs.

mod synthetic;

pub use synthetic::{gold, SyntheticConfig, SyntheticWorld};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_sentence, EncoderParams, PoolingStrategy};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "correlation needs two equal-length sequences of length >= 2 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("correlation of a constant sequence is undefined".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

/// Read `score<TAB>sentence_a<TAB>sentence_b` lines. Blank lines are skipped.
pub fn read_sts_tsv(reader: impl BufRead) -> Result<Vec<StsPair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        let err = |message: String| Error::Parse { line: i + 1, message };
        if parts.len() != 3 {
            return Err(err("expected score, sentence_a and sentence_b separated by tabs".into()));
        }
        let gold_score: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad score {:?}", parts[0])))?;
        if !gold_score.is_finite() {
            return Err(err("score must be finite".into()));
        }
        out.push(StsPair {
            sentence_a: parts[1].to_string(),
            sentence_b: parts[2].to_string(),
            gold_score,
        });
    }
    Ok(out)
}

pub fn write_sts_tsv(pairs: &[StsPair], mut out: impl Write) -> std::io::Result<()> {
    for p in pairs {
        writeln!(out, "{}\t{}\t{}", p.gold_score, p.sentence_a, p.sentence_b)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_set_rho_x100: BTreeMap<String, f64>,
    pub average: f64,
}

impl EvalResult {
    pub fn from_sets(per_set_rho_x100: BTreeMap<String, f64>) -> Self {
        let average = if per_set_rho_x100.is_empty() {
            0.0
        } else {
            per_set_rho_x100.values().sum::<f64>() / per_set_rho_x100.len() as f64
        };
        Self {
            per_set_rho_x100,
            average,
        }
    }
}

/// A named list of pairs.
pub type StsSet = (String, Vec<StsPair>);

/// Spearman ρ×100 of one set under an arbitrary sentence embedder. Constant
/// predicted similarities carry no ranking information and score 0.
pub fn evaluate_set(
    pairs: &[StsPair],
    embed: impl Fn(&str) -> Result<Vec<f64>> + Sync,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("empty STS set".into()));
    }
    let predicted: Vec<f64> = pairs
        .par_iter()
        .map(|p| cosine(&embed(&p.sentence_a)?, &embed(&p.sentence_b)?))
        .collect::<Result<_>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    if gold.iter().all(|&g| g == gold[0]) {
        return Err(Error::Data("gold scores of an STS set are constant".into()));
    }
    match spearman(&predicted, &gold) {
        Ok(rho) => Ok(rho * 100.0),
        Err(Error::Numeric(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

pub fn evaluate_with(
    sets: &[StsSet],
    embed: impl Fn(&str) -> Result<Vec<f64>> + Sync,
) -> Result<EvalResult> {
    if sets.is_empty() {
        return Err(Error::Data("no STS sets to evaluate".into()));
    }
    let mut per_set = BTreeMap::new();
    for (name, pairs) in sets {
        per_set.insert(name.clone(), evaluate_set(pairs, &embed)?);
    }
    Ok(EvalResult::from_sets(per_set))
}

/// Evaluate pooled last hidden states of `encoder` on every set.
pub fn sts_evaluate<T: Scalar>(
    encoder: &EncoderParams<T>,
    tokenizer: &Tokenizer,
    pooling: &PoolingStrategy,
    sets: &[StsSet],
) -> Result<EvalResult> {
    evaluate_with(sets, |s| {
        let (v, _) = embed_sentence(encoder, tokenizer, s, pooling)?;
        Ok(v.into_iter().map(Scalar::as_f64).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine(&v, &v3).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    /// Ranks by counting: rank = #less + (#equal + 1) / 2.
    fn brute_ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&a| {
                let less = x.iter().filter(|&&b| b < a).count() as f64;
                let equal = x.iter().filter(|&&b| b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (brute_ranks(x), brute_ranks(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_cases() {
        let x = [3.0, 1.0, 4.0, 1.5, 9.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let (a, b) = ([1.0, 2.0, 2.0, 4.0], [10.0, 20.0, 30.0, 40.0]);
        assert_eq!(average_ranks(&a), vec![1.0, 2.5, 2.5, 4.0]);
        assert!((spearman(&a, &b).unwrap() - brute_spearman(&a, &b)).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_matches_brute_force_with_ties() {
        let mut rng = rng_from_seed(17);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let expected = brute_spearman(&x, &y);
            match spearman(&x, &y) {
                Ok(r) => assert!((r - expected).abs() < 1e-12),
                Err(_) => assert!(!expected.is_finite()),
            }
        }
    }

    proptest! {
        #[test]
        fn spearman_is_monotone_invariant(x in prop::collection::vec(-100.0f64..100.0, 3..30), seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(base) = spearman(&x, &y) {
                let tx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * 3.0 + 1.0).collect();
                let ty: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
                prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-9);
            }
        }
    }

    fn vector_for(s: &str) -> Vec<f64> {
        let mut rng = rng_from_seed(s.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
        (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn pairs(n: usize) -> Vec<StsPair> {
        (0..n)
            .map(|i| StsPair {
                sentence_a: format!("a{i}"),
                sentence_b: format!("b{i}"),
                gold_score: 0.0,
            })
            .collect()
    }

    #[test]
    fn self_consistent_gold_scores_perfectly() {
        let mut ps = pairs(50);
        for p in &mut ps {
            p.gold_score = cosine(&vector_for(&p.sentence_a), &vector_for(&p.sentence_b)).unwrap();
        }
        let r = evaluate_with(&[("s".into(), ps)], |s| Ok(vector_for(s))).unwrap();
        assert!((r.average - 100.0).abs() < 1e-9);
    }

    #[test]
    fn permuted_gold_is_near_null() {
        let mut ps = pairs(200);
        let mut gold: Vec<f64> = ps
            .iter()
            .map(|p| cosine(&vector_for(&p.sentence_a), &vector_for(&p.sentence_b)).unwrap())
            .collect();
        gold.shuffle(&mut rng_from_seed(2024));
        for (p, g) in ps.iter_mut().zip(gold) {
            p.gold_score = g;
        }
        let r = evaluate_set(&ps, |s| Ok(vector_for(s))).unwrap();
        assert!(r.abs() < 15.0, "{r}");
    }

    #[test]
    fn scaling_embeddings_changes_nothing() {
        let mut ps = pairs(40);
        for (i, p) in ps.iter_mut().enumerate() {
            p.gold_score = (i % 7) as f64;
        }
        let a = evaluate_set(&ps, |s| Ok(vector_for(s))).unwrap();
        let b = evaluate_set(&ps, |s| Ok(vector_for(s).into_iter().map(|v| v * 12.5).collect())).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn evaluation_errors() {
        assert!(evaluate_set(&[], |s| Ok(vector_for(s))).is_err());
        assert!(evaluate_with(&[], |s| Ok(vector_for(s))).is_err());
        let mut ps = pairs(5);
        for (i, p) in ps.iter_mut().enumerate() {
            p.gold_score = i as f64;
        }
        // constant embeddings: no ranking signal
        assert_eq!(evaluate_set(&ps, |_| Ok(vec![1.0, 2.0])).unwrap(), 0.0);
    }

    #[test]
    fn average_is_arithmetic_mean() {
        let r = EvalResult::from_sets([("a".to_string(), 10.0), ("b".to_string(), 30.0)].into());
        assert_eq!(r.average, 20.0);
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let ps = vec![
            StsPair { sentence_a: "a cat".into(), sentence_b: "a dog".into(), gold_score: 3.5 },
            StsPair { sentence_a: "x".into(), sentence_b: "y z".into(), gold_score: 0.0 },
        ];
        let mut buf = Vec::new();
        write_sts_tsv(&ps, &mut buf).unwrap();
        assert_eq!(read_sts_tsv(buf.as_slice()).unwrap(), ps);
        match read_sts_tsv("1.0\tonly one\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(read_sts_tsv("\nfoo\ta\tb\n".as_bytes()).is_err());
    }
}
