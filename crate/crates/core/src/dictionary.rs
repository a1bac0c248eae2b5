//! Dictionary datasets: (headword, definitions) entries with dense ids.
//!
//! The canonical on-disk form is JSON Lines, one `{"surface", "definition"}`
//! record per line. Definitions are deduplicated per entry after Unicode NFC
//! normalisation and trailing-whitespace trim.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub entry_id: usize,
    pub surface: String,
    pub definitions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DictionaryDataset {
    entries: Vec<Entry>,
    source_tags: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    Jsonl,
    /// `surface<TAB>gloss` per line; `#` starts a comment line.
    WordnetGlossTsv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub records: usize,
    pub skipped_empty: usize,
    pub duplicates_dropped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub total: usize,
    pub exploitation_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_definitions: usize,
    pub n_entries: usize,
    pub max_length_tokens: usize,
    pub median_length_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    surface: String,
    definition: String,
}

/// Dedup key for definitions.
pub fn normalize_definition(text: &str) -> String {
    text.nfc().collect::<String>().trim_end().to_string()
}

pub fn normalize_surface(text: &str) -> String {
    text.nfc().collect::<String>().trim().to_string()
}

/// Fraction of entries representable, `kept / total` (0 when `total` is 0).
pub fn exploitation_rate(kept: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        kept as f64 / total as f64
    }
}

/// Accumulates records while preserving first-seen order.
#[derive(Default)]
struct Builder {
    entries: Vec<(String, Vec<String>, HashSet<String>)>,
    by_surface: HashMap<String, usize>,
    duplicates: usize,
}

impl Builder {
    fn add(&mut self, surface: &str, definition: &str) {
        let surface = normalize_surface(surface);
        let definition = normalize_definition(definition);
        let idx = *self.by_surface.entry(surface.clone()).or_insert_with(|| {
            self.entries.push((surface, Vec::new(), HashSet::new()));
            self.entries.len() - 1
        });
        let (_, defs, seen) = &mut self.entries[idx];
        if seen.insert(definition.clone()) {
            defs.push(definition);
        } else {
            self.duplicates += 1;
        }
    }

    fn finish(self, source_tags: Vec<String>) -> DictionaryDataset {
        let entries = self
            .entries
            .into_iter()
            .enumerate()
            .map(|(entry_id, (surface, definitions, _))| Entry {
                entry_id,
                surface,
                definitions,
            })
            .collect();
        DictionaryDataset {
            entries,
            source_tags,
        }
    }
}

impl DictionaryDataset {
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn source_tags(&self) -> &[String] {
        &self.source_tags
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> Option<&Entry> {
        self.entries.get(id)
    }

    pub fn n_definitions(&self) -> usize {
        self.entries.iter().map(|e| e.definitions.len()).sum()
    }

    /// Build from (surface, definition) pairs, grouping and deduplicating.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        source_tag: impl Into<String>,
    ) -> Self {
        let mut b = Builder::default();
        for (s, d) in pairs {
            if !normalize_definition(d).is_empty() && !normalize_surface(s).is_empty() {
                b.add(s, d);
            }
        }
        b.finish(vec![source_tag.into()])
    }

    /// Parse a stream. Blank lines are ignored; empty definitions are skipped
    /// and counted; malformed lines fail with their 1-based line number.
    pub fn parse(
        reader: impl BufRead,
        format: InputFormat,
        source_tag: impl Into<String>,
    ) -> Result<(Self, ParseReport)> {
        let mut b = Builder::default();
        let mut report = ParseReport::default();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let (surface, definition) = match format {
                InputFormat::Jsonl => {
                    let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: lineno,
                        message: e.to_string(),
                    })?;
                    (rec.surface, rec.definition)
                }
                InputFormat::WordnetGlossTsv => {
                    if line.starts_with('#') {
                        continue;
                    }
                    let (s, d) = line.split_once('\t').ok_or_else(|| Error::Parse {
                        line: lineno,
                        message: "expected surface<TAB>gloss".into(),
                    })?;
                    (s.to_string(), d.to_string())
                }
            };
            if normalize_surface(&surface).is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "empty surface".into(),
                });
            }
            if normalize_definition(&definition).trim().is_empty() {
                report.skipped_empty += 1;
                continue;
            }
            report.records += 1;
            b.add(&surface, &definition);
        }
        if report.records == 0 {
            return Err(Error::Data("no records".into()));
        }
        report.duplicates_dropped = b.duplicates;
        Ok((b.finish(vec![source_tag.into()]), report))
    }

    /// JSON Lines, entries in id order, definitions in stored order.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            for d in &e.definitions {
                let rec = Record {
                    surface: e.surface.clone(),
                    definition: d.clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n").map_err(|err| Error::io("<jsonl writer>", err))?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 json")
    }

    /// Union entries by surface and definitions by dedup key; ids are reassigned
    /// densely in first-seen order across `datasets`.
    pub fn merge(datasets: &[DictionaryDataset]) -> Self {
        let mut b = Builder::default();
        let mut tags = Vec::new();
        for ds in datasets {
            for e in &ds.entries {
                for d in &e.definitions {
                    b.add(&e.surface, d);
                }
            }
            for t in &ds.source_tags {
                if !tags.contains(t) {
                    tags.push(t.clone());
                }
            }
        }
        b.finish(tags)
    }

    /// Keep entries whose surface is exactly one token of `vocab`.
    pub fn filter_single_word(&self, vocab: &HashSet<String>) -> (Self, FilterReport) {
        let mut b = Builder::default();
        let mut kept = 0;
        for e in &self.entries {
            let words = crate::tokenizer::split_words(&e.surface);
            if words.len() == 1 && vocab.contains(&words[0]) {
                kept += 1;
                for d in &e.definitions {
                    b.add(&e.surface, d);
                }
            }
        }
        let report = FilterReport {
            kept,
            total: self.entries.len(),
            exploitation_rate: exploitation_rate(kept, self.entries.len()),
        };
        (b.finish(self.source_tags.clone()), report)
    }

    /// Token-length statistics with `token_len` as the (total) length function.
    /// The median of an even count is the lower middle.
    pub fn stats(&self, token_len: impl Fn(&str) -> usize) -> DatasetStats {
        let mut lengths: Vec<usize> = self
            .entries
            .iter()
            .flat_map(|e| e.definitions.iter().map(|d| token_len(d)))
            .collect();
        lengths.sort_unstable();
        let median = if lengths.is_empty() {
            0
        } else {
            lengths[(lengths.len() - 1) / 2]
        };
        DatasetStats {
            n_definitions: lengths.len(),
            n_entries: self.entries.len(),
            max_length_tokens: lengths.last().copied().unwrap_or(0),
            median_length_tokens: median,
        }
    }

    /// Every (entry_id, definition) pair exactly once, shuffled by `seed`.
    pub fn pair_iterator(&self, seed: u64) -> Result<Vec<(usize, &str)>> {
        if self.entries.is_empty() {
            return Err(Error::Data("pair iteration over an empty dataset".into()));
        }
        let mut pairs: Vec<(usize, &str)> = self
            .entries
            .iter()
            .flat_map(|e| e.definitions.iter().map(move |d| (e.entry_id, d.as_str())))
            .collect();
        pairs.shuffle(&mut rng_from_seed(seed));
        Ok(pairs)
    }
}
