//! Config-driven runs. A [`RunConfig`] fully determines a run; every artifact
//! written carries the hash of the config that produced it.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::dictionary::{DictionaryDataset, InputFormat};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{read_sts_tsv, StsSet, SyntheticConfig, SyntheticWorld};
use crate::geometry::{top2_projection, ProjectionMode};
use crate::seed::derive_seed;
use crate::tokenizer::Tokenizer;
use crate::training::{pst_run, BaselineRecord, PstPlan, PstState, StepRecord, StsEvaluator};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Dictionary files; when empty the synthetic world supplies all data.
    pub dictionary: Vec<PathBuf>,
    pub dictionary_format: InputFormat,
    /// Tokenizer JSON; built from the dictionary when absent.
    pub vocab: Option<PathBuf>,
    pub dev: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderConfig,
    /// Start from a saved encoder instead of a fresh initialisation.
    pub base_checkpoint: Option<PathBuf>,
    pub plan: PstPlan,
    /// Not part of the config hash, so identical runs into different
    /// directories hash identically.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            dictionary: Vec::new(),
            dictionary_format: InputFormat::Jsonl,
            vocab: None,
            dev: Vec::new(),
            test: Vec::new(),
            synthetic: SyntheticConfig::default(),
            encoder: EncoderConfig::default(),
            base_checkpoint: None,
            plan: PstPlan::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config format version {}",
                self.format_version
            )));
        }
        if !self.dictionary.is_empty() && (self.dev.is_empty() || self.test.is_empty()) {
            return Err(Error::invalid("a dictionary run needs dev and test STS files"));
        }
        if self.dictionary.is_empty() {
            self.synthetic.validate()?;
        }
        self.plan.validate()
    }

    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        config_hash(&canonical)
    }
}

/// SHA-256 over the compact JSON form of `value`.
pub fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize to JSON");
    hex::encode(Sha256::digest(&json))
}

/// Writes artifacts under one directory, stamping each with the config hash.
#[derive(Clone, Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    hash: String,
}

impl ArtifactWriter {
    pub fn create(dir: impl Into<PathBuf>, hash: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            hash: hash.into(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(path)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Pretty JSON with a `config_hash` field added. Non-object values are
    /// wrapped as `{"config_hash", "value"}`.
    pub fn json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut out = serde_json::Map::new();
        out.insert("config_hash".into(), Value::String(self.hash.clone()));
        match serde_json::to_value(value)? {
            Value::Object(map) => out.extend(map),
            other => {
                out.insert("value".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(out))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// `# config_hash <hash>` comment line, then the header and rows.
    pub fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<PathBuf> {
        let mut text = format!("# config_hash {}\n{}\n", self.hash, header.join(","));
        for row in rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    pub fn container(&self, name: &str, mut container: Container) -> Result<PathBuf> {
        if let Value::Object(map) = &mut container.metadata {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let path = self.path(name)?;
        container.save(&path)?;
        Ok(path)
    }

    pub fn text(&self, name: &str, text: &str) -> Result<PathBuf> {
        self.write(name, text.as_bytes())
    }
}

/// Write `x` as an `n × 2` projection CSV with header `x,y`.
pub fn write_projection_csv(
    writer: &ArtifactWriter,
    name: &str,
    x: &nalgebra::DMatrix<f64>,
    mode: ProjectionMode,
) -> Result<PathBuf> {
    let p = top2_projection(x, mode)?;
    writer.csv(name, &["x", "y"], (0..p.nrows()).map(|i| vec![p[(i, 0)], p[(i, 1)]]))
}

/// Read a CSV written by [`ArtifactWriter::csv`], skipping comments and the header.
pub fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_dictionaries(paths: &[PathBuf], format: InputFormat) -> Result<DictionaryDataset> {
    if paths.is_empty() {
        return Err(Error::invalid("no dictionary inputs"));
    }
    let mut parts = Vec::with_capacity(paths.len());
    for path in paths {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (d, report) = DictionaryDataset::parse(BufReader::new(file), format, path.display().to_string())?;
        log::info!(
            "{}: {} records, {} empty skipped, {} duplicates dropped",
            path.display(),
            report.records,
            report.skipped_empty,
            report.duplicates_dropped
        );
        parts.push(d);
    }
    Ok(if parts.len() == 1 {
        parts.pop().expect("one part")
    } else {
        DictionaryDataset::merge(&parts)
    })
}

/// Each file becomes a set named after its file stem.
pub fn load_sts_sets(paths: &[PathBuf]) -> Result<Vec<StsSet>> {
    paths
        .iter()
        .map(|path| {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let pairs = read_sts_tsv(BufReader::new(file))?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            Ok((name, pairs))
        })
        .collect()
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Tokenizer::from_json(&text)
}

/// Everything a run trains and evaluates on.
#[derive(Clone, Debug)]
pub struct RunData {
    pub dataset: DictionaryDataset,
    pub evaluator: StsEvaluator,
}

pub fn load_data(config: &RunConfig) -> Result<RunData> {
    if config.dictionary.is_empty() {
        let world = SyntheticWorld::generate(config.synthetic.clone())?;
        let tokenizer = match &config.vocab {
            Some(p) => load_tokenizer(p)?,
            None => world.tokenizer(),
        };
        return Ok(RunData {
            evaluator: StsEvaluator {
                tokenizer,
                dev: vec![("synthetic_dev".into(), world.dev.clone())],
                test: vec![("synthetic_test".into(), world.test.clone())],
            },
            dataset: world.dictionary,
        });
    }
    let dataset = load_dictionaries(&config.dictionary, config.dictionary_format)?;
    let tokenizer = match &config.vocab {
        Some(p) => load_tokenizer(p)?,
        None => Tokenizer::build(
            dataset.entries().iter().flat_map(|e| e.definitions.iter().map(String::as_str)),
            1,
            config.encoder.vocab_size,
            &[],
        )?,
    };
    Ok(RunData {
        dataset,
        evaluator: StsEvaluator {
            tokenizer,
            dev: load_sts_sets(&config.dev)?,
            test: load_sts_sets(&config.test)?,
        },
    })
}

/// The run's base model: a loaded checkpoint, or a fresh encoder sized to the
/// tokenizer and seeded from the run seed.
pub fn base_encoder(config: &RunConfig, tokenizer: &Tokenizer) -> Result<EncoderParams<f32>> {
    let enc = match &config.base_checkpoint {
        Some(path) => EncoderParams::load(path)?,
        None => {
            let cfg = EncoderConfig {
                vocab_size: tokenizer.len(),
                ..config.encoder.clone()
            };
            EncoderParams::init(cfg, derive_seed(config.seed, "encoder-init", 0))?
        }
    };
    if enc.config.vocab_size != tokenizer.len() {
        return Err(Error::Data(format!(
            "encoder vocabulary {} does not match tokenizer size {}",
            enc.config.vocab_size,
            tokenizer.len()
        )));
    }
    Ok(enc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PstSummary {
    pub format_version: u32,
    pub base_fingerprint: String,
    pub n_entries: usize,
    pub n_definitions: usize,
    pub baseline: Vec<BaselineRecord>,
    pub steps: Vec<StepSummary>,
    pub final_step: usize,
    pub final_branch: String,
    pub final_combination: String,
    pub final_best_seed: u64,
    pub final_dev_average: f64,
    pub final_test_average: f64,
}

/// A step without per-seed detail (that lives in the record files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub learning_rate: f64,
    pub combination: String,
    pub source_encoder_fingerprint: String,
    pub selected_branch: String,
    pub best_seed: u64,
    pub best_encoder_fingerprint: String,
    pub best_dev_average: f64,
    pub best_test_average: f64,
    pub branches: Vec<BranchSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub branch: String,
    pub matrix_tag: String,
    pub matrix_fingerprint: String,
    pub mean_pairwise_cosine: f64,
    pub dev_mean: f64,
    pub dev_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

impl StepSummary {
    fn from_record(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            learning_rate: r.learning_rate,
            combination: r.combination.to_string(),
            source_encoder_fingerprint: r.source_encoder_fingerprint.clone(),
            selected_branch: r.selected_branch.name().into(),
            best_seed: r.best_seed,
            best_encoder_fingerprint: r.best_encoder_fingerprint.clone(),
            best_dev_average: r.best_dev_average,
            best_test_average: r.best_test.average,
            branches: r
                .branches
                .iter()
                .map(|b| BranchSummary {
                    branch: b.branch.name().into(),
                    matrix_tag: b.matrix_tag.clone(),
                    matrix_fingerprint: b.matrix_fingerprint.clone(),
                    mean_pairwise_cosine: b.geometry.mean_pairwise_cosine,
                    dev_mean: b.dev_summary.mean,
                    dev_std: b.dev_summary.std,
                    test_mean: b.test_summary.mean,
                    test_std: b.test_summary.std,
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct SeedRecordFile<'a> {
    step: usize,
    branch: &'a str,
    learning_rate: f64,
    combination: String,
    matrix_fingerprint: &'a str,
    #[serde(flatten)]
    record: &'a crate::training::SeedRecord,
}

/// Run the plan and write its artifacts:
///
/// ```text
/// config.toml  vocab.json  summary.json  grid_search_step{t}.json
/// records/step{t}_{branch}_seed{s}.json
/// matrices/step{t}_{branch}.emb   geometry/step{t}_{branch}.csv
/// checkpoints/step{t}_best.ckpt
/// ```
pub fn run_pst(config: &RunConfig) -> Result<(PstSummary, PstState<f32>)> {
    config.validate()?;
    let data = load_data(config)?;
    let base = base_encoder(config, &data.evaluator.tokenizer)?;
    let state = pst_run(&config.plan, &base, &data.dataset, &data.evaluator)?;

    let w = ArtifactWriter::create(&config.output_dir, config.hash())?;
    w.text("config.toml", &config.to_toml_string()?)?;
    w.text("vocab.json", &data.evaluator.tokenizer.to_json()?)?;
    for (step, matrices) in state.steps.iter().zip(&state.matrices) {
        let t = step.step;
        if let Some(g) = &step.grid_search {
            w.json(&format!("grid_search_step{t}.json"), g)?;
        }
        for (branch, matrix) in step.branches.iter().zip(matrices) {
            let name = branch.branch.name();
            for seed in &branch.seeds {
                let file = SeedRecordFile {
                    step: t,
                    branch: name,
                    learning_rate: step.learning_rate,
                    combination: step.combination.to_string(),
                    matrix_fingerprint: &branch.matrix_fingerprint,
                    record: seed,
                };
                w.json(&format!("records/step{t}_{name}_seed{}.json", seed.seed), &file)?;
            }
            w.container(&format!("matrices/step{t}_{name}.emb"), matrix.to_container())?;
            write_projection_csv(&w, &format!("geometry/step{t}_{name}.csv"), matrix.weights(), ProjectionMode::SvdRaw)?;
        }
    }
    for (step, enc) in state.steps.iter().zip(&state.best_encoders) {
        w.container(&format!("checkpoints/step{}_best.ckpt", step.step), enc.to_container())?;
    }

    let last = state.final_step();
    let summary = PstSummary {
        format_version: FORMAT_VERSION,
        base_fingerprint: state.base_fingerprint.clone(),
        n_entries: data.dataset.len(),
        n_definitions: data.dataset.n_definitions(),
        baseline: state.baseline.clone(),
        steps: state.steps.iter().map(StepSummary::from_record).collect(),
        final_step: last.step,
        final_branch: last.selected_branch.name().into(),
        final_combination: last.combination.to_string(),
        final_best_seed: last.best_seed,
        final_dev_average: last.best_dev_average,
        final_test_average: last.best_test.average,
    };
    w.json("summary.json", &summary)?;
    Ok((summary, state))
}
