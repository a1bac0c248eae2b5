use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use defsent::dictionary::InputFormat;
use defsent::encoder::{EncoderParams, PoolingStrategy, PromptTemplate};
use defsent::entry_embed::{build_entry_matrix, EntryEmbeddingMatrix, EntryPooling};
use defsent::eval::{sts_evaluate, SyntheticConfig, SyntheticWorld};
use defsent::experiment::{
    config_hash, load_dictionaries, load_sts_sets, load_tokenizer, run_pst, write_projection_csv,
    ArtifactWriter, RunConfig,
};
use defsent::geometry::{anisotropy_report, IcaConfig, ProjectionMode};
use defsent::tokenizer::split_words;
use defsent::training::{train_one_epoch, EncodingCombination, SentencePooling, TrainConfig};
use defsent::{Error, Result};

pub const OUTPUT_DIR_ENV: &str = "DEFSENT_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Jsonl,
    WordnetGlossTsv,
}

impl From<FormatArg> for InputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => InputFormat::Jsonl,
            FormatArg::WordnetGlossTsv => InputFormat::WordnetGlossTsv,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
pub enum EntryArg {
    #[value(name = "AC", alias = "ac")]
    Ac,
    #[value(name = "AMP", alias = "amp")]
    Amp,
}

impl From<EntryArg> for EntryPooling {
    fn from(e: EntryArg) -> Self {
        match e {
            EntryArg::Ac => EntryPooling::Ac,
            EntryArg::Amp => EntryPooling::Amp,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
pub enum SentenceArg {
    #[value(name = "CLS", alias = "cls")]
    Cls,
    #[value(name = "MEAN", alias = "mean")]
    Mean,
    #[value(name = "PROMPT", alias = "prompt")]
    Prompt,
}

impl SentenceArg {
    fn strategy(self) -> PoolingStrategy {
        match self {
            SentenceArg::Cls => PoolingStrategy::Cls,
            SentenceArg::Mean => PoolingStrategy::Mean,
            SentenceArg::Prompt => PoolingStrategy::Prompt {
                template: PromptTemplate::default(),
            },
        }
    }

    fn training(self) -> Result<SentencePooling> {
        match self {
            SentenceArg::Cls => Ok(SentencePooling::Cls),
            SentenceArg::Mean => Ok(SentencePooling::Mean),
            SentenceArg::Prompt => Err(Error::InvalidArgument(
                "training pools with CLS or MEAN".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    #[value(name = "svd_raw", alias = "svd-raw")]
    SvdRaw,
    #[value(name = "pca_whitened", alias = "pca-whitened")]
    PcaWhitened,
}

impl From<ModeArg> for ProjectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SvdRaw => ProjectionMode::SvdRaw,
            ModeArg::PcaWhitened => ProjectionMode::PcaWhitened,
        }
    }
}

/// Writer rooted at the output's directory, hashed over the invocation.
fn writer_for(output: &Path, args: &impl Serialize) -> Result<(ArtifactWriter, String)> {
    let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = output
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", output.display())))?
        .to_string_lossy()
        .into_owned();
    Ok((ArtifactWriter::create(dir, config_hash(args))?, name))
}

fn load_encoder(path: &Path) -> Result<EncoderParams<f32>> {
    EncoderParams::load(path)
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Input files; several inputs are merged by headword.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: FormatArg,
    /// Output dataset (JSON Lines).
    #[arg(long)]
    pub output: PathBuf,
    /// Stats report path; defaults to `<output>.stats.json`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Serialize)]
struct IngestReport {
    inputs: Vec<String>,
    n_entries: usize,
    n_definitions: usize,
    max_length_tokens: usize,
    median_length_tokens: usize,
}

fn word_count(text: &str) -> usize {
    split_words(text).len()
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let dataset = load_dictionaries(&args.inputs, args.format.into())?;
    let (w, name) = writer_for(&args.output, &args)?;
    let mut bytes = Vec::new();
    dataset.write_jsonl(&mut bytes)?;
    w.text(&name, &String::from_utf8(bytes).expect("datasets are UTF-8"))?;

    let stats = dataset.stats(word_count);
    let report = IngestReport {
        inputs: args.inputs.iter().map(|p| p.display().to_string()).collect(),
        n_entries: stats.n_entries,
        n_definitions: stats.n_definitions,
        max_length_tokens: stats.max_length_tokens,
        median_length_tokens: stats.median_length_tokens,
    };
    let stats_path = args
        .stats
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.stats.json", args.output.display())));
    let (sw, sname) = writer_for(&stats_path, &args)?;
    sw.json(&sname, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Dataset in JSON Lines.
    #[arg(long)]
    pub input: PathBuf,
    /// Headword vocabulary (one word per line) for the single-word filter.
    #[arg(long)]
    pub headword_vocab: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct StatsReport {
    n_entries: usize,
    n_definitions: usize,
    max_length_tokens: usize,
    median_length_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter: Option<defsent::dictionary::FilterReport>,
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let dataset = load_dictionaries(std::slice::from_ref(&args.input), InputFormat::Jsonl)?;
    let s = dataset.stats(word_count);
    let filter = match &args.headword_vocab {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let vocab: HashSet<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            Some(dataset.filter_single_word(&vocab).1)
        }
        None => None,
    };
    let report = StatsReport {
        n_entries: s.n_entries,
        n_definitions: s.n_definitions,
        max_length_tokens: s.max_length_tokens,
        median_length_tokens: s.median_length_tokens,
        filter,
    };
    if let Some(out) = &args.output {
        let (w, name) = writer_for(out, &args)?;
        w.json(&name, &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// TOML file with synthetic-world settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_entries: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Output directory (default: `$DEFSENT_OUTPUT_DIR/synthetic`).
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str::<SyntheticConfig>(&text)
                .map_err(|e| Error::InvalidArgument(format!("config: {e}")))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_entries {
        cfg.n_entries = n;
    }
    if let Some(v) = args.vocab_size {
        cfg.vocab_size = v;
    }
    let dir = args
        .output_dir
        .clone()
        .unwrap_or_else(|| crate::output_root().join("synthetic"));
    let world = SyntheticWorld::generate(cfg.clone())?;
    world.write_files(&dir)?;
    let w = ArtifactWriter::create(&dir, config_hash(&cfg))?;
    w.json("synthetic_config.json", &cfg)?;
    w.json(
        "oracle.json",
        &serde_json::json!({
            "bag_of_latents_dev": world.oracle_score(&world.dev)?,
            "bag_of_latents_test": world.oracle_score(&world.test)?,
        }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BuildEmbedsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Dataset in JSON Lines.
    #[arg(long)]
    pub dictionary: PathBuf,
    #[arg(long, value_enum, default_value = "AMP")]
    pub pooling: EntryArg,
    /// Also apply the ICA transform before writing.
    #[arg(long)]
    pub ica: bool,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn build_embeds(args: BuildEmbedsArgs) -> Result<()> {
    let encoder = load_encoder(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.vocab)?;
    let dataset = load_dictionaries(std::slice::from_ref(&args.dictionary), InputFormat::Jsonl)?;
    let (mut matrix, report) = build_entry_matrix(&encoder, &tokenizer, &dataset, args.pooling.into())?;
    if args.ica {
        let (m, outcome) = matrix.ica_transformed(&IcaConfig::default())?;
        if !outcome.converged {
            log::warn!("ICA stopped after {} iterations without converging", outcome.iterations);
        }
        matrix = m;
    }
    let (w, name) = writer_for(&args.output, &args)?;
    w.container(&name, matrix.to_container())?;
    println!(
        "{}",
        serde_json::json!({
            "builder_tag": matrix.builder_tag().to_string(),
            "n_entries": matrix.n_entries(),
            "dim": matrix.dim(),
            "fingerprint": matrix.fingerprint(),
            "truncated_definitions": report.truncated_definitions,
        })
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct GeometryArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write the ICA-transformed matrix here.
    #[arg(long)]
    pub ica_output: Option<PathBuf>,
}

pub fn geometry(args: GeometryArgs) -> Result<()> {
    let matrix = EntryEmbeddingMatrix::load(&args.matrix)?;
    let report = anisotropy_report(matrix.weights(), args.seed)?;
    if let Some(out) = &args.output {
        let (w, name) = writer_for(out, &args)?;
        w.json(&name, &report)?;
    }
    if let Some(out) = &args.ica_output {
        let (ica, outcome) = matrix.ica_transformed(&IcaConfig::default())?;
        let (w, name) = writer_for(out, &args)?;
        w.container(&name, ica.to_container())?;
        log::info!(
            "ICA: converged {} after {} iterations",
            outcome.converged,
            outcome.iterations
        );
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Base encoder; it is copied, never modified.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dictionary: PathBuf,
    /// Frozen entry matrix.
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, value_enum, default_value = "CLS")]
    pub pooling: SentenceArg,
    #[arg(long, default_value_t = 5e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trained checkpoint; a `<output>.json` record is written next to it.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let base = load_encoder(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.vocab)?;
    let dataset = load_dictionaries(std::slice::from_ref(&args.dictionary), InputFormat::Jsonl)?;
    let matrix = EntryEmbeddingMatrix::load(&args.matrix)?;
    let combination = EncodingCombination::new(args.pooling.training()?, matrix.builder_tag().pooling);
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let out = train_one_epoch(&base, &tokenizer, &matrix, &dataset, combination, &config)?;
    let (w, name) = writer_for(&args.output, &args)?;
    w.container(&name, out.params.to_container())?;
    w.json(
        &format!("{name}.json"),
        &serde_json::json!({
            "combination": combination.to_string(),
            "base_fingerprint": base.fingerprint(),
            "trained_fingerprint": out.params.fingerprint(),
            "matrix_fingerprint": matrix.fingerprint(),
            "losses": out.losses,
        }),
    )?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct PstArgs {
    /// Run config (TOML). Without it the synthetic world and defaults are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated per-step learning rates (also sets the step count).
    #[arg(long, value_delimiter = ',')]
    pub learning_rates: Option<Vec<f64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Skip the ICA branch at the final step.
    #[arg(long)]
    pub no_branch_compare: bool,
    /// Results directory; falls back to `$DEFSENT_OUTPUT_DIR`, then the config.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
}

pub fn pst(args: PstArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = &args.seeds {
        cfg.plan.seeds = s.clone();
    }
    if let Some(lr) = &args.learning_rates {
        cfg.plan.learning_rates = lr.clone();
    }
    if let Some(b) = args.batch_size {
        cfg.plan.batch_size = b;
    }
    if args.no_branch_compare {
        cfg.plan.compare_branches = false;
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    let (summary, _) = run_pst(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// STS files (score, sentence_a, sentence_b as TSV); one set per file.
    #[arg(long = "sts", required = true, num_args = 1..)]
    pub sts: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "CLS")]
    pub pooling: SentenceArg,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let encoder = load_encoder(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.vocab)?;
    let sets = load_sts_sets(&args.sts)?;
    let result = sts_evaluate(&encoder, &tokenizer, &args.pooling.strategy(), &sets)?;
    if let Some(out) = &args.output {
        let (w, name) = writer_for(out, &args)?;
        w.json(&name, &result)?;
    }
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ExportPlotArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, value_enum, default_value = "svd_raw")]
    pub mode: ModeArg,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn export_plot(args: ExportPlotArgs) -> Result<()> {
    let matrix = EntryEmbeddingMatrix::load(&args.matrix)?;
    let (w, name) = writer_for(&args.output, &args)?;
    write_projection_csv(&w, &name, matrix.weights(), args.mode.into())?;
    Ok(())
}
