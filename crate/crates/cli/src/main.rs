//! `negdistill`: corpus synthesis, entropy filtering, teacher training, distillation,
//! decoding and evaluation from one binary.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 numeric
//! failure. Errors print one line `error: code=<kind> exit=<n> <message>` on stderr.

mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use negdistill_core::corpus::{read_tsv, source_entropy, write_tsv, Dataset, RawPair, Split, Vocab};
use negdistill_core::decoding::{decode_texts, DecodeConfig, Strategy};
use negdistill_core::metrics::{KlDirection, MetricsConfig, MetricsReport, LF_THRESHOLD};
use negdistill_core::model::Parameters;
use negdistill_core::synth::{generate, SynthConfig};
use negdistill_core::training::{write_log_csv, Objective, RunConfig, TrainOutcome, TrainState, Trainer};
use negdistill_core::Error;

use manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            msg: msg.into(),
        }
    }

    fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            msg: msg.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    fn code_name(&self) -> &'static str {
        match self.kind {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.msg.replace('\n', " ");
        write!(f, "error: code={} exit={} {msg}", self.code_name(), self.exit_code())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Config(_) => Kind::Usage,
            Error::NonFinite(_) | Error::UndefinedMean(_) => Kind::Numeric,
            _ => Kind::Data,
        };
        Self { kind, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "negdistill", version, about = "Negative distillation toolkit for dialogue generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic many-to-one corpus (train/valid/test TSVs).
    Synth(SynthArgs),
    /// Rank training pairs by source entropy and split off the negative set.
    Filter(FilterArgs),
    /// Train a model with label-smoothed MLE (the negative teacher, or the baseline).
    TrainTeacher(TrainArgs),
    /// Train a student with the combined negative distillation objective.
    Distill(DistillArgs),
    /// Decode responses for a query file.
    Generate(GenerateArgs),
    /// Score hypotheses against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    templates: usize,
    #[arg(long, default_value_t = 2000)]
    queries: usize,
    #[arg(long, default_value_t = 0.5)]
    generic_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    valid_queries: usize,
    #[arg(long, default_value_t = 200)]
    test_queries: usize,
}

#[derive(Args)]
struct FilterArgs {
    /// Training TSV (`query \t response`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Share of pairs, by descending source entropy, placed in the negative set.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// Vocabulary size including the reserved tokens.
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
}

#[derive(Args)]
struct CommonTrain {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrain,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonTrain,
    #[arg(long)]
    teacher: PathBuf,
    /// Negative set; needed for random negative targets and `distill.exclude_negative`.
    #[arg(long)]
    negative: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Queries, one per line; a second tab-separated column is ignored.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "greedy")]
    strategy: String,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    #[arg(long, default_value_t = 30)]
    max_length: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Generated `query \t response` TSV; empty responses are allowed.
    #[arg(long)]
    hypotheses: PathBuf,
    /// Reference `query \t response` TSV, aligned line by line.
    #[arg(long)]
    references: PathBuf,
    /// Training vocabulary with frequencies; enables the LF ratio.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = LF_THRESHOLD)]
    lf_threshold: u64,
    #[arg(long, default_value = "ref||gen")]
    kl_direction: String,
    /// Report path; defaults to `<hypotheses>.metrics.json`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn read_pairs(path: &Path) -> CliResult<Vec<RawPair>> {
    if !path.exists() {
        return Err(CliError::data(format!("missing file {}", path.display())));
    }
    Ok(read_tsv(path)?)
}

/// Lines of a TSV as (first column, second column or empty).
fn read_columns(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| {
            let l = l.strip_suffix('\r').unwrap_or(l);
            match l.split_once('\t') {
                Some((q, r)) => (q.to_string(), r.to_string()),
                None => (l.to_string(), String::new()),
            }
        })
        .collect())
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let mut m = RunManifest::new("synth");
    let cfg = SynthConfig {
        templates: a.templates,
        queries: a.queries,
        generic_ratio: a.generic_ratio,
        seed: a.seed,
        valid_queries: a.valid_queries,
        test_queries: a.test_queries,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg)?;
    ensure_dir(&a.out_dir)?;
    for (name, pairs) in [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)] {
        let path = a.out_dir.join(format!("{name}.tsv"));
        write_tsv(&path, pairs)?;
        m.output(name, &path);
    }
    let tpath = a.out_dir.join("templates.txt");
    fs::write(&tpath, corpus.templates.join("\n") + "\n")?;
    m.output("templates", &tpath);
    m.seed = Some(a.seed);
    for (k, v) in [
        ("templates", cfg.templates.to_string()),
        ("queries", cfg.queries.to_string()),
        ("generic_ratio", cfg.generic_ratio.to_string()),
        ("valid_queries", cfg.valid_queries.to_string()),
        ("test_queries", cfg.test_queries.to_string()),
        ("lexicon_size", cfg.lexicon_size.to_string()),
        ("min_query_len", cfg.min_query_len.to_string()),
        ("max_query_len", cfg.max_query_len.to_string()),
    ] {
        m.set(k, v);
    }
    m.write(&a.out_dir.join("manifest.json"))?;
    println!("wrote {} train, {} valid, {} test pairs to {}", corpus.train.len(), corpus.valid.len(), corpus.test.len(), a.out_dir.display());
    Ok(())
}

fn cmd_filter(a: &FilterArgs) -> CliResult {
    let mut m = RunManifest::new("filter");
    let pairs = read_pairs(&a.input)?;
    m.input("input", &a.input);
    let table = source_entropy(&pairs);
    let (neg, rest) = negdistill_core::corpus::rank_and_split(&pairs, &table, a.ratio)?;
    let vocab = Vocab::build(&pairs, a.vocab_size)?;
    ensure_dir(&a.out_dir)?;
    let outputs = [
        ("negative", a.out_dir.join("negative.tsv")),
        ("rest", a.out_dir.join("rest.tsv")),
        ("entropy", a.out_dir.join("entropy.tsv")),
        ("vocab", a.out_dir.join("vocab.tsv")),
    ];
    write_tsv(&outputs[0].1, &neg)?;
    write_tsv(&outputs[1].1, &rest)?;
    table.write_tsv(&outputs[2].1)?;
    vocab.save(&outputs[3].1)?;
    for (k, p) in &outputs {
        m.output(k, p);
    }
    m.set("ratio", a.ratio);
    m.set("vocab_size", a.vocab_size);
    m.write(&a.out_dir.join("manifest.json"))?;
    println!("{} negative and {} remaining pairs; vocabulary of {}", neg.len(), rest.len(), vocab.len());
    Ok(())
}

fn load_run_config(c: &CommonTrain, m: &mut RunManifest) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::data(format!("missing file {}", p.display())));
            }
            m.input("config", p);
            RunConfig::load(p).map_err(|e| CliError::usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v).map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(p) = &c.train {
        cfg.train_path = Some(p.clone());
    }
    if let Some(p) = &c.valid {
        cfg.valid_path = Some(p.clone());
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn load_dataset(path: &Option<PathBuf>, what: &str, vocab: &Vocab, split: Split, m: &mut RunManifest) -> CliResult<Dataset> {
    let path = path
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("no {what} data given (flag or data.{what} key)")))?;
    m.input(what, path);
    Ok(Dataset::from_raw(&read_pairs(path)?, vocab, split)?)
}

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    if !path.exists() {
        return Err(CliError::data(format!("missing file {}", path.display())));
    }
    Ok(Vocab::load(path)?)
}

/// Runs or resumes a trainer, writes checkpoint, final state, CSV log and manifest.
fn run_training(trainer: &Trainer, common: &CommonTrain, name: &str, mut m: RunManifest, cfg: &RunConfig) -> CliResult {
    let mut state = match &common.resume {
        Some(p) => {
            m.input("resume", p);
            TrainState::load(p)?
        }
        None => trainer.init_state()?,
    };
    trainer.run(&mut state)?;
    let outcome: TrainOutcome = Trainer::finish(state);
    ensure_dir(&common.out_dir)?;
    let ckpt = common.out_dir.join(format!("{name}.ckpt"));
    let state_path = common.out_dir.join("state.ckpt");
    let log = common.out_dir.join("log.csv");
    outcome.params.save(&ckpt)?;
    outcome.state.save(&state_path)?;
    write_log_csv(&log, outcome.log())?;
    let back = Parameters::<f32>::load(&ckpt)?;
    if back != outcome.params {
        return Err(CliError::data("checkpoint failed to read back identically"));
    }
    m.output("checkpoint", &ckpt);
    m.output("state", &state_path);
    m.output("log", &log);
    for (k, v) in cfg.entries() {
        m.set(&k, v);
    }
    m.seed = Some(cfg.optim.seed);
    m.write(&common.out_dir.join("manifest.json"))?;
    println!("{}", negdistill_core::training::summary(&outcome));
    Ok(())
}

fn cmd_train_teacher(a: &TrainArgs) -> CliResult {
    let mut m = RunManifest::new("train-teacher");
    let cfg = load_run_config(&a.common, &mut m)?;
    let vocab = load_vocab(&a.common.vocab)?;
    m.input("vocab", &a.common.vocab);
    let train = load_dataset(&cfg.train_path, "train", &vocab, Split::Train, &mut m)?;
    let valid = load_dataset(&cfg.valid_path, "valid", &vocab, Split::Valid, &mut m)?;
    let model = cfg.model_config(vocab.len());
    let trainer = Trainer::new(&train, &valid, &model, &cfg.optim, Objective::Mle)?;
    run_training(&trainer, &a.common, "teacher", m, &cfg)
}

fn cmd_distill(a: &DistillArgs) -> CliResult {
    let mut m = RunManifest::new("distill");
    let cfg = load_run_config(&a.common, &mut m)?;
    let vocab = load_vocab(&a.common.vocab)?;
    m.input("vocab", &a.common.vocab);
    let mut train = load_dataset(&cfg.train_path, "train", &vocab, Split::Train, &mut m)?;
    let valid = load_dataset(&cfg.valid_path, "valid", &vocab, Split::Valid, &mut m)?;
    if !a.teacher.exists() {
        return Err(CliError::data(format!("missing file {}", a.teacher.display())));
    }
    let teacher = Parameters::<f32>::load(&a.teacher)?;
    m.input("teacher", &a.teacher);
    let negative = match &a.negative {
        Some(p) => {
            m.input("negative", p);
            Some(Dataset::from_raw(&read_pairs(p)?, &vocab, Split::Train)?)
        }
        None => None,
    };
    if cfg.exclude_negative {
        let neg = negative
            .as_ref()
            .ok_or_else(|| CliError::usage("distill.exclude_negative needs --negative"))?;
        let drop: std::collections::HashSet<(&str, &str)> =
            neg.pairs.iter().map(|p| (p.raw_query.as_str(), p.raw_response.as_str())).collect();
        let kept: Vec<_> = train
            .pairs
            .iter()
            .filter(|p| !drop.contains(&(p.raw_query.as_str(), p.raw_response.as_str())))
            .cloned()
            .collect();
        train = Dataset::new(kept, Split::Train);
    }
    let model = cfg.model_config(vocab.len());
    let objective = Objective::Distill {
        teacher: &teacher,
        schedule: cfg.schedule(),
        distill: cfg.distill,
        negative_pool: negative.as_ref(),
    };
    let trainer = Trainer::new(&train, &valid, &model, &cfg.optim, objective)?;
    run_training(&trainer, &a.common, "student", m, &cfg)
}

fn cmd_generate(a: &GenerateArgs) -> CliResult {
    let mut m = RunManifest::new("generate");
    let strategy: Strategy = a.strategy.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
    let cfg = DecodeConfig {
        strategy,
        beam_size: a.beam_size,
        length_penalty: a.length_penalty,
        max_decode_length: a.max_length,
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if !a.checkpoint.exists() {
        return Err(CliError::data(format!("missing file {}", a.checkpoint.display())));
    }
    let params = Parameters::<f32>::load(&a.checkpoint)?;
    let vocab = load_vocab(&a.vocab)?;
    let queries: Vec<String> = read_columns(&a.input)?.into_iter().map(|(q, _)| q).collect();
    let responses = decode_texts(&params, &vocab, &queries, &cfg)?;
    let mut out = String::new();
    for (q, r) in queries.iter().zip(&responses) {
        out.push_str(&format!("{q}\t{r}\n"));
    }
    fs::write(&a.output, out)?;
    m.input("checkpoint", &a.checkpoint);
    m.input("vocab", &a.vocab);
    m.input("input", &a.input);
    m.output("output", &a.output);
    m.set("strategy", &a.strategy);
    m.set("beam_size", a.beam_size);
    m.set("length_penalty", a.length_penalty);
    m.set("max_length", a.max_length);
    m.write(&manifest_path(&a.output))?;
    println!("decoded {} queries into {}", queries.len(), a.output.display());
    Ok(())
}

fn tokens(text: &str) -> Vec<String> {
    negdistill_core::corpus::normalize_tokens(text)
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let mut m = RunManifest::new("evaluate");
    let direction: KlDirection = a.kl_direction.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
    let hyps = read_columns(&a.hypotheses)?;
    let refs = read_pairs(&a.references)?;
    if hyps.len() != refs.len() {
        return Err(CliError::data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    for (i, ((hq, _), r)) in hyps.iter().zip(&refs).enumerate() {
        if tokens(hq) != tokens(&r.query) {
            return Err(CliError::data(format!("line {}: hypothesis and reference queries differ", i + 1)));
        }
    }
    let vocab = match &a.vocab {
        Some(p) => {
            m.input("vocab", p);
            Some(load_vocab(p)?)
        }
        None => None,
    };
    let decoding = RunManifest::read(&manifest_path(&a.hypotheses)).ok().map(|gm| {
        gm.config
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    });
    let generated: Vec<Vec<String>> = hyps.iter().map(|(_, r)| tokens(r)).collect();
    let references: Vec<Vec<String>> = refs.iter().map(|p| tokens(&p.response)).collect();
    let config = MetricsConfig {
        kl_direction: direction,
        lf_threshold: a.lf_threshold,
    };
    let report = MetricsReport::compute(&generated, &references, vocab.as_ref(), &config, decoding)?;
    let output = a.output.clone().unwrap_or_else(|| {
        let mut s = a.hypotheses.as_os_str().to_owned();
        s.push(".metrics.json");
        PathBuf::from(s)
    });
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(&output, json + "\n")?;
    print!("{}", report.to_table());
    m.input("hypotheses", &a.hypotheses);
    m.input("references", &a.references);
    m.output("report", &output);
    m.set("kl_direction", &a.kl_direction);
    m.set("lf_threshold", a.lf_threshold);
    m.write(&manifest_path(&output))?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Filter(a) => cmd_filter(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")));
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
