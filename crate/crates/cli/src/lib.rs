//! Command-line front end: corpus synthesis, training, generation,
//! evaluation and latency benchmarking from one binary.
//!
//! Every command reads an optional `key = value` config file
//! (`#` comments allowed) and lets flags override it; the fully
//! resolved configuration is written next to the command's outputs so
//! any run can be replayed from its artifacts. All randomness flows
//! from the single `seed` value.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dal_core::data::{
    decode, encode, load_corpus, synthesize_corpus, SyntheticSpec, TokenSeq, Vocab,
};
use dal_core::eval::{benchmark_latency, evaluate_systems};
use dal_core::mmi::{mmi_anti_decode, mmi_bidi_decode, MmiConfig};
use dal_core::seq2seq::{beam_decode, greedy_decode};
use dal_core::trainer::{load_checkpoint, train, EpochRecord, TrainConfig, TrainMode};
use dal_core::DalModel;

/// Failures split by exit code: usage problems exit 1, runtime
/// failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime<E: fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "dal",
    version,
    about = "Dual adversarial learning for paired sequence generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic query-response corpus as TSV.
    SynthData(SynthDataArgs),
    /// Train a model; writes checkpoint, training log and config.
    Train(TrainArgs),
    /// Decode a response for every query with one strategy.
    Generate(GenerateArgs),
    /// Run every decoding strategy and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Measure mean decode latency per strategy.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output TSV file, one `query<TAB>response` per line.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of shared ("safe") responses.
    #[arg(long)]
    n_safe: Option<usize>,
    /// Queries linked to each shared response.
    #[arg(long)]
    m: Option<usize>,
    /// Number of one-to-one pairs.
    #[arg(long)]
    n_diverse: Option<usize>,
    /// Token alphabet size.
    #[arg(long)]
    alphabet: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus TSV (as written by synth-data).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for checkpoint, log and config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of mle-only, dual-only, adv-only, dual-adv.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    lambda_qr: Option<f64>,
    #[arg(long)]
    lambda_rq: Option<f64>,
    #[arg(long)]
    disc_steps: Option<usize>,
    #[arg(long)]
    gen_steps: Option<usize>,
    #[arg(long)]
    lr_gen: Option<f64>,
    #[arg(long)]
    lr_disc: Option<f64>,
    /// Gradient clipping norm; `inf` disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    baseline_decay: Option<f64>,
    #[arg(long)]
    smoothing_k: Option<f64>,
    #[arg(long)]
    pretrain_epochs_gen: Option<usize>,
    #[arg(long)]
    pretrain_epochs_disc: Option<usize>,
    #[arg(long)]
    dal_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sampling/decoding length cap during training.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MmiFlags {
    #[arg(long)]
    anti_lm_weight: Option<f64>,
    #[arg(long)]
    anti_lm_length_threshold: Option<usize>,
    #[arg(long)]
    bidi_nbest: Option<usize>,
    #[arg(long)]
    bidi_reverse_weight: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query file, one utterance per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Output file, one response per query line.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of greedy, beam, mmi-anti, mmi-bidi.
    #[arg(long)]
    decoder: Option<DecoderKind>,
    /// Beam width for the plain beam decoder.
    #[arg(long)]
    beam_size: Option<usize>,
    /// Response length cap; defaults to the checkpoint's value.
    #[arg(long)]
    max_len: Option<usize>,
    #[command(flatten)]
    mmi: MmiFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Likelihood-only reference checkpoint for the baseline row.
    #[arg(long)]
    baseline_checkpoint: Option<PathBuf>,
    /// Query file, one utterance per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Output directory for the report and response files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Timed passes per latency measurement.
    #[arg(long)]
    repetitions: Option<usize>,
    #[command(flatten)]
    mmi: MmiFlags,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query file, one utterance per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Optional output directory for bench.txt and config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Timed passes per latency measurement.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Response length cap; defaults to the checkpoint's value.
    #[arg(long)]
    max_len: Option<usize>,
    #[command(flatten)]
    mmi: MmiFlags,
}

/// Decoding strategy selector for `generate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Greedy,
    Beam,
    MmiAnti,
    MmiBidi,
}

impl DecoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderKind::Greedy => "greedy",
            DecoderKind::Beam => "beam",
            DecoderKind::MmiAnti => "mmi-anti",
            DecoderKind::MmiBidi => "mmi-bidi",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            DecoderKind::Greedy,
            DecoderKind::Beam,
            DecoderKind::MmiAnti,
            DecoderKind::MmiBidi,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
        .ok_or_else(|| format!("unknown decoder {s:?}; expected greedy, beam, mmi-anti or mmi-bidi"))
    }
}

/// Entry point shared by the binary and the tests; returns the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// Parses a line-oriented `key = value` file. `#` starts a comment;
/// blank lines are skipped; duplicate keys are rejected.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| CliError::Usage(format!("{}:{}: {msg}", path.display(), idx + 1));
        let Some((key, value)) = line.split_once('=') else {
            return Err(at(format!("expected `key = value`, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(at("empty key or value".into()));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(at(format!("duplicate key {key:?}")));
        }
    }
    Ok(map)
}

/// Merges flags over config-file entries over defaults, records every
/// resolved value for the emitted config, and rejects keys the command
/// does not understand.
struct Resolver {
    source: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    fn new(command: &str, config: Option<&Path>) -> Result<Self, CliError> {
        let source = match config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };
        if let Some(found) = source.get("command") {
            if found != command {
                return Err(CliError::Usage(format!(
                    "config file belongs to `{found}`, not `{command}`"
                )));
            }
        }
        let mut consumed = BTreeSet::new();
        consumed.insert("command".to_string());
        Ok(Resolver {
            source,
            consumed,
            resolved: vec![("command".to_string(), command.to_string())],
        })
    }

    fn get<V>(&mut self, key: &str, flag: Option<V>, default: V) -> Result<V, CliError>
    where
        V: FromStr + fmt::Display,
        V::Err: fmt::Display,
    {
        self.consumed.insert(key.to_string());
        let value = match flag {
            Some(v) => v,
            None => match self.source.get(key) {
                Some(raw) => raw.parse().map_err(|e| {
                    CliError::Usage(format!("config key {key}: cannot parse {raw:?}: {e}"))
                })?,
                None => default,
            },
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path_opt(key, flag).ok_or_else(|| {
            CliError::Usage(format!("missing --{key} (flag or config key `{key}`)"))
        })
    }

    fn path_opt(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        self.consumed.insert(key.to_string());
        let value = flag.or_else(|| self.source.get(key).map(PathBuf::from));
        if let Some(p) = &value {
            self.resolved.push((key.to_string(), p.display().to_string()));
        }
        value
    }

    /// Finalizes into the resolved-config file text.
    fn finish(self) -> Result<String, CliError> {
        let unknown: Vec<&str> = self
            .source
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        let mut out =
            String::from("# resolved configuration; pass back via --config to replay this run\n");
        for (key, value) in &self.resolved {
            let _ = writeln!(out, "{key} = {value}");
        }
        Ok(out)
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, content).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Config path next to a file output: `corpus.tsv` →
/// `corpus.tsv.run-config.txt`.
fn sibling_config(out_file: &Path) -> PathBuf {
    let mut name = out_file.as_os_str().to_os_string();
    name.push(".run-config.txt");
    PathBuf::from(name)
}

fn read_queries(path: &Path, vocab: &Vocab) -> Result<Vec<TokenSeq>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| runtime(format!("cannot read queries {}: {e}", path.display())))?;
    let mut queries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.split_whitespace().next().is_none() {
            return Err(runtime(format!(
                "{}:{}: empty query line",
                path.display(),
                idx + 1
            )));
        }
        queries.push(encode(line, vocab));
    }
    if queries.is_empty() {
        return Err(runtime(format!("no queries in {}", path.display())));
    }
    Ok(queries)
}

fn resolve_mmi(r: &mut Resolver, f: &MmiFlags) -> Result<MmiConfig, CliError> {
    let d = MmiConfig::default();
    let cfg = MmiConfig {
        anti_lm_weight: r.get("anti-lm-weight", f.anti_lm_weight, d.anti_lm_weight)?,
        anti_lm_length_threshold: r.get(
            "anti-lm-length-threshold",
            f.anti_lm_length_threshold,
            d.anti_lm_length_threshold,
        )?,
        bidi_nbest: r.get("bidi-nbest", f.bidi_nbest, d.bidi_nbest)?,
        bidi_reverse_weight: r.get(
            "bidi-reverse-weight",
            f.bidi_reverse_weight,
            d.bidi_reverse_weight,
        )?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_synth_data(a: SynthDataArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("synth-data", a.config.as_deref())?;
    let out = r.path("out", a.out)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        n_safe: r.get("n-safe", a.n_safe, d.n_safe)?,
        m: r.get("m", a.m, d.m)?,
        n_diverse: r.get("n-diverse", a.n_diverse, d.n_diverse)?,
        alphabet: r.get("alphabet", a.alphabet, d.alphabet)?,
        min_len: r.get("min-len", a.min_len, d.min_len)?,
        max_len: r.get("max-len", a.max_len, d.max_len)?,
    };
    let resolved = r.finish()?;

    let corpus = synthesize_corpus(&spec, seed).map_err(runtime)?;
    let mut text = String::new();
    for pair in corpus.pairs() {
        let q = decode(pair.query(), corpus.vocab()).map_err(runtime)?;
        let resp = decode(pair.response(), corpus.vocab()).map_err(runtime)?;
        let _ = writeln!(text, "{q}\t{resp}");
    }
    write_file(&out, &text)?;
    write_file(&sibling_config(&out), &resolved)?;
    println!("wrote {} pairs to {}", corpus.len(), out.display());
    Ok(())
}

fn resolve_train_config(r: &mut Resolver, a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        mode: r.get("mode", a.mode, d.mode)?,
        embed_dim: r.get("embed-dim", a.embed_dim, d.embed_dim)?,
        hidden_dim: r.get("hidden-dim", a.hidden_dim, d.hidden_dim)?,
        lambda_qr: r.get("lambda-qr", a.lambda_qr, d.lambda_qr)?,
        lambda_rq: r.get("lambda-rq", a.lambda_rq, d.lambda_rq)?,
        disc_steps: r.get("disc-steps", a.disc_steps, d.disc_steps)?,
        gen_steps: r.get("gen-steps", a.gen_steps, d.gen_steps)?,
        lr_gen: r.get("lr-gen", a.lr_gen, d.lr_gen)?,
        lr_disc: r.get("lr-disc", a.lr_disc, d.lr_disc)?,
        grad_clip: r.get("grad-clip", a.grad_clip, d.grad_clip)?,
        baseline_decay: r.get("baseline-decay", a.baseline_decay, d.baseline_decay)?,
        smoothing_k: r.get("smoothing-k", a.smoothing_k, d.smoothing_k)?,
        pretrain_epochs_gen: r.get(
            "pretrain-epochs-gen",
            a.pretrain_epochs_gen,
            d.pretrain_epochs_gen,
        )?,
        pretrain_epochs_disc: r.get(
            "pretrain-epochs-disc",
            a.pretrain_epochs_disc,
            d.pretrain_epochs_disc,
        )?,
        dal_epochs: r.get("dal-epochs", a.dal_epochs, d.dal_epochs)?,
        batch_size: r.get("batch-size", a.batch_size, d.batch_size)?,
        max_len: r.get("max-len", a.max_len, d.max_len)?,
        seed: r.get("seed", a.seed, d.seed)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn render_record(rec: &EpochRecord) -> String {
    let mut parts = vec![format!("phase={}", rec.phase), format!("epoch={}", rec.epoch)];
    fn add(parts: &mut Vec<String>, key: &str, value: Option<f64>) {
        if let Some(v) = value {
            parts.push(format!("{key}={v:.4}"));
        }
    }
    add(&mut parts, "nll-qr", rec.mean_nll_qr);
    add(&mut parts, "nll-rq", rec.mean_nll_rq);
    add(&mut parts, "disc-loss-qr", rec.mean_disc_loss_qr);
    add(&mut parts, "disc-loss-rq", rec.mean_disc_loss_rq);
    add(&mut parts, "dual", rec.mean_dual);
    add(&mut parts, "reward-qr", rec.mean_reward_qr);
    add(&mut parts, "reward-rq", rec.mean_reward_rq);
    parts.join(" ")
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("train", a.config.as_deref())?;
    let corpus_path = r.path("corpus", a.corpus.clone())?;
    let out = r.path("out", a.out.clone())?;
    let cfg = resolve_train_config(&mut r, &a)?;
    let resolved = r.finish()?;

    let loaded = load_corpus(&corpus_path, None).map_err(runtime)?;
    if loaded.malformed_lines > 0 {
        eprintln!(
            "warning: skipped {} malformed corpus lines",
            loaded.malformed_lines
        );
    }
    fs::create_dir_all(&out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("run-config.txt"), &resolved)?;

    let mut model = DalModel::init(loaded.corpus.vocab().clone(), cfg).map_err(runtime)?;
    let ckpt = out.join("final.ckpt");
    let log = train(&mut model, &loaded.corpus, Some(&ckpt)).map_err(runtime)?;
    for rec in &log.records {
        println!("{}", render_record(rec));
    }
    let json = serde_json::to_string_pretty(&log).map_err(runtime)?;
    write_file(&out.join("train-log.json"), &(json + "\n"))?;
    println!(
        "trained {} on {} pairs; checkpoint at {}",
        cfg.mode,
        loaded.corpus.len(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("generate", a.config.as_deref())?;
    let ckpt = r.path("checkpoint", a.checkpoint.clone())?;
    let queries_path = r.path("queries", a.queries.clone())?;
    let out = r.path("out", a.out.clone())?;
    let decoder = r.get("decoder", a.decoder, DecoderKind::Greedy)?;
    let beam_size = r.get("beam-size", a.beam_size, 5usize)?;
    if beam_size == 0 {
        return Err(CliError::Usage("beam-size must be at least 1".into()));
    }
    let mmi_cfg = resolve_mmi(&mut r, &a.mmi)?;

    let model: DalModel = load_checkpoint(&ckpt).map_err(runtime)?;
    let max_len = r.get("max-len", a.max_len, model.config.max_len)?;
    let resolved = r.finish()?;

    let queries = read_queries(&queries_path, &model.vocab)?;
    let mut text = String::new();
    for query in &queries {
        let tokens = match decoder {
            DecoderKind::Greedy => greedy_decode(&model.gen_qr, query, max_len).map_err(runtime)?,
            DecoderKind::Beam => beam_decode(&model.gen_qr, query, beam_size, max_len)
                .map_err(runtime)?
                .into_iter()
                .next()
                .map(|(tokens, _)| tokens)
                .expect("beam search returns at least one hypothesis"),
            DecoderKind::MmiAnti => {
                mmi_anti_decode(&model.gen_qr, &model.lm_r, &mmi_cfg, query, max_len)
                    .map_err(runtime)?
            }
            DecoderKind::MmiBidi => {
                mmi_bidi_decode(&model.gen_qr, &model.gen_rq, &mmi_cfg, query, max_len)
                    .map_err(runtime)?
                    .tokens
            }
        };
        let _ = writeln!(text, "{}", decode(&tokens, &model.vocab).map_err(runtime)?);
    }
    write_file(&out, &text)?;
    write_file(&sibling_config(&out), &resolved)?;
    println!(
        "decoded {} queries with {} into {}",
        queries.len(),
        decoder,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("evaluate", a.config.as_deref())?;
    let ckpt = r.path("checkpoint", a.checkpoint.clone())?;
    let baseline_path = r.path_opt("baseline-checkpoint", a.baseline_checkpoint.clone());
    let queries_path = r.path("queries", a.queries.clone())?;
    let out = r.path("out", a.out.clone())?;
    let repetitions = r.get("repetitions", a.repetitions, 10usize)?;
    if repetitions == 0 {
        return Err(CliError::Usage("repetitions must be at least 1".into()));
    }
    let mmi_cfg = resolve_mmi(&mut r, &a.mmi)?;
    let resolved = r.finish()?;

    let model: DalModel = load_checkpoint(&ckpt).map_err(runtime)?;
    let baseline: Option<DalModel> = match &baseline_path {
        Some(p) => Some(load_checkpoint(p).map_err(runtime)?),
        None => None,
    };
    let queries = read_queries(&queries_path, &model.vocab)?;
    fs::create_dir_all(&out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("run-config.txt"), &resolved)?;

    let report = evaluate_systems(
        &model,
        &mmi_cfg,
        &queries,
        repetitions,
        baseline.as_ref(),
        &out,
    )
    .map_err(runtime)?;
    for system in &report.systems {
        println!(
            "{}: distinct1={:.4} distinct2={:.4} mean-len={:.2} latency-ms={:.3}",
            system.system,
            system.distinct1,
            system.distinct2,
            system.mean_response_len,
            system.latency_ms
        );
    }
    println!("report at {}", report.report_path.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let mut r = Resolver::new("bench", a.config.as_deref())?;
    let ckpt = r.path("checkpoint", a.checkpoint.clone())?;
    let queries_path = r.path("queries", a.queries.clone())?;
    let out = r.path_opt("out", a.out.clone());
    let repetitions = r.get("repetitions", a.repetitions, 10usize)?;
    if repetitions == 0 {
        return Err(CliError::Usage("repetitions must be at least 1".into()));
    }
    let mmi_cfg = resolve_mmi(&mut r, &a.mmi)?;

    let model: DalModel = load_checkpoint(&ckpt).map_err(runtime)?;
    let max_len = r.get("max-len", a.max_len, model.config.max_len)?;
    let resolved = r.finish()?;
    let queries = read_queries(&queries_path, &model.vocab)?;

    // Surface decode errors once up front; the timing closures below
    // discard results.
    let probe = &queries[0];
    greedy_decode(&model.gen_qr, probe, max_len).map_err(runtime)?;
    mmi_anti_decode(&model.gen_qr, &model.lm_r, &mmi_cfg, probe, max_len).map_err(runtime)?;
    mmi_bidi_decode(&model.gen_qr, &model.gen_rq, &mmi_cfg, probe, max_len).map_err(runtime)?;

    let mut rows: Vec<(String, f64)> = Vec::new();
    rows.push((
        "greedy".into(),
        benchmark_latency(
            |q| {
                let _ = greedy_decode(&model.gen_qr, q, max_len);
            },
            &queries,
            repetitions,
        ),
    ));
    rows.push((
        "mmi-anti".into(),
        benchmark_latency(
            |q| {
                let _ = mmi_anti_decode(&model.gen_qr, &model.lm_r, &mmi_cfg, q, max_len);
            },
            &queries,
            repetitions,
        ),
    ));
    // The bidi widths mirror the usual efficiency comparison; the
    // `bidi-nbest` setting still applies to generate/evaluate.
    for nbest in [5usize, 10, 20] {
        let mut cfg = mmi_cfg;
        cfg.bidi_nbest = nbest;
        rows.push((
            format!("mmi-bidi-{nbest}"),
            benchmark_latency(
                |q| {
                    let _ = mmi_bidi_decode(&model.gen_qr, &model.gen_rq, &cfg, q, max_len);
                },
                &queries,
                repetitions,
            ),
        ));
    }

    let mut text = String::new();
    let _ = writeln!(text, "queries = {}", queries.len());
    let _ = writeln!(text, "repetitions = {repetitions}");
    for (name, ms) in &rows {
        let _ = writeln!(text, "latency-ms.{name} = {ms}");
    }
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(&dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        write_file(&dir.join("bench.txt"), &text)?;
        write_file(&dir.join("run-config.txt"), &resolved)?;
        println!("written to {}", dir.join("bench.txt").display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn config_file_parses_comments_blanks_and_spacing() {
        let f = write_tmp("# header\n\nseed = 7\n  mode=dual-adv # trailing\nlr-gen =0.3\n");
        let map = parse_config_file(f.path()).unwrap();
        assert_eq!(map["seed"], "7");
        assert_eq!(map["mode"], "dual-adv");
        assert_eq!(map["lr-gen"], "0.3");
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn config_file_rejects_malformed_lines() {
        for bad in ["just-a-word\n", "key =\n", "= value\n", "a = 1\na = 2\n"] {
            let f = write_tmp(bad);
            assert!(
                matches!(parse_config_file(f.path()), Err(CliError::Usage(_))),
                "accepted {bad:?}"
            );
        }
    }

    #[test]
    fn flags_override_config_which_overrides_defaults() {
        let f = write_tmp("seed = 3\n");
        let mut r = Resolver::new("synth-data", Some(f.path())).unwrap();
        assert_eq!(r.get("seed", Some(4u64), 0).unwrap(), 4);
        let mut r = Resolver::new("synth-data", Some(f.path())).unwrap();
        assert_eq!(r.get("seed", None::<u64>, 0).unwrap(), 3);
        let mut r = Resolver::new("synth-data", None).unwrap();
        assert_eq!(r.get("seed", None::<u64>, 0).unwrap(), 0);
    }

    #[test]
    fn unknown_config_keys_are_rejected_at_finish() {
        let f = write_tmp("seed = 3\nbogus = 1\n");
        let mut r = Resolver::new("synth-data", Some(f.path())).unwrap();
        r.get("seed", None::<u64>, 0).unwrap();
        let err = r.finish().unwrap_err();
        assert!(matches!(&err, CliError::Usage(m) if m.contains("bogus")));
    }

    #[test]
    fn config_from_another_command_is_rejected() {
        let f = write_tmp("command = train\nseed = 3\n");
        assert!(matches!(
            Resolver::new("evaluate", Some(f.path())),
            Err(CliError::Usage(_))
        ));
        assert!(Resolver::new("train", Some(f.path())).is_ok());
    }

    #[test]
    fn resolved_config_replays_the_same_values() {
        let mut r = Resolver::new("synth-data", None).unwrap();
        r.get("seed", Some(9u64), 0).unwrap();
        r.get("alphabet", None::<usize>, 50).unwrap();
        let text = r.finish().unwrap();
        let f = write_tmp(&text);
        let mut replay = Resolver::new("synth-data", Some(f.path())).unwrap();
        assert_eq!(replay.get("seed", None::<u64>, 0).unwrap(), 9);
        assert_eq!(replay.get("alphabet", None::<usize>, 50).unwrap(), 50);
    }

    #[test]
    fn decoder_names_round_trip() {
        for d in [
            DecoderKind::Greedy,
            DecoderKind::Beam,
            DecoderKind::MmiAnti,
            DecoderKind::MmiBidi,
        ] {
            assert_eq!(d.as_str().parse::<DecoderKind>().unwrap(), d);
        }
        assert!("fancy".parse::<DecoderKind>().is_err());
    }

    #[test]
    fn grad_clip_accepts_inf_text() {
        let f = write_tmp("grad-clip = inf\n");
        let mut r = Resolver::new("train", Some(f.path())).unwrap();
        let v = r.get("grad-clip", None::<f64>, 5.0).unwrap();
        assert!(v.is_infinite());
        // And the resolved text round-trips through Display.
        assert!(r.finish().unwrap().contains("grad-clip = inf"));
    }
}
