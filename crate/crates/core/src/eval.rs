//! Diversity metrics, latency benchmarking and evaluation reports.
//!
//! DISTINCT-n measures response variety as the fraction of distinct
//! token n-grams in a response pool. Latency is wall-clock per query,
//! one query at a time. [`evaluate_systems`] runs every decoding
//! strategy over a fixed query list and writes a key-value report plus
//! annotation-ready response files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{decode, DataError, QRPair, TokenSeq, BOS_ID, PAD_ID};
use crate::mmi::{mmi_anti_decode, mmi_bidi_decode, MmiConfig, MmiError};
use crate::scalar::Scalar;
use crate::seq2seq::{greedy_decode, Seq2SeqError};
use crate::trainer::{duality_gap, DalModel, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad evaluation input: {0}")]
    BadInput(String),

    #[error(transparent)]
    Generator(#[from] Seq2SeqError),

    #[error(transparent)]
    Mmi(#[from] MmiError),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("failed to write evaluation outputs: {0}")]
    Io(#[from] std::io::Error),
}

/// Distinct token n-grams across all responses divided by the total
/// n-gram count. Responses shorter than `n` contribute nothing; an
/// empty pool scores `0`. Always in `[0, 1]`, and `1` exactly when
/// every n-gram is unique.
pub fn distinct_n(responses: &[TokenSeq], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut seen: BTreeSet<&[u32]> = BTreeSet::new();
    let mut total = 0usize;
    for response in responses {
        for gram in response.ids().windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Mean wall-clock milliseconds per query: one untimed warm-up pass,
/// then `repetitions` timed passes over all queries, each query decoded
/// on its own.
pub fn benchmark_latency<D: FnMut(&TokenSeq)>(
    mut decoder: D,
    queries: &[TokenSeq],
    repetitions: usize,
) -> f64 {
    assert!(repetitions >= 1, "need at least one timed repetition");
    assert!(!queries.is_empty(), "need at least one query to time");
    for query in queries {
        decoder(query);
    }
    let mut total = Duration::ZERO;
    for _ in 0..repetitions {
        let start = Instant::now();
        for query in queries {
            decoder(query);
        }
        total += start.elapsed();
    }
    total.as_secs_f64() * 1000.0 / (repetitions as f64 * queries.len() as f64)
}

/// One decoding strategy's slice of the report.
#[derive(Clone, Debug, Serialize)]
pub struct SystemReport {
    pub system: String,
    pub distinct1: f64,
    pub distinct2: f64,
    pub mean_response_len: f64,
    pub latency_ms: f64,
    /// Mean `|k(q, r)|` over pairs with a non-empty response; `NaN`
    /// when every response came out empty.
    pub mean_abs_duality_gap: f64,
    pub scored_pairs: usize,
    pub responses_file: String,
    pub gaps_file: String,
}

/// Everything written to the report file, in memory.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub queries_sha256: String,
    pub n_queries: usize,
    pub latency_repetitions: usize,
    pub systems: Vec<SystemReport>,
    pub report_path: PathBuf,
}

impl EvalReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.system == name)
    }
}

const RUBRIC: &str = "\
Annotation guide for the exported response files
================================================

Each responses-<system>.txt holds one generated response per line,
aligned with queries.txt. Score every (query, response) pair:

  0  unacceptable: ungrammatical, unrelated to the query, or an
     empty/filler reply that would fit any query at all.
  1  acceptable: fluent and on-topic, but generic or uninformative.
  2  good: fluent, on-topic and adds query-specific content.

Annotate each system independently; do not compare across files while
scoring. Report the mean score and the score histogram per system.
";

fn sha256_hex(lines: &[String]) -> String {
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Key-value rendering of a flat serializable struct, one
/// `prefix.field = value` line per field.
fn echo_config<T: Serialize>(buf: &mut String, prefix: &str, value: &T) {
    let json = serde_json::to_value(value).expect("configs serialize");
    let map = json.as_object().expect("configs are flat structs");
    for (key, val) in map {
        let rendered = match val {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let _ = writeln!(buf, "{prefix}.{key} = {rendered}");
    }
}

type DecodeFn<'a> = Box<dyn Fn(&TokenSeq) -> Result<TokenSeq, EvalError> + 'a>;

/// Decodes every query with each available system, measures diversity,
/// latency and duality-gap diagnostics, and writes the report plus one
/// response file and one gap file per system into `out_dir`.
///
/// Systems: `greedy`, `mmi-anti` and `mmi-bidi` from `model`, plus
/// `baseline-greedy` when a separately trained baseline model is given
/// (the likelihood-only reference). Every output except the latency
/// figures is deterministic in (model, config, queries).
pub fn evaluate_systems<F: Scalar>(
    model: &DalModel<F>,
    mmi_cfg: &MmiConfig,
    queries: &[TokenSeq],
    latency_repetitions: usize,
    baseline: Option<&DalModel<F>>,
    out_dir: &Path,
) -> Result<EvalReport, EvalError> {
    mmi_cfg.validate().map_err(MmiError::from)?;
    if queries.is_empty() {
        return Err(EvalError::BadInput("no evaluation queries given".into()));
    }
    if latency_repetitions == 0 {
        return Err(EvalError::BadInput(
            "latency repetitions must be at least 1".into(),
        ));
    }
    for query in queries {
        model.gen_qr.check_seq(query)?;
        if query.is_empty() {
            return Err(EvalError::BadInput("empty query in evaluation list".into()));
        }
    }
    if let Some(base) = baseline {
        if base.vocab != model.vocab {
            return Err(EvalError::BadInput(
                "baseline model uses a different vocabulary".into(),
            ));
        }
    }
    fs::create_dir_all(out_dir)?;

    let max_len = model.config.max_len;
    let mut systems: Vec<(&str, &DalModel<F>, DecodeFn)> = Vec::new();
    if let Some(base) = baseline {
        systems.push((
            "baseline-greedy",
            base,
            Box::new(move |q| Ok(greedy_decode(&base.gen_qr, q, base.config.max_len)?)),
        ));
    }
    systems.push((
        "greedy",
        model,
        Box::new(move |q| Ok(greedy_decode(&model.gen_qr, q, max_len)?)),
    ));
    systems.push((
        "mmi-anti",
        model,
        Box::new(move |q| Ok(mmi_anti_decode(&model.gen_qr, &model.lm_r, mmi_cfg, q, max_len)?)),
    ));
    systems.push((
        "mmi-bidi",
        model,
        Box::new(move |q| {
            Ok(mmi_bidi_decode(&model.gen_qr, &model.gen_rq, mmi_cfg, q, max_len)?.tokens)
        }),
    ));

    let query_lines: Vec<String> = queries
        .iter()
        .map(|q| decode(q, &model.vocab))
        .collect::<Result<_, _>>()?;
    let fingerprint = sha256_hex(&query_lines);
    fs::write(out_dir.join("queries.txt"), query_lines.join("\n") + "\n")?;
    fs::write(out_dir.join("annotation-rubric.txt"), RUBRIC)?;

    let mut reports = Vec::new();
    for (name, gap_model, decode_fn) in &systems {
        let responses: Vec<TokenSeq> = queries
            .iter()
            .map(|q| decode_fn(q))
            .collect::<Result<_, _>>()?;

        let response_lines: Vec<String> = responses
            .iter()
            .map(|r| decode(r, &model.vocab))
            .collect::<Result<_, _>>()?;
        let responses_file = format!("responses-{name}.txt");
        fs::write(
            out_dir.join(&responses_file),
            response_lines.join("\n") + "\n",
        )?;

        // Signed duality gap k(q, r) per answered query. Empty
        // responses, or ones with tokens the marginal language models
        // cannot score (an untrained generator may emit `<pad>` or
        // `<bos>`), leave a blank line so files stay aligned.
        let mut gap_lines = Vec::with_capacity(queries.len());
        let mut abs_sum = 0.0;
        let mut scored = 0usize;
        for (query, response) in queries.iter().zip(&responses) {
            let scorable = !response.is_empty()
                && response.ids().iter().all(|&id| id != PAD_ID && id != BOS_ID);
            if !scorable {
                gap_lines.push(String::new());
                continue;
            }
            let pair = QRPair::new(query.clone(), response.clone())?;
            let k = duality_gap(gap_model, &pair)?;
            gap_lines.push(format!("{k}"));
            abs_sum += k.abs();
            scored += 1;
        }
        let gaps_file = format!("gaps-{name}.txt");
        fs::write(out_dir.join(&gaps_file), gap_lines.join("\n") + "\n")?;

        let latency_ms = benchmark_latency(
            |q| {
                let _ = decode_fn(q);
            },
            queries,
            latency_repetitions,
        );

        reports.push(SystemReport {
            system: name.to_string(),
            distinct1: distinct_n(&responses, 1),
            distinct2: distinct_n(&responses, 2),
            mean_response_len: responses.iter().map(TokenSeq::len).sum::<usize>() as f64
                / responses.len() as f64,
            latency_ms,
            mean_abs_duality_gap: if scored == 0 {
                f64::NAN
            } else {
                abs_sum / scored as f64
            },
            scored_pairs: scored,
            responses_file,
            gaps_file,
        });
    }

    let mut buf = String::new();
    let _ = writeln!(buf, "# evaluation report: `key = value`, one fact per line");
    let _ = writeln!(buf, "# n-grams are over token ids; see annotation-rubric.txt");
    let _ = writeln!(buf, "format = dal-eval-v1");
    let _ = writeln!(buf, "seed = {}", model.config.seed);
    let _ = writeln!(buf, "queries_sha256 = {fingerprint}");
    let _ = writeln!(buf, "n_queries = {}", queries.len());
    let _ = writeln!(buf, "latency_repetitions = {latency_repetitions}");
    let _ = writeln!(buf, "decode_max_len = {max_len}");
    let _ = writeln!(buf, "ngram_unit = token-id");
    echo_config(&mut buf, "train", &model.config);
    echo_config(&mut buf, "mmi", mmi_cfg);
    for r in &reports {
        let s = &r.system;
        let _ = writeln!(buf, "system.{s}.distinct1 = {}", r.distinct1);
        let _ = writeln!(buf, "system.{s}.distinct2 = {}", r.distinct2);
        let _ = writeln!(buf, "system.{s}.mean_response_len = {}", r.mean_response_len);
        let _ = writeln!(buf, "system.{s}.latency_ms = {}", r.latency_ms);
        let _ = writeln!(
            buf,
            "system.{s}.mean_abs_duality_gap = {}",
            r.mean_abs_duality_gap
        );
        let _ = writeln!(buf, "system.{s}.scored_pairs = {}", r.scored_pairs);
        let _ = writeln!(buf, "system.{s}.responses_file = {}", r.responses_file);
        let _ = writeln!(buf, "system.{s}.gaps_file = {}", r.gaps_file);
    }
    let report_path = out_dir.join("report.txt");
    fs::write(&report_path, buf)?;

    Ok(EvalReport {
        seed: model.config.seed,
        queries_sha256: fingerprint,
        n_queries: queries.len(),
        latency_repetitions,
        systems: reports,
        report_path,
    })
}
