//! Vocabulary, token sequences, corpus ingestion, batching and the
//! synthetic many-to-one corpus generator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Cap applied when a vocabulary is built implicitly from a corpus file.
pub const DEFAULT_MAX_VOCAB: usize = 2000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no input text to build a vocabulary from")]
    EmptyInput,

    #[error("{0}")]
    BadParam(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("utterance must contain at least one token")]
    EmptyUtterance,

    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),

    #[error("no valid query<TAB>response lines in {path}")]
    NoValidLines { path: String },

    #[error(
        "alphabet of {alphabet} tokens cannot yield {needed} distinct utterances \
         of length {min_len}..={max_len}"
    )]
    AlphabetTooSmall {
        alphabet: usize,
        needed: usize,
        min_len: usize,
        max_len: usize,
    },

    #[error("vocabulary data malformed: {0}")]
    BadVocab(String),
}

/// Token table with four fixed reserved entries: `<pad>`=0, `<bos>`=1,
/// `<eos>`=2, `<unk>`=3. Corpus tokens occupy ids 4 and up.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabData", into = "VocabData")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabData {
    tokens: Vec<String>,
}

impl From<Vocab> for VocabData {
    fn from(v: Vocab) -> Self {
        VocabData {
            tokens: v.id_to_token,
        }
    }
}

impl TryFrom<VocabData> for Vocab {
    type Error = DataError;

    fn try_from(data: VocabData) -> Result<Self, DataError> {
        if data.tokens.len() < RESERVED.len() {
            return Err(DataError::BadVocab(format!(
                "need at least {} entries, got {}",
                RESERVED.len(),
                data.tokens.len()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if data.tokens[i] != *want {
                return Err(DataError::BadVocab(format!(
                    "entry {i} must be {want}, got {}",
                    data.tokens[i]
                )));
            }
        }
        let mut token_to_id = BTreeMap::new();
        for (id, tok) in data.tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(DataError::BadVocab(format!("duplicate token {tok}")));
            }
        }
        Ok(Vocab {
            id_to_token: data.tokens,
            token_to_id,
        })
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone(), id as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Result<&str, DataError> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or(DataError::IdOutOfRange {
                id,
                vocab_size: self.size(),
            })
    }
}

/// Integer-encoded utterance. Never contains `<pad>`; `<bos>`/`<eos>`
/// framing is added by the models that consume it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let strs: Vec<String> = self.ids.iter().map(u32::to_string).collect();
        write!(f, "[{}]", strs.join(" "))
    }
}

/// Which way a model reads a pair: query→response or response→query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    QueryToResponse,
    ResponseToQuery,
}

impl Direction {
    /// `(source, target)` of a pair under this direction.
    pub fn split<'a>(&self, pair: &'a QRPair) -> (&'a TokenSeq, &'a TokenSeq) {
        match self {
            Direction::QueryToResponse => (&pair.query, &pair.response),
            Direction::ResponseToQuery => (&pair.response, &pair.query),
        }
    }

    pub fn flip(&self) -> Direction {
        match self {
            Direction::QueryToResponse => Direction::ResponseToQuery,
            Direction::ResponseToQuery => Direction::QueryToResponse,
        }
    }
}

/// One query-response pair; both sides non-empty by construction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QRPair {
    query: TokenSeq,
    response: TokenSeq,
}

impl QRPair {
    pub fn new(query: TokenSeq, response: TokenSeq) -> Result<Self, DataError> {
        if query.is_empty() || response.is_empty() {
            return Err(DataError::EmptyUtterance);
        }
        Ok(QRPair { query, response })
    }

    pub fn query(&self) -> &TokenSeq {
        &self.query
    }

    pub fn response(&self) -> &TokenSeq {
        &self.response
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pairs: Vec<QRPair>,
    vocab: Vocab,
}

impl Corpus {
    /// Builds a corpus after checking every id against the vocabulary.
    pub fn new(pairs: Vec<QRPair>, vocab: Vocab) -> Result<Self, DataError> {
        let size = vocab.size();
        for pair in &pairs {
            for id in pair.query.ids().iter().chain(pair.response.ids()) {
                if *id as usize >= size {
                    return Err(DataError::IdOutOfRange {
                        id: *id,
                        vocab_size: size,
                    });
                }
            }
        }
        Ok(Corpus { pairs, vocab })
    }

    pub fn pairs(&self) -> &[QRPair] {
        &self.pairs
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Builds a vocabulary from whitespace-split tokens of every string in
/// `raw_pairs`: tokens seen at least `min_count` times, most frequent
/// first, ties by lexicographic order, truncated to `max_size` entries
/// including the four reserved ones.
///
/// Corpus tokens that collide with a reserved spelling (`<pad>` etc.) are
/// dropped; they could never be distinguished from the reserved entry.
pub fn build_vocab<S: AsRef<str>>(
    raw_pairs: &[(S, S)],
    min_count: usize,
    max_size: usize,
) -> Result<Vocab, DataError> {
    if min_count < 1 {
        return Err(DataError::BadParam(format!(
            "min-count must be at least 1, got {min_count}"
        )));
    }
    if max_size < RESERVED.len() {
        return Err(DataError::BadParam(format!(
            "max-size must be at least {}, got {max_size}",
            RESERVED.len()
        )));
    }
    if raw_pairs.is_empty() {
        return Err(DataError::EmptyInput);
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (q, r) in raw_pairs {
        for tok in q.as_ref().split_whitespace().chain(r.as_ref().split_whitespace()) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(tok, count)| *count >= min_count && !RESERVED.contains(tok))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocab::from_tokens(
        ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

/// Whitespace tokenization; out-of-vocabulary tokens become `<unk>`.
pub fn encode(text: &str, vocab: &Vocab) -> TokenSeq {
    TokenSeq::new(
        text.split_whitespace()
            .map(|tok| vocab.id_of(tok).unwrap_or(UNK_ID))
            .collect(),
    )
}

/// Space-joins the tokens of `seq`; reserved ids render as their angle
/// bracket spellings.
pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> Result<String, DataError> {
    let mut toks = Vec::with_capacity(seq.len());
    for id in seq.ids() {
        toks.push(vocab.token_of(*id)?);
    }
    Ok(toks.join(" "))
}

/// A corpus parsed from disk plus the number of lines that had to be
/// skipped (no TAB separator, or a side with no tokens).
#[derive(Debug)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub malformed_lines: usize,
}

/// Reads a `query<TAB>response`-per-line UTF-8 file. When `vocab` is
/// `None` one is built from the file itself (every token kept, capped at
/// [`DEFAULT_MAX_VOCAB`] entries).
pub fn load_corpus(path: &Path, vocab: Option<Vocab>) -> Result<LoadedCorpus, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut raw: Vec<(&str, &str)> = Vec::new();
    let mut malformed = 0usize;
    for line in text.lines() {
        match line.split_once('\t') {
            Some((q, r))
                if q.split_whitespace().next().is_some()
                    && r.split_whitespace().next().is_some() =>
            {
                raw.push((q, r));
            }
            _ => malformed += 1,
        }
    }
    if raw.is_empty() {
        return Err(DataError::NoValidLines {
            path: path.display().to_string(),
        });
    }
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(&raw, 1, DEFAULT_MAX_VOCAB)?,
    };
    let pairs = raw
        .iter()
        .map(|(q, r)| QRPair::new(encode(q, &vocab), encode(r, &vocab)))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = Corpus::new(pairs, vocab)?;
    Ok(LoadedCorpus {
        corpus,
        malformed_lines: malformed,
    })
}

/// Shape of the synthetic many-to-one corpus: `n_safe` responses shared
/// by `m` queries each (the generic-reply cluster) plus `n_diverse`
/// one-to-one pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_safe: usize,
    pub m: usize,
    pub n_diverse: usize,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_safe: 3,
            m: 20,
            n_diverse: 200,
            alphabet: 50,
            min_len: 4,
            max_len: 7,
        }
    }
}

fn distinct_capacity(alphabet: usize, min_len: usize, max_len: usize) -> usize {
    let mut total = 0usize;
    for len in min_len..=max_len {
        let mut strings = 1usize;
        for _ in 0..len {
            strings = strings.saturating_mul(alphabet);
        }
        total = total.saturating_add(strings);
    }
    total
}

/// Generates the synthetic corpus. Pure in `(spec, seed)`: the same
/// arguments always produce the same corpus, byte for byte.
pub fn synthesize_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus, DataError> {
    if spec.n_safe == 0 || spec.m == 0 || spec.n_diverse == 0 || spec.alphabet == 0 {
        return Err(DataError::BadParam(
            "synthetic corpus counts must all be positive".into(),
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(DataError::BadParam(format!(
            "utterance length range {}..={} is invalid",
            spec.min_len, spec.max_len
        )));
    }
    let needed = spec.n_safe * spec.m + 2 * spec.n_diverse + spec.n_safe;
    let too_small = DataError::AlphabetTooSmall {
        alphabet: spec.alphabet,
        needed,
        min_len: spec.min_len,
        max_len: spec.max_len,
    };
    if distinct_capacity(spec.alphabet, spec.min_len, spec.max_len) < needed {
        return Err(too_small);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: std::collections::BTreeSet<Vec<u16>> = std::collections::BTreeSet::new();
    let mut attempts_left = needed.saturating_mul(1000);
    let mut draw = |rng: &mut ChaCha8Rng| -> Result<Vec<u16>, DataError> {
        loop {
            if attempts_left == 0 {
                return Err(DataError::AlphabetTooSmall {
                    alphabet: spec.alphabet,
                    needed,
                    min_len: spec.min_len,
                    max_len: spec.max_len,
                });
            }
            attempts_left -= 1;
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let utt: Vec<u16> = (0..len)
                .map(|_| rng.random_range(0..spec.alphabet) as u16)
                .collect();
            if seen.insert(utt.clone()) {
                return Ok(utt);
            }
        }
    };

    let mut raw_pairs: Vec<(String, String)> = Vec::with_capacity(spec.n_safe * spec.m + spec.n_diverse);
    let render = |utt: &[u16]| -> String {
        let toks: Vec<String> = utt.iter().map(|i| format!("t{i}")).collect();
        toks.join(" ")
    };
    for _ in 0..spec.n_safe {
        let safe_response = render(&draw(&mut rng)?);
        for _ in 0..spec.m {
            let query = render(&draw(&mut rng)?);
            raw_pairs.push((query, safe_response.clone()));
        }
    }
    for _ in 0..spec.n_diverse {
        let query = render(&draw(&mut rng)?);
        let response = render(&draw(&mut rng)?);
        raw_pairs.push((query, response));
    }

    let vocab = build_vocab(&raw_pairs, 1, RESERVED.len() + spec.alphabet)?;
    let pairs = raw_pairs
        .iter()
        .map(|(q, r)| QRPair::new(encode(q, &vocab), encode(r, &vocab)))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::new(pairs, vocab)
}

/// Iterator over one epoch of seeded-permutation batches. Every pair is
/// yielded exactly once; the final batch may be short.
pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a QRPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.corpus.pairs()[i])
            .collect();
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iter(corpus: &Corpus, batch_size: usize, shuffle_seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    // Fisher-Yates spelled out so the permutation is pinned to this RNG
    // stream and nothing else.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    BatchIter {
        corpus,
        order,
        pos: 0,
        batch_size,
    }
}
