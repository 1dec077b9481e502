//! Author-labelled corpora: loading, word truncation and balanced
//! same/different-author pair sampling.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BinLabel, DocumentPair};

pub const DEFAULT_MAX_WORDS: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub author_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Header row with `doc_id`, `author_id` and `text` columns.
    Delimited { delimiter: u8 },
    /// One JSON object per line with the same three fields.
    JsonLines,
}

impl CorpusFormat {
    /// `.tsv` is tab separated, `.jsonl`/`.ndjson` are JSON lines, anything
    /// else is comma separated.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => CorpusFormat::Delimited { delimiter: b'\t' },
            Some("jsonl") | Some("ndjson") => CorpusFormat::JsonLines,
            _ => CorpusFormat::Delimited { delimiter: b',' },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub docs: Vec<CorpusDoc>,
    pub rejects: Vec<RejectedRow>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    FileNotFound(String),
    #[error("{path}: not valid UTF-8 at byte {offset}")]
    Decode { path: String, offset: usize },
    #[error("{path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

const REQUIRED_FIELDS: [&str; 3] = ["doc_id", "author_id", "text"];

/// Reads a corpus. Rows with empty text or author, duplicate ids or
/// unreadable JSON are listed in `rejects` with their line number.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus, CorpusError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::FileNotFound(display.clone()),
        _ => CorpusError::Io(e),
    })?;
    let content = String::from_utf8(bytes).map_err(|e| CorpusError::Decode {
        path: display.clone(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    let rows = match format {
        CorpusFormat::Delimited { delimiter } => delimited_rows(&content, delimiter, &display)?,
        CorpusFormat::JsonLines => json_rows(&content, &display)?,
    };

    let mut docs = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        let (line, doc) = match row {
            Ok(r) => r,
            Err(reject) => {
                rejects.push(reject);
                continue;
            }
        };
        let reason = if doc.text.trim().is_empty() {
            Some("empty text".to_string())
        } else if doc.author_id.trim().is_empty() {
            Some("empty author_id".to_string())
        } else if !seen.insert(doc.doc_id.clone()) {
            Some(format!("duplicate doc_id {:?}", doc.doc_id))
        } else {
            None
        };
        match reason {
            Some(reason) => rejects.push(RejectedRow { line, reason }),
            None => docs.push(doc),
        }
    }
    for r in &rejects {
        log::warn!("{display}:{}: rejected row: {}", r.line, r.reason);
    }
    Ok(LoadedCorpus { docs, rejects })
}

type Row = Result<(u64, CorpusDoc), RejectedRow>;

fn delimited_rows(content: &str, delimiter: u8, path: &str) -> Result<Vec<Row>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(content.as_bytes());
    let headers = reader.headers()?.clone();
    let mut columns = [0usize; 3];
    for (slot, name) in columns.iter_mut().zip(REQUIRED_FIELDS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::Schema {
                path: path.to_string(),
                detail: format!("missing required column {name:?}"),
            })?;
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(columns[i]).map(str::to_string);
        match (field(0), field(1), field(2)) {
            (Some(doc_id), Some(author_id), Some(text)) => rows.push(Ok((
                line,
                CorpusDoc {
                    doc_id,
                    author_id,
                    text,
                },
            ))),
            _ => rows.push(Err(RejectedRow {
                line,
                reason: format!("expected {} columns, found {}", headers.len(), record.len()),
            })),
        }
    }
    Ok(rows)
}

fn json_rows(content: &str, path: &str) -> Result<Vec<Row>, CorpusError> {
    let mut rows = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                rows.push(Err(RejectedRow {
                    line: line_no,
                    reason: format!("invalid JSON: {e}"),
                }));
                continue;
            }
        };
        let mut fields = Vec::with_capacity(3);
        for name in REQUIRED_FIELDS {
            let v = value.get(name).ok_or_else(|| CorpusError::Schema {
                path: path.to_string(),
                detail: format!("line {line_no}: missing required field {name:?}"),
            })?;
            fields.push(match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            });
        }
        let text = fields.pop().expect("three fields");
        let author_id = fields.pop().expect("three fields");
        let doc_id = fields.pop().expect("three fields");
        rows.push(Ok((
            line_no,
            CorpusDoc {
                doc_id,
                author_id,
                text,
            },
        )));
    }
    Ok(rows)
}

/// First `max_words` whitespace-delimited words joined by single spaces.
/// Text within the limit is returned untouched.
pub fn truncate_document(text: &str, max_words: usize) -> String {
    let max_words = max_words.max(1);
    let mut words = text.split_whitespace();
    let head: Vec<&str> = words.by_ref().take(max_words).collect();
    if words.next().is_none() {
        text.to_string()
    } else {
        head.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_pairs: usize,
    pub seed: u64,
    #[serde(default = "default_max_words")]
    pub max_words_per_doc: usize,
    #[serde(default)]
    pub dataset_tag: String,
}

fn default_max_words() -> usize {
    DEFAULT_MAX_WORDS
}

impl SamplerConfig {
    pub fn new(n_pairs: usize, seed: u64) -> Self {
        SamplerConfig {
            n_pairs,
            seed,
            max_words_per_doc: DEFAULT_MAX_WORDS,
            dataset_tag: String::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("n_pairs must be at least 2, got {0}")]
    TooFewPairs(usize),
    #[error("max_words_per_doc must be at least 1")]
    ZeroWordLimit,
    #[error(
        "cannot sample {requested} pairs: {positives} same-author and {negatives} \
         different-author candidates exist; at most {achievable} balanced pairs are possible"
    )]
    Infeasible {
        requested: usize,
        positives: u64,
        negatives: u64,
        achievable: u64,
    },
}

/// Enumerate instead of rejection-sampling once the requested draw is a
/// sizeable share of the candidate pool.
const ENUMERATE_FACTOR: u64 = 4;

/// Draws ⌈n/2⌉ same-author and ⌊n/2⌋ different-author pairs without
/// repeating a document pair. Output depends only on `docs` and `cfg`.
pub fn sample_pairs(
    docs: &[CorpusDoc],
    cfg: &SamplerConfig,
) -> Result<Vec<DocumentPair>, SamplingError> {
    if cfg.n_pairs < 2 {
        return Err(SamplingError::TooFewPairs(cfg.n_pairs));
    }
    if cfg.max_words_per_doc == 0 {
        return Err(SamplingError::ZeroWordLimit);
    }
    let mut by_author: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        by_author.entry(d.author_id.as_str()).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_author.values().filter(|g| g.len() >= 2).collect();
    let choose2 = |k: u64| k * k.saturating_sub(1) / 2;
    let positives: u64 = groups.iter().map(|g| choose2(g.len() as u64)).sum();
    let negatives = choose2(docs.len() as u64) - positives;

    let n_yes = cfg.n_pairs.div_ceil(2);
    let n_no = cfg.n_pairs / 2;
    if n_yes as u64 > positives || n_no as u64 > negatives {
        let achievable = (2 * positives).min(2 * negatives + 1);
        return Err(SamplingError::Infeasible {
            requested: cfg.n_pairs,
            positives,
            negatives,
            achievable,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let yes = sample_same_author(&groups, positives, n_yes, &mut rng);
    let no = sample_cross_author(docs, negatives, n_no, &mut rng);

    let mut labelled: Vec<((usize, usize), BinLabel)> = yes
        .into_iter()
        .map(|p| (p, BinLabel::Yes))
        .chain(no.into_iter().map(|p| (p, BinLabel::No)))
        .collect();
    labelled.shuffle(&mut rng);

    let width = cfg.n_pairs.to_string().len();
    let prefix = if cfg.dataset_tag.is_empty() {
        "pair".to_string()
    } else {
        cfg.dataset_tag.clone()
    };
    Ok(labelled
        .into_iter()
        .enumerate()
        .map(|(idx, ((a, b), gold))| {
            let (first, second) = if rng.random::<bool>() { (b, a) } else { (a, b) };
            DocumentPair {
                pair_id: format!("{prefix}-{idx:0width$}"),
                text1: truncate_document(&docs[first].text, cfg.max_words_per_doc),
                text2: truncate_document(&docs[second].text, cfg.max_words_per_doc),
                gold,
                dataset_tag: cfg.dataset_tag.clone(),
            }
        })
        .collect())
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Uniform over all unordered same-author document pairs.
fn sample_same_author(
    groups: &[&Vec<usize>],
    total: u64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if total <= ENUMERATE_FACTOR * n as u64 {
        let mut all: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|g| {
                g.iter()
                    .enumerate()
                    .flat_map(move |(i, &a)| g[i + 1..].iter().map(move |&b| ordered(a, b)))
            })
            .collect();
        all.shuffle(rng);
        all.truncate(n);
        return all;
    }
    let cumulative: Vec<u64> = groups
        .iter()
        .scan(0u64, |acc, g| {
            let k = g.len() as u64;
            *acc += k * (k - 1) / 2;
            Some(*acc)
        })
        .collect();
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let r = rng.random_range(0..total);
        let gi = cumulative.partition_point(|&c| c <= r);
        let g = groups[gi];
        let i = rng.random_range(0..g.len());
        let mut j = rng.random_range(0..g.len() - 1);
        if j >= i {
            j += 1;
        }
        let pair = ordered(g[i], g[j]);
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    out
}

/// Uniform over all unordered cross-author document pairs.
fn sample_cross_author(
    docs: &[CorpusDoc],
    total: u64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if total <= ENUMERATE_FACTOR * n as u64 {
        let mut all = Vec::with_capacity(total as usize);
        for a in 0..docs.len() {
            for b in a + 1..docs.len() {
                if docs[a].author_id != docs[b].author_id {
                    all.push((a, b));
                }
            }
        }
        all.shuffle(rng);
        all.truncate(n);
        return all;
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.random_range(0..docs.len());
        let b = rng.random_range(0..docs.len());
        if a == b || docs[a].author_id == docs[b].author_id {
            continue;
        }
        let pair = ordered(a, b);
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    out
}

/// One JSON object per line, newline terminated.
pub fn write_pairs_jsonl(path: &Path, pairs: &[DocumentPair]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Debug, Error)]
pub enum PairsFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {detail}")]
    Invalid { line: usize, detail: String },
    #[error("duplicate pair_id {0:?}")]
    DuplicatePairId(String),
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<DocumentPair>, PairsFileError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: DocumentPair =
            serde_json::from_str(&line).map_err(|source| PairsFileError::Json {
                line: idx + 1,
                source,
            })?;
        pair.validate().map_err(|e| PairsFileError::Invalid {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if !ids.insert(pair.pair_id.clone()) {
            return Err(PairsFileError::DuplicatePairId(pair.pair_id));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}
