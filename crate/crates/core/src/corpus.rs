//! Documents, hashed tokenization, chunking, and the synthetic fact world.

use std::collections::HashSet;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// Word limit of a retrieval chunk.
pub const DEFAULT_CHUNK_WORDS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// One retrieval unit of the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub chunk_id: u32,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub token_ids: Vec<u32>,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub question_text: String,
    pub question_token_ids: Vec<u32>,
    pub answer_text: String,
    pub answer_token_ids: Vec<u32>,
    pub gold_chunk_id: Option<u32>,
}

/// 64-bit FNV-1a of the raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Lowercases, splits on runs of non-alphanumeric characters and hashes each
/// word into `[0, vocab_size)`.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    assert!(vocab_size >= 2, "vocab_size must be at least 2");
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| word_id(w, vocab_size))
        .collect()
}

#[inline]
fn word_id(word: &str, vocab_size: usize) -> u32 {
    (fnv1a(word.as_bytes()) % vocab_size as u64) as u32
}

/// Splits a document into consecutive windows of `max_words` whitespace
/// separated words. Chunk ids start at zero; use [`chunk_corpus`] for
/// corpus-wide numbering.
pub fn chunk_document(
    doc: &Document,
    max_words: usize,
    vocab_size: usize,
    prepend_title: bool,
) -> Vec<Chunk> {
    let mut out = Vec::new();
    push_chunks(&mut out, doc, max_words, vocab_size, prepend_title);
    out
}

/// Chunks every document in order, assigning dense ids `0..N`.
pub fn chunk_corpus(
    docs: &[Document],
    max_words: usize,
    vocab_size: usize,
    prepend_title: bool,
) -> Vec<Chunk> {
    let mut out = Vec::new();
    for doc in docs {
        push_chunks(&mut out, doc, max_words, vocab_size, prepend_title);
    }
    out
}

fn push_chunks(
    out: &mut Vec<Chunk>,
    doc: &Document,
    max_words: usize,
    vocab_size: usize,
    prepend_title: bool,
) {
    assert!(max_words >= 1, "max_words must be at least 1");
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    let title_ids = if prepend_title {
        tokenize(&doc.title, vocab_size)
    } else {
        Vec::new()
    };
    for window in words.chunks(max_words) {
        let text = window.join(" ");
        let mut token_ids = title_ids.clone();
        token_ids.extend(tokenize(&text, vocab_size));
        out.push(Chunk {
            chunk_id: out.len() as u32,
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text,
            token_ids,
            word_count: window.len(),
        });
    }
}

#[derive(Deserialize)]
struct QaRecord {
    question: String,
    answer: String,
    #[serde(default)]
    gold_chunk_id: Option<u32>,
}

#[derive(Serialize)]
struct QaRecordRef<'a> {
    question: &'a str,
    answer: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_chunk_id: Option<u32>,
}

/// Parses a JSON Lines corpus. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus<R: Read>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(file)
}

pub fn write_corpus<W: Write>(mut w: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a QA JSON Lines file, tokenizing questions and answers.
pub fn parse_qa<R: Read>(reader: R, vocab_size: usize) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let answer_token_ids = tokenize(&rec.answer, vocab_size);
        if answer_token_ids.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "answer has no tokens".into(),
            });
        }
        out.push(QaExample {
            question_token_ids: tokenize(&rec.question, vocab_size),
            question_text: rec.question,
            answer_text: rec.answer,
            answer_token_ids,
            gold_chunk_id: rec.gold_chunk_id,
        });
    }
    Ok(out)
}

pub fn load_qa(path: impl AsRef<Path>, vocab_size: usize) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_qa(file, vocab_size)
}

pub fn write_qa<W: Write>(mut w: W, examples: &[QaExample]) -> std::io::Result<()> {
    for ex in examples {
        let rec = QaRecordRef {
            question: &ex.question_text,
            answer: &ex.answer_text,
            gold_chunk_id: ex.gold_chunk_id,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parameters of the synthetic fact world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub facts_per_passage: usize,
    /// Generated words are chosen so that no two share a token id under
    /// this vocabulary size.
    pub vocab_size: usize,
    pub chunk_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 500,
            n_relations: 5,
            n_facts: 2000,
            facts_per_passage: 4,
            vocab_size: 3200,
            chunk_words: DEFAULT_CHUNK_WORDS,
        }
    }
}

const WORDS_PER_FACT: usize = 3;
const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "st",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Generates a world of `(subject, relation, object)` facts rendered as
/// passages, plus one question per fact.
///
/// Every fact has a distinct `(subject, relation)` pair and a unique object
/// word, so each question has exactly one answer and that answer occurs in
/// exactly one chunk.
pub fn synth_world(cfg: &SynthConfig) -> Result<(Vec<Document>, Vec<QaExample>)> {
    if cfg.n_entities < 2 {
        return Err(Error::InvalidArgument("n_entities must be at least 2".into()));
    }
    if cfg.n_relations < 1 || cfg.facts_per_passage < 1 || cfg.n_facts < 1 {
        return Err(Error::InvalidArgument(
            "n_relations, n_facts and facts_per_passage must be at least 1".into(),
        ));
    }
    if cfg.vocab_size < 2 || cfg.chunk_words < 1 {
        return Err(Error::InvalidArgument(
            "vocab_size must be at least 2 and chunk_words at least 1".into(),
        ));
    }
    let pairs = cfg.n_entities * cfg.n_relations;
    if cfg.n_facts > pairs {
        return Err(Error::InvalidArgument(format!(
            "{} facts need distinct (subject, relation) pairs but only {} exist",
            cfg.n_facts, pairs
        )));
    }
    if cfg.facts_per_passage * WORDS_PER_FACT > cfg.chunk_words {
        return Err(Error::InvalidArgument(format!(
            "a passage of {} facts does not fit in one {}-word chunk",
            cfg.facts_per_passage, cfg.chunk_words
        )));
    }
    let n_words = cfg.n_entities + cfg.n_relations + cfg.n_facts;
    // Rejection sampling for collision-free ids needs headroom.
    if n_words * 5 > cfg.vocab_size * 4 {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {} too small for {} distinct words",
            cfg.vocab_size, n_words
        )));
    }

    let mut rng = seeded_rng(cfg.seed, "synth_world");
    let mut used_ids = HashSet::new();
    let mut used_words = HashSet::new();
    let mut fresh = |syllables: usize, rng: &mut rand_chacha::ChaCha8Rng| loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        let id = word_id(&w, cfg.vocab_size);
        if !used_words.contains(&w) && used_ids.insert(id) {
            used_words.insert(w.clone());
            return w;
        }
    };
    let relations: Vec<String> = (0..cfg.n_relations).map(|_| fresh(2, &mut rng)).collect();
    let entities: Vec<String> = (0..cfg.n_entities).map(|_| fresh(3, &mut rng)).collect();
    let objects: Vec<String> = (0..cfg.n_facts).map(|_| fresh(4, &mut rng)).collect();

    // Facts in random order; consecutive runs become passages.
    let facts: Vec<(usize, usize, usize)> = sample(&mut rng, pairs, cfg.n_facts)
        .into_iter()
        .enumerate()
        .map(|(obj, pair)| (pair / cfg.n_relations, pair % cfg.n_relations, obj))
        .collect();

    let chunks_per_passage = (cfg.facts_per_passage * WORDS_PER_FACT).div_ceil(cfg.chunk_words);
    let mut docs = Vec::new();
    let mut examples = Vec::new();
    for (p, group) in facts.chunks(cfg.facts_per_passage).enumerate() {
        let sentences: Vec<String> = group
            .iter()
            .map(|&(s, r, o)| format!("{} {} {}.", entities[s], relations[r], objects[o]))
            .collect();
        docs.push(Document {
            doc_id: format!("p{p:05}"),
            title: entities[group[0].0].clone(),
            text: sentences.join(" "),
        });
        for (j, &(s, r, o)) in group.iter().enumerate() {
            let question = format!("{} {} ?", relations[r], entities[s]);
            let gold = p * chunks_per_passage + (j * WORDS_PER_FACT) / cfg.chunk_words;
            examples.push(QaExample {
                question_token_ids: tokenize(&question, cfg.vocab_size),
                question_text: question,
                answer_token_ids: tokenize(&objects[o], cfg.vocab_size),
                answer_text: objects[o].clone(),
                gold_chunk_id: Some(gold as u32),
            });
        }
    }
    Ok((docs, examples))
}
