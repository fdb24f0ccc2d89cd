//! Automatic response-quality metrics: corpus BLEU-4, distinct-n, and the
//! embedding-based Average, Greedy and Extrema similarities.
//!
//! All scores are percentages.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with add-one smoothing on the 2- to 4-gram precisions
/// and the usual brevity penalty.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    if candidates.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, count) in ngrams(c, n) {
                matched[n - 1] += count.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if matched[0] == 0 || c_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matched[0] as f64 / total[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matched[n] + 1) as f64 / (total[n] + 1) as f64).ln();
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * (log_p / 4.0).exp())
}

/// Unique n-grams over total n-grams across the whole corpus.
pub fn distinct_n(corpus: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("distinct-n needs n ≥ 1".into()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for s in corpus {
        if s.len() >= n {
            for w in s.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        warn!("distinct-{n}: corpus has no {n}-grams");
        return Ok(0.0);
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

/// Word vectors keyed by word. Misses are counted.
#[derive(Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    zero: Vec<f64>,
    oov: AtomicUsize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: HashMap::new(), zero: vec![0.0; dim], oov: AtomicUsize::new(0) }
    }

    /// Inserts a vector; returns whether the word was already present.
    pub fn insert(&mut self, word: impl Into<String>, v: Vec<f64>) -> Result<bool> {
        if v.len() != self.dim {
            return Err(Error::shape("embedding", &[v.len()], &[self.dim]));
        }
        Ok(self.vectors.insert(word.into(), v).is_some())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        let v = self.vectors.get(word).map(Vec::as_slice);
        if v.is_none() {
            self.oov.fetch_add(1, Ordering::Relaxed);
        }
        v
    }

    /// Like [`lookup`](Self::lookup) but returns the zero vector for unknown words.
    pub fn vector(&self, word: &str) -> &[f64] {
        self.lookup(word).unwrap_or(&self.zero)
    }

    pub fn oov_count(&self) -> usize {
        self.oov.load(Ordering::Relaxed)
    }
}

/// Reads `word v1 … vD` lines. A leading `count dim` header line is skipped.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path)?;
    parse_embeddings(&text)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if i == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let values = rest
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format { offset: start, detail: format!("line {}: {e}", i + 1) })?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.is_empty() || values.len() != t.dim() {
            return Err(Error::Format {
                offset: start,
                detail: format!("line {}: {} values, expected {}", i + 1, values.len(), t.dim()),
            });
        }
        if t.insert(word, values)? {
            warn!("embedding for {word:?} repeated on line {}; keeping the last", i + 1);
        }
    }
    table.ok_or_else(|| Error::Data("embedding file has no entries".into()))
}

/// Writes vectors in the text format read by [`load_embeddings`].
pub fn write_embeddings(path: &Path, entries: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = String::new();
    for (w, v) in entries {
        out.push_str(w);
        for x in v {
            write!(out, " {x}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

const CANCELLATION: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn known<'a>(tokens: &[String], table: &'a EmbeddingTable) -> Vec<&'a [f64]> {
    tokens.iter().filter_map(|t| table.lookup(t)).collect()
}

type Vectors<'a> = Vec<&'a [f64]>;

fn both_known<'a>(cand: &[String], reference: &[String], table: &'a EmbeddingTable, metric: &str) -> Option<(Vectors<'a>, Vectors<'a>)> {
    let c = known(cand, table);
    let r = known(reference, table);
    if c.is_empty() || r.is_empty() {
        warn!("{metric}: a side has no in-vocabulary tokens; scoring 0");
        return None;
    }
    Some((c, r))
}

fn mean(vs: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = vs.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    // a mean that cancels to rounding noise has no direction
    let largest = vs.iter().map(|v| norm(v)).fold(0.0, f64::max);
    if norm(&m) <= CANCELLATION * largest {
        m.fill(0.0);
    }
    m
}

/// Cosine of the mean word vectors.
pub fn emb_average(cand: &[String], reference: &[String], table: &EmbeddingTable) -> f64 {
    match both_known(cand, reference, table, "average") {
        Some((c, r)) => 100.0 * cosine(&mean(&c), &mean(&r)),
        None => 0.0,
    }
}

fn greedy_direction(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|w| b.iter().map(|v| cosine(w, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / a.len() as f64
}

/// Symmetrized greedy matching.
pub fn emb_greedy(cand: &[String], reference: &[String], table: &EmbeddingTable) -> f64 {
    match both_known(cand, reference, table, "greedy") {
        Some((c, r)) => 100.0 * (greedy_direction(&c, &r) + greedy_direction(&r, &c)) / 2.0,
        None => 0.0,
    }
}

/// Per dimension, the value of largest magnitude (positive on ties).
pub fn extrema(vs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0f64; vs[0].len()];
    for (d, slot) in out.iter_mut().enumerate() {
        for v in vs {
            let x = v[d];
            if x.abs() > slot.abs() || (x.abs() == slot.abs() && x > *slot) {
                *slot = x;
            }
        }
    }
    out
}

pub fn emb_extrema(cand: &[String], reference: &[String], table: &EmbeddingTable) -> f64 {
    match both_known(cand, reference, table, "extrema") {
        Some((c, r)) => 100.0 * cosine(&extrema(&c), &extrema(&r)),
        None => 0.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub average: f64,
    pub greedy: f64,
    pub extrema: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub distinct3: f64,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let cols = ["BLEU", "Average", "Greedy", "Extrema", "Distinct-1", "Distinct-2", "Distinct-3"];
        let vals = [self.bleu, self.average, self.greedy, self.extrema, self.distinct1, self.distinct2, self.distinct3];
        let mut head = String::new();
        let mut row = String::new();
        for (c, v) in cols.iter().zip(vals) {
            let w = c.len().max(8);
            write!(head, "{c:>w$}  ").expect("writing to a String");
            write!(row, "{v:>w$.4}  ").expect("writing to a String");
        }
        format!("{}\n{}\n", head.trim_end(), row.trim_end())
    }
}

/// Scores candidates against references. Embedding metrics are averaged
/// over pairs.
pub fn evaluate(candidates: &[Vec<String>], references: &[Vec<String>], table: &EmbeddingTable) -> Result<EvalReport> {
    let b = bleu(candidates, references)?;
    let n = candidates.len() as f64;
    let mut r = EvalReport { bleu: b, ..EvalReport::default() };
    for (c, f) in candidates.iter().zip(references) {
        r.average += emb_average(c, f, table) / n;
        r.greedy += emb_greedy(c, f, table) / n;
        r.extrema += emb_extrema(c, f, table) / n;
    }
    r.distinct1 = distinct_n(candidates, 1)?;
    r.distinct2 = distinct_n(candidates, 2)?;
    r.distinct3 = distinct_n(candidates, 3)?;
    Ok(r)
}
