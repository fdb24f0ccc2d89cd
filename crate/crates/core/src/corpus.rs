//! Corpus ingestion and vocabularies.
//!
//! Corpus files are UTF-8, one sample per line: `context<TAB>response`.
//! Multi-turn contexts separate turns with the token `__eot__`. Tokenization
//! is lowercasing followed by whitespace splitting.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::topic::{bow_featurize, BowVector};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];
pub const TURN_SEPARATOR: &str = "__eot__";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialoguePair {
    pub context: Vec<String>,
    pub response: Vec<String>,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub pairs: Vec<DialoguePair>,
    /// Lines without a tab or with an empty side.
    pub skipped: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn parse_corpus(text: &str, max_len: usize) -> IngestReport {
    let mut report = IngestReport::default();
    for line in text.lines() {
        let Some((ctx, resp)) = line.split_once('\t') else {
            if !line.trim().is_empty() {
                report.skipped += 1;
            }
            continue;
        };
        let mut context = tokenize(ctx);
        let mut response = tokenize(resp);
        if context.is_empty() || response.is_empty() {
            report.skipped += 1;
            continue;
        }
        context.truncate(max_len);
        response.truncate(max_len);
        report.pairs.push(DialoguePair { context, response });
    }
    report
}

pub fn ingest(path: &Path, max_len: usize) -> Result<IngestReport> {
    let text = fs::read_to_string(path)?;
    let report = parse_corpus(&text, max_len);
    if report.pairs.is_empty() {
        return Err(Error::Data(format!("{} has no usable lines", path.display())));
    }
    if report.skipped > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.skipped);
    }
    Ok(report)
}

pub fn write_corpus(pairs: &[DialoguePair], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(f, "{}\t{}", p.context.join(" "), p.response.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

/// Words sorted by descending count, ties broken lexicographically.
fn rank_by_frequency<'a>(tokens: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().map(|(w, _)| w.to_string()).collect()
}

fn all_tokens(pairs: &[DialoguePair]) -> impl Iterator<Item = &str> {
    pairs
        .iter()
        .flat_map(|p| p.context.iter().chain(&p.response))
        .map(String::as_str)
}

/// Word vocabulary with the four reserved entries at indices 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `cap − 4` most frequent words.
    pub fn build(pairs: &[DialoguePair], cap: usize) -> Self {
        let keep = cap.saturating_sub(RESERVED.len());
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                rank_by_frequency(all_tokens(pairs))
                    .into_iter()
                    .filter(|w| !RESERVED.contains(&w.as_str()))
                    .take(keep),
            )
            .collect();
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to words, stopping at the first end-of-sequence.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.word(i).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!("{} is not a vocabulary file", path.display())));
        }
        Ok(Self::from_words(words))
    }
}

/// Naive suffix stripping; only used when stemming is requested.
pub fn stem(word: &str) -> String {
    for suffix in ["ingly", "edly", "ing", "ies", "ed", "ly", "s"] {
        let Some(base) = word.strip_suffix(suffix) else { continue };
        let n = base.chars().count();
        match suffix {
            "ies" if n >= 4 => return format!("{base}y"),
            "ies" => continue,
            "s" if base.ends_with('s') => continue,
            _ if n >= 3 => return base.to_string(),
            _ => {}
        }
    }
    word.to_string()
}

pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("stop-word file {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// The vocabulary the topic model is defined over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopicalVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    stem: bool,
}

fn topical_candidate(token: &str, stopwords: &BTreeSet<String>) -> bool {
    token.chars().count() >= 3 && token.chars().all(char::is_alphabetic) && !stopwords.contains(token)
}

impl TopicalVocab {
    /// Keeps the `cap` most frequent tokens that are alphabetic, at least three
    /// characters long and not stop words.
    pub fn build(pairs: &[DialoguePair], cap: usize, stopwords: &BTreeSet<String>, stem_words: bool) -> Self {
        let tokens: Vec<String> = all_tokens(pairs)
            .filter(|t| topical_candidate(t, stopwords))
            .map(|t| if stem_words { stem(t) } else { t.to_string() })
            .filter(|t| !stopwords.contains(t))
            .collect();
        let words: Vec<String> = rank_by_frequency(tokens.iter().map(String::as_str))
            .into_iter()
            .take(cap)
            .collect();
        Self::from_words(words, stem_words)
    }

    fn from_words(words: Vec<String>, stem: bool) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, stem }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn stems(&self) -> bool {
        self.stem
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        if self.stem {
            self.index.get(&stem(token)).copied()
        } else {
            self.index.get(token).copied()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("# stem={}\n", self.stem);
        for w in &self.words {
            text.push_str(w);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let stem = match lines.next() {
            Some("# stem=true") => true,
            Some("# stem=false") => false,
            _ => return Err(Error::Data(format!("{} is not a topical vocabulary file", path.display()))),
        };
        Ok(Self::from_words(lines.map(str::to_string).collect(), stem))
    }
}

/// A pair mapped to vocabulary ids, with its bag-of-words views.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub context: Vec<usize>,
    pub response: Vec<usize>,
    /// Topical bag of words of the context alone.
    pub bow_context: BowVector,
    /// Topical bag of words of context and response together.
    pub bow_dialogue: BowVector,
}

pub fn encode_pair(pair: &DialoguePair, vocab: &Vocab, topical: &TopicalVocab) -> EncodedPair {
    let dialogue: Vec<String> = pair.context.iter().chain(&pair.response).cloned().collect();
    EncodedPair {
        context: vocab.encode(&pair.context),
        response: vocab.encode(&pair.response),
        bow_context: bow_featurize(&pair.context, topical),
        bow_dialogue: bow_featurize(&dialogue, topical),
    }
}

/// Encodes a context with no response, for generation.
pub fn encode_context(context: &[String], vocab: &Vocab, topical: &TopicalVocab) -> EncodedPair {
    EncodedPair {
        context: vocab.encode(context),
        response: Vec::new(),
        bow_context: bow_featurize(context, topical),
        bow_dialogue: bow_featurize(context, topical),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: &str, r: &str) -> DialoguePair {
        DialoguePair { context: tokenize(c), response: tokenize(r) }
    }

    #[test]
    fn parses_lines() {
        let r = parse_corpus("Hello there\thi !\nno tab here\n\t\nonly context\t   \n", 50);
        assert_eq!(r.pairs, vec![pair("hello there", "hi !")]);
        assert_eq!(r.skipped, 3);
    }

    #[test]
    fn truncates_to_max_len() {
        let ctx: Vec<String> = (0..52).map(|i| format!("w{i}")).collect();
        let r = parse_corpus(&format!("{}\tok", ctx.join(" ")), 50);
        assert_eq!(r.pairs[0].context.len(), 50);
        assert_eq!(r.pairs[0].context[49], "w49");
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(&dir.path().join("missing.txt"), 50), Err(Error::Io(_))));
        let p = dir.path().join("bad.txt");
        fs::write(&p, "no tabs\nat all\n").unwrap();
        assert!(matches!(ingest(&p, 50), Err(Error::Data(_))));
    }

    #[test]
    fn write_then_ingest_is_lossless() {
        let pairs = vec![pair("a b __eot__ c", "d e"), pair("x", "y z")];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        write_corpus(&pairs, &p).unwrap();
        assert_eq!(ingest(&p, 50).unwrap().pairs, pairs);
    }

    #[test]
    fn vocab_order_and_ties() {
        let v = Vocab::build(&[pair("a a b", "a")], 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);

        let v = Vocab::build(&[pair("y x", "q q q")], 6);
        assert_eq!(v.id("q"), 4);
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("y"), UNK);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn vocab_is_deterministic_and_round_trips() {
        let pairs = vec![pair("the cat sat on the mat", "a dog sat too"), pair("b c d", "e f g")];
        let a = Vocab::build(&pairs, 100);
        let b = Vocab::build(&pairs, 100);
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        a.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), a);
        assert_eq!(a.decode(&[a.id("cat"), EOS, a.id("dog")]), vec!["cat"]);
    }

    #[test]
    fn topical_vocab_filters() {
        let stop: BTreeSet<String> = ["the", "on"].iter().map(|s| s.to_string()).collect();
        let pairs = vec![pair("the cat sat on the mat", "cat 123 ok __eot__")];
        let tv = TopicalVocab::build(&pairs, 10, &stop, false);
        let mut words = tv.words().to_vec();
        words.sort();
        assert_eq!(words, vec!["cat", "mat", "sat"]);
        assert_eq!(tv.words()[0], "cat");
        assert!(tv.index_of("123").is_none());

        let tv = TopicalVocab::build(&pairs, 2, &stop, false);
        assert_eq!(tv.words(), &["cat", "mat"]);
    }

    #[test]
    fn missing_stopword_file_is_config_error() {
        assert!(matches!(load_stopwords(Path::new("/nonexistent/stop.txt")), Err(Error::Config(_))));
    }

    #[test]
    fn stemming_merges_inflections() {
        assert_eq!(stem("movies"), "movie");
        assert_eq!(stem("parties"), "party");
        assert_eq!(stem("watching"), "watch");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("class"), "class");
        let pairs = vec![pair("movies movie watching", "watched")];
        let tv = TopicalVocab::build(&pairs, 10, &BTreeSet::new(), true);
        assert_eq!(tv.index_of("movies"), tv.index_of("movie"));
        assert_eq!(tv.index_of("watching"), tv.index_of("watched"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        tv.save(&p).unwrap();
        assert_eq!(TopicalVocab::load(&p).unwrap(), tv);
    }
}
