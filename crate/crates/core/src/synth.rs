//! Deterministic synthetic dialogue corpora.
//!
//! Three pseudo-domains (movies, technology, chit-chat) each own a disjoint
//! set of content words; every utterance mixes words from one domain with
//! shared function words. Domain membership of every content word is known,
//! which makes learned topics checkable.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DialoguePair;

pub const DOMAINS: [(&str, &[&str]); 3] = [
    (
        "movie",
        &[
            "movie", "film", "actor", "actress", "director", "scene", "cinema", "plot", "sequel", "trailer", "popcorn",
            "comedy", "thriller", "horror", "screen", "oscar", "script", "studio", "ticket", "drama",
        ],
    ),
    (
        "tech",
        &[
            "computer", "laptop", "software", "install", "driver", "kernel", "ubuntu", "linux", "update", "terminal",
            "server", "network", "password", "keyboard", "monitor", "package", "reboot", "wifi", "compile", "error",
        ],
    ),
    (
        "chitchat",
        &[
            "weekend", "coffee", "weather", "family", "friend", "dinner", "holiday", "birthday", "music", "garden",
            "breakfast", "sunny", "party", "beach", "cooking", "travel", "morning", "sleep", "dog", "happy",
        ],
    ),
];

/// Shared glue words; all of them are stop words.
pub const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "i", "you", "it", "is", "was", "and", "to", "of", "that", "what", "do", "so", "my", "your", "like",
    "about", "this", "have", "just", "really", "think", "yes", "no", "?", "!", ".",
];

/// Stop-word list matching the synthetic corpora (one word per line).
pub fn stopwords_text() -> String {
    let mut s = String::new();
    for w in FUNCTION_WORDS.iter().filter(|w| w.chars().all(char::is_alphabetic)) {
        s.push_str(w);
        s.push('\n');
    }
    s
}

/// Index of the domain owning `word`, if any.
pub fn domain_of(word: &str) -> Option<usize> {
    DOMAINS.iter().position(|(_, words)| words.contains(&word))
}

fn utterance(rng: &mut ChaCha8Rng, domain: usize, len: usize, content_rate: f64) -> Vec<String> {
    let words = DOMAINS[domain].1;
    (0..len)
        .map(|_| {
            let pool = if rng.random_bool(content_rate) { words } else { FUNCTION_WORDS };
            pool.choose(rng).expect("non-empty pool").to_string()
        })
        .collect()
}

/// `n` pairs with domains cycling 0, 1, 2, …; returns each pair's domain.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<(usize, DialoguePair)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = i % DOMAINS.len();
            let clen = rng.random_range(6..=10);
            let rlen = rng.random_range(4..=7);
            let context = utterance(&mut rng, d, clen, 0.6);
            let response = utterance(&mut rng, d, rlen, 0.6);
            (d, DialoguePair { context, response })
        })
        .collect()
}

/// Sixteen short pairs with distinct responses, for memorization runs.
pub fn overfit_corpus(seed: u64) -> Vec<DialoguePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<DialoguePair> = Vec::new();
    while out.len() < 16 {
        let d = out.len() % DOMAINS.len();
        let clen = rng.random_range(4..=6);
        let rlen = rng.random_range(3..=5);
        let pair = DialoguePair { context: utterance(&mut rng, d, clen, 0.7), response: utterance(&mut rng, d, rlen, 0.7) };
        if out.iter().all(|p| p.response != pair.response && p.context != pair.context) {
            out.push(pair);
        }
    }
    out
}
