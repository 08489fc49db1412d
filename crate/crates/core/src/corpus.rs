//! Token corpora, the byte-level tokenizer, corpus shuffling and a seeded
//! generator of English-like text for self-contained pre-training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LamoError, Result};

/// End-of-text marker appended after the 256 byte tokens.
pub const BYTE_EOT: usize = 256;
pub const BYTE_VOCAB: usize = 257;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenizerDesc {
    /// Raw UTF-8 bytes plus an end-of-text token.
    Byte,
    /// Vocabulary exported alongside converted checkpoints; ids are opaque.
    External { vocab_path: String, vocab_size: usize },
}

impl TokenizerDesc {
    pub fn vocab_size(&self) -> usize {
        match self {
            TokenizerDesc::Byte => BYTE_VOCAB,
            TokenizerDesc::External { vocab_size, .. } => *vocab_size,
        }
    }
}

/// Token→id map written by the checkpoint converter.
#[derive(Debug, Clone)]
pub struct ExternalVocab {
    pub path: String,
    pub token_to_id: BTreeMap<String, usize>,
}

impl ExternalVocab {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let token_to_id: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        Ok(ExternalVocab { path: path.display().to_string(), token_to_id })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_to_id.values().max().map_or(0, |m| m + 1)
    }

    pub fn desc(&self) -> TokenizerDesc {
        TokenizerDesc::External { vocab_path: self.path.clone(), vocab_size: self.vocab_size() }
    }

    /// Id→token inverse (first token wins on duplicates).
    pub fn decoder(&self) -> BTreeMap<usize, &str> {
        let mut out = BTreeMap::new();
        for (tok, &id) in &self.token_to_id {
            out.entry(id).or_insert(tok.as_str());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    tokens: Vec<u32>,
    tokenizer: TokenizerDesc,
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, tokenizer: TokenizerDesc) -> Result<Self> {
        let v = tokenizer.vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(LamoError::invalid(format!("token id {bad} >= vocab size {v}")));
        }
        Ok(Corpus { tokens, tokenizer })
    }

    /// Byte-level encoding of `text`.
    pub fn from_text(text: &str) -> Corpus {
        Corpus { tokens: text.bytes().map(u32::from).collect(), tokenizer: TokenizerDesc::Byte }
    }

    pub fn from_file(path: &Path) -> Result<Corpus> {
        Ok(Corpus::from_text(&std::fs::read_to_string(path)?))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn tokenizer(&self) -> &TokenizerDesc {
        &self.tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Uniformly placed contiguous chunk of `len` tokens.
    pub fn random_chunk(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let start = rng.gen_range(0..=self.tokens.len() - len);
        self.tokens[start..start + len].iter().map(|&t| t as usize).collect()
    }

    /// Consecutive non-overlapping chunks of `len` tokens from the start.
    pub fn sequential_chunks(&self, len: usize, max_chunks: usize) -> Vec<Vec<usize>> {
        self.tokens
            .chunks_exact(len)
            .take(max_chunks)
            .map(|c| c.iter().map(|&t| t as usize).collect())
            .collect()
    }

    /// Splits off the final `fraction` of tokens as a held-out corpus.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction) * self.tokens.len() as f64).round() as usize;
        let cut = cut.min(self.tokens.len());
        (
            Corpus { tokens: self.tokens[..cut].to_vec(), tokenizer: self.tokenizer.clone() },
            Corpus { tokens: self.tokens[cut..].to_vec(), tokenizer: self.tokenizer.clone() },
        )
    }
}

/// Uniform random permutation of token order; the token multiset is preserved.
pub fn shuffle_corpus(corpus: &Corpus, seed: u64) -> Corpus {
    let mut tokens = corpus.tokens.clone();
    tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Corpus { tokens, tokenizer: corpus.tokenizer.clone() }
}

const NAMES: &[&str] = &[
    "Ada", "Brook", "Cyrus", "Dara", "Elio", "Fenna", "Gale", "Hollis", "Ines", "Jory", "Kestrel", "Lumi",
];
const NOUNS: &[(&str, &str)] = &[
    ("river", "rivers"), ("village", "villages"), ("teacher", "teachers"), ("farmer", "farmers"),
    ("mountain", "mountains"), ("ship", "ships"), ("garden", "gardens"), ("child", "children"),
    ("merchant", "merchants"), ("bridge", "bridges"), ("storm", "storms"), ("lantern", "lanterns"),
    ("forest", "forests"), ("king", "kings"), ("engine", "engines"), ("city", "cities"),
    ("horse", "horses"), ("letter", "letters"), ("market", "markets"), ("painter", "painters"),
    ("road", "roads"), ("soldier", "soldiers"), ("island", "islands"), ("bird", "birds"),
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "northern", "small", "ancient", "busy", "cold", "green", "famous",
    "narrow", "wooden", "golden", "distant", "gentle", "broken", "patient", "early",
];
const VERBS: &[(&str, &str, &str)] = &[
    ("crosses", "cross", "crossed"), ("follows", "follow", "followed"), ("builds", "build", "built"),
    ("visits", "visit", "visited"), ("watches", "watch", "watched"), ("carries", "carry", "carried"),
    ("finds", "find", "found"), ("guards", "guard", "guarded"), ("paints", "paint", "painted"),
    ("reaches", "reach", "reached"), ("remembers", "remember", "remembered"), ("sells", "sell", "sold"),
];
const PLACES: &[&str] = &["the harbor", "the valley", "the old mill", "the square", "the coast", "the hills"];
const TIMES: &[&str] = &["In the morning", "After the rain", "Every winter", "Long ago", "At dusk", "Each spring"];
const ADVERBS: &[&str] = &["slowly", "often", "carefully", "never", "always", "rarely"];

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn noun_phrase(rng: &mut impl Rng) -> (String, bool) {
    let plural = rng.gen_bool(0.35);
    let (sg, pl) = *pick(rng, NOUNS);
    let noun = if plural { pl } else { sg };
    let det = if plural {
        *pick(rng, &["the", "many", "some", "two"])
    } else {
        *pick(rng, &["the", "a", "every", "this"])
    };
    let phrase = if rng.gen_bool(0.5) {
        let adj = pick(rng, ADJECTIVES);
        let det = if det == "a" && adj.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { det };
        format!("{det} {adj} {noun}")
    } else {
        format!("{det} {noun}")
    };
    (phrase, plural)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn sentence(rng: &mut impl Rng) -> String {
    let (subject, plural) = if rng.gen_bool(0.3) {
        (pick(rng, NAMES).to_string(), false)
    } else {
        noun_phrase(rng)
    };
    let (sg, pl, past) = *pick(rng, VERBS);
    let (object, _) = noun_phrase(rng);
    match rng.gen_range(0..5) {
        0 => capitalize(&format!("{subject} {} {object}.", if plural { pl } else { sg })),
        1 => format!("{}, {subject} {past} {object}.", pick(rng, TIMES)),
        2 => capitalize(&format!(
            "{subject} {} {} {object} near {}.",
            pick(rng, ADVERBS),
            if plural { pl } else { sg },
            pick(rng, PLACES)
        )),
        3 => {
            let (other, _) = noun_phrase(rng);
            capitalize(&format!("{subject} {past} {object}, and {other} {past} {}.", pick(rng, PLACES)))
        }
        _ => capitalize(&format!(
            "{subject} {} {} because {object} {past} {}.",
            if plural { "were" } else { "was" },
            pick(rng, ADJECTIVES),
            pick(rng, PLACES)
        )),
    }
}

/// Roughly `bytes` of seeded English-like prose in paragraphs.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.gen_range(3..7);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng));
        }
        out.push_str("\n\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(c: &Corpus) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for &t in c.tokens() {
            *h.entry(t).or_default() += 1;
        }
        h
    }

    #[test]
    fn shuffle_preserves_multiset_and_is_seeded() {
        let c = Corpus::from_text(&synthetic_text(2000, 1));
        let s = shuffle_corpus(&c, 7);
        assert_eq!(s.len(), c.len());
        assert_eq!(histogram(&s), histogram(&c));
        assert_ne!(s.tokens(), c.tokens());
        assert_eq!(shuffle_corpus(&c, 7), s);
        assert_ne!(shuffle_corpus(&c, 8), s);
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(5000, 3);
        assert_eq!(a, synthetic_text(5000, 3));
        assert!(a.len() >= 5000);
        assert!(a.is_ascii());
        assert_ne!(a, synthetic_text(5000, 4));
    }

    #[test]
    fn chunks_and_validation() {
        let c = Corpus::from_text("abcdefghij");
        assert_eq!(c.sequential_chunks(3, 10).len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(c.random_chunk(10, &mut rng).len(), 10);
        assert!(Corpus::new(vec![300], TokenizerDesc::Byte).is_err());
        let (train, held) = c.split(0.2);
        assert_eq!((train.len(), held.len()), (8, 2));
    }
}
