//! Deterministic stand-in for a text encoder.
//!
//! Each whitespace-separated word hashes to a seeded Gaussian vector and occupies one
//! token slot; unused slots hold per-position padding vectors. The empty prompt is
//! therefore all padding, which serves as the reserved null embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const DEFAULT_TOKENS: usize = 8;
pub const DEFAULT_EMBED_DIM: usize = 64;

const PAD_MARKER: &[u8] = b"\x00<pad>";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    text: String,
    words: Vec<String>,
    n_tokens: usize,
    dim: usize,
    tokens: Vec<f64>,
}

impl PromptEmbedding {
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Words that made it into token slots, in slot order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `n_tokens x dim` token matrix.
    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn token(&self, slot: usize) -> &[f64] {
        &self.tokens[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn is_null(&self) -> bool {
        self.words.is_empty()
    }

    /// Slot holding the first occurrence of `word`.
    pub fn token_index(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn same_shape(&self, other: &PromptEmbedding) -> bool {
        self.n_tokens == other.n_tokens && self.dim == other.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptEmbedder {
    pub n_tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl PromptEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { n_tokens: DEFAULT_TOKENS, dim: DEFAULT_EMBED_DIM, seed }
    }

    pub fn embed(&self, text: &str) -> PromptEmbedding {
        let words: Vec<String> =
            text.split_whitespace().take(self.n_tokens).map(str::to_owned).collect();
        let mut tokens = Vec::with_capacity(self.n_tokens * self.dim);
        for slot in 0..self.n_tokens {
            let key = match words.get(slot) {
                Some(w) => fnv1a(w.as_bytes()),
                None => fnv1a(PAD_MARKER) ^ splitmix64(slot as u64 + 1),
            };
            tokens.extend(self.vector(key));
        }
        PromptEmbedding { text: text.to_owned(), words, n_tokens: self.n_tokens, dim: self.dim, tokens }
    }

    pub fn null(&self) -> PromptEmbedding {
        self.embed("")
    }

    fn vector(&self, key: u64) -> impl Iterator<Item = f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(key ^ splitmix64(self.seed)));
        (0..self.dim).map(move |_| StandardNormal.sample(&mut rng))
    }
}

/// Embeds `text` with the default token count and width.
pub fn embed_prompt(text: &str, seed: u64) -> PromptEmbedding {
    PromptEmbedder::new(seed).embed(text)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
