//! Bag-of-words question encoder.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{FfnStack, ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::Var;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const SPECIALS: [&str; 2] = ["<pad>", "<unk>"];

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sorted word list with `<pad>` at id 0 and `<unk>` at id 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let words: BTreeSet<String> = corpus.iter().flat_map(|q| tokenize(q.as_ref())).collect();
        Ok(Self::from_words(words.into_iter().collect()))
    }

    fn from_words(words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocabulary { tokens }
    }

    /// Size including the two special entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ordinary (non-special) words in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.words()
            .binary_search_by(|w| w.as_str().cmp(token))
            .ok()
            .map(|i| i + SPECIALS.len())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`; unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Writes the ordinary words, one per line, in sorted order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for w in self.words() {
            text.push_str(w);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.windows(2).any(|w| w[0] >= w[1]) || words.iter().any(|w| w.is_empty()) {
            return Err(Error::format(path, "vocabulary must be sorted, unique and non-empty"));
        }
        Ok(Self::from_words(words))
    }
}

/// Encoded question: per-token features and their mean.
#[derive(Clone, Copy, Debug)]
pub struct TextFeature<'t> {
    /// `[n_tok, d_text]`, one row per non-padding token.
    pub tokens: Var<'t>,
    /// `[d_text]`.
    pub pooled: Var<'t>,
}

/// Embedding table followed by a per-token FFN and mean pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    ffn: FfnStack,
    d_text: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        d_text: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let embedding = store.add_uniform("text.embedding", ParamGroup::Rest, &[vocab_size, d_text], 1.0, rng)?;
        let ffn = FfnStack::new(store, "text.ffn", ParamGroup::Rest, &[d_text, hidden, d_text], rng)?;
        Ok(TextEncoder { embedding, ffn, d_text })
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    /// Encodes a padded id sequence; padding positions are ignored entirely.
    pub fn encode_ids<'t>(&self, s: &Session<'t>, ids: &[usize]) -> Result<TextFeature<'t>> {
        let kept: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD).collect();
        if kept.is_empty() {
            return Err(Error::Contract("question has no tokens".into()));
        }
        let emb = s.param(self.embedding).gather_rows(&kept)?;
        let tokens = self.ffn.forward(s, emb)?;
        let pooled = tokens.mean_axis(0)?;
        Ok(TextFeature { tokens, pooled })
    }

    pub fn encode<'t>(&self, s: &Session<'t>, vocab: &Vocabulary, question: &str) -> Result<TextFeature<'t>> {
        self.encode_ids(s, &vocab.encode(question))
    }
}
