//! Word-level tokenizer, vocabulary, and the combined question/answer
//! sequence with its attention, input and loss masks.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "\n", "<unk>"];

pub const DEFAULT_MAX_LEN: usize = 64;

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// (apostrophes excepted) becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Closed vocabulary with the reserved ids `PAD=0, BOS=1, EOS=2, SEP=3,
/// UNK=4` in front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Most frequent words first, ties broken lexicographically, capped at
    /// `max_size` entries including the reserved ones.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room for reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t.as_str() != r)
        {
            return Err(Error::Format("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    /// Word ids without BOS/EOS; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined words with closing punctuation attached to the previous
    /// word. PAD/BOS/EOS are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id);
            let attach = matches!(tok, "." | "," | "!" | "?" | ";" | ":" | ")" | "\n");
            if !out.is_empty() && !attach && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

/// Token ids of `question ∥ SEP ∥ answer` with the three masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub tokens: Vec<u32>,
    pub m_ar: Vec<u8>,
    pub m_input: Vec<u8>,
    pub m_loss: Vec<u8>,
    pub prefix_len: usize,
    pub sep_len: usize,
    pub suffix_len: usize,
}

impl TokenizedSample {
    /// Non-padding length.
    pub fn real_len(&self) -> usize {
        self.prefix_len + self.sep_len + self.suffix_len
    }

    /// Length of the bidirectional (question plus separator) part.
    pub fn full_attention_len(&self) -> usize {
        self.prefix_len + self.sep_len
    }

    pub fn n_supervised(&self) -> usize {
        self.m_loss.iter().map(|&b| b as usize).sum()
    }

    /// Appends a generated answer token (causal, unsupervised). Any padding
    /// is dropped first.
    pub fn push_generated(&mut self, id: u32) {
        let n = self.real_len();
        self.tokens.truncate(n);
        self.m_ar.truncate(n);
        self.m_input.truncate(n);
        self.m_loss.truncate(n);
        self.tokens.push(id);
        self.m_ar.push(1);
        self.m_input.push(1);
        self.m_loss.push(0);
        self.suffix_len += 1;
    }

    /// Checks the mask invariants: equal lengths, padding only at the end,
    /// causal positions only after the bidirectional part, and loss only on
    /// real causal positions.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.m_ar.len() != n || self.m_input.len() != n || self.m_loss.len() != n {
            return Err(Error::Validation("token and mask lengths differ".into()));
        }
        let real = self.real_len();
        if real > n || self.sep_len > 1 {
            return Err(Error::Validation("segment lengths exceed the sequence".into()));
        }
        let full = self.full_attention_len();
        for i in 0..n {
            let is_real = i < real;
            let causal = is_real && i >= full;
            if self.m_input[i] != is_real as u8 {
                return Err(Error::Validation(format!("input mask wrong at position {i}")));
            }
            if self.m_ar[i] != causal as u8 {
                return Err(Error::Validation(format!("attention mask wrong at position {i}")));
            }
            if self.m_loss[i] > self.m_ar[i] {
                return Err(Error::Validation(format!(
                    "loss requested at non-causal position {i}"
                )));
            }
        }
        Ok(())
    }
}

fn build_masks(
    tokens: Vec<u32>,
    prefix_len: usize,
    suffix_len: usize,
    supervised: bool,
    padded_len: usize,
) -> TokenizedSample {
    let full = prefix_len + 1;
    let real = full + suffix_len;
    let mut t = TokenizedSample {
        tokens,
        m_ar: Vec::with_capacity(padded_len),
        m_input: Vec::with_capacity(padded_len),
        m_loss: Vec::with_capacity(padded_len),
        prefix_len,
        sep_len: 1,
        suffix_len,
    };
    t.tokens.resize(padded_len, PAD);
    for i in 0..padded_len {
        let causal = (i >= full && i < real) as u8;
        t.m_ar.push(causal);
        t.m_input.push((i < real) as u8);
        t.m_loss.push(if supervised { causal } else { 0 });
    }
    t
}

/// `τ(q) ∥ SEP ∥ τ(e) ∥ EOS`, truncated from the answer's tail to `max_len`
/// and right-padded with PAD.
pub fn build_training_sequence(
    question: &str,
    answer: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenizedSample> {
    let prefix = vocab.tokenize(question);
    if prefix.is_empty() {
        return Err(Error::Validation("question is empty".into()));
    }
    if prefix.len() + 2 > max_len {
        return Err(Error::Validation(format!(
            "question of {} tokens leaves no answer room within {max_len}",
            prefix.len()
        )));
    }
    let mut suffix = vocab.tokenize(answer);
    suffix.push(EOS);
    suffix.truncate(max_len - prefix.len() - 1);
    let (p, s) = (prefix.len(), suffix.len());
    let mut tokens = prefix;
    tokens.push(SEP);
    tokens.extend(suffix);
    Ok(build_masks(tokens, p, s, true, max_len))
}

/// `τ(q) ∥ SEP` with no causal or supervised positions.
pub fn build_inference_sequence(question: &str, vocab: &Vocab) -> Result<TokenizedSample> {
    let prefix = vocab.tokenize(question);
    if prefix.is_empty() {
        return Err(Error::Validation("question is empty".into()));
    }
    let p = prefix.len();
    let mut tokens = prefix;
    tokens.push(SEP);
    Ok(build_masks(tokens, p, 0, false, p + 1))
}
