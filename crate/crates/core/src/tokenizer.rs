//! WordPiece tokenization that remembers which word each piece came from.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION: &str = "##";

/// Ordered token list; a token's id is its position.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl Vocabulary {
    /// Builds a vocabulary; `[PAD]` must come first and every special token
    /// must appear exactly once.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token `{name}`")))
        };
        let vocab = Self {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
            tokens,
            index,
        };
        if vocab.pad != 0 {
            return Err(Error::Vocab(format!("`{PAD}` must have id 0, found {}", vocab.pad)));
        }
        Ok(vocab)
    }

    /// Reads one token per line; ids are zero-based line numbers.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        crate::io::write_atomic(path.as_ref(), text.as_bytes())
    }

    /// Special tokens first, then `words` in order, skipping duplicates.
    pub fn with_specials<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }
    pub fn unk_id(&self) -> u32 {
        self.unk
    }
    pub fn cls_id(&self) -> u32 {
        self.cls
    }
    pub fn sep_id(&self) -> u32 {
        self.sep
    }
    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Token ids with per-token word index and attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub token_ids: Vec<u32>,
    /// Index of the source word; `None` for special tokens.
    pub word_ids: Vec<Option<u32>>,
    pub attention_mask: Vec<u8>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Right-padded batch laid out row-major as `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub word_ids: Vec<Option<u32>>,
    pub attention_mask: Vec<u8>,
}

impl PaddedBatch {
    pub fn row_ids(&self, b: usize) -> &[u32] {
        &self.token_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn row_mask(&self, b: usize) -> &[u8] {
        &self.attention_mask[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

pub fn pad_batch(seqs: &[TokenizedSequence], pad_id: u32) -> Result<PaddedBatch> {
    let seq_len = seqs
        .iter()
        .map(TokenizedSequence::len)
        .max()
        .ok_or_else(|| Error::Invalid("pad_batch needs at least one sequence".into()))?;
    if seq_len == 0 {
        return Err(Error::Invalid("pad_batch: all sequences are empty".into()));
    }
    let batch = seqs.len();
    let mut out = PaddedBatch {
        batch,
        seq_len,
        token_ids: Vec::with_capacity(batch * seq_len),
        word_ids: Vec::with_capacity(batch * seq_len),
        attention_mask: Vec::with_capacity(batch * seq_len),
    };
    for s in seqs {
        let pad = seq_len - s.len();
        out.token_ids.extend_from_slice(&s.token_ids);
        out.token_ids.extend(std::iter::repeat_n(pad_id, pad));
        out.word_ids.extend_from_slice(&s.word_ids);
        out.word_ids.extend(std::iter::repeat_n(None, pad));
        out.attention_mask.extend_from_slice(&s.attention_mask);
        out.attention_mask.extend(std::iter::repeat_n(0, pad));
    }
    Ok(out)
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercasing (optional), whitespace split, then each punctuation
/// character becomes its own word.
pub fn pre_split(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_control() {
                continue;
            }
            if is_punctuation(c) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else if lowercase {
                cur.extend(c.to_lowercase());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocabulary,
    lowercase: bool,
    max_word_chars: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            lowercase: true,
            max_word_chars: 100,
        }
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Greedy longest-match-first split of one word; `None` when some
    /// suffix cannot be matched.
    pub fn wordpiece(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > self.max_word_chars {
            return None;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.vocab.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }

    /// `[CLS] pieces… [SEP]`, keeping only the first `max_len - 2` pieces.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenizedSequence> {
        if max_len < 2 {
            return Err(Error::Invalid(format!(
                "max_len must leave room for [CLS] and [SEP], got {max_len}"
            )));
        }
        let budget = max_len - 2;
        let mut token_ids = vec![self.vocab.cls_id()];
        let mut word_ids = vec![None];
        'words: for (w, word) in pre_split(text, self.lowercase).iter().enumerate() {
            let pieces = self
                .wordpiece(word)
                .unwrap_or_else(|| vec![self.vocab.unk_id()]);
            for p in pieces {
                if token_ids.len() - 1 == budget {
                    break 'words;
                }
                token_ids.push(p);
                word_ids.push(Some(w as u32));
            }
        }
        token_ids.push(self.vocab.sep_id());
        word_ids.push(None);
        let attention_mask = vec![1; token_ids.len()];
        Ok(TokenizedSequence {
            token_ids,
            word_ids,
            attention_mask,
        })
    }

    pub fn tokenize_batch(&self, texts: &[impl AsRef<str>], max_len: usize) -> Result<PaddedBatch> {
        let seqs = texts
            .iter()
            .map(|t| self.tokenize(t.as_ref(), max_len))
            .collect::<Result<Vec<_>>>()?;
        pad_batch(&seqs, self.vocab.pad_id())
    }

    /// Joins pieces back into words, dropping special tokens.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.vocab.is_special(id) && id != self.vocab.unk_id() {
                continue;
            }
            let tok = self.vocab.token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}
