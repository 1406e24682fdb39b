//! Caption normalisation, tokenisation and vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

const SPECIALS: [&str; 4] = [UNK, PAD, BOS, EOS];

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn normalize_tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Bidirectional token/id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an explicit token list, which must start with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid("vocabulary must start with <unk>, <pad>, <bos>, <eos>"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Specials first, then every distinct token in first-occurrence order.
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::invalid("build_vocab: empty corpus"));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for c in captions {
            for tok in normalize_tokenize(c.as_ref()) {
                if seen.insert(tok.clone()) {
                    tokens.push(tok);
                }
            }
        }
        Self::from_tokens(tokens)
    }

    /// Size including the four specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `bos tokens… eos` followed by padding up to `max_len`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Result<Vec<usize>> {
        if tokens.len() + 2 > max_len {
            return Err(Error::invalid(format!(
                "caption of {} tokens does not fit max_len {max_len}",
                tokens.len()
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.push(EOS_ID);
        ids.resize(max_len, PAD_ID);
        Ok(ids)
    }

    /// Text up to the first eos, with special tokens dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: 1,
                message: "vocabulary must start with <unk>, <pad>, <bos>, <eos>".into(),
            });
        }
        Self::from_tokens(tokens)
    }
}

/// Free function form of [`Vocab::build`].
pub fn build_vocab<S: AsRef<str>>(captions: &[S]) -> Result<Vocab> {
    Vocab::build(captions)
}

pub fn encode_caption<S: AsRef<str>>(tokens: &[S], vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    vocab.encode(tokens, max_len)
}

pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> String {
    vocab.decode(ids)
}
