//! Wordpiece tokenization with `[CLS]`/`[SEP]` framing.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";

pub const DEFAULT_MAX_LEN: usize = 128;

/// Token vocabulary. Ids are dense line indices of the vocab file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    cls: usize,
    sep: usize,
    unk: usize,
    pad: usize,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::data(format!("empty token at id {id}")));
            }
            if tok.starts_with(CONTINUATION) && tok.chars().count() <= 2 {
                return Err(Error::data(format!("continuation piece at id {id} has no body")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::data(format!("duplicate token {tok:?} at id {id}")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::data(format!("vocabulary lacks special token {name}")))
        };
        Ok(Self {
            cls: special(CLS)?,
            sep: special(SEP)?,
            unk: special(UNK)?,
            pad: special(PAD)?,
            tokens,
            index,
        })
    }

    /// Parse a vocab file body: one token per line, id = line index.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let body = body.strip_suffix('\r').unwrap_or(body);
        if body.is_empty() {
            return Err(Error::data("empty vocabulary"));
        }
        Self::from_tokens(body.split('\n').map(|l| l.trim_end_matches('\r')))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Vocab file contents, one token per line with no trailing blank line.
    pub fn to_file_string(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }
}

/// A framed, padded id sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// Number of real tokens, including `[CLS]` and `[SEP]`.
    pub length: usize,
    pub max_len: usize,
}

impl Encoded {
    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.length]
    }
}

fn is_split_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase, split on whitespace, and emit every non-alphanumeric
/// character as its own token.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_split_char(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_lowercase().collect());
        } else {
            current.extend(c.to_lowercase());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first segmentation. Returns `[UNK]` alone if any
/// position of the word cannot be covered.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start == 0 {
                body
            } else {
                format!("{CONTINUATION}{body}")
            };
            if vocab.contains(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    pieces
}

/// All wordpieces of `text`, without framing.
pub fn pieces(text: &str, vocab: &Vocab) -> Vec<String> {
    basic_split(text).iter().flat_map(|w| wordpiece(w, vocab)).collect()
}

/// `[CLS] pieces [SEP]`, truncating pieces to `max_len - 2` and padding
/// to `max_len`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<Encoded> {
    if max_len < 2 {
        return Err(Error::contract(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend(
        pieces(text, vocab)
            .iter()
            .take(max_len - 2)
            .map(|p| vocab.id(p).expect("pieces come from the vocabulary")),
    );
    ids.push(vocab.sep_id());
    let length = ids.len();
    ids.resize(max_len, vocab.pad_id());
    Ok(Encoded { ids, length, max_len })
}

/// Space-joined tokens of the valid (non-pad) part of `encoded`.
pub fn render(encoded: &Encoded, vocab: &Vocab) -> String {
    encoded
        .valid_ids()
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}
