//! Word-level report vocabulary.
//!
//! Normalisation: lowercase, drop punctuation (hyphens inside words are
//! kept, so topics such as `radio-carpal` survive), and emit a sentence-final
//! period as its own `.` token.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_FREQ: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 60;

/// Splits raw report text into normalised word tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let trimmed = lower.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '.');
        let ends_sentence = trimmed.ends_with('.');
        let word: String = trimmed
            .trim_matches(|c: char| !c.is_alphanumeric())
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '-')
            .collect();
        if !word.is_empty() {
            out.push(word);
        }
        if ends_sentence {
            out.push(".".to_string());
        }
    }
    out
}

/// Bidirectional word ↔ id map with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Specials,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Specials {
    pad: usize,
    bos: usize,
    eos: usize,
    unk: usize,
}

impl Vocab {
    /// Collects every normalised word with frequency ≥ `min_freq`. Ids are
    /// assigned after the specials by descending frequency, ties broken
    /// lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in normalize(text.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(words.into_iter().map(|(w, _)| w)))
    }

    fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// All tokens in id order, specials first.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Normalises `text`, maps out-of-vocabulary words to UNK and wraps the
    /// result in BOS/EOS. Sequences longer than `max_len` are cut so that EOS
    /// stays last.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        if max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be at least 2".into()));
        }
        let mut ids = vec![BOS];
        ids.extend(normalize(text).iter().map(|w| self.id(w).unwrap_or(UNK)));
        ids.truncate(max_len - 1);
        ids.push(EOS);
        Ok(TokenSeq { ids })
    }

    /// Drops specials and joins the remaining words with single spaces.
    pub fn decode(&self, seq: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(seq.len());
        for &id in seq {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            if id >= NUM_SPECIALS {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: Specials { pad: PAD, bos: BOS, eos: EOS, unk: UNK },
            tokens: self.id_to_token.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let s = &file.specials;
        if (s.pad, s.bos, s.eos, s.unk) != (PAD, BOS, EOS, UNK) {
            return Err(Error::InvalidArgument("vocab specials must be pad=0 bos=1 eos=2 unk=3".into()));
        }
        if file.tokens.len() < NUM_SPECIALS
            || file.tokens[..NUM_SPECIALS].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::InvalidArgument("vocab must start with the four special tokens".into()));
        }
        let vocab = Self::from_tokens(file.tokens.into_iter().skip(NUM_SPECIALS));
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(Error::InvalidArgument("vocab contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// An encoded report: BOS, word ids, EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of word tokens between BOS and EOS.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&i| i >= NUM_SPECIALS || i == UNK).count()
    }
}
