use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Separates the question from the response in decoder dialogs.
pub const SEP: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(Error::Vocab(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= NUM_SPECIALS
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Lowercases and splits on anything that is not alphanumeric; punctuation is dropped.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Specials first, then words by descending frequency with lexicographic tie-break,
/// capped at `max_size` entries in total.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in split_words(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !SPECIAL_TOKENS.contains(&w.as_str()))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        words
            .into_iter()
            .take(max_size.saturating_sub(NUM_SPECIALS))
            .map(|(w, _)| w),
    );
    Vocab::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub raw: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m != 0).count()
    }
}

/// `BOS words.. EOS` padded with `PAD` to `max_len`; long texts keep their prefix
/// and still end in `EOS`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if vocab.is_empty() {
        return Err(Error::Vocab("vocabulary has no words".into()));
    }
    if max_len < 2 {
        return Err(Error::Vocab(
            "max_len must leave room for BOS and EOS".into(),
        ));
    }
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_words(text).into_iter().take(max_len - 2));
    ids.push(EOS);
    let active = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; active];
    attention_mask.resize(max_len, 0);
    Ok(TokenSequence {
        ids,
        attention_mask,
        raw: text.to_string(),
    })
}

/// In-vocabulary words of `ids`, skipping special tokens.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id >= NUM_SPECIALS)
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Decoder text window: `BOS question.. SEP [answer.. EOS] PAD..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub ids: Vec<usize>,
    /// Positions (within `ids`) of the response tokens including the closing `EOS`.
    pub response: Range<usize>,
    /// Number of non-padding positions.
    pub active: usize,
}

impl Dialog {
    /// Positions whose next-token label is a response token.
    pub fn supervised_positions(&self) -> Vec<bool> {
        (0..self.ids.len())
            .map(|t| self.response.contains(&(t + 1)))
            .collect()
    }

    pub fn response_len(&self) -> usize {
        self.response.len()
    }
}

/// Builds the decoder window. Without an answer (generation prompt) the window
/// ends right after `SEP` and is not padded.
pub fn build_dialog(
    question: &str,
    answer: Option<&str>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Dialog> {
    if vocab.is_empty() {
        return Err(Error::Vocab("vocabulary has no words".into()));
    }
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_words(question));
    ids.push(SEP);
    match answer {
        None => {
            ids.truncate(max_len);
            let active = ids.len();
            Ok(Dialog {
                response: active..active,
                active,
                ids,
            })
        }
        Some(answer) => {
            let words = vocab.encode_words(answer);
            if words.is_empty() {
                return Err(Error::EmptyResponse(format!(
                    "answer `{answer}` has no tokens"
                )));
            }
            let start = ids.len();
            ids.extend(words);
            ids.push(EOS);
            ids.truncate(max_len);
            let end = ids.len();
            if end <= start {
                return Err(Error::EmptyResponse(format!(
                    "question leaves no room for a response in {max_len} tokens"
                )));
            }
            ids.resize(max_len, PAD);
            Ok(Dialog {
                ids,
                response: start..end,
                active: end,
            })
        }
    }
}
