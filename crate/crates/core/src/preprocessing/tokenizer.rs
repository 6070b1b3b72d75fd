use std::collections::HashMap;
use std::path::Path;

use crate::error::{McrError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Reserved tokens in their canonical id order.
pub const RESERVED_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const CONTINUATION_PREFIX: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReservedIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

/// WordPiece vocabulary: one token per id, intra-word pieces prefixed with `##`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    reserved: ReservedIds,
}

impl Vocabulary {
    /// Builds a vocabulary where the id of each token is its position.
    ///
    /// The five reserved tokens must occupy ids 0..5 in canonical order; duplicates are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(McrError::Empty("vocabulary"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(McrError::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let id = |t: &str| -> Result<u32> {
            let want = RESERVED_TOKENS.iter().position(|r| *r == t).expect("reserved") as u32;
            match index.get(t) {
                Some(&i) if i == want => Ok(i),
                Some(&i) => Err(McrError::Data(format!("reserved token {t} has id {i}, expected {want}"))),
                None => Err(McrError::Data(format!("vocabulary lacks reserved token {t}"))),
            }
        };
        let reserved = ReservedIds {
            pad: id(PAD)?,
            unk: id(UNK)?,
            cls: id(CLS)?,
            sep: id(SEP)?,
            mask: id(MASK)?,
        };
        Ok(Self {
            tokens,
            index,
            reserved,
        })
    }

    /// Reserved tokens followed by `words` (deduplicated, first occurrence wins).
    pub fn with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    /// Reads the one-token-per-line format; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| McrError::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| McrError::io(path, e))
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

    pub fn reserved(&self) -> ReservedIds {
        self.reserved
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Framed subword ids: `[CLS] body... [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Byte range of each token in the source text; `(0, 0)` for [CLS]/[SEP].
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSeq {
    /// Number of tokens between [CLS] and [SEP].
    pub fn body_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }

    pub fn body(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }
}

/// Lowercases and splits on whitespace, emitting each punctuation character as its own word.
fn basic_words(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                out.push((s, &text[s..i]));
            }
            if ch.is_ascii_punctuation() {
                out.push((i, &text[i..i + ch.len_utf8()]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Lowercased words with punctuation split off, as seen by the tokenizer.
pub fn split_words(text: &str) -> Vec<String> {
    basic_words(text).into_iter().map(|(_, w)| w.to_lowercase()).collect()
}

/// Greedy longest-match-first segmentation of one lowercase word. `None` if
/// some suffix cannot be matched.
fn wordpiece(word: &str, vocab: &Vocabulary) -> Option<Vec<(u32, usize, usize)>> {
    if word.chars().count() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < word.len() {
        let mut end = word.len();
        let mut found = None;
        while end > start {
            if word.is_char_boundary(end) {
                let piece = &word[start..end];
                let id = if start == 0 {
                    vocab.id(piece)
                } else {
                    vocab.id(&format!("{CONTINUATION_PREFIX}{piece}"))
                };
                if let Some(id) = id {
                    found = Some(id);
                    break;
                }
            }
            end -= 1;
        }
        pieces.push((found?, start, end));
        start = end;
    }
    Some(pieces)
}

/// Tokenizes `text` into a framed [`TokenSeq`] of at most `max_len` body tokens.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSeq> {
    if vocab.is_empty() {
        return Err(McrError::Empty("vocabulary"));
    }
    let r = vocab.reserved();
    let mut ids = vec![r.cls];
    let mut offsets = vec![(0, 0)];
    'words: for (pos, word) in basic_words(text) {
        let lower = word.to_lowercase();
        let pieces = if lower.len() == word.len() {
            wordpiece(&lower, vocab)
        } else {
            None
        };
        match pieces {
            Some(pieces) => {
                for (id, s, e) in pieces {
                    if ids.len() - 1 == max_len {
                        break 'words;
                    }
                    ids.push(id);
                    offsets.push((pos + s, pos + e));
                }
            }
            None => {
                if ids.len() - 1 == max_len {
                    break;
                }
                ids.push(r.unk);
                offsets.push((pos, pos + word.len()));
            }
        }
    }
    ids.push(r.sep);
    offsets.push((0, 0));
    Ok(TokenSeq { ids, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_words([
            "no", "effusion", ".", "cardio", "##mega", "##ly", "heart", "size", "normal", "##s",
        ])
    }

    #[test]
    fn reserved_ids_are_canonical() {
        let r = vocab().reserved();
        assert_eq!((r.pad, r.unk, r.cls, r.sep, r.mask), (0, 1, 2, 3, 4));
    }

    #[test]
    fn empty_text_is_just_the_frame() {
        let t = wordpiece_tokenize("", &vocab(), 32).unwrap();
        assert_eq!(t.ids, vec![2, 3]);
        assert_eq!(t.body_len(), 0);
    }

    #[test]
    fn whole_word_is_one_id() {
        let v = vocab();
        let t = wordpiece_tokenize("Effusion", &v, 32).unwrap();
        assert_eq!(t.body(), &[v.id("effusion").unwrap()]);
    }

    #[test]
    fn greedy_longest_match_splits_into_pieces() {
        let v = vocab();
        let t = wordpiece_tokenize("cardiomegaly", &v, 32).unwrap();
        let expected: Vec<u32> = ["cardio", "##mega", "##ly"]
            .iter()
            .map(|p| v.id(p).unwrap())
            .collect();
        assert_eq!(t.body(), expected.as_slice());
        assert_eq!(&t.offsets[1..4], &[(0, 6), (6, 10), (10, 12)]);
    }

    #[test]
    fn unmatched_word_becomes_one_unk() {
        let v = vocab();
        let t = wordpiece_tokenize("no pneumothorax.", &v, 32).unwrap();
        assert_eq!(t.body(), &[v.id("no").unwrap(), 1, v.id(".").unwrap()]);
    }

    #[test]
    fn truncation_keeps_sep() {
        let t = wordpiece_tokenize("no no no no no", &vocab(), 3).unwrap();
        assert_eq!(t.ids.len(), 5);
        assert_eq!(*t.ids.last().unwrap(), 3);
        let t = wordpiece_tokenize("cardiomegaly", &vocab(), 2).unwrap();
        assert_eq!(t.body_len(), 2);
    }

    #[test]
    fn load_rejects_missing_or_late_reserved() {
        assert!(Vocabulary::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]"]).is_err());
        assert!(Vocabulary::from_tokens(["a", "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]).is_err());
        assert!(Vocabulary::from_tokens(Vec::<String>::new()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn prefix_stable(a in proptest::collection::vec(0usize..6, 0..6), b in proptest::collection::vec(0usize..6, 0..6)) {
            let words = ["no", "effusion", "heart", "sizes", "cardiomegaly", "."];
            let v = vocab();
            let sa: Vec<&str> = a.iter().map(|&i| words[i]).collect();
            let sb: Vec<&str> = b.iter().map(|&i| words[i]).collect();
            let text_a = sa.join(" ");
            let text_ab = format!("{} {}", text_a, sb.join(" "));
            let ta = wordpiece_tokenize(&text_a, &v, 64).unwrap();
            let tab = wordpiece_tokenize(&text_ab, &v, 64).unwrap();
            prop_assert!(tab.body().starts_with(ta.body()));
            prop_assert_eq!(ta, wordpiece_tokenize(&text_a, &v, 64).unwrap());
        }
    }
}
