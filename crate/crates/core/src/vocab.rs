//! Closed word-level vocabulary for the generators and the prompt layout
//! `metric, topic, keyword-start, keywords…, text-start, [text…, end]`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::ControlClass;
use crate::error::{Error, Result};
use crate::features::{FeatureClassMatrix, PosLexicon, TokenKind};

pub const UNKNOWN: &str = "<unk>";
pub const END_OF_TEXT: &str = "<eot>";
pub const KEYWORDS_START: &str = "<kw>";
pub const TEXT_START: &str = "<sot>";
pub const PARAGRAPH: &str = "<par>";
const TERMINATORS: [&str; 3] = [".", "!", "?"];

pub fn metric_token(class: ControlClass) -> String {
    format!("<m:{}>", class.name())
}

pub fn topic_token(topic: usize) -> String {
    format!("<t:{topic}>")
}

pub type TokenId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    topics: usize,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    topics: usize,
    entries: Vec<(String, TokenKind)>,
}

impl From<Vocab> for VocabRecord {
    fn from(v: Vocab) -> Self {
        VocabRecord { topics: v.topics, entries: v.tokens.into_iter().zip(v.kinds).collect() }
    }
}

impl TryFrom<VocabRecord> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRecord) -> Result<Self> {
        Vocab::from_entries(r.entries, r.topics)
    }
}

impl Vocab {
    /// Specials first, then terminators, then the `max_size` budget filled by
    /// the most frequent words (ties broken alphabetically).
    pub fn build<S: AsRef<str>>(texts: &[S], topics: usize, max_size: usize) -> Result<Self> {
        let mut entries = Self::fixed_entries(topics);
        if max_size <= entries.len() {
            return Err(Error::Config(format!("vocabulary size {max_size} leaves no room for words")));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for piece in split_text(text.as_ref()) {
                if let Piece::Word(w) = piece {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_size - entries.len();
        entries.extend(ranked.into_iter().take(budget).map(|(w, _)| (w, TokenKind::Word)));
        Self::from_entries(entries, topics)
    }

    fn fixed_entries(topics: usize) -> Vec<(String, TokenKind)> {
        let mut entries: Vec<(String, TokenKind)> = [UNKNOWN, END_OF_TEXT, KEYWORDS_START, TEXT_START]
            .iter()
            .map(|t| (t.to_string(), TokenKind::Special))
            .collect();
        entries.push((PARAGRAPH.into(), TokenKind::ParagraphBreak));
        entries.extend(ControlClass::ALL.iter().map(|c| (metric_token(*c), TokenKind::Special)));
        entries.extend((0..topics).map(|t| (topic_token(t), TokenKind::Special)));
        entries.extend(TERMINATORS.iter().map(|t| (t.to_string(), TokenKind::SentenceEnd)));
        entries
    }

    fn from_entries(entries: Vec<(String, TokenKind)>, topics: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (t, _)) in entries.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let (tokens, kinds) = entries.into_iter().unzip();
        let vocab = Vocab { tokens, kinds, topics, index };
        for (t, _) in Self::fixed_entries(topics) {
            vocab.special(&t)?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        self.kinds[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a registered structural token; missing ones are an error.
    pub fn special(&self, token: &str) -> Result<TokenId> {
        self.id(token).ok_or_else(|| Error::Invalid(format!("special token {token} is not registered")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, TokenKind)> {
        self.tokens.iter().map(String::as_str).zip(self.kinds.iter().copied())
    }

    /// Ids a decoder may emit inside article text: words, punctuation,
    /// paragraph breaks and the end token.
    pub fn is_text_token(&self, id: TokenId) -> bool {
        match self.kinds[id] {
            TokenKind::Word | TokenKind::SentenceEnd | TokenKind::ParagraphBreak => true,
            TokenKind::Special => self.tokens[id] == END_OF_TEXT,
        }
    }

    pub fn feature_classes(&self, lexicon: &PosLexicon) -> FeatureClassMatrix {
        FeatureClassMatrix::from_vocabulary(self.entries(), lexicon)
    }

    /// Words, terminators and paragraph breaks; unknown words map to `<unk>`.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        let unk = self.index[UNKNOWN];
        split_text(text)
            .into_iter()
            .map(|p| match p {
                Piece::Word(w) => self.id(&w).filter(|i| self.kinds[*i] == TokenKind::Word).unwrap_or(unk),
                Piece::Terminator(c) => self.index[c.to_string().as_str()],
                Piece::Paragraph => self.index[PARAGRAPH],
            })
            .collect()
    }

    /// Inverse of [`Vocab::encode_text`] up to spacing and case; specials are dropped.
    pub fn decode_text(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for id in ids {
            match self.kinds[*id] {
                TokenKind::Word => {
                    if !out.is_empty() && !out.ends_with('\n') {
                        out.push(' ');
                    }
                    out.push_str(&self.tokens[*id]);
                }
                TokenKind::SentenceEnd => out.push_str(&self.tokens[*id]),
                TokenKind::ParagraphBreak => out.push_str("\n\n"),
                TokenKind::Special => {}
            }
        }
        out
    }

    pub fn format_prompt(&self, metric: ControlClass, topic: usize, keywords: &[String]) -> Result<Vec<TokenId>> {
        let mut ids = vec![self.special(&metric_token(metric))?, self.special(&topic_token(topic))?, self.special(KEYWORDS_START)?];
        let unk = self.special(UNKNOWN)?;
        ids.extend(keywords.iter().map(|k| self.id(&k.to_lowercase()).filter(|i| self.kinds[*i] == TokenKind::Word).unwrap_or(unk)));
        ids.push(self.special(TEXT_START)?);
        Ok(ids)
    }

    /// Training layout: the prompt, the article and the end token.
    pub fn format_example(&self, metric: ControlClass, topic: usize, keywords: &[String], text: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.format_prompt(metric, topic, keywords)?;
        ids.extend(self.encode_text(text));
        ids.push(self.special(END_OF_TEXT)?);
        Ok(ids)
    }

    /// Recovers `(metric, topic, keywords)` from a formatted prompt prefix.
    pub fn parse_prompt(&self, ids: &[TokenId]) -> Result<(ControlClass, usize, Vec<String>)> {
        let bad = || Error::Invalid("token sequence is not a formatted prompt".into());
        let metric = ControlClass::ALL
            .into_iter()
            .find(|c| self.id(&metric_token(*c)) == ids.first().copied())
            .ok_or_else(bad)?;
        let topic = (0..self.topics).find(|t| self.id(&topic_token(*t)) == ids.get(1).copied()).ok_or_else(bad)?;
        if ids.get(2).copied() != self.id(KEYWORDS_START) {
            return Err(bad());
        }
        let sot = self.special(TEXT_START)?;
        let end = ids.iter().position(|i| *i == sot).ok_or_else(bad)?;
        let keywords = ids[3..end].iter().map(|i| self.tokens[*i].clone()).collect();
        Ok((metric, topic, keywords))
    }
}

enum Piece {
    Word(String),
    Terminator(char),
    Paragraph,
}

/// Lower-cased alphanumeric runs, terminal punctuation, and one paragraph
/// marker between non-empty blank-line-separated blocks.
fn split_text(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let blocks = text.split("\n\n").filter(|b| b.chars().any(|c| c.is_alphanumeric() || matches!(c, '.' | '!' | '?')));
    for (n, block) in blocks.enumerate() {
        if n > 0 {
            pieces.push(Piece::Paragraph);
        }
        let mut word = String::new();
        for c in block.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                pieces.push(Piece::Word(std::mem::take(&mut word)));
            }
            if matches!(c, '.' | '!' | '?') {
                pieces.push(Piece::Terminator(c));
            }
        }
        if !word.is_empty() {
            pieces.push(Piece::Word(word));
        }
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["The cat sat. The dog ran!\n\nA cat slept?"], 5, 64).unwrap()
    }

    #[test]
    fn prompt_layout_and_round_trip() {
        let v = vocab();
        let ids = v.format_prompt(ControlClass::High, 3, &["cat".into()]).unwrap();
        let tokens: Vec<&str> = ids.iter().map(|i| v.token(*i)).collect();
        assert_eq!(tokens, ["<m:high>", "<t:3>", "<kw>", "cat", "<sot>"]);
        assert_eq!(v.parse_prompt(&ids).unwrap(), (ControlClass::High, 3, vec!["cat".to_string()]));

        let empty = v.format_prompt(ControlClass::Low, 0, &[]).unwrap();
        assert_eq!(v.token(empty[2]), KEYWORDS_START);
        assert_eq!(v.token(empty[3]), TEXT_START);
        assert!(v.format_prompt(ControlClass::Low, 5, &[]).is_err(), "topic without a token");
    }

    #[test]
    fn text_round_trips_through_ids() {
        let v = vocab();
        let text = "the cat sat. the dog ran!\n\na cat slept?";
        assert_eq!(v.decode_text(&v.encode_text(text)), text);
        let unk = v.encode_text("zebra.");
        assert_eq!(v.token(unk[0]), UNKNOWN);
    }

    #[test]
    fn frequency_order_and_budget() {
        // 9 structural entries for one topic and 3 terminators leave room for two words
        let v = Vocab::build(&["b b a c c c"], 1, 14).unwrap();
        assert_eq!(v.len(), 14);
        assert_eq!(v.id("c"), Some(12));
        assert_eq!(v.id("b"), Some(13));
        assert_eq!(v.id("a"), None);
    }

    #[test]
    fn serde_round_trip() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
