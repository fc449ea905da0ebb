//! Deterministic text features and their differentiable expectation under
//! per-position token distributions.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::Document;
use crate::error::{Error, Result};

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

/// Part-of-speech classes the lexicon distinguishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Pronoun,
    Other,
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "NOUN" => PosTag::Noun,
            "VERB" => PosTag::Verb,
            "ADJ" => PosTag::Adjective,
            "ADV" => PosTag::Adverb,
            "PRON" => PosTag::Pronoun,
            "OTHER" => PosTag::Other,
            _ => return Err(Error::Invalid(format!("unknown POS tag {s:?}"))),
        })
    }
}

/// Word list plus ordered suffix rules. Tagging depends only on the token string.
#[derive(Clone, Debug)]
pub struct PosLexicon {
    words: HashMap<String, PosTag>,
    suffixes: Vec<(String, PosTag)>,
    default: PosTag,
}

/// Suffix rules only fire when at least this many characters precede the suffix.
const MIN_STEM: usize = 3;

impl PosLexicon {
    /// The lexicon shipped with the crate (parsed once).
    pub fn bundled() -> &'static PosLexicon {
        static LEXICON: OnceLock<PosLexicon> = OnceLock::new();
        LEXICON.get_or_init(|| PosLexicon::parse(BUNDLED_LEXICON, "<bundled>").expect("bundled lexicon parses"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, &path.display().to_string())
    }

    /// Parses `[words]` (`word<TAB>tag`), `[suffixes]` (`-suffix<TAB>tag`) and an
    /// optional `[default]` section holding a single tag. `#` starts a comment line.
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Words,
            Suffixes,
            Default,
        }
        let err = |line: usize, message: String| Error::Parse { path: origin.to_string(), line, message };
        let mut section = Section::None;
        let mut lex = PosLexicon { words: HashMap::new(), suffixes: Vec::new(), default: PosTag::Noun };
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[words]" => section = Section::Words,
                "[suffixes]" => section = Section::Suffixes,
                "[default]" => section = Section::Default,
                _ => match section {
                    Section::None => return Err(err(lineno, "entry before any section header".into())),
                    Section::Default => lex.default = line.parse().map_err(|e: Error| err(lineno, e.to_string()))?,
                    Section::Words | Section::Suffixes => {
                        let (key, tag) = line
                            .split_once('\t')
                            .ok_or_else(|| err(lineno, "expected `entry<TAB>tag`".into()))?;
                        let tag: PosTag = tag.trim().parse().map_err(|e: Error| err(lineno, e.to_string()))?;
                        if section == Section::Words {
                            lex.words.insert(key.to_lowercase(), tag);
                        } else {
                            let suffix = key
                                .strip_prefix('-')
                                .filter(|s| !s.is_empty())
                                .ok_or_else(|| err(lineno, format!("suffix rule {key:?} must look like -xyz")))?;
                            lex.suffixes.push((suffix.to_lowercase(), tag));
                        }
                    }
                },
            }
        }
        Ok(lex)
    }

    /// Tags a lowercase token: exact word, then numerals, then the first matching
    /// suffix rule, then the default.
    pub fn tag(&self, token: &str) -> PosTag {
        if let Some(tag) = self.words.get(token) {
            return *tag;
        }
        if token.chars().all(|c| c.is_numeric()) {
            return PosTag::Other;
        }
        let chars = token.chars().count();
        self.suffixes
            .iter()
            .find(|(suffix, _)| token.ends_with(suffix.as_str()) && chars >= suffix.chars().count() + MIN_STEM)
            .map(|(_, tag)| *tag)
            .unwrap_or(self.default)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Lowercased alphanumeric runs, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Segments between terminal punctuation that contain at least one alphanumeric character.
pub fn count_sentences(text: &str) -> usize {
    text.split(is_terminal).filter(|s| s.chars().any(char::is_alphanumeric)).count()
}

/// Blocks separated by one or more blank lines that contain at least one alphanumeric character.
pub fn count_paragraphs(text: &str) -> usize {
    let mut count = 0;
    let mut in_paragraph = false;
    for line in text.lines() {
        if line.trim().is_empty() {
            in_paragraph = false;
        } else if line.chars().any(char::is_alphanumeric) && !in_paragraph {
            count += 1;
            in_paragraph = true;
        }
    }
    count
}

/// Named entries of a [`FeatureVector`], in CSV column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    WordCount,
    SentenceCount,
    ParagraphCount,
    NounCount,
    VerbCount,
    AdjectiveCount,
    AdverbCount,
    PronounCount,
    LinkCount,
    ImageCount,
    SlideshowCount,
}

impl Feature {
    pub const ALL: [Feature; 11] = [
        Feature::WordCount,
        Feature::SentenceCount,
        Feature::ParagraphCount,
        Feature::NounCount,
        Feature::VerbCount,
        Feature::AdjectiveCount,
        Feature::AdverbCount,
        Feature::PronounCount,
        Feature::LinkCount,
        Feature::ImageCount,
        Feature::SlideshowCount,
    ];

    /// Features computable from text alone; the rest come from document metadata.
    pub const TEXTUAL: [Feature; 8] = [
        Feature::WordCount,
        Feature::SentenceCount,
        Feature::ParagraphCount,
        Feature::NounCount,
        Feature::VerbCount,
        Feature::AdjectiveCount,
        Feature::AdverbCount,
        Feature::PronounCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::WordCount => "word_count",
            Feature::SentenceCount => "sentence_count",
            Feature::ParagraphCount => "paragraph_count",
            Feature::NounCount => "noun_count",
            Feature::VerbCount => "verb_count",
            Feature::AdjectiveCount => "adjective_count",
            Feature::AdverbCount => "adverb_count",
            Feature::PronounCount => "pronoun_count",
            Feature::LinkCount => "link_count",
            Feature::ImageCount => "image_count",
            Feature::SlideshowCount => "slideshow_count",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether one feature is an aggregate containing the other (word count sums the POS counts).
    pub fn linked(self, other: Feature) -> bool {
        let pos = Feature::is_pos_count;
        (self == Feature::WordCount && pos(other)) || (other == Feature::WordCount && pos(self))
    }

    fn is_pos_count(f: Feature) -> bool {
        matches!(
            f,
            Feature::NounCount | Feature::VerbCount | Feature::AdjectiveCount | Feature::AdverbCount | Feature::PronounCount
        )
    }

    fn of_tag(tag: PosTag) -> Option<Feature> {
        match tag {
            PosTag::Noun => Some(Feature::NounCount),
            PosTag::Verb => Some(Feature::VerbCount),
            PosTag::Adjective => Some(Feature::AdjectiveCount),
            PosTag::Adverb => Some(Feature::AdverbCount),
            PosTag::Pronoun => Some(Feature::PronounCount),
            PosTag::Other => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown feature {s:?}")))
    }
}

/// Feature counts. Hard extraction yields integers; soft extraction yields expectations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector([f64; 11]);

impl FeatureVector {
    pub fn get(&self, feature: Feature) -> f64 {
        self.0[feature.index()]
    }

    pub fn set(&mut self, feature: Feature, value: f64) {
        self.0[feature.index()] = value;
    }

    pub fn values(&self) -> &[f64; 11] {
        &self.0
    }

    pub fn select(&self, features: &[Feature]) -> Vec<f64> {
        features.iter().map(|f| self.get(*f)).collect()
    }
}

/// Counts for plain text; metadata features stay zero.
pub fn extract_text_features(text: &str, lexicon: &PosLexicon) -> FeatureVector {
    let mut fv = FeatureVector::default();
    let tokens = tokenize(text);
    fv.set(Feature::WordCount, tokens.len() as f64);
    fv.set(Feature::SentenceCount, count_sentences(text) as f64);
    fv.set(Feature::ParagraphCount, count_paragraphs(text) as f64);
    for token in &tokens {
        if let Some(f) = Feature::of_tag(lexicon.tag(token)) {
            fv.0[f.index()] += 1.0;
        }
    }
    fv
}

/// Text features plus link/image/slideshow counts read from `doc.metadata` (0 when absent).
pub fn extract_features(doc: &Document, lexicon: &PosLexicon) -> FeatureVector {
    let mut fv = extract_text_features(&doc.text, lexicon);
    for f in [Feature::LinkCount, Feature::ImageCount, Feature::SlideshowCount] {
        let count = doc.metadata.get(f.name()).and_then(serde_json::Value::as_f64).unwrap_or(0.0);
        fv.set(f, count.max(0.0));
    }
    fv
}

/// Writes `id,<feature columns...>` with columns in [`Feature::ALL`] order.
pub fn write_features_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a FeatureVector)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id"];
    header.extend(Feature::ALL.iter().map(|f| f.name()));
    w.write_record(&header)?;
    for (id, fv) in rows {
        let mut record = vec![id.to_string()];
        record.extend(fv.values().iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Role of a vocabulary entry in the soft feature surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    /// An alphanumeric word, counted and POS-tagged.
    Word,
    /// Terminal punctuation closing a sentence.
    SentenceEnd,
    /// Paragraph separator.
    ParagraphBreak,
    /// Control or structural symbol contributing to no feature.
    Special,
}

/// Vocabulary × textual-feature indicator matrix.
///
/// A well-formed decoded sequence (non-empty, ends in a sentence terminator, no
/// leading, trailing or doubled paragraph breaks) has hard paragraph count equal
/// to 1 + number of breaks; that offset is added by [`soft_expected_features`].
#[derive(Clone, Debug)]
pub struct FeatureClassMatrix {
    matrix: Tensor<f64>,
}

impl FeatureClassMatrix {
    pub fn from_vocabulary<'a>(entries: impl IntoIterator<Item = (&'a str, TokenKind)>, lexicon: &PosLexicon) -> Self {
        let cols = Feature::TEXTUAL.len();
        let mut data = Vec::new();
        for (token, kind) in entries {
            let mut row = vec![0.0; cols];
            match kind {
                TokenKind::Word => {
                    row[Feature::WordCount.index()] = 1.0;
                    if let Some(f) = Feature::of_tag(lexicon.tag(token)) {
                        row[f.index()] = 1.0;
                    }
                }
                TokenKind::SentenceEnd => row[Feature::SentenceCount.index()] = 1.0,
                TokenKind::ParagraphBreak => row[Feature::ParagraphCount.index()] = 1.0,
                TokenKind::Special => {}
            }
            data.extend(row);
        }
        let rows = data.len() / cols;
        FeatureClassMatrix { matrix: Tensor::matrix(rows, cols, data).expect("rows are full") }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }
}

/// Expected textual counts as a `[1, 8]` tape value, columns in [`Feature::TEXTUAL`] order.
#[derive(Clone, Copy, Debug)]
pub struct SoftFeatures {
    pub values: Var,
}

impl SoftFeatures {
    pub fn column(feature: Feature) -> Option<usize> {
        Feature::TEXTUAL.iter().position(|f| *f == feature)
    }

    /// Reads the current values into a [`FeatureVector`].
    pub fn to_vector(&self, g: &Graph<f64>) -> FeatureVector {
        let mut fv = FeatureVector::default();
        for (f, v) in Feature::TEXTUAL.iter().zip(g.value(self.values).data()) {
            fv.set(*f, *v);
        }
        fv
    }
}

const ROW_SUM_TOL: f64 = 1e-9;

/// Σ_positions Σ_vocab p(v)·indicator(v, feature) for `[positions, vocab]`
/// probability rows, plus the paragraph offset for non-empty sequences.
pub fn soft_expected_features(
    g: &mut Graph<f64>,
    token_distributions: Var,
    classes: &FeatureClassMatrix,
) -> Result<SoftFeatures> {
    let probs = g.value(token_distributions);
    let (n, v) = (probs.rows(), probs.cols());
    if v != classes.vocab_size() {
        return Err(Error::shape("soft_expected_features", &[probs.shape(), classes.matrix.shape()]));
    }
    for i in 0..n {
        let s: f64 = probs.row_slice(i).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid(format!("distribution row {i} sums to {s}, not 1")));
        }
    }
    let indicator = g.constant(classes.matrix.clone());
    let per_position = g.matmul(token_distributions, indicator)?;
    let mut totals = g.sum_rows(per_position)?;
    if n > 0 {
        let mut offset = vec![0.0; Feature::TEXTUAL.len()];
        offset[Feature::ParagraphCount.index()] = 1.0;
        let offset = g.constant(Tensor::row(&offset));
        totals = g.add(totals, offset)?;
    }
    Ok(SoftFeatures { values: totals })
}
