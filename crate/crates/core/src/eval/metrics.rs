use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::classifier::{BagClassifier, FeatureClassifier};
use crate::corpus::ControlClass;
use crate::cvae::{Cvae, CvaePair, ElboNoise, ElboWeights, CvaeVariant};
use crate::error::{Error, Result};
use crate::features::{extract_text_features, tokenize, PosLexicon};
use crate::transformer::{Example, Transformer};

/// Summed negative log-likelihood over a number of scored tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TokenNll {
    pub total: f64,
    pub tokens: usize,
}

/// A model that assigns teacher-forced token likelihoods to items.
pub trait SequenceScorer {
    type Item;
    fn score(&self, item: &Self::Item) -> Result<TokenNll>;
}

/// `exp` of the token-weighted mean NLL; independent of how `items` is batched.
pub fn perplexity<M: SequenceScorer>(model: &M, items: &[M::Item]) -> Result<f64> {
    let mut sum = TokenNll::default();
    for item in items {
        let s = model.score(item)?;
        sum.total += s.total;
        sum.tokens += s.tokens;
    }
    if sum.tokens == 0 {
        return Err(Error::Invalid("perplexity of an empty corpus".into()));
    }
    Ok((sum.total / sum.tokens as f64).exp())
}

/// Every token equally likely over a vocabulary of `size`.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub size: usize,
}

impl SequenceScorer for UniformScorer {
    type Item = Vec<usize>;
    fn score(&self, item: &Vec<usize>) -> Result<TokenNll> {
        if self.size == 0 {
            return Err(Error::Invalid("uniform model over an empty vocabulary".into()));
        }
        Ok(TokenNll { total: item.len() as f64 * (self.size as f64).ln(), tokens: item.len() })
    }
}

/// Text tokens of the example, conditioned on its own control class.
impl SequenceScorer for Transformer {
    type Item = Example;
    fn score(&self, ex: &Example) -> Result<TokenNll> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, &ex.ids, ex.class)?;
        let rows = ex.text_rows();
        let text = g.gather(logits, &rows)?;
        let mean = g.cross_entropy(text, &ex.ids[ex.text_start + 1..])?;
        Ok(TokenNll { total: g.value(mean).item()? * rows.len() as f64, tokens: rows.len() })
    }
}

/// Reconstruction NLL of the target sentence (plus end marker) at the
/// recognition mean.
impl SequenceScorer for Cvae {
    type Item = CvaePair;
    fn score(&self, pair: &CvaePair) -> Result<TokenNll> {
        let noise = ElboNoise { epsilon: vec![0.0; self.config().latent_dim], dropped: vec![false; pair.target.len()] };
        let mut g = Graph::new();
        let weights = ElboWeights::for_variant(CvaeVariant::NonCausal, 1.0);
        let terms = self.elbo(&mut g, self.params(), pair, &weights, &noise)?;
        Ok(TokenNll { total: g.value(terms.reconstruction).item()?, tokens: pair.target.len() + 1 })
    }
}

/// Maps a text to a predicted control class.
pub trait ControlJudge {
    fn judge(&self, text: &str) -> Result<ControlClass>;
}

impl<F: Fn(&str) -> ControlClass> ControlJudge for F {
    fn judge(&self, text: &str) -> Result<ControlClass> {
        Ok(self(text))
    }
}

fn class_of(index: usize, classes: &[String]) -> Result<ControlClass> {
    classes
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("class index {index} out of range")))?
        .parse()
}

impl ControlJudge for BagClassifier {
    fn judge(&self, text: &str) -> Result<ControlClass> {
        class_of(self.argmax(text), self.classes())
    }
}

/// A feature classifier applied to features extracted from the text.
pub struct FeatureJudge<'a> {
    pub classifier: &'a FeatureClassifier,
    pub lexicon: &'a PosLexicon,
}

impl ControlJudge for FeatureJudge<'_> {
    fn judge(&self, text: &str) -> Result<ControlClass> {
        let probs = self.classifier.predict(&extract_text_features(text, self.lexicon))?;
        let best = probs.iter().enumerate().fold(0, |b, (i, p)| if *p > probs[b] { i } else { b });
        class_of(best, self.classifier.classes())
    }
}

/// Counts indexed `[target][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[usize; 3]; 3]);

impl ConfusionMatrix {
    pub fn record(&mut self, target: ControlClass, predicted: ControlClass) {
        self.0[target.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn row_total(&self, target: ControlClass) -> usize {
        self.0[target.index()].iter().sum()
    }

    /// `trace / total`; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    /// Diagonal share of each target row; `None` for rows without samples.
    pub fn class_accuracy(&self) -> [Option<f64>; 3] {
        ControlClass::ALL.map(|c| {
            let n = self.row_total(c);
            (n > 0).then(|| self.0[c.index()][c.index()] as f64 / n as f64)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlScore {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Fraction of generations whose judged class equals their target.
pub fn control_accuracy<J: ControlJudge + ?Sized>(
    generations: &[(String, ControlClass)],
    judge: &J,
) -> Result<ControlScore> {
    let mut confusion = ConfusionMatrix::default();
    for (text, target) in generations {
        confusion.record(*target, judge.judge(text)?);
    }
    let accuracy = confusion.accuracy().ok_or_else(|| Error::Invalid("no generations to judge".into()))?;
    Ok(ControlScore { accuracy, confusion })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "1")]
    Unigram,
    #[serde(rename = "2")]
    Bigram,
    #[serde(rename = "l")]
    LongestCommonSubsequence,
}

impl FromStr for RougeVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" => Ok(RougeVariant::Unigram),
            "2" => Ok(RougeVariant::Bigram),
            "l" => Ok(RougeVariant::LongestCommonSubsequence),
            other => Err(Error::Config(format!("unknown ROUGE variant {other:?} (expected 1, 2 or L)"))),
        }
    }
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RougeVariant::Unigram => "rouge-1",
            RougeVariant::Bigram => "rouge-2",
            RougeVariant::LongestCommonSubsequence => "rouge-l",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, hyp_len: usize, ref_len: usize) -> Self {
        let ratio = |n: usize| if n == 0 { 0.0 } else { overlap as f64 / n as f64 };
        let (precision, recall) = (ratio(hyp_len), ratio(ref_len));
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        RougeScore { precision, recall, f1 }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn ngram_score(hyp: &[String], reference: &[String], n: usize) -> RougeScore {
    let (h, r) = (ngram_counts(hyp, n), ngram_counts(reference, n));
    let overlap = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_overlap(overlap, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diagonal = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diagonal + 1 } else { above.max(row[j]) };
            diagonal = above;
        }
    }
    row[b.len()]
}

/// Best score over `references` by F1, on lowercased word tokens.
pub fn rouge(hypothesis: &str, references: &[&str], variant: RougeVariant) -> Result<RougeScore> {
    if references.is_empty() {
        return Err(Error::Invalid("ROUGE needs at least one reference".into()));
    }
    let hyp = tokenize(hypothesis);
    let score_one = |reference: &&str| {
        let r = tokenize(reference);
        match variant {
            RougeVariant::Unigram => ngram_score(&hyp, &r, 1),
            RougeVariant::Bigram => ngram_score(&hyp, &r, 2),
            RougeVariant::LongestCommonSubsequence => RougeScore::from_overlap(lcs_len(&hyp, &r), hyp.len(), r.len()),
        }
    };
    Ok(references.iter().map(score_one).fold(RougeScore::default(), |best, s| if s.f1 > best.f1 { s } else { best }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcs_of_known_strings() {
        let t = |s: &str| tokenize(s);
        assert_eq!(lcs_len(&t("a b c d"), &t("b d c")), 2);
        assert_eq!(lcs_len(&t(""), &t("a")), 0);
    }

    #[test]
    fn confusion_rows_and_trace() {
        let mut m = ConfusionMatrix::default();
        m.record(ControlClass::Low, ControlClass::Low);
        m.record(ControlClass::Low, ControlClass::High);
        assert_eq!(m.row_total(ControlClass::Low), 2);
        assert_eq!(m.accuracy(), Some(0.5));
        assert_eq!(m.class_accuracy()[1], None);
    }
}
