use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::init::{self, SeededRng};
use crate::corpus::ControlClass;
use crate::error::{Error, Result};
use crate::scalar::softmax_in_place;
use crate::transformer::model::Transformer;
use crate::vocab::{TokenId, END_OF_TEXT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Inverse-CDF draw; falls back to the last positive entry on rounding.
pub fn sample_index(probs: &[f64], rng: &mut SeededRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl Transformer {
    /// Continues `prompt` with text tokens only; stops at the end token
    /// (not returned), after `max_new_tokens`, or at the context limit.
    pub fn generate(&self, prompt: &[TokenId], class: ControlClass, decode: Decode, max_new_tokens: usize) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::Invalid("generation needs a non-empty prompt".into()));
        }
        let vocab = self.vocab();
        let max_len = self.config().max_len;
        if prompt.len() > max_len {
            return Err(Error::Invalid(format!("prompt of {} tokens exceeds the context of {max_len}", prompt.len())));
        }
        let allowed: Vec<bool> = (0..vocab.len()).map(|i| vocab.is_text_token(i)).collect();
        let eot = vocab.special(END_OF_TEXT)?;
        let mut rng = match decode {
            Decode::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Config(format!("sampling temperature must be positive, got {temperature}")));
                }
                Some(init::rng(seed))
            }
            Decode::Greedy => None,
        };
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new_tokens && seq.len() < max_len {
            let logits = self.logits(&seq, class)?;
            let row = logits.row_slice(logits.rows() - 1);
            let next = match (decode, rng.as_mut()) {
                (Decode::Sample { temperature, .. }, Some(r)) => {
                    let mut scaled: Vec<f64> =
                        row.iter().zip(&allowed).map(|(l, ok)| if *ok { l / temperature } else { f64::NEG_INFINITY }).collect();
                    softmax_in_place(&mut scaled);
                    sample_index(&scaled, r)
                }
                _ => row
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| allowed[*i])
                    .fold((0, f64::NEG_INFINITY), |best, (i, l)| if *l > best.1 { (i, *l) } else { best })
                    .0,
            };
            if next == eot {
                break;
            }
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }
}
