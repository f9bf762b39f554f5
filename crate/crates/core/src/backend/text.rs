//! Deterministic toy text encoder and weighted-prompt parsing.
//!
//! Prompts use the common emphasis syntax: `(text:1.6)` sets an explicit
//! weight, `(text)` multiplies by 1.1 and `[text]` divides by 1.1.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Conditioning;
use crate::error::{Error, Result};

const EMPHASIS: f64 = 1.1;

/// A run of prompt text sharing one emphasis weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSpan {
    pub text: String,
    pub weight: f64,
}

/// Splits a prompt into `(text, weight)` spans.
pub fn parse_weighted_prompt(prompt: &str) -> Result<Vec<WeightedSpan>> {
    let mut spans = Vec::new();
    let mut stack: Vec<(char, usize)> = Vec::new();
    let mut buf = String::new();
    let mut weight = 1.0;
    let mut weights: Vec<f64> = Vec::new();

    let flush = |buf: &mut String, weight: f64, spans: &mut Vec<WeightedSpan>| {
        let text = buf.trim().trim_matches(',').trim().to_string();
        if !text.is_empty() {
            spans.push(WeightedSpan { text, weight });
        }
        buf.clear();
    };

    for ch in prompt.chars() {
        match ch {
            '(' | '[' => {
                flush(&mut buf, weight, &mut spans);
                weights.push(weight);
                stack.push((ch, spans.len()));
                weight *= if ch == '(' { EMPHASIS } else { 1.0 / EMPHASIS };
            }
            ')' | ']' => {
                let (open, _) = stack
                    .pop()
                    .ok_or_else(|| Error::Config(format!("unbalanced '{ch}' in prompt '{prompt}'")))?;
                if (open == '(') != (ch == ')') {
                    return Err(Error::Config(format!("mismatched brackets in prompt '{prompt}'")));
                }
                let outer = weights.pop().expect("stack and weights stay in sync");
                // `(text:1.6)` overrides the implicit emphasis for this group.
                if let Some((text, w)) = split_explicit_weight(&buf) {
                    buf = text;
                    weight = outer * w;
                }
                flush(&mut buf, weight, &mut spans);
                weight = outer;
            }
            _ => buf.push(ch),
        }
    }
    if !stack.is_empty() {
        return Err(Error::Config(format!("unbalanced brackets in prompt '{prompt}'")));
    }
    flush(&mut buf, weight, &mut spans);
    Ok(spans)
}

/// Splits a trailing `:<number>` off `s`.
pub(crate) fn split_explicit_weight(s: &str) -> Option<(String, f64)> {
    let (text, w) = s.rsplit_once(':')?;
    let w: f64 = w.trim().parse().ok()?;
    w.is_finite().then(|| (text.to_string(), w))
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '_' && c != '-')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn token_vector(token: &str, d_c: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let scale = 1.0 / (d_c as f64).sqrt();
    (0..d_c)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

/// Encodes `prompt` into `n_tokens` context vectors of width `d_c`.
///
/// Slot 0 holds a start token, following slots hold prompt tokens (scaled by
/// their emphasis weight) and the remainder is padded with an end token.
/// Tokens beyond the context length are dropped.
pub fn toy_text_encode(prompt: &str, n_tokens: usize, d_c: usize) -> Result<Conditioning> {
    if prompt.trim().is_empty() {
        return Err(Error::Parameter("prompt must not be empty".into()));
    }
    if n_tokens == 0 || d_c == 0 {
        return Err(Error::Parameter("context must have at least one token and one dim".into()));
    }
    let mut tokens: Vec<(String, f64)> = vec![("<start>".into(), 1.0)];
    for span in parse_weighted_prompt(prompt)? {
        tokens.extend(tokenize(&span.text).into_iter().map(|t| (t, span.weight)));
    }
    tokens.truncate(n_tokens);
    while tokens.len() < n_tokens {
        tokens.push(("<end>".into(), 1.0));
    }
    let mut context = Array2::zeros((n_tokens, d_c));
    for (i, (tok, w)) in tokens.iter().enumerate() {
        for (j, v) in token_vector(tok, d_c).into_iter().enumerate() {
            context[[i, j]] = w * v;
        }
    }
    Conditioning::new(context, prompt)
}

/// Context used for the unconditional branch of classifier-free guidance.
pub fn toy_null_context(n_tokens: usize, d_c: usize) -> Array2<f64> {
    let mut context = Array2::zeros((n_tokens, d_c));
    for (i, tok) in std::iter::once("<start>")
        .chain(std::iter::repeat("<end>"))
        .take(n_tokens)
        .enumerate()
    {
        for (j, v) in token_vector(tok, d_c).into_iter().enumerate() {
            context[[i, j]] = v;
        }
    }
    context
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_deterministic_and_prompt_dependent() {
        let a1 = toy_text_encode("a", 4, 8).unwrap();
        let a2 = toy_text_encode("a", 4, 8).unwrap();
        let b = toy_text_encode("b", 4, 8).unwrap();
        assert_eq!(a1.context.shape(), &[4, 8]);
        assert_eq!(
            a1.context.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a2.context.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a1.context, b.context);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(toy_text_encode("  ", 4, 8).is_err());
    }

    #[test]
    fn parses_emphasis_groups() {
        let spans = parse_weighted_prompt("(Glossy lips:1.6), Gleaming lips, (fair skin:1.4)").unwrap();
        assert_eq!(spans.len(), 3);
        assert_eq!(spans[0], WeightedSpan { text: "Glossy lips".into(), weight: 1.6 });
        assert_eq!(spans[1], WeightedSpan { text: "Gleaming lips".into(), weight: 1.0 });
        assert!((spans[2].weight - 1.4).abs() < 1e-12);

        let spans = parse_weighted_prompt("(Korean idol), [blur]").unwrap();
        assert!((spans[0].weight - 1.1).abs() < 1e-12);
        assert!((spans[1].weight - 1.0 / 1.1).abs() < 1e-12);

        let spans = parse_weighted_prompt("[:(detailed face:1.2):0.3]").unwrap();
        assert!(spans.iter().any(|s| s.text == "detailed face" && (s.weight - 1.2 / 1.1).abs() < 1e-12));
        assert!(parse_weighted_prompt("(unbalanced").is_err());
        assert!(parse_weighted_prompt("(mixed]").is_err());
    }

    #[test]
    fn emphasis_scales_token_vectors() {
        let plain = toy_text_encode("lips", 3, 6).unwrap();
        let strong = toy_text_encode("(lips:2)", 3, 6).unwrap();
        for j in 0..6 {
            assert!((strong.context[[1, j]] - 2.0 * plain.context[[1, j]]).abs() < 1e-15);
        }
    }
}
