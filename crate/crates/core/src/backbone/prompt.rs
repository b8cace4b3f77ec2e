//! Deterministic toy prompt encoder over a closed caption vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Colour words with their reference sRGB values in `[0, 1]`.
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("orange", [1.0, 0.55, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
];

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "ring", "diamond"];

const ARTICLES: [&str; 2] = ["a", "an"];

/// Every word the toy encoder accepts, in table order.
pub fn vocabulary() -> Vec<&'static str> {
    ARTICLES
        .iter()
        .copied()
        .chain(COLORS.iter().map(|(c, _)| *c))
        .chain(SHAPES.iter().copied())
        .collect()
}

pub fn color_rgb(word: &str) -> Option<[f32; 3]> {
    COLORS.iter().find(|(c, _)| *c == word).map(|(_, rgb)| *rgb)
}

/// Caption in the toy template, e.g. `"a red circle"` or `"an orange ring"`.
pub fn caption(color: &str, shape: &str) -> String {
    let article = if color.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
    format!("{article} {color} {shape}")
}

/// First colour word in `prompt`, if any.
pub fn prompt_color(prompt: &str) -> Option<&'static str> {
    prompt
        .split_whitespace()
        .find_map(|w| COLORS.iter().find(|(c, _)| w.eq_ignore_ascii_case(c)).map(|(c, _)| *c))
}

/// First shape word in `prompt`, if any.
pub fn prompt_shape(prompt: &str) -> Option<&'static str> {
    prompt
        .split_whitespace()
        .find_map(|w| SHAPES.iter().find(|s| w.eq_ignore_ascii_case(s)).copied())
}

/// Token embedding of a prompt, `[tokens, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub is_empty: bool,
}

impl PromptEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Seeded random embedding table; row 0 is the reserved empty-prompt row.
#[derive(Debug, Clone)]
pub struct ToyPromptEncoder {
    dim: usize,
    words: Vec<&'static str>,
    table: Tensor,
}

impl ToyPromptEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let words = vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::randn(vec![words.len() + 1, dim], &mut rng);
        Self { dim, words, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, index: usize) -> &[f32] {
        &self.table.data()[index * self.dim..(index + 1) * self.dim]
    }

    pub fn empty(&self) -> PromptEmbedding {
        PromptEmbedding {
            tokens: Tensor::new(vec![1, self.dim], self.row(0).to_vec()).expect("row shape"),
            is_empty: true,
        }
    }

    pub fn encode(&self, text: &str) -> Result<PromptEmbedding> {
        let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            return Ok(self.empty());
        }
        let mut data = Vec::with_capacity(words.len() * self.dim);
        for w in &words {
            let idx = self
                .words
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| Error::UnknownWord(w.clone()))?;
            data.extend_from_slice(self.row(idx + 1));
        }
        Ok(PromptEmbedding {
            tokens: Tensor::new(vec![words.len(), self.dim], data)?,
            is_empty: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_reserved() {
        let enc = ToyPromptEncoder::new(16, 7);
        let e = enc.encode("").unwrap();
        assert!(e.is_empty);
        assert_eq!(e, enc.encode("   ").unwrap());
        assert!(!enc.encode("a red circle").unwrap().is_empty);
    }

    #[test]
    fn deterministic() {
        let a = ToyPromptEncoder::new(16, 7).encode("a blue ring").unwrap();
        let b = ToyPromptEncoder::new(16, 7).encode("a blue ring").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_captions_have_distinct_embeddings() {
        let enc = ToyPromptEncoder::new(16, 7);
        let mut prompts = vec![String::new()];
        for (c, _) in COLORS {
            for s in SHAPES {
                prompts.push(caption(c, s));
            }
        }
        let embs: Vec<_> = prompts.iter().map(|p| enc.encode(p).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let (a, b) = (&embs[i].tokens, &embs[j].tokens);
                let differs = a.shape() != b.shape() || a.max_abs_diff(b) > 1e-3;
                assert!(differs, "{:?} vs {:?}", prompts[i], prompts[j]);
            }
        }
    }

    #[test]
    fn unknown_words_are_rejected() {
        let enc = ToyPromptEncoder::new(8, 1);
        assert!(matches!(enc.encode("a painting of a jeep"), Err(Error::UnknownWord(_))));
    }

    #[test]
    fn caption_helpers() {
        assert_eq!(caption("orange", "ring"), "an orange ring");
        assert_eq!(prompt_color("a Blue square"), Some("blue"));
        assert_eq!(prompt_shape("a blue square"), Some("square"));
        assert_eq!(prompt_color(""), None);
    }
}
