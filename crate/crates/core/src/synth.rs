//! Seeded synthetic datasets for experiments and tests.
//!
//! Classification corpora are built from per-class token pools with an
//! optional shared pool; the shared fraction controls how separable the
//! task is. Tagged corpora assign each word to exactly one tag, which
//! gives clean ground truth for neuron association analysis.

use alloc::vec::Vec;

use crate::models::TokenSequence;
use crate::rng::DetRng;

/// Layout and sampling parameters of a synthetic classification corpus.
///
/// Token ids: 0 = PAD, 1 = UNK, then `class_tokens` exclusive ids per
/// class, then `shared_tokens` ids drawn by every class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTextConfig {
    pub num_classes: usize,
    pub class_tokens: usize,
    pub shared_tokens: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Probability that a sampled token comes from the class pool rather
    /// than the shared pool.
    pub class_token_prob: f64,
}

impl SynthTextConfig {
    /// Fully separable toy task: every token is class-exclusive.
    pub fn separable() -> Self {
        Self {
            num_classes: 2,
            class_tokens: 8,
            shared_tokens: 0,
            len_min: 3,
            len_max: 6,
            class_token_prob: 1.0,
        }
    }

    /// Two classes with heavy vocabulary overlap: learnable well past
    /// chance but with a decision boundary near the data.
    pub fn overlapping() -> Self {
        Self {
            num_classes: 2,
            class_tokens: 150,
            shared_tokens: 120,
            len_min: 6,
            len_max: 12,
            class_token_prob: 0.55,
        }
    }

    /// Same pools as `self` but a shifted mixture and length profile, for
    /// out-of-distribution evaluation.
    pub fn shifted(&self) -> Self {
        Self {
            class_token_prob: (self.class_token_prob * 0.8).max(0.05),
            len_min: self.len_min + 2,
            len_max: self.len_max + 4,
            ..*self
        }
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.num_classes * self.class_tokens + self.shared_tokens
    }

    fn class_token(&self, class: usize, k: usize) -> usize {
        2 + class * self.class_tokens + k
    }

    fn shared_token(&self, k: usize) -> usize {
        2 + self.num_classes * self.class_tokens + k
    }
}

/// Generates `n` labeled sequences with balanced classes.
pub fn classification_dataset(
    cfg: &SynthTextConfig,
    n: usize,
    rng: &mut DetRng,
) -> Vec<TokenSequence> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % cfg.num_classes;
        let len = cfg.len_min + rng.below(cfg.len_max - cfg.len_min + 1);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let from_class = cfg.shared_tokens == 0 || rng.chance(cfg.class_token_prob);
            let token = if from_class {
                cfg.class_token(label, rng.below(cfg.class_tokens))
            } else {
                cfg.shared_token(rng.below(cfg.shared_tokens))
            };
            tokens.push(token);
        }
        out.push(TokenSequence::new(tokens, label));
    }
    out
}

/// Layout of a synthetic tagged corpus: each tag owns `words_per_tag`
/// exclusive words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthTagConfig {
    pub num_tags: usize,
    pub words_per_tag: usize,
    pub sent_min: usize,
    pub sent_max: usize,
}

impl SynthTagConfig {
    pub fn small() -> Self {
        Self {
            num_tags: 8,
            words_per_tag: 25,
            sent_min: 4,
            sent_max: 9,
        }
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.num_tags * self.words_per_tag
    }

    /// Token id of word `k` of tag `tag`.
    pub fn word_id(&self, tag: usize, k: usize) -> usize {
        2 + tag * self.words_per_tag + k
    }

    /// The owning tag of a token id, if it is a tag word.
    pub fn tag_of(&self, token: usize) -> Option<usize> {
        if token < 2 || token >= self.vocab_size() {
            return None;
        }
        Some((token - 2) / self.words_per_tag)
    }
}

/// Generates sentences of (token id, tag id) pairs.
pub fn tagged_corpus(
    cfg: &SynthTagConfig,
    sentences: usize,
    rng: &mut DetRng,
) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let len = cfg.sent_min + rng.below(cfg.sent_max - cfg.sent_min + 1);
        let mut sent = Vec::with_capacity(len);
        for _ in 0..len {
            let tag = rng.below(cfg.num_tags);
            let word = cfg.word_id(tag, rng.below(cfg.words_per_tag));
            sent.push((word, tag));
        }
        out.push(sent);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_is_balanced_and_in_vocab() {
        let cfg = SynthTextConfig::overlapping();
        let mut rng = DetRng::from_seed(1);
        let data = classification_dataset(&cfg, 200, &mut rng);
        assert_eq!(data.len(), 200);
        let ones = data.iter().filter(|s| s.label == 1).count();
        assert_eq!(ones, 100);
        for s in &data {
            assert!(!s.tokens.is_empty());
            for &t in &s.tokens {
                assert!(t >= 2 && t < cfg.vocab_size());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthTextConfig::separable();
        let a = classification_dataset(&cfg, 50, &mut DetRng::from_seed(2));
        let b = classification_dataset(&cfg, 50, &mut DetRng::from_seed(2));
        assert_eq!(a, b);
    }

    #[test]
    fn tagged_words_belong_to_their_tag_pool() {
        let cfg = SynthTagConfig::small();
        let mut rng = DetRng::from_seed(3);
        let corpus = tagged_corpus(&cfg, 40, &mut rng);
        assert_eq!(corpus.len(), 40);
        for sent in &corpus {
            for &(word, tag) in sent {
                assert_eq!(cfg.tag_of(word), Some(tag));
            }
        }
    }
}
