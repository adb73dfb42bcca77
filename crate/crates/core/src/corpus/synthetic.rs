//! Templated two-style review corpus.
//!
//! Both styles share templates, nouns and function words; only the polarity
//! words differ, and every negative word has a fixed positive counterpart.
//! Domain one is negative, domain two positive.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOUNS: [&str; 10] = [
    "food", "service", "staff", "place", "price", "pizza", "coffee", "room", "menu", "waiter",
];
const INTENSIFIERS: [&str; 3] = ["very", "really", "so"];

/// `(negative, positive)` polarity pairs for adjectives.
const ADJECTIVES: [(&str, &str); 8] = [
    ("bad", "good"),
    ("awful", "great"),
    ("rude", "friendly"),
    ("slow", "fast"),
    ("bland", "tasty"),
    ("terrible", "excellent"),
    ("dirty", "clean"),
    ("horrible", "amazing"),
];
const VERBS: [(&str, &str); 2] = [("hate", "love"), ("dislike", "like")];

const TEMPLATES: [&str; 8] = [
    "the {n} was {a}",
    "the {n} is {i} {a}",
    "the {n} was {a} and the {n} was {a}",
    "i {v} this {n}",
    "{a} {n} here",
    "this {n} is {a} and {a}",
    "the {n} here is {i} {a}",
    "i {v} the {n} , it was {a}",
];

#[derive(Debug, Clone, Default)]
pub struct SyntheticStyles;

impl SyntheticStyles {
    /// `n` sentences per style as `(negative, positive)`.
    pub fn generate(&self, n: usize, seed: u64) -> (Vec<String>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neg = (0..n).map(|_| self.sentence(&mut rng, false)).collect();
        let pos = (0..n).map(|_| self.sentence(&mut rng, true)).collect();
        (neg, pos)
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, positive: bool) -> String {
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let pick = |pair: &(&'static str, &'static str)| if positive { pair.1 } else { pair.0 };
        template
            .split(' ')
            .map(|slot| match slot {
                "{n}" => *NOUNS.choose(rng).unwrap(),
                "{i}" => *INTENSIFIERS.choose(rng).unwrap(),
                "{a}" => pick(ADJECTIVES.choose(rng).unwrap()),
                "{v}" => pick(VERBS.choose(rng).unwrap()),
                word => word,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Every polarity word, negative and positive.
    pub fn polarity_words(&self) -> Vec<&'static str> {
        ADJECTIVES
            .iter()
            .chain(&VERBS)
            .flat_map(|(a, b)| [*a, *b])
            .collect()
    }

    pub fn is_positive_word(&self, w: &str) -> bool {
        ADJECTIVES.iter().chain(&VERBS).any(|(_, p)| *p == w)
    }

    pub fn is_negative_word(&self, w: &str) -> bool {
        ADJECTIVES.iter().chain(&VERBS).any(|(n, _)| *n == w)
    }

    /// Swaps every polarity word for its counterpart.
    pub fn flip(&self, sentence: &str) -> String {
        sentence
            .split_whitespace()
            .map(|w| {
                ADJECTIVES
                    .iter()
                    .chain(&VERBS)
                    .find_map(|(n, p)| {
                        if *n == w {
                            Some(*p)
                        } else if *p == w {
                            Some(*n)
                        } else {
                            None
                        }
                    })
                    .unwrap_or(w)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    #[test]
    fn vocabulary_is_about_forty_words() {
        let (neg, pos) = SyntheticStyles.generate(2000, 0);
        let v = Vocabulary::from_sentences(neg.iter().chain(&pos), 1).unwrap();
        let words = v.len() - 4;
        assert!((35..=45).contains(&words), "{words}");
    }

    #[test]
    fn styles_differ_only_in_polarity_words() {
        let s = SyntheticStyles;
        let (neg, pos) = s.generate(200, 3);
        for w in neg.iter().flat_map(|l| l.split(' ')) {
            assert!(!s.is_positive_word(w), "{w}");
        }
        for w in pos.iter().flat_map(|l| l.split(' ')) {
            assert!(!s.is_negative_word(w), "{w}");
        }
        assert_eq!(s.flip("the food was bad"), "the food was good");
        assert_eq!(s.flip(&s.flip("i hate the menu , it was slow")), "i hate the menu , it was slow");
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(SyntheticStyles.generate(20, 5), SyntheticStyles.generate(20, 5));
        assert_ne!(SyntheticStyles.generate(20, 5), SyntheticStyles.generate(20, 6));
    }
}
