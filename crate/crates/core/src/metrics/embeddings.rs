//! Word vectors for the content score: a skip-gram trainer with negative
//! sampling and a plain-text table format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        if dim == 0 {
            return Err(Error::Data("embedding table needs at least one non-empty vector".into()));
        }
        let mut t = EmbeddingTable {
            dim,
            words: Vec::with_capacity(rows.len()),
            index: HashMap::with_capacity(rows.len()),
            vectors: Vec::with_capacity(rows.len() * dim),
        };
        for (w, v) in rows {
            if v.len() != dim {
                return Err(Error::Data(format!(
                    "vector for {w:?} has {} entries, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("vector for {w:?} is not finite")));
            }
            if t.index.insert(w.clone(), t.words.len()).is_some() {
                return Err(Error::Data(format!("duplicate word {w:?}")));
            }
            t.words.push(w);
            t.vectors.extend(v);
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// One line per word: the word followed by its values, space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(out, " {v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("embedding line {}: {e}", n + 1)))?;
            rows.push((word.to_string(), v));
        }
        Self::from_rows(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting rate; decays linearly to 1e-4 of itself.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 64,
            window: 2,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling; negatives come from the unigram
/// distribution raised to 0.75.
pub fn train_embeddings<S: AsRef<str>>(corpus: &[Vec<S>], config: &EmbeddingConfig) -> Result<EmbeddingTable> {
    if config.dim == 0 || config.window == 0 || config.epochs == 0 {
        return Err(Error::Config("dim, window and epochs must be positive".into()));
    }
    let mut words: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(corpus.len());
    for s in corpus {
        let mut ids = Vec::with_capacity(s.len());
        for w in s {
            let w = w.as_ref();
            let id = *index.entry(w).or_insert_with(|| {
                words.push(w.to_string());
                counts.push(0);
                words.len() - 1
            });
            counts[id] += 1;
            ids.push(id);
        }
        sentences.push(ids);
    }
    let tokens: usize = sentences.iter().map(Vec::len).sum();
    if tokens <= config.window {
        return Err(Error::Data(format!(
            "corpus has {tokens} tokens, fewer than the window needs"
        )));
    }

    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f64> = (0..words.len() * d)
        .map(|_| (rng.gen::<f64>() - 0.5) / d as f64)
        .collect();
    let mut output = vec![0.0; words.len() * d];
    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::Data(e.to_string()))?;

    let total_steps = (config.epochs * tokens) as f64;
    let mut step = 0usize;
    let mut grad = vec![0.0; d];
    for _ in 0..config.epochs {
        for sent in &sentences {
            for (i, &center) in sent.iter().enumerate() {
                let lr = config.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
                step += 1;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window + 1).min(sent.len());
                for (j, &ctx) in sent.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let w = &input[center * d..(center + 1) * d];
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let c = &mut output[target * d..(target + 1) * d];
                        let dot: f64 = w.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                        let coef = lr * (label - sigmoid(dot));
                        for ((g, ci), wi) in grad.iter_mut().zip(c.iter_mut()).zip(w) {
                            *g += coef * *ci;
                            *ci += coef * wi;
                        }
                    }
                    input[center * d..(center + 1) * d]
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(w, g)| *w += g);
                }
            }
        }
    }
    EmbeddingTable::from_rows(
        words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, input[i * d..(i + 1) * d].to_vec()))
            .collect(),
    )
}
