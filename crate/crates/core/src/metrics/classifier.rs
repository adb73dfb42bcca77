//! Small convolutional text classifier used as the style judge.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{frame, CorpusPair, Domain, Vocabulary};
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::tensor::{Graph, ParamId, ParamStore, Sgd, SgdConfig, Tensor};

/// Validation accuracy below which style scores are refused.
pub const REQUIRED_ACCURACY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub dim: usize,
    pub kernel_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            dim: 32,
            kernel_size: 3,
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.2,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layers {
    embedding: ParamId,
    conv: [(ParamId, ParamId); 2],
    out: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    config: ClassifierConfig,
    vocab: Vocabulary,
    store: ParamStore,
    layers: Layers,
    validation_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct Saved {
    config: ClassifierConfig,
    vocab: String,
    validation_accuracy: f64,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl TextClassifier {
    fn fresh(config: ClassifierConfig, vocab: Vocabulary) -> Self {
        let (d, k, v) = (config.dim, config.kernel_size, vocab.len());
        let mut store = ParamStore::new();
        let mut init = |name: &str, rows: usize, cols: usize, fan_in: usize| {
            let t = crate::model::init_uniform(config.seed, name, rows, cols, fan_in);
            store.add(name, t)
        };
        let embedding = init("embed", v, d, d);
        let c0 = init("conv0.w", k * d, d, k * d);
        let c1 = init("conv1.w", k * d, d, k * d);
        let out = init("out.w", d, 2, d);
        let b0 = store.add("conv0.b", Tensor::zeros(vec![d]));
        let b1 = store.add("conv1.b", Tensor::zeros(vec![d]));
        let bo = store.add("out.b", Tensor::zeros(vec![2]));
        TextClassifier {
            config,
            vocab,
            store,
            layers: Layers {
                embedding,
                conv: [(c0, b0), (c1, b1)],
                out: (out, bo),
            },
            validation_accuracy: 0.0,
        }
    }

    fn log_probs(&self, g: &mut Graph, ids: &[usize]) -> Result<crate::tensor::Var> {
        let l = &self.layers;
        let table = g.param(&self.store, l.embedding);
        let mut h = g.embed(table, ids)?;
        let pad = self.config.kernel_size / 2;
        for &(w, b) in &l.conv {
            let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
            let c = g.conv1d(h, w, b, pad, pad)?;
            h = g.tanh(c)?;
        }
        let pooled = g.mean_over_positions(h)?;
        let pooled = g.reshape(pooled, vec![1, self.config.dim])?;
        let (w, b) = (g.param(&self.store, l.out.0), g.param(&self.store, l.out.1));
        let logits = g.matmul(pooled, w)?;
        let logits = g.add_row(logits, b)?;
        g.log_softmax(logits)
    }

    fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        frame(&words.iter().map(|w| self.vocab.id(w.as_ref())).collect::<Vec<_>>())
    }

    /// `[P(domain one), P(domain two)]`.
    pub fn probabilities<S: AsRef<str>>(&self, words: &[S]) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let lp = self.log_probs(&mut g, &self.ids(words))?;
        let v = g.value(lp).data();
        Ok([v[0].exp(), v[1].exp()])
    }

    pub fn predict<S: AsRef<str>>(&self, words: &[S]) -> Result<Domain> {
        let p = self.probabilities(words)?;
        Ok(if argmax(&p) == 0 { Domain::One } else { Domain::Two })
    }

    /// Fraction of sentences from both domains assigned their own label.
    pub fn accuracy(&self, corpus: &CorpusPair) -> Result<f64> {
        let mut hits = 0usize;
        let mut n = 0usize;
        for d in Domain::BOTH {
            for s in corpus.texts(d) {
                hits += usize::from(self.predict(&s)? == d);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("no sentences to classify".into()));
        }
        Ok(hits as f64 / n as f64)
    }

    pub fn validation_accuracy(&self) -> f64 {
        self.validation_accuracy
    }

    /// Errors unless the held-out accuracy reached [`REQUIRED_ACCURACY`].
    pub fn check_gate(&self) -> Result<()> {
        if self.validation_accuracy < REQUIRED_ACCURACY {
            return Err(Error::ClassifierGate {
                accuracy: 100.0 * self.validation_accuracy,
                required: 100.0 * REQUIRED_ACCURACY,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let saved = Saved {
            config: self.config,
            vocab: self.vocab.to_file_string(),
            validation_accuracy: self.validation_accuracy,
            tensors: self
                .store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
                .collect(),
        };
        serde_json::to_string(&saved).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let saved: Saved = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let vocab = Vocabulary::from_file_string(&saved.vocab)?;
        let mut c = Self::fresh(saved.config, vocab);
        if saved.tensors.len() != c.store.len() {
            return Err(Error::Format("classifier tensor count mismatch".into()));
        }
        let ids: Vec<ParamId> = c.store.ids().collect();
        for (id, (name, shape, data)) in ids.into_iter().zip(saved.tensors) {
            if c.store.name(id) != name || c.store.get(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!("classifier tensor {name} does not fit")));
            }
            *c.store.get_mut(id) = Tensor::new(shape, data)?;
        }
        c.validation_accuracy = saved.validation_accuracy;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Trains on a seeded split of `corpus` and records accuracy on the held-out part.
pub fn train_style_classifier(corpus: &CorpusPair, config: &ClassifierConfig) -> Result<TextClassifier> {
    if config.dim == 0 || config.kernel_size.is_multiple_of(2) || config.batch_size == 0 {
        return Err(Error::Config("classifier needs dim > 0, odd kernel and batch_size > 0".into()));
    }
    let (train, held) = corpus.split(config.validation_fraction, config.seed);
    if Domain::BOTH
        .iter()
        .any(|&d| train.domain(d).is_empty() || held.domain(d).is_empty())
    {
        return Err(Error::Data("too few sentences to train and validate a classifier".into()));
    }
    let mut c = TextClassifier::fresh(*config, corpus.vocab.clone());
    let sgd = Sgd::new(SgdConfig {
        learning_rate: config.learning_rate,
        min_learning_rate: config.learning_rate,
        ..SgdConfig::default()
    })?;
    let mut examples: Vec<(Vec<usize>, usize)> = Domain::BOTH
        .iter()
        .flat_map(|&d| train.domain(d).iter().map(move |s| (frame(s), d.index())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.epochs {
        examples.shuffle(&mut rng);
        for chunk in examples.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut terms = Vec::with_capacity(chunk.len());
            for (ids, label) in chunk {
                let lp = c.log_probs(&mut g, ids)?;
                terms.push(g.gather(lp, &[*label])?);
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = g.add(total, *t)?;
            }
            let loss = g.scale(total, -1.0 / chunk.len() as f64)?;
            g.backward(loss)?;
            c.store.accumulate(&g, |_| true)?;
            sgd.step(&mut c.store)?;
        }
    }
    c.validation_accuracy = c.accuracy(&held)?;
    log::info!(
        "style classifier validation accuracy {:.2}%",
        100.0 * c.validation_accuracy
    );
    Ok(c)
}
