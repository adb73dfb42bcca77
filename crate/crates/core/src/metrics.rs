//! Evaluation: BLEU, self-BLEU diversity, style-word detection, content and
//! style scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ngram_counts, CorpusPair, Domain, NgramStats};
use crate::inference::{transfer, SamplingConfig};
use crate::model::ModelParams;
use crate::training::{ValidationScores, Validator};
use crate::error::{Error, Result};

mod classifier;
mod embeddings;

pub use classifier::{train_style_classifier, ClassifierConfig, TextClassifier, REQUIRED_ACCURACY};
pub use embeddings::{train_embeddings, EmbeddingConfig, EmbeddingTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0-100.
    pub score: f64,
    /// Modified n-gram precisions, 0-100, for n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{p:.1}")).collect();
        write!(f, "{:.2} ({}) bp={:.3}", self.score, p.join("/"), self.brevity_penalty)
    }
}

/// Reference length closest to `h`; ties go to the shorter one.
fn closest_ref_len(h: usize, ref_lens: impl Iterator<Item = usize>) -> usize {
    ref_lens
        .min_by_key(|&r| ((r as i64 - h as i64).abs(), r))
        .unwrap_or(0)
}

/// `(clipped matches, total)` per order for one hypothesis.
fn clipped_counts<S: AsRef<str> + Clone>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> Vec<(u64, u64)> {
    let hyp_corpus = [hyp.to_vec()];
    (1..=max_n)
        .map(|n| {
            let h = ngram_counts(&hyp_corpus[..], n);
            let mut max_ref: HashMap<Vec<String>, u64> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(std::slice::from_ref(r), n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let matched = h
                .iter()
                .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            let total = hyp.len().saturating_sub(n - 1) as u64;
            (matched, total)
        })
        .collect()
}

fn combine(counts: &[(u64, u64)], hyp_len: usize, ref_len: usize) -> BleuScore {
    let precisions: Vec<f64> = counts
        .iter()
        .map(|&(m, t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        100.0 * bp * log_mean.exp()
    };
    BleuScore {
        score,
        precisions: precisions.iter().map(|p| 100.0 * p).collect(),
        brevity_penalty: bp,
        hyp_len,
        ref_len,
    }
}

/// Sentence BLEU without smoothing. Any zero precision gives a zero score;
/// the precisions are still reported.
pub fn bleu<S: AsRef<str> + Clone>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> Result<BleuScore> {
    if refs.is_empty() || max_n == 0 {
        return Err(Error::Data("bleu needs at least one reference and max_n >= 1".into()));
    }
    let counts = clipped_counts(hyp, refs, max_n);
    let r = closest_ref_len(hyp.len(), refs.iter().map(Vec::len));
    Ok(combine(&counts, hyp.len(), r))
}

/// Corpus BLEU: counts and lengths are pooled before combining.
pub fn corpus_bleu<S: AsRef<str> + Clone>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], max_n: usize) -> Result<BleuScore> {
    if hyps.len() != refs.len() || hyps.is_empty() || max_n == 0 {
        return Err(Error::Data(
            "corpus bleu needs one non-empty reference list per hypothesis".into(),
        ));
    }
    let mut pooled = vec![(0u64, 0u64); max_n];
    let (mut h_len, mut r_len) = (0, 0);
    for (h, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::Data("hypothesis without references".into()));
        }
        for (acc, c) in pooled.iter_mut().zip(clipped_counts(h, rs, max_n)) {
            acc.0 += c.0;
            acc.1 += c.1;
        }
        h_len += h.len();
        r_len += closest_ref_len(h.len(), rs.iter().map(Vec::len));
    }
    Ok(combine(&pooled, h_len, r_len))
}

/// Mean self-BLEU over all unordered pairs of each set, every pair scored in
/// both directions.
pub fn self_bleu<S: AsRef<str> + Clone>(variant_sets: &[Vec<Vec<S>>], max_n: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for set in variant_sets {
        if set.len() < 5 {
            return Err(Error::Data(format!("diversity needs 5 variants per input, got {}", set.len())));
        }
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let a = bleu(&set[i], std::slice::from_ref(&set[j]), max_n)?.score;
                let b = bleu(&set[j], std::slice::from_ref(&set[i]), max_n)?.score;
                total += (a + b) / 2.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Data("no variant sets".into()));
    }
    Ok(total / pairs as f64)
}

/// `100 - self-BLEU-K`.
pub fn diversity_score<S: AsRef<str> + Clone>(variant_sets: &[Vec<Vec<S>>], k: usize) -> Result<f64> {
    Ok(100.0 - self_bleu(variant_sets, k)?)
}

/// `(D_i(u) + lambda) / (D_j(u) + lambda)` for the other domain `j`.
pub fn style_magnitude(stats: &NgramStats, u: &[String], domain: Domain, lambda: f64) -> f64 {
    (stats.count(domain, u) as f64 + lambda) / (stats.count(domain.other(), u) as f64 + lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentScoreConfig {
    pub lambda: f64,
    pub threshold: f64,
    pub n: usize,
}

impl Default for ContentScoreConfig {
    fn default() -> Self {
        ContentScoreConfig {
            lambda: 1.0,
            threshold: 5.0,
            n: 1,
        }
    }
}

impl ContentScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.threshold > 0.0) || self.n == 0 {
            return Err(Error::Config("lambda and threshold must be positive, n >= 1".into()));
        }
        Ok(())
    }
}

/// n-grams (space-joined) whose larger style magnitude exceeds the threshold.
pub fn detect_style_words(stats: &NgramStats, config: &ContentScoreConfig) -> Result<BTreeSet<String>> {
    config.validate()?;
    if stats.n != config.n {
        return Err(Error::Config(format!(
            "statistics hold {}-grams but the config asks for {}-grams",
            stats.n, config.n
        )));
    }
    Ok(stats
        .keys()
        .into_iter()
        .filter(|u| {
            Domain::BOTH
                .iter()
                .map(|&d| style_magnitude(stats, u, d, config.lambda))
                .fold(f64::NEG_INFINITY, f64::max)
                > config.threshold
        })
        .map(|u| u.join(" "))
        .collect())
}

fn residue_vector<S: AsRef<str>>(
    sentence: &[S],
    style_words: &BTreeSet<String>,
    embeddings: &EmbeddingTable,
) -> Option<Vec<f64>> {
    let kept: Vec<&str> = sentence
        .iter()
        .map(AsRef::as_ref)
        .filter(|w| !style_words.contains(*w))
        .collect();
    crate::inference::sentence_vector(&kept, embeddings)
}

/// `100 * max(0, cos)` of the averaged embeddings left after dropping style
/// words and unknown words. An empty residue on either side scores 0.
pub fn content_score<S: AsRef<str>>(
    a: &[S],
    b: &[S],
    style_words: &BTreeSet<String>,
    embeddings: &EmbeddingTable,
) -> f64 {
    match (
        residue_vector(a, style_words, embeddings),
        residue_vector(b, style_words, embeddings),
    ) {
        (Some(x), Some(y)) => 100.0 * crate::inference::cosine(&x, &y).max(0.0),
        _ => 0.0,
    }
}

/// `100 *` the fraction of outputs the classifier assigns to `target`.
/// Refuses classifiers below the validation-accuracy gate.
pub fn style_score<S: AsRef<str>>(classifier: &TextClassifier, outputs: &[Vec<S>], target: Domain) -> Result<f64> {
    classifier.check_gate()?;
    if outputs.is_empty() {
        return Err(Error::Data("no outputs to score".into()));
    }
    let mut hits = 0usize;
    for o in outputs {
        hits += usize::from(classifier.predict(o)? == target);
    }
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

/// Aggregate scores of one transfer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the classifier failed its accuracy gate.
    pub style_score: Option<f64>,
    pub content_score: f64,
    /// Keyed by the largest n-gram order K.
    pub diversity: BTreeMap<usize, f64>,
    /// Outputs against their inputs.
    pub bleu: BleuScore,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        match self.style_score {
            Some(v) => out += &format!("style_score={v:.4}\n"),
            None => out += "style_score=withheld\n",
        }
        out += &format!("content_score={:.4}\n", self.content_score);
        for (k, v) in &self.diversity {
            out += &format!("diversity_{k}={v:.4}\n");
        }
        out += &format!("bleu={:.4}\n", self.bleu.score);
        for (i, p) in self.bleu.precisions.iter().enumerate() {
            out += &format!("bleu_p{}={p:.4}\n", i + 1);
        }
        out += &format!("bleu_bp={:.6}\n", self.bleu.brevity_penalty);
        out += &format!("bleu_hyp_len={}\n", self.bleu.hyp_len);
        out += &format!("bleu_ref_len={}\n", self.bleu.ref_len);
        out
    }

    pub fn from_kv_str(s: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("not a key=value line: {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("missing key {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad number for {k}")))
        };
        let mut diversity = BTreeMap::new();
        let mut precisions = Vec::new();
        for (k, v) in &kv {
            if let Some(n) = k.strip_prefix("diversity_") {
                let n: usize = n.parse().map_err(|_| Error::Format(format!("bad key {k}")))?;
                diversity.insert(n, v.parse().map_err(|_| Error::Format(format!("bad number for {k}")))?);
            }
        }
        for n in 1.. {
            match kv.get(&format!("bleu_p{n}")) {
                Some(v) => precisions.push(v.parse().map_err(|_| Error::Format("bad precision".into()))?),
                None => break,
            }
        }
        let style_score = match kv.get("style_score").map(String::as_str) {
            Some("withheld") => None,
            _ => Some(num("style_score")?),
        };
        Ok(EvalReport {
            style_score,
            content_score: num("content_score")?,
            diversity,
            bleu: BleuScore {
                score: num("bleu")?,
                precisions,
                brevity_penalty: num("bleu_bp")?,
                hyp_len: num("bleu_hyp_len")? as usize,
                ref_len: num("bleu_ref_len")? as usize,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Everything needed to score transfers into either domain.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub classifier: TextClassifier,
    pub embeddings: EmbeddingTable,
    pub style_words: BTreeSet<String>,
}

impl Evaluator {
    /// Trains the embeddings and classifier on `corpus` and detects its style words.
    pub fn train(
        corpus: &CorpusPair,
        embedding: &EmbeddingConfig,
        classifier: &ClassifierConfig,
        content: &ContentScoreConfig,
    ) -> Result<Self> {
        let texts = [corpus.texts(Domain::One), corpus.texts(Domain::Two)];
        let all: Vec<Vec<String>> = texts.iter().flatten().cloned().collect();
        let embeddings = train_embeddings(&all, embedding)?;
        let classifier = train_style_classifier(corpus, classifier)?;
        let stats = NgramStats::new(&texts[0], &texts[1], content.n);
        Ok(Evaluator {
            classifier,
            embeddings,
            style_words: detect_style_words(&stats, content)?,
        })
    }

    /// Scores `(input, variants)` groups transferred into `target`.
    /// Diversity is reported only when every group has at least five variants;
    /// the style score is withheld if the classifier is below the gate.
    pub fn report<S: AsRef<str> + Clone>(&self, groups: &[(Vec<S>, Vec<Vec<S>>)], target: Domain) -> Result<EvalReport> {
        let outputs: Vec<Vec<S>> = groups.iter().flat_map(|(_, vs)| vs.iter().cloned()).collect();
        let style = match style_score(&self.classifier, &outputs, target) {
            Ok(v) => Some(v),
            Err(Error::ClassifierGate { accuracy, required }) => {
                log::warn!("style score withheld: classifier accuracy {accuracy:.2}% is below {required:.0}%");
                None
            }
            Err(e) => return Err(e),
        };
        let mut content = 0.0;
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for (input, variants) in groups {
            for v in variants {
                content += content_score(input, v, &self.style_words, &self.embeddings);
                hyps.push(v.clone());
                refs.push(vec![input.clone()]);
            }
        }
        let content = content / outputs.len() as f64;
        let mut diversity = BTreeMap::new();
        if groups.iter().all(|(_, vs)| vs.len() >= 5) {
            let sets: Vec<Vec<Vec<S>>> = groups.iter().map(|(_, vs)| vs.clone()).collect();
            for k in [2, 3, 4] {
                diversity.insert(k, diversity_score(&sets, k)?);
            }
        }
        Ok(EvalReport {
            style_score: style,
            content_score: content,
            diversity,
            bleu: corpus_bleu(&hyps, &refs, 4)?,
        })
    }
}

/// Transfers held-out sentences into the other domain (one uniform donor
/// each) and scores them; drives the learning-rate schedule.
#[derive(Debug, Clone)]
pub struct TransferValidator {
    pub evaluator: Evaluator,
    /// Sentences scored per domain.
    pub max_inputs: usize,
}

impl TransferValidator {
    /// Mean style and content scores over both transfer directions.
    pub fn scores(&self, params: &ModelParams, held_out: &CorpusPair, seed: u64) -> Result<ValidationScores> {
        self.evaluator.classifier.check_gate()?;
        let mut style = 0.0;
        let mut content = 0.0;
        for source in Domain::BOTH {
            let target = source.other();
            let groups = transfer_groups(
                params,
                held_out,
                source,
                held_out.domain(target),
                &SamplingConfig {
                    num_variants: 1,
                    seed,
                    ..SamplingConfig::default()
                },
                None,
                self.max_inputs,
            )?;
            let report = self.evaluator.report(&groups, target)?;
            style += report.style_score.unwrap_or(0.0) / 2.0;
            content += report.content_score / 2.0;
        }
        Ok(ValidationScores { style, content })
    }
}

impl Validator for TransferValidator {
    fn validate(&self, params: &ModelParams, held_out: &CorpusPair, seed: u64) -> Result<ValidationScores> {
        self.scores(params, held_out, seed)
    }
}

/// `(input words, variant words)` for the first `max_inputs` sentences of
/// `source`, each sentence using its own seed derived from `config.seed`.
pub fn transfer_groups(
    params: &ModelParams,
    corpus: &CorpusPair,
    source: Domain,
    donors: &[Vec<usize>],
    config: &SamplingConfig,
    embeddings: Option<&EmbeddingTable>,
    max_inputs: usize,
) -> Result<Vec<(Vec<String>, Vec<Vec<String>>)>> {
    corpus
        .domain(source)
        .iter()
        .take(max_inputs)
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplingConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..*config
            };
            let variants = transfer(params, &corpus.vocab, s, source, donors, &cfg, embeddings)?;
            Ok((
                corpus.vocab.decode_tokens(s),
                variants
                    .iter()
                    .map(|v| corpus.vocab.decode_tokens(&v.tokens))
                    .collect(),
            ))
        })
        .collect()
}
