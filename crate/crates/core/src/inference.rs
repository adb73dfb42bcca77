//! Test-time transfer: donor style sampling and greedy or beam decoding.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{frame, Domain, Vocabulary, EOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::EmbeddingTable;
use crate::model::{compose, CheckpointMeta, FusedCode, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub scheme: Scheme,
    pub pool_size: usize,
    pub num_variants: usize,
    pub seed: u64,
    pub decode: Decode,
    pub beam_width: usize,
    /// Output length cap in tokens, EOS excluded.
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            scheme: Scheme::Uniform,
            pool_size: 100,
            num_variants: 5,
            seed: 0,
            decode: Decode::Greedy,
            beam_width: 4,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_variants == 0 || self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "num_variants, beam_width and max_len must be positive".into(),
            ));
        }
        if self.scheme == Scheme::Retrieval && self.pool_size < self.num_variants {
            return Err(Error::Config(format!(
                "pool_size {} is smaller than num_variants {}",
                self.pool_size, self.num_variants
            )));
        }
        Ok(())
    }
}

/// One transferred sentence and the donor whose style it carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub index: usize,
    /// Index of the donor sentence in the target corpus.
    pub donor: usize,
    /// Output ids without BOS and EOS.
    pub tokens: Vec<usize>,
}

/// Refuses checkpoints that never saw a training epoch.
pub fn ensure_trained(meta: &CheckpointMeta) -> Result<()> {
    if meta.trained_epochs == 0 {
        return Err(Error::Config("checkpoint holds untrained parameters".into()));
    }
    Ok(())
}

/// Mean embedding of the known words; `None` when no word is known.
pub fn sentence_vector<S: AsRef<str>>(words: &[S], embeddings: &EmbeddingTable) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; embeddings.dim()];
    let mut n = 0usize;
    for w in words {
        if let Some(v) = embeddings.get(w.as_ref()) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices of the `pool_size` candidates most similar to the query, best first.
/// Ties keep corpus order. Sentences without known words score 0.
pub fn retrieval_pool<S: AsRef<str>>(
    query: &[S],
    candidates: &[Vec<S>],
    embeddings: &EmbeddingTable,
    pool_size: usize,
) -> Vec<usize> {
    let q = sentence_vector(query, embeddings);
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sim = match (&q, sentence_vector(c, embeddings)) {
                (Some(q), Some(c)) => cosine(q, &c),
                _ => 0.0,
            };
            (i, sim)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.into_iter().take(pool_size).map(|(i, _)| i).collect()
}

/// Picks `n` donors from `pool`, distinct whenever the pool is large enough.
fn pick_donors(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() >= n {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Produces `config.num_variants` transfers of `input` (raw ids, no BOS/EOS)
/// from `source` into the other domain, each styled by a donor sentence from
/// `target_corpus`. Retrieval needs `embeddings`.
pub fn transfer(
    params: &ModelParams,
    vocab: &Vocabulary,
    input: &[usize],
    source: Domain,
    target_corpus: &[Vec<usize>],
    config: &SamplingConfig,
    embeddings: Option<&EmbeddingTable>,
) -> Result<Vec<Variant>> {
    config.validate()?;
    if target_corpus.is_empty() {
        return Err(Error::Data("target corpus is empty".into()));
    }
    let target = source.other();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool: Vec<usize> = match config.scheme {
        Scheme::Uniform => (0..target_corpus.len()).collect(),
        Scheme::Retrieval => {
            let emb = embeddings
                .ok_or_else(|| Error::Config("retrieval sampling needs an embedding table".into()))?;
            let query = vocab.decode_tokens(input);
            let cands: Vec<Vec<String>> =
                target_corpus.iter().map(|s| vocab.decode_tokens(s)).collect();
            retrieval_pool(&query, &cands, emb, config.pool_size)
        }
    };
    let donors = pick_donors(&pool, config.num_variants, &mut rng);
    let content = params.encode_content(source, &frame(input))?;
    donors
        .into_iter()
        .enumerate()
        .map(|(index, donor)| {
            let style = params.encode_style(target, &frame(&target_corpus[donor]))?;
            let fused = compose(&content, &style)?;
            let tokens = match config.decode {
                Decode::Greedy => greedy_decode(params, target, &fused, config.max_len)?,
                Decode::Beam => beam_decode(params, target, &fused, config.beam_width, config.max_len)?,
            };
            Ok(Variant {
                index,
                donor,
                tokens,
            })
        })
        .collect()
}

/// Argmax decoding until EOS or `max_len` tokens. EOS is not returned.
pub fn greedy_search(
    mut step: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut prefix = vec![bos];
    while prefix.len() <= max_len {
        let next = crate::model::argmax(&step(&prefix)?);
        if next == eos {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    prefix: Vec<usize>,
    log_prob: f64,
    done: bool,
}

impl Hypothesis {
    /// Mean log-probability per generated token (EOS counts as a token).
    fn score(&self) -> f64 {
        self.log_prob / (self.prefix.len() - 1).max(1) as f64
    }
}

/// Length-normalized beam search. Hypotheses end at EOS or after `max_len`
/// tokens; the best normalized score wins. EOS is not returned.
pub fn beam_search(
    mut step: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    bos: usize,
    eos: usize,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam_width == 0 {
        return Err(Error::Config("beam_width must be positive".into()));
    }
    let mut beams = vec![Hypothesis {
        prefix: vec![bos],
        log_prob: 0.0,
        done: false,
    }];
    for _ in 0..=max_len {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let mut candidates = Vec::new();
        for h in &beams {
            if h.done {
                candidates.push(h.clone());
                continue;
            }
            let probs = step(&h.prefix)?;
            let generated = h.prefix.len() - 1;
            let mut order: Vec<usize> = (0..probs.len()).filter(|&t| probs[t] > 0.0).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            for &t in order.iter().take(beam_width) {
                // past the cap only EOS may follow
                if generated == max_len && t != eos {
                    continue;
                }
                let mut prefix = h.prefix.clone();
                prefix.push(t);
                candidates.push(Hypothesis {
                    prefix,
                    log_prob: h.log_prob + probs[t].ln(),
                    done: t == eos,
                });
            }
            if generated == max_len && !order.iter().take(beam_width).any(|&t| t == eos) {
                candidates.push(Hypothesis {
                    prefix: h.prefix.clone(),
                    log_prob: h.log_prob,
                    done: true,
                });
            }
        }
        candidates.sort_by(|a, b| b.score().total_cmp(&a.score()));
        candidates.truncate(beam_width);
        beams = candidates;
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| a.score().total_cmp(&b.score()))
        .ok_or_else(|| Error::Data("beam search produced no hypothesis".into()))?;
    Ok(best
        .prefix
        .into_iter()
        .skip(1)
        .filter(|&t| t != eos)
        .collect())
}

pub fn greedy_decode(params: &ModelParams, domain: Domain, fused: &FusedCode, max_len: usize) -> Result<Vec<usize>> {
    let out = greedy_search(
        |p| params.decode_step(domain, fused, p),
        crate::corpus::BOS,
        EOS,
        max_len,
    )?;
    debug_assert!(out.iter().all(|&t| t != PAD));
    Ok(out)
}

pub fn beam_decode(
    params: &ModelParams,
    domain: Domain,
    fused: &FusedCode,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    beam_search(
        |p| params.decode_step(domain, fused, p),
        crate::corpus::BOS,
        EOS,
        beam_width,
        max_len,
    )
}

/// One line of the transfer output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRow {
    pub input: String,
    pub variant: usize,
    pub donor: usize,
    pub output: String,
}

pub fn write_rows(mut w: impl Write, rows: &[TransferRow]) -> std::io::Result<()> {
    for r in rows {
        writeln!(w, "{}\t{}\t{}\t{}", r.input, r.variant, r.donor, r.output)?;
    }
    Ok(())
}

pub fn read_rows(r: impl BufRead) -> Result<Vec<TransferRow>> {
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format(format!("transfer file line {}: expected 4 tab-separated fields", n + 1));
        if cells.len() != 4 {
            return Err(bad());
        }
        rows.push(TransferRow {
            input: cells[0].to_string(),
            variant: cells[1].parse().map_err(|_| bad())?,
            donor: cells[2].parse().map_err(|_| bad())?,
            output: cells[3].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three tokens: 0 = BOS, 1 = a, 2 = b; nothing ends early.
    fn toy(prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(match prefix {
            [0] => vec![0.0, 0.6, 0.4],
            [0, 1] => vec![0.0, 0.5, 0.5],
            [0, 2] => vec![0.0, 0.9, 0.1],
            _ => vec![0.0, 0.5, 0.5],
        })
    }

    #[test]
    fn beam_finds_best_pair_that_greedy_misses() -> Result<()> {
        // brute force over every length-2 sequence
        let mut best = (vec![], f64::NEG_INFINITY);
        for a in 1..3 {
            for b in 1..3 {
                let p = toy(&[0])?[a] * toy(&[0, a])?[b];
                if p > best.1 {
                    best = (vec![a, b], p);
                }
            }
        }
        assert_eq!(best.0, vec![2, 1]);
        let greedy = greedy_search(toy, 0, 99, 2)?;
        assert_eq!(greedy[0], 1);
        assert_ne!(greedy, best.0);
        assert_eq!(beam_search(toy, 0, 99, 2, 2)?, best.0);
        Ok(())
    }

    #[test]
    fn width_one_beam_is_greedy() -> Result<()> {
        let step = |p: &[usize]| -> Result<Vec<f64>> {
            let k = p.len() as f64;
            let raw = [0.0, 1.0 + k, 3.0 - k * 0.3, 0.5 * k];
            let s: f64 = raw.iter().sum();
            Ok(raw.iter().map(|v| v / s).collect())
        };
        for max_len in 1..8 {
            assert_eq!(beam_search(step, 0, 3, 1, max_len)?, greedy_search(step, 0, 3, max_len)?);
        }
        Ok(())
    }

    #[test]
    fn decoding_stops_at_eos_or_cap() -> Result<()> {
        let eos_first = |_: &[usize]| -> Result<Vec<f64>> { Ok(vec![0.0, 0.1, 0.9]) };
        assert!(greedy_search(eos_first, 0, 2, 5)?.is_empty());
        assert!(beam_search(eos_first, 0, 2, 3, 5)?.is_empty());
        let never = |_: &[usize]| -> Result<Vec<f64>> { Ok(vec![0.0, 0.9, 0.1]) };
        assert_eq!(greedy_search(never, 0, 2, 5)?.len(), 5);
        assert!(beam_search(never, 0, 2, 3, 5)?.len() <= 5);
        Ok(())
    }

    fn table(rows: &[(&str, [f64; 2])]) -> EmbeddingTable {
        EmbeddingTable::from_rows(rows.iter().map(|(w, v)| (w.to_string(), v.to_vec())).collect()).unwrap()
    }

    #[test]
    fn retrieval_pool_matches_exhaustive_sort() {
        let emb = table(&[("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [1.0, 1.0]), ("d", [-1.0, 0.2])]);
        let cands: Vec<Vec<&str>> = vec![
            vec!["b"],
            vec!["a", "c"],
            vec!["d"],
            vec!["a"],
            vec!["zzz"],
            vec!["c", "b"],
            vec!["a"],
        ];
        let query = ["a", "a", "c"];
        let q = sentence_vector(&query, &emb).unwrap();
        let mut oracle: Vec<(usize, f64)> = Vec::new();
        for (i, c) in cands.iter().enumerate() {
            let s = sentence_vector(c, &emb).map_or(0.0, |v| cosine(&q, &v));
            oracle.push((i, s));
        }
        // insertion sort, stable by construction
        let mut sorted: Vec<(usize, f64)> = Vec::new();
        for item in oracle {
            let pos = sorted.iter().position(|s| s.1 < item.1).unwrap_or(sorted.len());
            sorted.insert(pos, item);
        }
        let expected: Vec<usize> = sorted.iter().map(|s| s.0).collect();
        assert_eq!(retrieval_pool(&query, &cands, &emb, cands.len()), expected);
        assert_eq!(retrieval_pool(&query, &cands, &emb, 3), expected[..3].to_vec());
        // equal-similarity candidates 3 and 6 keep corpus order
        let p = retrieval_pool(&query, &cands, &emb, cands.len());
        let i3 = p.iter().position(|&i| i == 3).unwrap();
        let i6 = p.iter().position(|&i| i == 6).unwrap();
        assert!(i3 < i6);
    }

    #[test]
    fn tsv_round_trip() -> Result<()> {
        let rows = vec![
            TransferRow {
                input: "the food was bad".into(),
                variant: 0,
                donor: 17,
                output: "the food was good".into(),
            },
            TransferRow {
                input: "the food was bad".into(),
                variant: 1,
                donor: 3,
                output: "".into(),
            },
        ];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap().lines().next().unwrap(),
            "the food was bad\t0\t17\tthe food was good"
        );
        assert_eq!(read_rows(&buf[..])?, rows);
        assert!(read_rows(&b"a\tb\n"[..]).is_err());
        Ok(())
    }

    #[test]
    fn config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        let bad = SamplingConfig {
            scheme: Scheme::Retrieval,
            pool_size: 2,
            ..SamplingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig {
            beam_width: 0,
            ..SamplingConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
