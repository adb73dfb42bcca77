//! Vocabulary, tokenisation, non-parallel corpus loading, batching and
//! n-gram statistics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub mod synthetic;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const DEFAULT_MAX_LEN: usize = 25;

/// Lowercased whitespace tokenisation.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency then lexicographically.
    pub fn from_sentences<'a, I, S>(sentences: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<str> + 'a + ?Sized,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for s in sentences {
            for tok in tokenize(s.as_ref()) {
                any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Raw token ids, no framing.
    pub fn ids(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence).iter().map(|t| self.id(t)).collect()
    }

    /// `[BOS, ids..., EOS]`.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        frame(&self.ids(sentence))
    }

    /// Joins tokens with single spaces, dropping PAD/BOS/EOS and stopping at EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .skip_while(|&&i| i == BOS)
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Hex SHA-256 of the token list, used to pair checkpoints with vocabularies.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One token per line, specials first; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Inverse of [`Vocabulary::to_file_string`].
    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let vocab = Self::from_tokens(lines[SPECIALS.len()..].iter().map(|s| s.to_string()));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data("duplicate tokens in vocabulary".into()));
        }
        Ok(vocab)
    }
}

pub fn frame(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS);
    out.extend_from_slice(ids);
    out.push(EOS);
    out
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Reads both corpus files and builds a shared vocabulary.
pub fn build_vocab(files: [&Path; 2], min_count: usize) -> Result<Vocabulary> {
    let mut lines = read_lines(files[0])?;
    lines.extend(read_lines(files[1])?);
    Vocabulary::from_sentences(&lines, min_count)
}

/// Two non-parallel corpora of raw token ids sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub domain1: Vec<Vec<usize>>,
    pub domain2: Vec<Vec<usize>>,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl CorpusPair {
    /// Encodes sentences, dropping empty ones and those longer than `max_len`.
    pub fn from_sentences<S: AsRef<str>>(
        vocab: Vocabulary,
        domain1: &[S],
        domain2: &[S],
        max_len: usize,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let mut dropped = 0;
        let mut encode = |sents: &[S]| -> Vec<Vec<usize>> {
            sents
                .iter()
                .map(|s| vocab.ids(s.as_ref()))
                .filter(|ids| {
                    let ok = !ids.is_empty() && ids.len() <= max_len;
                    dropped += usize::from(!ok);
                    ok
                })
                .collect()
        };
        let d1 = encode(domain1);
        let d2 = encode(domain2);
        if dropped > 0 {
            log::info!("dropped {dropped} sentences that were empty or longer than {max_len} tokens");
        }
        if d1.is_empty() || d2.is_empty() {
            return Err(Error::Data("both corpora must contain at least one sentence".into()));
        }
        Ok(CorpusPair {
            domain1: d1,
            domain2: d2,
            vocab,
            max_len,
        })
    }

    pub fn load(files: [&Path; 2], vocab: Vocabulary, max_len: usize) -> Result<Self> {
        let a = read_lines(files[0])?;
        let b = read_lines(files[1])?;
        Self::from_sentences(vocab, &a, &b, max_len)
    }

    pub fn domain(&self, d: Domain) -> &[Vec<usize>] {
        match d {
            Domain::One => &self.domain1,
            Domain::Two => &self.domain2,
        }
    }

    /// Token strings of a domain, for the metrics.
    pub fn texts(&self, d: Domain) -> Vec<Vec<String>> {
        self.domain(d)
            .iter()
            .map(|ids| ids.iter().map(|&i| self.vocab.token(i).to_string()).collect())
            .collect()
    }

    /// Splits off `fraction` of each domain (chosen by `seed`) as a held-out pair.
    pub fn split(&self, fraction: f64, seed: u64) -> (CorpusPair, CorpusPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cut = |sents: &[Vec<usize>]| {
            let mut idx: Vec<usize> = (0..sents.len()).collect();
            idx.shuffle(&mut rng);
            let n_hold = ((sents.len() as f64 * fraction).round() as usize)
                .min(sents.len().saturating_sub(1));
            let (hold, keep) = idx.split_at(n_hold);
            let mut hold = hold.to_vec();
            let mut keep = keep.to_vec();
            hold.sort_unstable();
            keep.sort_unstable();
            let pick = |ix: &[usize]| ix.iter().map(|&i| sents[i].clone()).collect::<Vec<_>>();
            (pick(&keep), pick(&hold))
        };
        let (k1, h1) = cut(&self.domain1);
        let (k2, h2) = cut(&self.domain2);
        let make = |a, b| CorpusPair {
            domain1: a,
            domain2: b,
            vocab: self.vocab.clone(),
            max_len: self.max_len,
        };
        (make(k1, k2), make(h1, h2))
    }
}

/// One of the two style domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    One,
    Two,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::One => Domain::Two,
            Domain::Two => Domain::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Domain::One => 0,
            Domain::Two => 1,
        }
    }

    /// Parses `1` / `2`.
    pub fn parse(s: &str) -> Option<Domain> {
        match s.trim() {
            "1" => Some(Domain::One),
            "2" => Some(Domain::Two),
            _ => None,
        }
    }

    pub const BOTH: [Domain; 2] = [Domain::One, Domain::Two];
}

/// A right-padded id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `[rows x width]`, padded with [`PAD`].
    pub ids: Vec<Vec<usize>>,
    /// Unpadded lengths.
    pub lengths: Vec<usize>,
    /// Positions of the rows in the source sequence list.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row `r` without padding.
    pub fn sequence(&self, r: usize) -> &[usize] {
        &self.ids[r][..self.lengths[r]]
    }
}

/// Shuffles `sequences` with `seed` and yields padded batches.
pub fn batches(
    sequences: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Batch> + '_ {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| {
        let width = indices.iter().map(|&i| sequences[i].len()).max().unwrap_or(0);
        let ids = indices
            .iter()
            .map(|&i| {
                let mut row = sequences[i].clone();
                row.resize(width, PAD);
                row
            })
            .collect();
        let lengths = indices.iter().map(|&i| sequences[i].len()).collect();
        Batch {
            ids,
            lengths,
            indices,
        }
    })
}

pub type Ngram = Vec<String>;

/// Counts of every contiguous n-gram.
pub fn ngram_counts<S: AsRef<str>>(corpus: &[Vec<S>], n: usize) -> HashMap<Ngram, u64> {
    let mut counts = HashMap::new();
    if n == 0 {
        return counts;
    }
    for sent in corpus {
        for w in sent.windows(n) {
            let key: Ngram = w.iter().map(|t| t.as_ref().to_string()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-domain n-gram counts `D_1(u)`, `D_2(u)`.
#[derive(Debug, Clone, Default)]
pub struct NgramStats {
    pub n: usize,
    pub counts: [HashMap<Ngram, u64>; 2],
}

impl NgramStats {
    pub fn new<S: AsRef<str>>(domain1: &[Vec<S>], domain2: &[Vec<S>], n: usize) -> Self {
        NgramStats {
            n,
            counts: [ngram_counts(domain1, n), ngram_counts(domain2, n)],
        }
    }

    pub fn count(&self, domain: Domain, gram: &[String]) -> u64 {
        self.counts[domain.index()].get(gram).copied().unwrap_or(0)
    }

    pub fn total(&self, domain: Domain) -> u64 {
        self.counts[domain.index()].values().sum()
    }

    /// Every n-gram seen in either domain, sorted.
    pub fn keys(&self) -> Vec<&Ngram> {
        let mut keys: Vec<&Ngram> = self.counts[0].keys().chain(self.counts[1].keys()).collect();
        keys.sort();
        keys.dedup();
        keys
    }
}
