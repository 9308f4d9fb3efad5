//! Caption similarity for CapA: a CIDEr-D style consensus score.
//!
//! Tokens are lowercase maximal alphanumeric runs. For each n in 1..=4 the
//! candidate and each reference become TF-IDF vectors (`idf = ln(N / max(1, df))`
//! with document frequencies over a reference corpus of N sentences); the
//! per-n similarity is `Σ_g min(c_g, r_g)·r_g / (|c|·|r|)`. Per-n values are
//! averaged, multiplied by the length penalty `exp(-(len_c - len_r)² / 2σ²)`
//! with σ = 6, and averaged over references. That average is the raw CIDEr-D
//! value divided by 10, clipped to [0, 1].

use std::collections::HashMap;

use rayon::prelude::*;

pub const MAX_NGRAM: usize = 4;
pub const LENGTH_SIGMA: f64 = 6.0;
/// Scale between raw CIDEr-D and the normalized similarity.
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CaptionError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
}

/// Lowercase tokens of a caption.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Counts of every n-gram of order `n`, keyed by space-joined tokens.
    fn ngram_counts(&self, n: usize) -> HashMap<String, u32> {
        let mut out = HashMap::new();
        for w in self.0.windows(n) {
            *out.entry(w.join(" ")).or_insert(0) += 1;
        }
        out
    }
}

pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

/// Document frequencies of n-grams (n = 1..=4) over a reference corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NgramStats {
    df: [HashMap<String, u32>; MAX_NGRAM],
    corpus_size: usize,
}

impl NgramStats {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    /// Number of corpus sentences containing `ngram` (tokens joined by single spaces).
    pub fn df(&self, ngram: &str) -> u32 {
        let n = ngram.split(' ').count();
        if n == 0 || n > MAX_NGRAM {
            return 0;
        }
        self.df[n - 1].get(ngram).copied().unwrap_or(0)
    }

    fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.corpus_size as f64).ln() - df.ln()
    }

    fn merge(mut self, other: NgramStats) -> NgramStats {
        for (mine, theirs) in self.df.iter_mut().zip(other.df) {
            for (g, c) in theirs {
                *mine.entry(g).or_insert(0) += c;
            }
        }
        self.corpus_size += other.corpus_size;
        self
    }
}

pub fn build_stats(corpus: &[TokenSeq]) -> Result<NgramStats, CaptionError> {
    if corpus.is_empty() {
        return Err(CaptionError::EmptyCorpus);
    }
    Ok(corpus
        .par_iter()
        .map(|sentence| {
            let mut stats = NgramStats {
                corpus_size: 1,
                ..Default::default()
            };
            for n in 1..=MAX_NGRAM {
                stats.df[n - 1] = sentence.ngram_counts(n).into_keys().map(|g| (g, 1)).collect();
            }
            stats
        })
        .reduce(NgramStats::default, NgramStats::merge))
}

/// TF-IDF vector and its norm for one order n.
fn weighted(seq: &TokenSeq, n: usize, stats: &NgramStats) -> (HashMap<String, f64>, f64) {
    let vec: HashMap<String, f64> = seq
        .ngram_counts(n)
        .into_iter()
        .map(|(g, tf)| {
            let w = tf as f64 * stats.idf(n, &g);
            (g, w)
        })
        .collect();
    let norm = vec.values().map(|w| w * w).sum::<f64>().sqrt();
    (vec, norm)
}

fn clipped_cosine((cv, cn): &(HashMap<String, f64>, f64), (rv, rn): &(HashMap<String, f64>, f64)) -> f64 {
    if *cn == 0.0 || *rn == 0.0 {
        return 0.0;
    }
    let dot: f64 = cv
        .iter()
        .filter_map(|(g, &c)| rv.get(g).map(|&r| c.min(r) * r))
        .sum();
    dot / (cn * rn)
}

/// The clipped TF-IDF cosine of order `n` between a candidate and one reference,
/// before length penalty and averaging. Zero outside `1..=MAX_NGRAM`.
pub fn ngram_cosine(candidate: &TokenSeq, reference: &TokenSeq, n: usize, stats: &NgramStats) -> f64 {
    if n == 0 || n > MAX_NGRAM {
        return 0.0;
    }
    clipped_cosine(&weighted(candidate, n, stats), &weighted(reference, n, stats))
}

/// Normalized consensus similarity in [0, 1]. An empty candidate scores 0.
pub fn cider_similarity(candidate: &TokenSeq, references: &[TokenSeq], stats: &NgramStats) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let cand: Vec<_> = (1..=MAX_NGRAM).map(|n| weighted(candidate, n, stats)).collect();
    let mut total = 0.0;
    for reference in references {
        let mut per_n = 0.0;
        for n in 1..=MAX_NGRAM {
            per_n += clipped_cosine(&cand[n - 1], &weighted(reference, n, stats));
        }
        let delta = candidate.len() as f64 - reference.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)).exp();
        total += per_n / MAX_NGRAM as f64 * penalty;
    }
    (total / references.len() as f64).clamp(0.0, 1.0)
}

/// A caption similarity used by the CapA component.
pub trait CaptionSimilarity: Sync {
    fn similarity(&self, candidate: &str, reference: &str) -> f64;
}

/// [`cider_similarity`] with document frequencies fixed over a reference corpus.
#[derive(Debug, Clone)]
pub struct CiderBackend {
    stats: NgramStats,
}

impl CiderBackend {
    pub fn new<S: AsRef<str>>(corpus: &[S]) -> Result<Self, CaptionError> {
        let tokens: Vec<TokenSeq> = corpus.iter().map(|s| tokenize(s.as_ref())).collect();
        Ok(Self {
            stats: build_stats(&tokens)?,
        })
    }

    pub fn stats(&self) -> &NgramStats {
        &self.stats
    }
}

impl CaptionSimilarity for CiderBackend {
    fn similarity(&self, candidate: &str, reference: &str) -> f64 {
        cider_similarity(&tokenize(candidate), &[tokenize(reference)], &self.stats)
    }
}

/// Exact string equality; handy for tests and sanity checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl CaptionSimilarity for ExactMatch {
    fn similarity(&self, candidate: &str, reference: &str) -> f64 {
        if candidate == reference {
            1.0
        } else {
            0.0
        }
    }
}
