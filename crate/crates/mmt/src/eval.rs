//! Tokenized corpus BLEU, paired approximate-randomization significance
//! testing, and word error rate.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;

/// BLEU smoothing policy. The strict definition zeroes the score when any
/// n-gram precision is zero; add-one smoothing keeps tiny corpora usable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    AddOne,
}

/// Corpus BLEU with its components.
#[derive(Clone, Debug)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// Structured "key: value" lines.
    pub fn pretty(&self) -> String {
        format!(
            "bleu: {:.2}\np1: {:.4}\np2: {:.4}\np3: {:.4}\np4: {:.4}\nbrevity_penalty: {:.4}\nhyp_len: {}\nref_len: {}\n",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }

    /// Machine-readable single line.
    pub fn machine_line(&self) -> String {
        format!(
            "bleu {:.4} p1 {:.6} p2 {:.6} p3 {:.6} p4 {:.6} bp {:.6} hyp_len {} ref_len {}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Per-sentence sufficient statistics; corpus BLEU pools them, which is
/// what makes randomization tests cheap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SentenceStats {
    pub matches: [u64; MAX_NGRAM],
    pub totals: [u64; MAX_NGRAM],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl SentenceStats {
    fn add(&mut self, other: &SentenceStats) {
        for n in 0..MAX_NGRAM {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(|t| t.as_ref()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram statistics of one hypothesis against one reference.
pub fn sentence_stats<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> SentenceStats {
    let mut stats = SentenceStats {
        hyp_len: hyp.len() as u64,
        ref_len: reference.len() as u64,
        ..Default::default()
    };
    for n in 1..=MAX_NGRAM {
        let hyp_counts = ngram_counts(hyp, n);
        let ref_counts = ngram_counts(reference, n);
        let mut matched = 0;
        for (gram, count) in &hyp_counts {
            if let Some(rc) = ref_counts.get(gram) {
                matched += (*count).min(*rc);
            }
        }
        stats.matches[n - 1] = matched;
        stats.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
    }
    stats
}

/// BLEU from pooled statistics: clipped precisions for n = 1..4,
/// BP = min(1, e^(1 - r/h)); any zero precision zeroes the score unless
/// add-one smoothing is on.
pub fn bleu_from_stats(pooled: &SentenceStats, smoothing: Smoothing) -> BleuReport {
    let mut precisions = [0.0f64; MAX_NGRAM];
    let mut log_sum = 0.0f64;
    let mut zero = false;
    for n in 0..MAX_NGRAM {
        let (m, t) = (pooled.matches[n], pooled.totals[n]);
        let p = match smoothing {
            Smoothing::None => {
                if t == 0 {
                    0.0
                } else {
                    m as f64 / t as f64
                }
            }
            Smoothing::AddOne => {
                if n == 0 {
                    if t == 0 {
                        0.0
                    } else {
                        m as f64 / t as f64
                    }
                } else {
                    (m + 1) as f64 / (t + 1) as f64
                }
            }
        };
        precisions[n] = p;
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
    }
    let brevity_penalty = if pooled.hyp_len == 0 {
        0.0
    } else if pooled.hyp_len >= pooled.ref_len {
        1.0
    } else {
        (1.0 - pooled.ref_len as f64 / pooled.hyp_len as f64).exp()
    };
    let bleu = if zero || pooled.hyp_len == 0 {
        0.0
    } else {
        brevity_penalty * (log_sum / MAX_NGRAM as f64).exp() * 100.0
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: pooled.hyp_len as usize,
        ref_len: pooled.ref_len as usize,
    }
}

/// Tokenized corpus BLEU over aligned hypothesis/reference corpora.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<R>],
    smoothing: Smoothing,
) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("corpus_bleu: empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Alignment(format!(
            "corpus_bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut pooled = SentenceStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        pooled.add(&sentence_stats(h, r));
    }
    Ok(bleu_from_stats(&pooled, smoothing))
}

/// Significance-test flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SignificanceMethod {
    /// Paired approximate randomization: per-sentence swaps with
    /// probability one half.
    #[default]
    ApproximateRandomization,
    /// Paired bootstrap resampling of sentence indices.
    Bootstrap,
}

#[derive(Clone, Debug)]
pub struct SignificanceReport {
    pub p_value: f64,
    pub delta_observed: f64,
    pub bleu_a: f64,
    pub bleu_b: f64,
    pub iterations: usize,
}

/// Paired significance test on corpus BLEU between two systems' outputs.
/// p = (#{|delta_perm| >= |delta_observed|} + 1) / (iterations + 1).
pub fn significance<S: AsRef<str>>(
    hyp_a: &[Vec<S>],
    hyp_b: &[Vec<S>],
    references: &[Vec<S>],
    iterations: usize,
    seed: u64,
    method: SignificanceMethod,
    smoothing: Smoothing,
) -> Result<SignificanceReport> {
    if hyp_a.len() != references.len() || hyp_b.len() != references.len() {
        return Err(Error::Alignment(format!(
            "significance: sizes {} / {} / {} are not aligned",
            hyp_a.len(),
            hyp_b.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::invalid("significance: empty corpus"));
    }
    if iterations == 0 {
        return Err(Error::invalid("significance: iterations must be positive"));
    }
    let stats_a: Vec<SentenceStats> = hyp_a
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    let stats_b: Vec<SentenceStats> = hyp_b
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r))
        .collect();
    let n = references.len();

    let bleu_of = |pick_b: &dyn Fn(usize) -> bool, idx: &[usize]| -> (f64, f64) {
        let mut pa = SentenceStats::default();
        let mut pb = SentenceStats::default();
        for &i in idx {
            if pick_b(i) {
                pa.add(&stats_b[i]);
                pb.add(&stats_a[i]);
            } else {
                pa.add(&stats_a[i]);
                pb.add(&stats_b[i]);
            }
        }
        (
            bleu_from_stats(&pa, smoothing).bleu,
            bleu_from_stats(&pb, smoothing).bleu,
        )
    };

    let identity: Vec<usize> = (0..n).collect();
    let (bleu_a, bleu_b) = bleu_of(&|_| false, &identity);
    let delta_observed = bleu_a - bleu_b;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..iterations {
        let delta = match method {
            SignificanceMethod::ApproximateRandomization => {
                let swaps: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
                let (a, b) = bleu_of(&|i| swaps[i], &identity);
                a - b
            }
            SignificanceMethod::Bootstrap => {
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                let (a, b) = bleu_of(&|_| false, &idx);
                (a - b) - delta_observed
            }
        };
        if delta.abs() >= delta_observed.abs() {
            exceed += 1;
        }
    }
    Ok(SignificanceReport {
        p_value: (exceed + 1) as f64 / (iterations + 1) as f64,
        delta_observed,
        bleu_a,
        bleu_b,
        iterations,
    })
}

/// Word error rate report. `rate` is infinite when the reference is empty
/// but the hypothesis is not.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerReport {
    pub distance: u64,
    pub ref_len: u64,
    pub rate: f64,
}

impl WerReport {
    pub fn is_degenerate(&self) -> bool {
        !self.rate.is_finite()
    }
}

/// Levenshtein edit distance (unit substitution/insertion/deletion costs)
/// over the reference length.
pub fn wer<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> WerReport {
    let distance = edit_distance(hyp, reference);
    let ref_len = reference.len() as u64;
    let rate = if ref_len == 0 {
        if distance == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        distance as f64 / ref_len as f64
    };
    WerReport {
        distance,
        ref_len,
        rate,
    }
}

fn edit_distance<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> u64 {
    let (h, r) = (hyp.len(), reference.len());
    let mut prev: Vec<u64> = (0..=r as u64).collect();
    let mut cur = vec![0u64; r + 1];
    for i in 1..=h {
        cur[0] = i as u64;
        for j in 1..=r {
            let sub = if hyp[i - 1].as_ref() == reference[j - 1].as_ref() {
                0
            } else {
                1
            };
            cur[j] = (prev[j - 1] + sub).min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[r]
}
