//! Beam search, greedy decoding, and the incongruent-decoding harness's
//! derangement machinery.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Next-token distribution provider; `prefix` is the generated target so
/// far (without BOS). Implementations recompute the full prefix, which
/// keeps them stateless and deterministic.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn step_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// One decoding hypothesis. `score` is the sum of per-step token
/// log-probabilities; ranking applies the configured length exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Ranking key: `score / len^alpha` (alpha = 0 means the raw score).
    pub fn key(&self, len_alpha: f64) -> f64 {
        if len_alpha == 0.0 || self.tokens.is_empty() {
            self.score
        } else {
            self.score / (self.tokens.len() as f64).powf(len_alpha)
        }
    }
}

/// Finished hypotheses the search dropped, for dominance checking.
#[derive(Default)]
pub struct BeamTrace {
    pub discarded_finished: Vec<(usize, Hypothesis)>,
}

/// Candidates ordered by key descending; ties prefer the lexicographically
/// smaller token sequence, making the search deterministic.
fn better(a_key: f64, a_tokens: &[u32], b_key: f64, b_tokens: &[u32]) -> bool {
    match a_key.partial_cmp(&b_key) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => a_tokens < b_tokens,
    }
}

/// Length-bounded beam search. Returns up to `beam` finished hypotheses
/// sorted by descending key; when nothing finishes within `max_len`, the
/// best unfinished hypothesis is returned with `finished = false`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_len: usize,
    eos: u32,
    len_alpha: f64,
    mut trace: Option<&mut BeamTrace>,
) -> Result<Vec<Hypothesis>> {
    if beam < 1 {
        return Err(Error::invalid("beam_search: beam must be >= 1"));
    }
    if max_len < 1 {
        return Err(Error::invalid("beam_search: max_len must be >= 1"));
    }
    let vocab = scorer.vocab_size();
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        // expand every alive hypothesis over the whole vocabulary
        let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * vocab);
        for (i, h) in alive.iter().enumerate() {
            let lp = scorer.step_log_probs(&h.tokens)?;
            if lp.len() != vocab {
                return Err(Error::Decode(format!(
                    "scorer returned {} log-probs for vocab {vocab}",
                    lp.len()
                )));
            }
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((h.score + l, i, tok as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        // walk the ranking until the next beam is full; finished candidates
        // encountered on the way enter the pool, which keeps the best `beam`
        let mut next_alive: Vec<Hypothesis> = Vec::with_capacity(beam);
        for (score, i, tok) in candidates {
            if next_alive.len() >= beam {
                break;
            }
            if !score.is_finite() {
                continue;
            }
            let mut tokens = alive[i].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                score,
                finished: tok == eos,
            };
            if hyp.finished {
                insert_finished(&mut finished, hyp, beam, len_alpha, step, trace.as_deref_mut());
            } else {
                next_alive.push(hyp);
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
        // with alpha = 0 scores only decrease, so a full pool whose worst
        // member beats the best alive score cannot be improved
        if len_alpha == 0.0 && finished.len() >= beam {
            let worst = finished.last().map(|h| h.key(0.0)).unwrap_or(f64::MIN);
            if alive[0].score <= worst {
                break;
            }
        }
    }

    if finished.is_empty() {
        let best = alive
            .into_iter()
            .next()
            .ok_or_else(|| Error::Decode("no hypothesis survived".into()))?;
        return Ok(vec![best]);
    }
    Ok(finished)
}

fn insert_finished(
    pool: &mut Vec<Hypothesis>,
    hyp: Hypothesis,
    beam: usize,
    len_alpha: f64,
    step: usize,
    trace: Option<&mut BeamTrace>,
) {
    let key = hyp.key(len_alpha);
    let pos = pool
        .iter()
        .position(|h| better(key, &hyp.tokens, h.key(len_alpha), &h.tokens))
        .unwrap_or(pool.len());
    pool.insert(pos, hyp);
    if pool.len() > beam {
        let evicted = pool.pop().expect("pool overflow");
        if let Some(t) = trace {
            t.discarded_finished.push((step, evicted));
        }
    }
}

/// Greedy decoding: the argmax token per step (lowest id on ties) until
/// EOS or the length bound.
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize, eos: u32) -> Result<Hypothesis> {
    if max_len < 1 {
        return Err(Error::invalid("greedy: max_len must be >= 1"));
    }
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let lp = scorer.step_log_probs(&hyp.tokens)?;
        let (tok, best) = lp
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (i, &l)| match acc {
                Some((_, b)) if b >= l => acc,
                _ => Some((i, l)),
            })
            .ok_or_else(|| Error::Decode("empty vocabulary".into()))?;
        hyp.tokens.push(tok as u32);
        hyp.score += best;
        if tok as u32 == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Default decode length bound.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

/// Seeded derangement of `0..n` by rejection sampling over uniform
/// permutations; no index maps to itself.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "no derangement exists for {n} element(s)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Permutation record: header "n seed", then one "i→π(i)" pair per line.
pub fn write_permutation(path: &Path, perm: &[usize], seed: u64) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "{} {}", perm.len(), seed)?;
    for (i, p) in perm.iter().enumerate() {
        writeln!(out, "{i}→{p}")?;
    }
    Ok(())
}

pub fn read_permutation(path: &Path) -> Result<(Vec<usize>, u64)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty permutation file", path.display())))?;
    let (n_s, seed_s) = header
        .split_once(' ')
        .ok_or_else(|| Error::Format(format!("{}: header must be \"n seed\"", path.display())))?;
    let n: usize = n_s
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad count", path.display())))?;
    let seed: u64 = seed_s
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad seed", path.display())))?;
    let mut perm = vec![usize::MAX; n];
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (i_s, p_s) = line
            .split_once('→')
            .ok_or_else(|| Error::Format(format!("{}: line {} lacks →", path.display(), ln + 2)))?;
        let i: usize = i_s
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad index line {}", path.display(), ln + 2)))?;
        let p: usize = p_s
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad image line {}", path.display(), ln + 2)))?;
        if i >= n || p >= n || perm[i] != usize::MAX {
            return Err(Error::Format(format!(
                "{}: invalid pair {i}→{p}",
                path.display()
            )));
        }
        perm[i] = p;
    }
    let mut seen = vec![false; n];
    for &p in &perm {
        if p == usize::MAX || seen[p] {
            return Err(Error::Format(format!(
                "{}: not a permutation",
                path.display()
            )));
        }
        seen[p] = true;
    }
    Ok((perm, seed))
}
