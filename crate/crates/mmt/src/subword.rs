//! Text pipeline: lowercasing tokenizer, BPE subword segmentation,
//! subword re-merging and vocabulary construction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Marker appended to non-final subword pieces.
pub const CONTINUATION_MARKER: &str = "@@";

/// Lowercase and split into tokens. Every non-alphanumeric, non-whitespace
/// character becomes its own token, so punctuation detaches from words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            let mut t = String::new();
            t.extend(ch.to_lowercase());
            tokens.push(t);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Inverse of tokenization up to spacing: joins tokens with single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Ordered list of learned merges plus the continuation-marker convention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    continuation_marker: String,
}

impl SubwordModel {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        SubwordModel {
            merges,
            continuation_marker: CONTINUATION_MARKER.to_string(),
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> &str {
        &self.continuation_marker
    }

    /// One merge per line, "left right", in learned order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut merges = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (a, b) = (parts.next(), parts.next());
            match (a, b, parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(Error::Format(format!(
                        "merge file {}: line {} is not \"left right\"",
                        path.display(),
                        ln + 1
                    )))
                }
            }
        }
        Ok(SubwordModel::new(merges))
    }
}

/// Learn a BPE model: greedy most-frequent adjacent-pair merging over
/// word-internal symbol sequences, for `n_merges` rounds or until no pair
/// occurs twice. Frequency ties break toward the lexicographically
/// smallest pair, which makes learning deterministic.
pub fn learn_bpe(corpus: &[Vec<String>], n_merges: usize) -> Result<SubwordModel> {
    if corpus.is_empty() {
        return Err(Error::invalid("learn_bpe: empty corpus"));
    }
    // unique words with frequencies, in deterministic order
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for word in sentence {
            if !word.is_empty() {
                *freq.entry(word.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), f))
        .collect();

    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, f) in &words {
            for pair in symbols.windows(2) {
                *counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += f;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, _)) = best else {
            break;
        };
        for (symbols, _) in words.iter_mut() {
            *symbols = merge_pair_in_word(symbols, &pair);
        }
        merges.push(pair);
    }
    Ok(SubwordModel::new(merges))
}

/// Replace non-overlapping occurrences of `pair`, scanning left to right.
fn merge_pair_in_word(word: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}

/// Segment one word by replaying the model's merges in learned order.
pub fn segment_word(model: &SubwordModel, word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    for pair in &model.merges {
        if symbols.len() < 2 {
            break;
        }
        symbols = merge_pair_in_word(&symbols, pair);
    }
    symbols
}

/// Apply BPE to a token sequence. Non-final pieces of each word carry the
/// continuation marker. Unknown characters pass through as single symbols.
pub fn apply_bpe(model: &SubwordModel, tokens: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for word in tokens {
        let pieces = segment_word(model, word);
        let last = pieces.len().saturating_sub(1);
        for (i, piece) in pieces.into_iter().enumerate() {
            if i < last {
                out.push(format!("{piece}{}", model.continuation_marker));
            } else {
                out.push(piece);
            }
        }
    }
    out
}

/// Concatenate marker-carrying pieces with their successors; the inverse of
/// [`apply_bpe`]. A dangling marker at sequence end keeps the piece, strips
/// the marker, and reports a warning flag.
pub fn merge_subwords(subwords: &[String]) -> (Vec<String>, bool) {
    let marker = CONTINUATION_MARKER;
    let mut out: Vec<String> = Vec::with_capacity(subwords.len());
    let mut pending = String::new();
    let mut dangling = false;
    for piece in subwords {
        match piece.strip_suffix(marker) {
            Some(stem) => pending.push_str(stem),
            None => {
                pending.push_str(piece);
                out.push(std::mem::take(&mut pending));
            }
        }
    }
    if !pending.is_empty() {
        dangling = true;
        out.push(pending);
    }
    (out, dangling)
}

/// Bidirectional token/id map with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from a subword corpus: specials first, then tokens ordered by
    /// descending frequency with lexicographic tie-break.
    pub fn build(corpus: &[Vec<String>]) -> Self {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for sentence in corpus {
            for tok in sentence {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, _)| !is_special(t))
            .collect();
        entries.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        let tokens = entries.into_iter().map(|(t, _)| t.to_string()).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// "token<TAB>id" per line; ids 0-3 are the reserved specials.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for (i, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{i}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut rows: Vec<(String, u32)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((tok, id)) = line.split_once('\t') else {
                return Err(Error::Format(format!(
                    "vocab {}: line {} lacks a tab",
                    path.display(),
                    ln + 1
                )));
            };
            let id: u32 = id.parse().map_err(|_| {
                Error::Format(format!("vocab {}: bad id on line {}", path.display(), ln + 1))
            })?;
            rows.push((tok.to_string(), id));
        }
        rows.sort_by_key(|(_, id)| *id);
        for (expect, (tok, id)) in rows.iter().enumerate() {
            if *id != expect as u32 {
                return Err(Error::Format(format!(
                    "vocab {}: ids not dense at {tok}",
                    path.display()
                )));
            }
        }
        let specials = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        for (i, s) in specials.iter().enumerate() {
            if rows.get(i).map(|(t, _)| t.as_str()) != Some(*s) {
                return Err(Error::Format(format!(
                    "vocab {}: reserved id {i} must be {s}",
                    path.display()
                )));
            }
        }
        let tokens = rows.into_iter().skip(4).map(|(t, _)| t).collect();
        Ok(Self::from_tokens(tokens))
    }
}

fn is_special(token: &str) -> bool {
    matches!(token, PAD_TOKEN | BOS_TOKEN | EOS_TOKEN | UNK_TOKEN)
}
