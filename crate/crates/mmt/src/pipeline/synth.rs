//! Synthetic multimodal task generation and the WER-targeted noise
//! simulator that stands in for the upstream recognizer.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::wer;
use crate::features::{
    write_features, FeatureTag, VisualFeature, AVGPOOL_DIM, AVGPOOL_ROWS, CONV_CHANNELS,
    CONV_ROWS, N_ACTION_CATEGORIES,
};

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Synthetic task shape. Each sentence has a hidden action category; the
/// target contains one designated word that is a function of the category,
/// while the source text is category-ambiguous. Only the visual features
/// carry the category, so a model must read them to get that word right.
#[derive(Clone, Debug)]
pub struct SynthOpts {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub src_words: usize,
    pub tgt_words: usize,
    pub n_categories: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Gaussian noise added to every feature entry.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthOpts {
    fn default() -> Self {
        SynthOpts {
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            src_words: 30,
            tgt_words: 30,
            n_categories: 16,
            min_len: 4,
            max_len: 8,
            noise_sigma: 0.01,
            seed: 1,
        }
    }
}

impl SynthOpts {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories > N_ACTION_CATEGORIES {
            return Err(Error::invalid(format!(
                "n_categories {} exceeds {N_ACTION_CATEGORIES}",
                self.n_categories
            )));
        }
        // the pooled layout stores the category inside one 64-wide row
        if self.n_categories > 64 {
            return Err(Error::invalid(
                "n_categories above 64 does not fit the pooled feature layout",
            ));
        }
        if self.n_categories < 2 {
            return Err(Error::invalid("need at least 2 categories"));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::invalid("bad sentence length range"));
        }
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::invalid("all splits must be non-empty"));
        }
        Ok(())
    }
}

/// One generated sentence with its hidden category.
#[derive(Clone, Debug)]
pub struct SynthSentence {
    pub source: String,
    pub target: String,
    pub category: usize,
}

/// The designated target word for a category.
pub fn category_word(category: usize) -> String {
    format!("act{category}")
}

fn generate_sentence(opts: &SynthOpts, rng: &mut ChaCha8Rng) -> SynthSentence {
    let category = rng.gen_range(0..opts.n_categories);
    let len = rng.gen_range(opts.min_len..=opts.max_len);
    let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..opts.src_words)).collect();
    let source = words
        .iter()
        .map(|w| format!("src{w}"))
        .collect::<Vec<_>>()
        .join(" ");
    // word-for-word mapping with the category word spliced into the middle
    let mut tgt: Vec<String> = words
        .iter()
        .map(|w| format!("tgt{}", w % opts.tgt_words))
        .collect();
    tgt.insert(len / 2, category_word(category));
    SynthSentence {
        source,
        target: tgt.join(" "),
        category,
    }
}

fn features_for(
    opts: &SynthOpts,
    category: usize,
    rng: &mut ChaCha8Rng,
) -> (VisualFeature, VisualFeature, VisualFeature) {
    let noise = Normal::new(0.0f64, opts.noise_sigma as f64).unwrap();
    // pooled: every 64-wide row carries a one-hot at the category column,
    // so any attention pattern over the 32 rows recovers it
    let mut avgpool = vec![0.0f32; AVGPOOL_DIM];
    for (i, v) in avgpool.iter_mut().enumerate() {
        let hot = i % (AVGPOOL_DIM / AVGPOOL_ROWS) == category;
        *v = (if hot { 1.0 } else { 0.0 }) + noise.sample(rng) as f32;
    }
    // conv: every region's channel vector is one-hot at the category
    let mut conv = vec![0.0f32; CONV_ROWS * CONV_CHANNELS];
    for (i, v) in conv.iter_mut().enumerate() {
        let hot = i % CONV_CHANNELS == category;
        *v = (if hot { 1.0 } else { 0.0 }) + noise.sample(rng) as f32;
    }
    // action scores: the category stands far above the noise floor
    let mut actions = vec![0.0f32; N_ACTION_CATEGORIES];
    for (i, v) in actions.iter_mut().enumerate() {
        *v = (if i == category { 5.0 } else { 0.0 }) + noise.sample(rng) as f32;
    }
    (
        VisualFeature::AvgPool(avgpool),
        VisualFeature::Conv(conv),
        VisualFeature::ActionScores(actions),
    )
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Corpus and feature file names inside a task directory.
pub fn corpus_file(split: &str, side: &str) -> String {
    format!("{split}.{side}")
}

pub fn feature_file(tag: FeatureTag, split: &str) -> String {
    format!("features.{}.{}.bin", tag.name(), split)
}

/// Generate the task into `dir`: one source/target pair of files per split
/// plus aligned feature files for the requested tags.
pub fn make_synthetic_task(dir: &Path, opts: &SynthOpts, tags: &[FeatureTag]) -> Result<()> {
    opts.validate()?;
    fs::create_dir_all(dir)?;
    for (split, count, salt) in [
        ("train", opts.n_train, 0x1u64),
        ("valid", opts.n_valid, 0x2),
        ("test", opts.n_test, 0x3),
    ] {
        let mut text_rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, salt));
        let mut feat_rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, salt ^ 0xF00D));
        let sentences: Vec<SynthSentence> = (0..count)
            .map(|_| generate_sentence(opts, &mut text_rng))
            .collect();
        let mut avgpool = Vec::with_capacity(count);
        let mut conv = Vec::with_capacity(count);
        let mut actions = Vec::with_capacity(count);
        for s in &sentences {
            let (a, c, t) = features_for(opts, s.category, &mut feat_rng);
            avgpool.push(a);
            conv.push(c);
            actions.push(t);
        }
        let src: String = sentences
            .iter()
            .map(|s| s.source.as_str())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        let tgt: String = sentences
            .iter()
            .map(|s| s.target.as_str())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        fs::write(dir.join(corpus_file(split, "src")), src)?;
        fs::write(dir.join(corpus_file(split, "tgt")), tgt)?;
        for tag in tags {
            let feats = match tag {
                FeatureTag::AvgPool => &avgpool,
                FeatureTag::Conv => &conv,
                FeatureTag::ActionScores => &actions,
            };
            write_features(&dir.join(feature_file(*tag, split)), *tag, feats)?;
        }
    }
    Ok(())
}

// ---- ASR noise simulation -------------------------------------------------

const SUBSTITUTE_P: f64 = 0.7;
const DELETE_P: f64 = 0.2;
const MAX_CALIBRATION_ATTEMPTS: usize = 12;
const WER_TOLERANCE: f64 = 0.02;

fn unigram_table(lines: &[Vec<String>]) -> (Vec<String>, Vec<u64>) {
    let mut freq: std::collections::BTreeMap<&str, u64> = std::collections::BTreeMap::new();
    for line in lines {
        for tok in line {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut tokens = Vec::with_capacity(freq.len());
    let mut cum = Vec::with_capacity(freq.len());
    let mut total = 0;
    for (tok, f) in freq {
        total += f;
        tokens.push(tok.to_string());
        cum.push(total);
    }
    (tokens, cum)
}

fn sample_token<'a>(tokens: &'a [String], cum: &[u64], rng: &mut ChaCha8Rng) -> &'a str {
    let total = *cum.last().expect("non-empty corpus");
    let x = rng.gen_range(0..total);
    let idx = cum.partition_point(|&c| c <= x);
    &tokens[idx]
}

fn apply_noise(
    lines: &[Vec<String>],
    rate: f64,
    tokens: &[String],
    cum: &[u64],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|line| {
            let mut out = Vec::with_capacity(line.len() + 2);
            for tok in line {
                if rng.gen_bool(rate.min(1.0)) {
                    let kind: f64 = rng.gen();
                    if kind < SUBSTITUTE_P {
                        out.push(sample_token(tokens, cum, rng).to_string());
                    } else if kind < SUBSTITUTE_P + DELETE_P {
                        // deletion: drop the token
                    } else {
                        out.push(tok.clone());
                        out.push(sample_token(tokens, cum, rng).to_string());
                    }
                } else {
                    out.push(tok.clone());
                }
            }
            out
        })
        .collect()
}

/// Corpus-level WER of a noisy corpus against the clean one.
pub fn corpus_wer(noisy: &[Vec<String>], clean: &[Vec<String>]) -> f64 {
    let mut distance = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in noisy.iter().zip(clean) {
        let rep = wer(h, r);
        distance += rep.distance;
        ref_len += rep.ref_len;
    }
    if ref_len == 0 {
        0.0
    } else {
        distance as f64 / ref_len as f64
    }
}

/// Whitespace-tokenized noisy copy of `lines` whose measured corpus WER
/// lands within 0.02 of `target_wer`. Per-token edits mix substitutions,
/// deletions and insertions 70/20/10; the edit rate is calibrated against
/// the measured WER over a bounded number of seeded attempts.
pub fn noise_transcripts(lines: &[String], target_wer: f64, seed: u64) -> Result<Vec<String>> {
    if !(0.0..1.0).contains(&target_wer) {
        return Err(Error::invalid(format!(
            "target_wer {target_wer} outside [0, 1)"
        )));
    }
    let clean: Vec<Vec<String>> = lines
        .iter()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect();
    if target_wer == 0.0 {
        return Ok(lines.to_vec());
    }
    if clean.iter().all(|l| l.is_empty()) {
        return Err(Error::invalid("noise_transcripts: corpus has no tokens"));
    }
    let (tokens, cum) = unigram_table(&clean);

    let mut rate = target_wer;
    let mut best: Option<(f64, Vec<Vec<String>>)> = None;
    for attempt in 0..MAX_CALIBRATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, attempt as u64));
        let noisy = apply_noise(&clean, rate, &tokens, &cum, &mut rng);
        let measured = corpus_wer(&noisy, &clean);
        let err = (measured - target_wer).abs();
        if err <= WER_TOLERANCE {
            return Ok(noisy.iter().map(|l| l.join(" ")).collect());
        }
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, noisy));
        }
        if measured > 0.0 {
            rate = (rate * target_wer / measured).clamp(1e-4, 0.98);
        } else {
            rate = (rate * 2.0).clamp(1e-4, 0.98);
        }
    }
    Err(Error::Train(format!(
        "noise calibration failed to reach WER {target_wer} within ±{WER_TOLERANCE} after {MAX_CALIBRATION_ATTEMPTS} attempts (closest {:.4})",
        best.map(|(e, _)| e + target_wer).unwrap_or(f64::NAN)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::load_features;

    fn read_lines(path: &Path) -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.to_string())
            .collect()
    }

    fn small_opts() -> SynthOpts {
        SynthOpts {
            n_train: 30,
            n_valid: 8,
            n_test: 8,
            seed: 5,
            ..SynthOpts::default()
        }
    }

    #[test]
    fn synthetic_task_is_deterministic_and_loads_back() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let tags = [FeatureTag::AvgPool, FeatureTag::ActionScores];
        make_synthetic_task(dir_a.path(), &small_opts(), &tags).unwrap();
        make_synthetic_task(dir_b.path(), &small_opts(), &tags).unwrap();
        for split in SPLITS {
            for side in ["src", "tgt"] {
                let a = fs::read(dir_a.path().join(corpus_file(split, side))).unwrap();
                let b = fs::read(dir_b.path().join(corpus_file(split, side))).unwrap();
                assert_eq!(a, b, "{split}.{side} must be seed-deterministic");
            }
            for tag in tags {
                let a = fs::read(dir_a.path().join(feature_file(tag, split))).unwrap();
                let b = fs::read(dir_b.path().join(feature_file(tag, split))).unwrap();
                assert_eq!(a, b);
            }
        }
        // format roundtrip through the loader, aligned with the corpus
        let n = read_lines(&dir_a.path().join(corpus_file("train", "src"))).len();
        let feats = load_features(
            &dir_a.path().join(feature_file(FeatureTag::AvgPool, "train")),
            FeatureTag::AvgPool,
        )
        .unwrap();
        assert_eq!(feats.len(), n);
    }

    #[test]
    fn features_recover_the_category_and_text_does_not_leak_it() {
        let dir = tempfile::tempdir().unwrap();
        let opts = small_opts();
        make_synthetic_task(dir.path(), &opts, &[FeatureTag::AvgPool, FeatureTag::ActionScores])
            .unwrap();
        let srcs = read_lines(&dir.path().join(corpus_file("test", "src")));
        let tgts = read_lines(&dir.path().join(corpus_file("test", "tgt")));
        let actions = load_features(
            &dir.path().join(feature_file(FeatureTag::ActionScores, "test")),
            FeatureTag::ActionScores,
        )
        .unwrap();
        let avgpool = load_features(
            &dir.path().join(feature_file(FeatureTag::AvgPool, "test")),
            FeatureTag::AvgPool,
        )
        .unwrap();
        for ((src, tgt), (a, p)) in srcs.iter().zip(&tgts).zip(actions.iter().zip(&avgpool)) {
            // oracle with features: argmax score == argmax pooled column
            let scores = a.values();
            let c_scores = (0..opts.n_categories)
                .max_by(|&x, &y| scores[x].partial_cmp(&scores[y]).unwrap())
                .unwrap();
            let pool = p.values();
            let col_sum = |j: usize| -> f32 { (0..32).map(|r| pool[r * 64 + j]).sum() };
            let c_pool = (0..opts.n_categories)
                .max_by(|&x, &y| col_sum(x).partial_cmp(&col_sum(y)).unwrap())
                .unwrap();
            assert_eq!(c_scores, c_pool);
            // the designated word in the target matches the feature category
            assert!(
                tgt.split_whitespace()
                    .any(|w| w == category_word(c_scores)),
                "target must contain the category word"
            );
            // the source never names a category
            assert!(src.split_whitespace().all(|w| !w.starts_with("act")));
        }
    }

    #[test]
    fn synth_rejects_bad_category_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = small_opts();
        opts.n_categories = 400;
        assert!(make_synthetic_task(dir.path(), &opts, &[]).is_err());
        opts.n_categories = 65;
        assert!(make_synthetic_task(dir.path(), &opts, &[]).is_err());
    }

    fn sample_corpus(n: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(4..12);
                (0..len)
                    .map(|_| format!("w{}", rng.gen_range(0..50)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn zero_target_returns_input_verbatim() {
        let corpus = sample_corpus(20);
        assert_eq!(noise_transcripts(&corpus, 0.0, 9).unwrap(), corpus);
    }

    #[test]
    fn nineteen_percent_target_lands_in_band() {
        let corpus = sample_corpus(300);
        let noisy = noise_transcripts(&corpus, 0.19, 11).unwrap();
        let measured = corpus_wer(
            &noisy
                .iter()
                .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
                .collect::<Vec<_>>(),
            &corpus
                .iter()
                .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
                .collect::<Vec<_>>(),
        );
        assert!(
            (0.17..=0.21).contains(&measured),
            "measured WER {measured}"
        );
    }

    #[test]
    fn same_seed_gives_bit_identical_output() {
        let corpus = sample_corpus(100);
        let a = noise_transcripts(&corpus, 0.25, 42).unwrap();
        let b = noise_transcripts(&corpus, 0.25, 42).unwrap();
        assert_eq!(a, b);
        let c = noise_transcripts(&corpus, 0.25, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wer_band_holds_across_fifty_seeds() {
        let corpus = sample_corpus(200);
        let clean: Vec<Vec<String>> = corpus
            .iter()
            .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
            .collect();
        let mut hits = 0;
        for seed in 0..50 {
            if let Ok(noisy) = noise_transcripts(&corpus, 0.19, seed) {
                let noisy: Vec<Vec<String>> = noisy
                    .iter()
                    .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
                    .collect();
                let m = corpus_wer(&noisy, &clean);
                if (0.17..=0.21).contains(&m) {
                    hits += 1;
                }
            }
        }
        assert!(hits >= 48, "only {hits}/50 seeds inside the band");
    }

    #[test]
    fn unreachable_target_errors_after_bounded_attempts() {
        // single-token lines, target close to 1: substitutions max out
        // around one error per token but deletions/insertions interact,
        // leaving the band unreachable
        let corpus: Vec<String> = (0..40).map(|i| format!("w{}", i % 3)).collect();
        assert!(noise_transcripts(&corpus, 0.97, 5).is_err());
    }
}
