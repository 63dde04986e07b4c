//! Corpus ingestion: tokenization, optional source noise, BPE, vocabulary
//! construction and id encoding for all three splits.

use std::fs;
use std::path::Path;

use super::config::DataPaths;
use super::synth::noise_transcripts;
use crate::error::{Error, Result};
use crate::features::{load_features_aligned, VisualFeature};
use crate::model::VisualMode;
use crate::subword::{apply_bpe, learn_bpe, tokenize, SubwordModel, Vocabulary, EOS_ID};

/// One encoded parallel sentence.
#[derive(Clone, Debug)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// A fully prepared split: encoded pairs plus the tokenized (word-level)
/// references used for BLEU.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub pairs: Vec<SentencePair>,
    pub src_words: Vec<Vec<String>>,
    pub refs: Vec<Vec<String>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Tokenized text, subword models, vocabularies and encoded splits.
pub struct PreparedData {
    pub src_model: SubwordModel,
    pub tgt_model: SubwordModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn tokenize_lines(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| tokenize(l)).collect()
}

/// Subword-encode one tokenized corpus with a model and vocabulary; every
/// sentence gains a terminating EOS on the target side at loss time, so
/// none is added here.
fn encode_corpus(
    words: &[Vec<String>],
    model: &SubwordModel,
    vocab: &Vocabulary,
) -> Vec<Vec<u32>> {
    words
        .iter()
        .map(|sent| vocab.encode(&apply_bpe(model, sent)))
        .collect()
}

/// Load and prepare everything: read the six corpus files, optionally noise
/// the sources at the configured WER, tokenize, learn BPE on the training
/// split, apply it everywhere, build vocabularies and encode.
pub fn prepare(paths: &DataPaths) -> Result<PreparedData> {
    let mut src_lines = [
        read_lines(&paths.train_src)?,
        read_lines(&paths.valid_src)?,
        read_lines(&paths.test_src)?,
    ];
    let tgt_lines = [
        read_lines(&paths.train_tgt)?,
        read_lines(&paths.valid_tgt)?,
        read_lines(&paths.test_tgt)?,
    ];
    for (i, name) in ["train", "valid", "test"].iter().enumerate() {
        if src_lines[i].len() != tgt_lines[i].len() {
            return Err(Error::Alignment(format!(
                "{name}: {} source lines vs {} target lines",
                src_lines[i].len(),
                tgt_lines[i].len()
            )));
        }
        if src_lines[i].is_empty() {
            return Err(Error::invalid(format!("{name}: empty corpus")));
        }
    }
    if paths.noise_wer > 0.0 {
        // the recognizer transcribes the whole dataset, so the WER target
        // is calibrated once over the concatenated sources
        let boundaries = [src_lines[0].len(), src_lines[1].len()];
        let all: Vec<String> = src_lines.concat();
        let noisy = noise_transcripts(&all, paths.noise_wer, paths.noise_seed)?;
        let (train, rest) = noisy.split_at(boundaries[0]);
        let (valid, test) = rest.split_at(boundaries[1]);
        src_lines = [train.to_vec(), valid.to_vec(), test.to_vec()];
    }

    let src_words: Vec<Vec<Vec<String>>> = src_lines.iter().map(|l| tokenize_lines(l)).collect();
    let tgt_words: Vec<Vec<Vec<String>>> = tgt_lines.iter().map(|l| tokenize_lines(l)).collect();

    let src_model = learn_bpe(&src_words[0], paths.bpe_merges)?;
    let tgt_model = learn_bpe(&tgt_words[0], paths.bpe_merges)?;

    let src_sub_train: Vec<Vec<String>> = src_words[0]
        .iter()
        .map(|s| apply_bpe(&src_model, s))
        .collect();
    let tgt_sub_train: Vec<Vec<String>> = tgt_words[0]
        .iter()
        .map(|s| apply_bpe(&tgt_model, s))
        .collect();
    let src_vocab = Vocabulary::build(&src_sub_train);
    let tgt_vocab = Vocabulary::build(&tgt_sub_train);

    let mut splits = Vec::with_capacity(3);
    for i in 0..3 {
        let pairs = encode_corpus(&src_words[i], &src_model, &src_vocab)
            .into_iter()
            .zip(encode_corpus(&tgt_words[i], &tgt_model, &tgt_vocab))
            .map(|(src, tgt)| SentencePair { src, tgt })
            .collect();
        splits.push(Split {
            pairs,
            src_words: src_words[i].clone(),
            refs: tgt_words[i].clone(),
        });
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(PreparedData {
        src_model,
        tgt_model,
        src_vocab,
        tgt_vocab,
        train,
        valid,
        test,
    })
}

/// Features of one split for the configured setup; `None` for text-only.
pub type SplitFeatures = Option<Vec<VisualFeature>>;

pub struct SetupFeatures {
    pub train: SplitFeatures,
    pub valid: SplitFeatures,
    pub test: SplitFeatures,
}

impl SetupFeatures {
    pub fn none() -> Self {
        SetupFeatures {
            train: None,
            valid: None,
            test: None,
        }
    }

    pub fn get(&self, split: &str) -> &SplitFeatures {
        match split {
            "train" => &self.train,
            "valid" => &self.valid,
            _ => &self.test,
        }
    }
}

/// Load the feature files a setup needs, aligned with the prepared splits.
pub fn load_setup_features(
    paths: &DataPaths,
    mode: VisualMode,
    data: &PreparedData,
) -> Result<SetupFeatures> {
    let Some(tag) = mode.feature_tag() else {
        return Ok(SetupFeatures::none());
    };
    let load = |split: &str, n: usize| -> Result<SplitFeatures> {
        let path = paths.feature_path(tag, split)?;
        Ok(Some(load_features_aligned(path, tag, n)?))
    };
    Ok(SetupFeatures {
        train: load("train", data.train.len())?,
        valid: load("valid", data.valid.len())?,
        test: load("test", data.test.len())?,
    })
}

/// Decode model output ids back to words: strip EOS, map ids to subwords,
/// merge the continuation markers.
pub fn ids_to_words(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    let cut = ids
        .iter()
        .position(|&t| t == EOS_ID)
        .unwrap_or(ids.len());
    let subwords = vocab.decode(&ids[..cut]);
    crate::subword::merge_subwords(&subwords).0
}

pub fn words_to_line(words: &[String]) -> String {
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{write_features, FeatureTag, AVGPOOL_DIM};
    use std::path::PathBuf;

    fn write_corpus(dir: &Path) -> DataPaths {
        let mk = |name: &str, lines: &[&str]| -> PathBuf {
            let p = dir.join(name);
            fs::write(&p, lines.join("\n") + "\n").unwrap();
            p
        };
        let train_src = mk("train.src", &["the cat sat", "a dog ran fast", "the bird flew"]);
        let train_tgt = mk("train.tgt", &["le chat assis", "un chien vite", "le oiseau vola"]);
        let valid_src = mk("valid.src", &["the cat ran"]);
        let valid_tgt = mk("valid.tgt", &["le chat vite"]);
        let test_src = mk("test.src", &["a bird sat"]);
        let test_tgt = mk("test.tgt", &["un oiseau assis"]);
        DataPaths {
            train_src,
            train_tgt,
            valid_src,
            valid_tgt,
            test_src,
            test_tgt,
            features: Default::default(),
            bpe_merges: 8,
            noise_wer: 0.0,
            noise_seed: 0,
        }
    }

    #[test]
    fn prepare_builds_consistent_vocabularies_and_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path());
        let data = prepare(&paths).unwrap();
        assert_eq!(data.train.len(), 3);
        assert_eq!(data.valid.len(), 1);
        assert_eq!(data.test.len(), 1);
        assert!(data.src_vocab.len() > 4);
        // roundtrip: encoded train target decodes back to the reference
        for (pair, reference) in data.train.pairs.iter().zip(&data.train.refs) {
            let words = ids_to_words(&pair.tgt, &data.tgt_vocab);
            assert_eq!(&words, reference);
        }
    }

    #[test]
    fn misaligned_corpus_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path());
        fs::write(&paths.train_tgt, "only one line\n").unwrap();
        assert!(matches!(prepare(&paths), Err(Error::Alignment(_))));
    }

    #[test]
    fn setup_features_align_with_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = write_corpus(dir.path());
        let feats = |n: usize| -> Vec<VisualFeature> {
            (0..n)
                .map(|i| VisualFeature::AvgPool(vec![i as f32; AVGPOOL_DIM]))
                .collect()
        };
        for (split, n) in [("train", 3usize), ("valid", 1), ("test", 1)] {
            let p = dir.path().join(format!("f.{split}.bin"));
            write_features(&p, FeatureTag::AvgPool, &feats(n)).unwrap();
            paths
                .features
                .insert(("avgpool".to_string(), split.to_string()), p);
        }
        let data = prepare(&paths).unwrap();
        let sf = load_setup_features(&paths, VisualMode::AttnAvgPool, &data).unwrap();
        assert_eq!(sf.train.as_ref().unwrap().len(), 3);
        assert_eq!(sf.test.as_ref().unwrap().len(), 1);
        // text-only setups skip feature files entirely
        let none = load_setup_features(&paths, VisualMode::None, &data).unwrap();
        assert!(none.train.is_none());
    }

    #[test]
    fn source_noise_applies_when_configured() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = write_corpus(dir.path());
        // enlarge the train split so the WER band is reachable
        let lines: Vec<String> = (0..200)
            .map(|i| format!("w{} w{} w{} w{} w{}", i % 7, (i + 1) % 7, (i + 2) % 7, i % 5, i % 3))
            .collect();
        fs::write(&paths.train_src, lines.join("\n") + "\n").unwrap();
        fs::write(
            &paths.train_tgt,
            lines.join("\n") + "\n",
        )
        .unwrap();
        paths.noise_wer = 0.19;
        paths.noise_seed = 4;
        let noisy = prepare(&paths).unwrap();
        paths.noise_wer = 0.0;
        let clean = prepare(&paths).unwrap();
        assert_ne!(
            noisy.train.src_words, clean.train.src_words,
            "noise must perturb the sources"
        );
        assert_eq!(
            noisy.train.refs, clean.train.refs,
            "targets stay clean"
        );
    }
}
