//! Flat key=value experiment configuration with sections.
//!
//! Every architecture field is mandatory in experiment mode; the two
//! vocabulary sizes are data-derived and recorded in checkpoints instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Smoothing;
use crate::features::FeatureTag;
use crate::model::{Family, ModelConfig, VisualMode};

/// Parsed sections of a config file.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    ln + 1
                )));
            };
            if current.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key outside any [section]",
                    ln + 1
                )));
            }
            let prev = sections
                .get_mut(&current)
                .unwrap()
                .insert(key.trim().to_string(), value.trim().to_string());
            if prev.is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {}",
                    ln + 1,
                    key.trim()
                )));
            }
        }
        Ok(ConfigFile { sections })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn section(&self, name: &str) -> Result<&BTreeMap<String, String>> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing [{name}] section")))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }
}

pub fn required<'a>(map: &'a BTreeMap<String, String>, section: &str, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Config(format!("[{section}] is missing mandatory key {key}")))
}

pub fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {value:?} is not valid")))
}

fn required_num<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    section: &str,
    key: &str,
) -> Result<T> {
    parse_num(section, key, required(map, section, key)?)
}

fn optional_num<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    section: &str,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        Some(v) => parse_num(section, key, v),
        None => Ok(default),
    }
}

/// Model section -> ModelConfig (vocab sizes land later, from the data).
pub fn model_config_from(cfg: &ConfigFile) -> Result<ModelConfig> {
    let m = cfg.section("model")?;
    let known = [
        "d_model",
        "n_heads",
        "n_enc_blocks",
        "n_dec_blocks",
        "d_ffn",
        "dropout",
        "label_smoothing",
        "d_emb",
        "max_seq_len",
        "visual_blocks",
    ];
    for key in m.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::Config(format!("[model] has unknown key {key}")));
        }
    }
    let visual_blocks = match m.get("visual_blocks") {
        None => None,
        Some(v) if v == "all" => None,
        Some(v) => Some(
            v.chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(Error::Config(format!(
                        "[model] visual_blocks must be \"all\" or a 0/1 string, got {v:?}"
                    ))),
                })
                .collect::<Result<Vec<bool>>>()?,
        ),
    };
    Ok(ModelConfig {
        d_model: required_num(m, "model", "d_model")?,
        n_heads: required_num(m, "model", "n_heads")?,
        n_enc_blocks: required_num(m, "model", "n_enc_blocks")?,
        n_dec_blocks: required_num(m, "model", "n_dec_blocks")?,
        d_ffn: required_num(m, "model", "d_ffn")?,
        dropout: required_num(m, "model", "dropout")?,
        label_smoothing: required_num(m, "model", "label_smoothing")?,
        src_vocab: 0,
        tgt_vocab: 0,
        family: Family::Transformer,
        visual_mode: VisualMode::None,
        d_emb: required_num(m, "model", "d_emb")?,
        max_seq_len: required_num(m, "model", "max_seq_len")?,
        seed: 0,
        visual_blocks,
    })
}

/// Canonical-string parser, the inverse of `ModelConfig::canonical_string`
/// (used when loading checkpoints).
pub fn model_config_from_canonical(text: &str) -> Result<ModelConfig> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&str> { required(&map, "checkpoint-config", key) };
    let num = |key: &str| -> Result<usize> { parse_num("checkpoint-config", key, get(key)?) };
    let fnum = |key: &str| -> Result<f64> { parse_num("checkpoint-config", key, get(key)?) };
    let visual_blocks = match get("visual_blocks")? {
        "all" => None,
        bits => Some(bits.chars().map(|c| c == '1').collect()),
    };
    Ok(ModelConfig {
        d_model: num("d_model")?,
        n_heads: num("n_heads")?,
        n_enc_blocks: num("n_enc_blocks")?,
        n_dec_blocks: num("n_dec_blocks")?,
        d_ffn: num("d_ffn")?,
        dropout: fnum("dropout")?,
        label_smoothing: fnum("label_smoothing")?,
        src_vocab: num("src_vocab")?,
        tgt_vocab: num("tgt_vocab")?,
        family: Family::parse(get("family")?)?,
        visual_mode: VisualMode::parse(get("visual_mode")?)?,
        d_emb: num("d_emb")?,
        max_seq_len: num("max_seq_len")?,
        seed: parse_num("checkpoint-config", "seed", get("seed")?)?,
        visual_blocks,
    })
}

/// Corpus and feature paths.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub valid_src: PathBuf,
    pub valid_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
    /// (tag, split) -> feature file
    pub features: BTreeMap<(String, String), PathBuf>,
    pub bpe_merges: usize,
    /// WER applied to every source split to mimic recognizer transcripts.
    pub noise_wer: f64,
    pub noise_seed: u64,
}

impl DataPaths {
    pub fn from(cfg: &ConfigFile) -> Result<DataPaths> {
        let d = cfg.section("data")?;
        let path = |key: &str| -> Result<PathBuf> { Ok(PathBuf::from(required(d, "data", key)?)) };
        let mut features = BTreeMap::new();
        for key in d.keys() {
            if let Some(rest) = key.strip_prefix("features_") {
                let Some((tag, split)) = rest.split_once('_') else {
                    return Err(Error::Config(format!(
                        "[data] {key}: expected features_<tag>_<split>"
                    )));
                };
                FeatureTag::parse(tag)?;
                if !["train", "valid", "test"].contains(&split) {
                    return Err(Error::Config(format!("[data] {key}: unknown split")));
                }
                features.insert(
                    (tag.to_string(), split.to_string()),
                    PathBuf::from(&d[key]),
                );
            }
        }
        Ok(DataPaths {
            train_src: path("train_src")?,
            train_tgt: path("train_tgt")?,
            valid_src: path("valid_src")?,
            valid_tgt: path("valid_tgt")?,
            test_src: path("test_src")?,
            test_tgt: path("test_tgt")?,
            features,
            bpe_merges: optional_num(d, "data", "bpe_merges", 500)?,
            noise_wer: optional_num(d, "data", "noise_wer", 0.0)?,
            noise_seed: optional_num(d, "data", "noise_seed", 0)?,
        })
    }

    /// Point at a directory produced by the synthetic-task generator.
    pub fn for_task_dir(dir: &Path, bpe_merges: usize) -> DataPaths {
        let mut features = BTreeMap::new();
        for tag in [FeatureTag::AvgPool, FeatureTag::Conv, FeatureTag::ActionScores] {
            for split in super::synth::SPLITS {
                let p = dir.join(super::synth::feature_file(tag, split));
                if p.exists() {
                    features.insert((tag.name().to_string(), split.to_string()), p);
                }
            }
        }
        DataPaths {
            train_src: dir.join("train.src"),
            train_tgt: dir.join("train.tgt"),
            valid_src: dir.join("valid.src"),
            valid_tgt: dir.join("valid.tgt"),
            test_src: dir.join("test.src"),
            test_tgt: dir.join("test.tgt"),
            features,
            bpe_merges,
            noise_wer: 0.0,
            noise_seed: 0,
        }
    }

    pub fn feature_path(&self, tag: FeatureTag, split: &str) -> Result<&Path> {
        self.features
            .get(&(tag.name().to_string(), split.to_string()))
            .map(|p| p.as_path())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no features_{}_{split} path configured",
                    tag.name()
                ))
            })
    }
}

/// Training loop knobs.
#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub batch_tokens: usize,
    pub max_epochs: usize,
    pub patience_transformer: usize,
    pub patience_deliberation: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beam: usize,
    pub n_best: usize,
    pub valid_beam: usize,
    pub length_alpha: f64,
    pub stage2_hypotheses: usize,
    pub significance_iterations: usize,
    pub bleu_smoothing: Smoothing,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            batch_tokens: 1024,
            max_epochs: 40,
            patience_transformer: 10,
            patience_deliberation: 3,
            base_lr: 0.02,
            warmup_steps: 8000,
            beam: 10,
            n_best: 10,
            valid_beam: 1,
            length_alpha: 0.0,
            stage2_hypotheses: 10,
            significance_iterations: 10000,
            bleu_smoothing: Smoothing::None,
        }
    }
}

impl TrainOpts {
    pub fn from(cfg: &ConfigFile) -> Result<TrainOpts> {
        let mut opts = TrainOpts::default();
        if !cfg.has_section("train") {
            return Ok(opts);
        }
        let t = cfg.section("train")?;
        for (key, value) in t {
            match key.as_str() {
                "batch_tokens" => opts.batch_tokens = parse_num("train", key, value)?,
                "max_epochs" => opts.max_epochs = parse_num("train", key, value)?,
                "patience_transformer" => {
                    opts.patience_transformer = parse_num("train", key, value)?
                }
                "patience_deliberation" => {
                    opts.patience_deliberation = parse_num("train", key, value)?
                }
                "base_lr" => opts.base_lr = parse_num("train", key, value)?,
                "warmup_steps" => opts.warmup_steps = parse_num("train", key, value)?,
                "beam" => opts.beam = parse_num("train", key, value)?,
                "n_best" => opts.n_best = parse_num("train", key, value)?,
                "valid_beam" => opts.valid_beam = parse_num("train", key, value)?,
                "length_alpha" => opts.length_alpha = parse_num("train", key, value)?,
                "stage2_hypotheses" => opts.stage2_hypotheses = parse_num("train", key, value)?,
                "significance_iterations" => {
                    opts.significance_iterations = parse_num("train", key, value)?
                }
                "bleu_smoothing" => {
                    opts.bleu_smoothing = match value.as_str() {
                        "none" => Smoothing::None,
                        "add-one" => Smoothing::AddOne,
                        other => {
                            return Err(Error::Config(format!(
                                "[train] bleu_smoothing must be none or add-one, got {other:?}"
                            )))
                        }
                    }
                }
                other => {
                    return Err(Error::Config(format!("[train] has unknown key {other}")));
                }
            }
        }
        Ok(opts)
    }
}

/// One cell of the experiment grid.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub family: Family,
    pub setup: VisualMode,
    pub model: ModelConfig,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn resolved_config(&self) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.family = self.family;
        cfg.visual_mode = self.setup;
        cfg.seed = self.seed;
        cfg
    }
}

/// Experiment section: family, setup and seed for a single `train` run.
pub fn experiment_from(cfg: &ConfigFile, seed_override: Option<u64>) -> Result<ExperimentSpec> {
    let e = cfg.section("experiment")?;
    let family = Family::parse(required(e, "experiment", "family")?)?;
    let setup = VisualMode::parse(required(e, "experiment", "setup")?)?;
    let seed = match seed_override {
        Some(s) => s,
        None => required_num(e, "experiment", "seed")?,
    };
    Ok(ExperimentSpec {
        family,
        setup,
        model: model_config_from(cfg)?,
        seed,
    })
}
