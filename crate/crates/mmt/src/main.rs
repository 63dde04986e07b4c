//! Command-line front end: data synthesis, text processing, training,
//! decoding and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use mmt::decode::write_permutation;
use mmt::error::{Error, Result};
use mmt::eval::{corpus_bleu, significance, SignificanceMethod, Smoothing};
use mmt::features::{load_features_aligned, FeatureTag};
use mmt::model::ModelConfig;
use mmt::pipeline::config::{experiment_from, model_config_from, ConfigFile, DataPaths, TrainOpts};
use mmt::pipeline::data::{ids_to_words, prepare, read_lines};
use mmt::pipeline::matrix::run_matrix;
use mmt::pipeline::train::train_system;
use mmt::pipeline::{decode_test_set, make_synthetic_task, noise_transcripts, Checkpoint, SynthOpts, System};
use mmt::subword::{apply_bpe, learn_bpe, tokenize, SubwordModel, Vocabulary};

#[derive(Parser)]
#[command(name = "mmt", about = "Multimodal machine translation workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TagArg {
    Avgpool,
    Conv,
    Actions,
}

impl TagArg {
    fn tag(self) -> FeatureTag {
        match self {
            TagArg::Avgpool => FeatureTag::AvgPool,
            TagArg::Conv => FeatureTag::Conv,
            TagArg::Actions => FeatureTag::ActionScores,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ar,
    Bootstrap,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multimodal task into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        valid: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 16)]
        categories: usize,
        #[arg(long, default_value_t = 30)]
        src_words: usize,
        #[arg(long, default_value_t = 30)]
        tgt_words: usize,
        /// Feature kinds to emit (conv files are large).
        #[arg(long, value_enum, value_delimiter = ',',
              default_values_t = [TagArg::Avgpool, TagArg::Conv, TagArg::Actions])]
        tags: Vec<TagArg>,
    },
    /// Apply WER-calibrated noise to a text file, one sentence per line.
    Noise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target_wer: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a BPE merge list from one or more corpora.
    BpeLearn {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 500)]
        merges: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a corpus with a learned merge list.
    BpeApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the system described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate a text file with a trained model directory.
    Translate {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        smoothing: bool,
    },
    /// Congruent vs incongruent decoding of a test set.
    Incongruent {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 10000)]
        iterations: usize,
    },
    /// Paired significance test between two hypothesis files.
    Significance {
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 10000)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MethodArg::Ar)]
        method: MethodArg,
        #[arg(long)]
        smoothing: bool,
    },
    /// Train and evaluate the full 3x5 system grid.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn tokenize_file(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

fn smoothing_flag(on: bool) -> Smoothing {
    if on {
        Smoothing::AddOne
    } else {
        Smoothing::None
    }
}

/// Artifacts written next to a trained checkpoint.
struct ModelDir {
    system: System,
    src_model: SubwordModel,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

impl ModelDir {
    fn load(dir: &Path) -> Result<ModelDir> {
        let ckpt = Checkpoint::load(&dir.join("checkpoint.mmt"))?;
        Ok(ModelDir {
            system: System::from_checkpoint(&ckpt)?,
            src_model: SubwordModel::load(&dir.join("src.merges"))?,
            src_vocab: Vocabulary::load(&dir.join("src.vocab"))?,
            tgt_vocab: Vocabulary::load(&dir.join("tgt.vocab"))?,
        })
    }

    fn encode_source(&self, lines: &[String]) -> Vec<Vec<u32>> {
        lines
            .iter()
            .map(|l| self.src_vocab.encode(&apply_bpe(&self.src_model, &tokenize(l))))
            .collect()
    }

    fn config(&self) -> &ModelConfig {
        self.system.config()
    }
}

fn load_model_features(
    model: &ModelConfig,
    path: Option<&Path>,
    n: usize,
) -> Result<Option<Vec<mmt::features::VisualFeature>>> {
    match (model.visual_mode.feature_tag(), path) {
        (Some(tag), Some(p)) => Ok(Some(load_features_aligned(p, tag, n)?)),
        (Some(tag), None) => Err(Error::invalid(format!(
            "this model needs {} features (--features)",
            tag.name()
        ))),
        (None, _) => Ok(None),
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            seed,
            train,
            valid,
            test,
            categories,
            src_words,
            tgt_words,
            tags,
        } => {
            let opts = SynthOpts {
                n_train: train,
                n_valid: valid,
                n_test: test,
                n_categories: categories,
                src_words,
                tgt_words,
                seed,
                ..SynthOpts::default()
            };
            let tags: Vec<FeatureTag> = tags.into_iter().map(|t| t.tag()).collect();
            make_synthetic_task(&out, &opts, &tags)?;
            println!("synthetic task written to {}", out.display());
        }
        Command::Noise {
            input,
            target_wer,
            seed,
            out,
        } => {
            let lines = read_lines(&input)?;
            let noisy = noise_transcripts(&lines, target_wer, seed)?;
            let measured = mmt::pipeline::synth::corpus_wer(
                &noisy.iter().map(|l| split_ws(l)).collect::<Vec<_>>(),
                &lines.iter().map(|l| split_ws(l)).collect::<Vec<_>>(),
            );
            fs::write(&out, noisy.join("\n") + "\n")?;
            println!("measured_wer {measured:.4}");
        }
        Command::BpeLearn { input, merges, out } => {
            let mut corpus = Vec::new();
            for path in &input {
                corpus.extend(tokenize_file(path)?);
            }
            let model = learn_bpe(&corpus, merges)?;
            model.save(&out)?;
            println!("learned {} merges", model.merges().len());
        }
        Command::BpeApply { model, input, out } => {
            let model = SubwordModel::load(&model)?;
            let lines: Vec<String> = tokenize_file(&input)?
                .iter()
                .map(|sent| apply_bpe(&model, sent).join(" "))
                .collect();
            fs::write(&out, lines.join("\n") + "\n")?;
        }
        Command::Train { config, out, seed } => {
            let cfg = ConfigFile::load(&config)?;
            let spec = experiment_from(&cfg, seed)?;
            let paths = DataPaths::from(&cfg)?;
            let opts = TrainOpts::from(&cfg)?;
            let data = prepare(&paths)?;
            let features = mmt::pipeline::data::load_setup_features(&paths, spec.setup, &data)?;
            fs::create_dir_all(&out)?;
            let mut log_lines = Vec::new();
            let outcome = train_system(&spec, &data, &features, &opts, &mut |s| {
                println!("{s}");
                log_lines.push(s.to_string());
            })?;
            outcome
                .system
                .to_checkpoint(outcome.optimizer.clone(), outcome.history.clone())
                .save(&out.join("checkpoint.mmt"))?;
            data.src_model.save(&out.join("src.merges"))?;
            data.tgt_model.save(&out.join("tgt.merges"))?;
            data.src_vocab.save(&out.join("src.vocab"))?;
            data.tgt_vocab.save(&out.join("tgt.vocab"))?;
            fs::write(out.join("train.log"), log_lines.join("\n") + "\n")?;
            println!(
                "best validation BLEU {:.2} ({:?}); artifacts in {}",
                outcome.best_bleu,
                outcome.stop,
                out.display()
            );
        }
        Command::Translate {
            model_dir,
            input,
            features,
            out,
            beam,
            alpha,
        } => {
            let model = ModelDir::load(&model_dir)?;
            let lines = read_lines(&input)?;
            let sources = model.encode_source(&lines);
            let feats = load_model_features(model.config(), features.as_deref(), sources.len())?;
            let mut output = Vec::with_capacity(sources.len());
            for (i, src) in sources.iter().enumerate() {
                let f = feats.as_ref().map(|v| &v[i]);
                let ids = model.system.translate(src, f, beam, alpha)?;
                output.push(ids_to_words(&ids, &model.tgt_vocab).join(" "));
            }
            fs::write(&out, output.join("\n") + "\n")?;
        }
        Command::Evaluate {
            hyp,
            reference,
            smoothing,
        } => {
            let hyps = tokenize_file(&hyp)?;
            let refs = tokenize_file(&reference)?;
            let report = corpus_bleu(&hyps, &refs, smoothing_flag(smoothing))?;
            print!("{}", report.pretty());
            println!("{}", report.machine_line());
        }
        Command::Incongruent {
            model_dir,
            input,
            features,
            reference,
            seed,
            out,
            beam,
            iterations,
        } => {
            let model = ModelDir::load(&model_dir)?;
            let lines = read_lines(&input)?;
            let refs = tokenize_file(&reference)?;
            let sources = model.encode_source(&lines);
            let pairs: Vec<mmt::pipeline::data::SentencePair> = sources
                .into_iter()
                .map(|src| mmt::pipeline::data::SentencePair { src, tgt: vec![] })
                .collect();
            let feats =
                load_model_features(model.config(), Some(features.as_path()), pairs.len())?;
            fs::create_dir_all(&out)?;
            let congruent = decode_test_set(
                &model.system,
                &pairs,
                &feats,
                &model.tgt_vocab,
                beam,
                0.0,
                None,
            )?;
            let incongruent = decode_test_set(
                &model.system,
                &pairs,
                &feats,
                &model.tgt_vocab,
                beam,
                0.0,
                Some(seed),
            )?;
            let cb = corpus_bleu(&congruent.outputs, &refs, Smoothing::None)?.bleu;
            let ib = corpus_bleu(&incongruent.outputs, &refs, Smoothing::None)?.bleu;
            let write = |name: &str, outputs: &[Vec<String>]| -> Result<()> {
                let text: String = outputs
                    .iter()
                    .map(|l| l.join(" "))
                    .collect::<Vec<_>>()
                    .join("\n")
                    + "\n";
                fs::write(out.join(name), text)?;
                Ok(())
            };
            write("congruent.txt", &congruent.outputs)?;
            write("incongruent.txt", &incongruent.outputs)?;
            if let Some(perm) = &incongruent.permutation {
                write_permutation(&out.join("permutation.txt"), perm, seed)?;
            }
            let (delta, p) = if incongruent.permutation.is_some() {
                let sig = significance(
                    &incongruent.outputs,
                    &congruent.outputs,
                    &refs,
                    iterations,
                    seed,
                    SignificanceMethod::ApproximateRandomization,
                    Smoothing::None,
                )?;
                (ib - cb, format!("{:.4}", sig.p_value))
            } else {
                (0.0, "-".to_string())
            };
            println!("congruent_bleu {cb:.2} incongruent_bleu {ib:.2} delta {delta:+.2} p {p}");
        }
        Command::Significance {
            hyp_a,
            hyp_b,
            reference,
            iterations,
            seed,
            method,
            smoothing,
        } => {
            let a = tokenize_file(&hyp_a)?;
            let b = tokenize_file(&hyp_b)?;
            let refs = tokenize_file(&reference)?;
            let method = match method {
                MethodArg::Ar => SignificanceMethod::ApproximateRandomization,
                MethodArg::Bootstrap => SignificanceMethod::Bootstrap,
            };
            let rep = significance(
                &a,
                &b,
                &refs,
                iterations,
                seed,
                method,
                smoothing_flag(smoothing),
            )?;
            println!(
                "bleu_a {:.2} bleu_b {:.2} delta {:+.2} p_value {:.4}",
                rep.bleu_a, rep.bleu_b, rep.delta_observed, rep.p_value
            );
        }
        Command::Matrix { config, out, seed } => {
            let cfg = ConfigFile::load(&config)?;
            let model = model_config_from(&cfg)?;
            let paths = DataPaths::from(&cfg)?;
            let opts = TrainOpts::from(&cfg)?;
            let seed = match seed {
                Some(s) => s,
                None => {
                    let e = cfg.section("experiment")?;
                    mmt::pipeline::config::parse_num(
                        "experiment",
                        "seed",
                        mmt::pipeline::config::required(e, "experiment", "seed")?,
                    )?
                }
            };
            let data = prepare(&paths)?;
            fs::create_dir_all(&out)?;
            let report = run_matrix(&model, seed, &data, &paths, &opts, Some(&out), &mut |s| {
                println!("{s}")
            })?;
            print!("{}", report.pretty());
            print!("{}", report.machine_lines());
        }
    }
    Ok(())
}

fn split_ws(line: &str) -> Vec<String> {
    line.split_whitespace().map(|t| t.to_string()).collect()
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
