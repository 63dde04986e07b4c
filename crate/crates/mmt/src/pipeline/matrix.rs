//! The full experiment grid: three families times five setups, with
//! congruent and incongruent decoding, significance testing and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{DataPaths, ExperimentSpec, TrainOpts};
use super::data::{load_setup_features, PreparedData};
use super::train::train_system;
use super::decode_test_set;
use crate::decode::write_permutation;
use crate::error::Result;
use crate::eval::{corpus_bleu, significance, SignificanceMethod};
use crate::model::{Family, ModelConfig, VisualMode};

/// Incongruent-decoding outcome of one multimodal cell.
#[derive(Clone, Debug)]
pub struct IncongruentResult {
    pub bleu: f64,
    pub delta: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub family: Family,
    pub setup: VisualMode,
    pub outcome: std::result::Result<CellScores, String>,
}

#[derive(Clone, Debug)]
pub struct CellScores {
    pub congruent_bleu: f64,
    pub incongruent: Option<IncongruentResult>,
}

pub struct MatrixReport {
    pub cells: Vec<CellResult>,
    pub seed: u64,
}

impl MatrixReport {
    /// One machine-readable line per cell:
    /// `family setup congruent_bleu incongruent_bleu delta p_value`.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for cell in &self.cells {
            let line = match &cell.outcome {
                Ok(scores) => match &scores.incongruent {
                    Some(inc) => format!(
                        "{} {} {:.2} {:.2} {:+.2} {:.4}",
                        cell.family.label(),
                        cell.setup.label(),
                        scores.congruent_bleu,
                        inc.bleu,
                        inc.delta,
                        inc.p_value
                    ),
                    None => format!(
                        "{} {} {:.2} - - -",
                        cell.family.label(),
                        cell.setup.label(),
                        scores.congruent_bleu
                    ),
                },
                Err(_) => format!("{} {} failed - - -", cell.family.label(), cell.setup.label()),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    fn cell(&self, family: Family, setup: VisualMode) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.family == family && c.setup == setup)
    }

    /// Congruent BLEU grid (setups x families) plus the incongruent-delta
    /// grid with direction arrows and significance daggers.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        writeln!(out, "congruent BLEU (seed {})", self.seed).unwrap();
        write!(out, "{:<14}", "setup").unwrap();
        for f in Family::ALL {
            write!(out, "{:>10}", f.label()).unwrap();
        }
        out.push('\n');
        for setup in VisualMode::ALL {
            write!(out, "{:<14}", setup.label()).unwrap();
            for family in Family::ALL {
                let text = match self.cell(family, setup).map(|c| &c.outcome) {
                    Some(Ok(s)) => format!("{:.2}", s.congruent_bleu),
                    Some(Err(_)) => "failed".to_string(),
                    None => "-".to_string(),
                };
                write!(out, "{text:>10}").unwrap();
            }
            out.push('\n');
        }
        out.push('\n');
        writeln!(
            out,
            "incongruent decoding delta (vs congruent; † marks p <= 0.05)"
        )
        .unwrap();
        write!(out, "{:<14}", "setup").unwrap();
        for f in Family::ALL {
            write!(out, "{:>12}", f.label()).unwrap();
        }
        out.push('\n');
        for setup in VisualMode::ALL.into_iter().filter(|s| s.is_multimodal()) {
            write!(out, "{:<14}", setup.label()).unwrap();
            for family in Family::ALL {
                let text = match self.cell(family, setup).map(|c| &c.outcome) {
                    Some(Ok(s)) => match &s.incongruent {
                        Some(inc) => {
                            let arrow = if inc.delta < 0.0 {
                                "↓"
                            } else if inc.delta > 0.0 {
                                "↑"
                            } else {
                                " "
                            };
                            let dagger = if inc.p_value <= 0.05 { "†" } else { "" };
                            format!("{arrow}{:.2}{dagger}", inc.delta.abs())
                        }
                        None => "-".to_string(),
                    },
                    Some(Err(_)) => "failed".to_string(),
                    None => "-".to_string(),
                };
                write!(out, "{text:>12}").unwrap();
            }
            out.push('\n');
        }
        for cell in &self.cells {
            if let Err(e) = &cell.outcome {
                writeln!(
                    out,
                    "error {}/{}: {e}",
                    cell.family.label(),
                    cell.setup.label()
                )
                .unwrap();
            }
        }
        out
    }
}

fn run_cell(
    family: Family,
    setup: VisualMode,
    model: &ModelConfig,
    seed: u64,
    data: &PreparedData,
    paths: &DataPaths,
    opts: &TrainOpts,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<CellScores> {
    let spec = ExperimentSpec {
        family,
        setup,
        model: model.clone(),
        seed,
    };
    let features = load_setup_features(paths, setup, data)?;
    let outcome = train_system(&spec, data, &features, opts, log)?;
    let system = outcome.system;

    let congruent = decode_test_set(
        &system,
        &data.test.pairs,
        &features.test,
        &data.tgt_vocab,
        opts.beam,
        opts.length_alpha,
        None,
    )?;
    let congruent_bleu = corpus_bleu(&congruent.outputs, &data.test.refs, opts.bleu_smoothing)?.bleu;

    let incongruent = if setup.is_multimodal() {
        let run = decode_test_set(
            &system,
            &data.test.pairs,
            &features.test,
            &data.tgt_vocab,
            opts.beam,
            opts.length_alpha,
            Some(seed),
        )?;
        let bleu = corpus_bleu(&run.outputs, &data.test.refs, opts.bleu_smoothing)?.bleu;
        let sig = significance(
            &run.outputs,
            &congruent.outputs,
            &data.test.refs,
            opts.significance_iterations,
            seed,
            SignificanceMethod::ApproximateRandomization,
            opts.bleu_smoothing,
        )?;
        if let (Some(dir), Some(perm)) = (out_dir, &run.permutation) {
            write_permutation(&dir.join("permutation.txt"), perm, seed)?;
        }
        if let Some(dir) = out_dir {
            write_corpus(&dir.join("incongruent.txt"), &run.outputs)?;
        }
        Some(IncongruentResult {
            bleu,
            delta: bleu - congruent_bleu,
            p_value: sig.p_value,
        })
    } else {
        None
    };

    if let Some(dir) = out_dir {
        write_corpus(&dir.join("congruent.txt"), &congruent.outputs)?;
        system
            .to_checkpoint(outcome.optimizer, outcome.history)
            .save(&dir.join("checkpoint.mmt"))?;
    }
    Ok(CellScores {
        congruent_bleu,
        incongruent,
    })
}

fn write_corpus(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let text: String = lines
        .iter()
        .map(|l| l.join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    fs::write(path, text)?;
    Ok(())
}

/// Train and evaluate all fifteen systems. Cell failures are recorded and
/// the grid continues.
pub fn run_matrix(
    model: &ModelConfig,
    seed: u64,
    data: &PreparedData,
    paths: &DataPaths,
    opts: &TrainOpts,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<MatrixReport> {
    let mut cells = Vec::with_capacity(15);
    for family in Family::ALL {
        for setup in VisualMode::ALL {
            log(&format!("=== {} / {}", family.label(), setup.label()));
            let cell_dir = match out_dir {
                Some(dir) => {
                    let d = dir.join(format!("{}-{}", family.label(), setup.label()));
                    fs::create_dir_all(&d)?;
                    Some(d)
                }
                None => None,
            };
            let outcome = run_cell(
                family,
                setup,
                model,
                seed,
                data,
                paths,
                opts,
                cell_dir.as_deref(),
                log,
            )
            .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log(&format!("cell failed: {e}"));
            }
            cells.push(CellResult {
                family,
                setup,
                outcome,
            });
        }
    }
    let report = MatrixReport { cells, seed };
    if let Some(dir) = out_dir {
        fs::write(dir.join("report.txt"), report.pretty())?;
        fs::write(dir.join("report.tsv"), report.machine_lines())?;
    }
    Ok(report)
}
