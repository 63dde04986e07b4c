//! Orchestration: configuration, data preparation, training with early
//! stopping, checkpoints, the experiment matrix and decoding drivers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod matrix;
pub mod synth;
pub mod train;

pub use checkpoint::{Checkpoint, OptimizerSnapshot};
pub use config::{ConfigFile, DataPaths, ExperimentSpec, TrainOpts};
pub use data::{prepare, PreparedData, SetupFeatures};
pub use synth::{make_synthetic_task, noise_transcripts, SynthOpts};

use crate::decode::{beam_search, default_max_len, derangement, greedy, Hypothesis};
use crate::error::{Error, Result};
use crate::features::VisualFeature;
use crate::model::deliberation::{first_pass, Dec2pScorer, DelibModel};
use crate::model::transformer::TransScorer;
use crate::model::{Family, ModelConfig, TransformerModel};
use crate::subword::EOS_ID;
use crate::tensor::ParamId;

/// A trained (or freshly initialized) translation system of any family.
pub enum System {
    Transformer(TransformerModel),
    Delib(DelibModel),
}

impl System {
    pub fn new(config: ModelConfig) -> Result<System> {
        match config.family {
            Family::Transformer => Ok(System::Transformer(TransformerModel::new(config)?)),
            _ => Ok(System::Delib(DelibModel::new(config)?)),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            System::Transformer(m) => &m.config,
            System::Delib(m) => &m.config,
        }
    }

    pub fn store(&self) -> &crate::tensor::ParamStore<f32> {
        match self {
            System::Transformer(m) => &m.store,
            System::Delib(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut crate::tensor::ParamStore<f32> {
        match self {
            System::Transformer(m) => &mut m.store,
            System::Delib(m) => &mut m.store,
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        match self {
            System::Transformer(m) => m.all_ids(),
            System::Delib(m) => m.all_ids(),
        }
    }

    /// Translate one encoded source sentence; the returned ids may end
    /// with EOS.
    pub fn translate(
        &self,
        src: &[u32],
        feature: Option<&VisualFeature>,
        beam: usize,
        len_alpha: f64,
    ) -> Result<Vec<u32>> {
        let max_len = default_max_len(src.len()).min(self.config().max_seq_len - 1);
        let best = |hyps: Vec<Hypothesis>| -> Result<Vec<u32>> {
            hyps.into_iter()
                .next()
                .map(|h| h.tokens)
                .ok_or_else(|| Error::Decode("no hypothesis returned".into()))
        };
        match self {
            System::Transformer(m) => {
                let scorer = TransScorer::new(m, src, feature)?;
                if beam == 1 {
                    Ok(greedy(&scorer, max_len, EOS_ID)?.tokens)
                } else {
                    best(beam_search(&scorer, beam, max_len, EOS_ID, len_alpha, None)?)
                }
            }
            System::Delib(m) => {
                let fp = first_pass(m, src, feature, beam.max(1), 1, max_len)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Decode("first pass returned nothing".into()))?;
                let (h, allow) = m.encode_value(src, feature)?;
                let scorer = Dec2pScorer {
                    model: m,
                    h,
                    allow,
                    fp_concat: fp.concat,
                    feature,
                };
                if beam == 1 {
                    Ok(greedy(&scorer, max_len, EOS_ID)?.tokens)
                } else {
                    best(beam_search(&scorer, beam, max_len, EOS_ID, len_alpha, None)?)
                }
            }
        }
    }

    /// Snapshot everything needed to rebuild this system.
    pub fn to_checkpoint(
        &self,
        optimizer: Option<OptimizerSnapshot>,
        history: Vec<(u32, f64)>,
    ) -> Checkpoint {
        let store = self.store();
        let tensors = self
            .all_ids()
            .into_iter()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        Checkpoint {
            config: self.config().clone(),
            tensors,
            optimizer,
            history,
        }
    }

    /// Rebuild a system from a checkpoint: fresh architecture from the
    /// stored config, parameters filled in by name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<System> {
        let mut system = System::new(ckpt.config.clone())?;
        let expected = system.all_ids().len();
        if ckpt.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture has {expected} parameters",
                ckpt.tensors.len()
            )));
        }
        for (name, tensor) in &ckpt.tensors {
            let id = system.store().id_by_name(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor {name} has no matching parameter"))
            })?;
            system.store_mut().set(id, tensor.clone()).map_err(|e| {
                Error::Checkpoint(format!("checkpoint tensor {name}: {e}"))
            })?;
        }
        Ok(system)
    }
}

/// Congruent/incongruent decoding of a whole test set. Features are
/// mismatched by a seeded derangement; identity (congruent) decoding is the
/// `permutation: None` case. Returns sentence translations as words.
pub struct DecodeRun {
    pub outputs: Vec<Vec<String>>,
    pub permutation: Option<Vec<usize>>,
}

#[allow(clippy::too_many_arguments)]
pub fn decode_test_set(
    system: &System,
    pairs: &[data::SentencePair],
    features: &data::SplitFeatures,
    tgt_vocab: &crate::subword::Vocabulary,
    beam: usize,
    len_alpha: f64,
    incongruent_seed: Option<u64>,
) -> Result<DecodeRun> {
    let needs_features = system.config().visual_mode.is_multimodal();
    if needs_features && features.is_none() {
        return Err(Error::invalid(
            "multimodal system needs features for decoding",
        ));
    }
    let permutation = match incongruent_seed {
        Some(seed) => {
            if !needs_features {
                // text-only systems consume no features; incongruent
                // decoding degenerates to congruent decoding
                None
            } else {
                Some(derangement(pairs.len(), seed)?)
            }
        }
        None => None,
    };
    let mut outputs = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let feature = match (needs_features, features) {
            (true, Some(f)) => {
                let idx = permutation.as_ref().map_or(i, |p| p[i]);
                Some(&f[idx])
            }
            _ => None,
        };
        let ids = system.translate(&pair.src, feature, beam, len_alpha)?;
        outputs.push(data::ids_to_words(&ids, tgt_vocab));
    }
    Ok(DecodeRun {
        outputs,
        permutation,
    })
}
