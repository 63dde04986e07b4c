//! Training loops: token-bucketed batches, per-epoch validation BLEU with
//! early stopping, and the frozen two-stage deliberation regime.

use std::cell::RefCell;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::OptimizerSnapshot;
use super::config::{ExperimentSpec, TrainOpts};
use super::data::{PreparedData, SetupFeatures, SplitFeatures};
use super::System;
use crate::decode::default_max_len;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::model::deliberation::{
    first_pass, second_pass_loss, DelibModel, FirstPassOutput, Stage2Item,
};
use crate::model::transformer::{translate_loss, BatchItem, FwdCtx, TransformerModel};
use crate::model::ModelConfig;
use crate::tensor::{LrSchedule, Optimizer, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Diverged,
}

pub struct TrainOutcome {
    pub system: System,
    pub best_bleu: f64,
    pub history: Vec<(u32, f64)>,
    /// Mean training loss per completed epoch (not persisted).
    pub loss_history: Vec<f64>,
    pub stop: StopReason,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Shuffle indices and fill batches up to the target-token budget.
fn make_batches(tgt_lens: &[usize], budget: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..tgt_lens.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0usize;
    for idx in order {
        let n = tgt_lens[idx] + 1; // terminating EOS counts
        if !current.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(idx);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn snapshot_optimizer(store: &ParamStore<f32>, opt: &Optimizer) -> OptimizerSnapshot {
    OptimizerSnapshot {
        step: opt.state.t,
        entries: opt
            .trainable
            .iter()
            .zip(opt.state.m.iter().zip(opt.state.v.iter()))
            .map(|(id, (m, v))| (store.name(*id).to_string(), m.clone(), v.clone()))
            .collect(),
    }
}

fn validation_bleu(
    system: &System,
    data: &PreparedData,
    features: &SplitFeatures,
    opts: &TrainOpts,
) -> Result<f64> {
    let run = super::decode_test_set(
        system,
        &data.valid.pairs,
        features,
        &data.tgt_vocab,
        opts.valid_beam,
        opts.length_alpha,
        None,
    )?;
    Ok(corpus_bleu(&run.outputs, &data.valid.refs, opts.bleu_smoothing)?.bleu)
}

fn noam(opts: &TrainOpts, d_model: usize) -> LrSchedule {
    LrSchedule::Noam {
        base: opts.base_lr,
        d_model,
        warmup_steps: opts.warmup_steps,
    }
}

/// Patience bookkeeping: best snapshot and the stop decision.
struct BestTracker {
    best_bleu: f64,
    best_store: Option<ParamStore<f32>>,
    since_best: usize,
    history: Vec<(u32, f64)>,
}

impl BestTracker {
    fn new() -> Self {
        BestTracker {
            best_bleu: f64::NEG_INFINITY,
            best_store: None,
            since_best: 0,
            history: Vec::new(),
        }
    }

    /// Record an epoch; returns true when patience is exhausted.
    fn record(&mut self, epoch: u32, bleu: f64, store: &ParamStore<f32>, patience: usize) -> bool {
        self.history.push((epoch, bleu));
        if bleu > self.best_bleu {
            self.best_bleu = bleu;
            self.best_store = Some(store.clone());
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= patience
        }
    }
}

/// Stage-agnostic single-model training of a transformer system.
pub fn train_transformer(
    config: &ModelConfig,
    data: &PreparedData,
    features: &SetupFeatures,
    opts: &TrainOpts,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut system = System::Transformer(TransformerModel::new(config.clone())?);
    let mut optimizer = Optimizer::new(
        system.store(),
        system.all_ids(),
        noam(opts, config.d_model),
    );
    let tgt_lens: Vec<usize> = data.train.pairs.iter().map(|p| p.tgt.len()).collect();
    let seed = config.seed;
    let mut tracker = BestTracker::new();
    let mut loss_history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=opts.max_epochs as u32 {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xBA7C_0000 | epoch as u64));
        let drop_rng = RefCell::new(ChaCha8Rng::seed_from_u64(mix(
            seed,
            0xD000_0000 | epoch as u64,
        )));
        let batches = make_batches(&tgt_lens, opts.batch_tokens, &mut batch_rng);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        let mut diverged = false;
        for batch in batches {
            let System::Transformer(model) = &system else {
                unreachable!()
            };
            let tape = Tape::<f32>::new();
            let ctx = FwdCtx {
                tape: &tape,
                store: &model.store,
                config: &model.config,
                drop_rng: Some(&drop_rng),
            };
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| BatchItem {
                    src: &data.train.pairs[i].src,
                    tgt: &data.train.pairs[i].tgt,
                    feature: features.train.as_ref().map(|f| &f[i]),
                })
                .collect();
            let loss = translate_loss(
                &ctx,
                &model.encoder,
                &model.decoder,
                model.action_table,
                &items,
            )?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                diverged = true;
                break;
            }
            loss_sum += value;
            loss_count += 1;
            let grads = tape.backward(loss)?;
            match optimizer.apply(system.store_mut(), &grads) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            stop = StopReason::Diverged;
            log(&format!("stage1 epoch {epoch}: diverged, keeping best"));
            break;
        }
        let epoch_loss = loss_sum / loss_count.max(1) as f64;
        loss_history.push(epoch_loss);
        let bleu = validation_bleu(&system, data, &features.valid, opts)?;
        log(&format!(
            "stage1 epoch {epoch}: loss {epoch_loss:.4} valid_bleu {bleu:.2}"
        ));
        if tracker.record(epoch, bleu, system.store(), opts.patience_transformer) {
            stop = StopReason::Patience;
            break;
        }
    }

    if let Some(best) = tracker.best_store.take() {
        *system.store_mut() = best;
    }
    let snapshot = snapshot_optimizer(system.store(), &optimizer);
    Ok(TrainOutcome {
        system,
        best_bleu: tracker.best_bleu,
        history: tracker.history,
        loss_history,
        stop,
        optimizer: Some(snapshot),
    })
}

/// Precomputed first-pass context for one sentence; valid for the whole of
/// stage 2 because the producing parameters are frozen.
struct SentenceFirstPass {
    enc_h: Tensor<f32>,
    enc_allow: Vec<bool>,
    hypotheses: Vec<FirstPassOutput>,
}

fn precompute_first_pass(
    model: &DelibModel,
    pairs: &[super::data::SentencePair],
    feats: &SplitFeatures,
    beam: usize,
    n_best: usize,
) -> Result<Vec<SentenceFirstPass>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let feature = feats.as_ref().map(|f| &f[i]);
            let max_len = default_max_len(pair.src.len()).min(model.config.max_seq_len - 1);
            let hypotheses = first_pass(model, &pair.src, feature, beam, n_best, max_len)?;
            let (enc_h, enc_allow) = model.encode_value(&pair.src, feature)?;
            Ok(SentenceFirstPass {
                enc_h,
                enc_allow,
                hypotheses,
            })
        })
        .collect()
}

/// Two-stage deliberation training: train the underlying transformer, copy
/// its weights into the encoder and first pass, freeze them, then train the
/// second pass with each of the k-best first-pass hypotheses as its own
/// training instance.
pub fn train_deliberation(
    config: &ModelConfig,
    data: &PreparedData,
    features: &SetupFeatures,
    opts: &TrainOpts,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    config.validate()?;
    if opts.stage2_hypotheses > opts.beam {
        return Err(Error::Config(format!(
            "stage2_hypotheses {} exceeds beam {}",
            opts.stage2_hypotheses, opts.beam
        )));
    }
    let stage1_cfg = DelibModel::stage1_config(config);
    let stage1 = train_transformer(&stage1_cfg, data, features, opts, log)?;
    let System::Transformer(stage1_model) = stage1.system else {
        unreachable!("stage 1 trains a transformer")
    };
    let model = DelibModel::from_stage1(&stage1_model, config.clone())?;
    let frozen_before = model.frozen_hash();

    let k = opts.stage2_hypotheses;
    log(&format!(
        "stage2: precomputing {k}-best first-pass hypotheses for {} sentences",
        data.train.len()
    ));
    let train_fp = precompute_first_pass(&model, &data.train.pairs, &features.train, opts.beam, k)?;
    let mut instances: Vec<(usize, usize)> = Vec::new();
    for (i, fp) in train_fp.iter().enumerate() {
        for h in 0..fp.hypotheses.len() {
            instances.push((i, h));
        }
    }
    let inst_lens: Vec<usize> = instances
        .iter()
        .map(|&(i, _)| data.train.pairs[i].tgt.len())
        .collect();

    let mut system = System::Delib(model);
    let trainable = match &system {
        System::Delib(m) => m.trainable_ids(),
        _ => unreachable!(),
    };
    let mut optimizer = Optimizer::new(system.store(), trainable, noam(opts, config.d_model));
    let seed = config.seed;
    let mut tracker = BestTracker::new();
    let mut loss_history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=opts.max_epochs as u32 {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x2BA7_C000 | epoch as u64));
        let drop_rng = RefCell::new(ChaCha8Rng::seed_from_u64(mix(
            seed,
            0x2D00_0000 | epoch as u64,
        )));
        let batches = make_batches(&inst_lens, opts.batch_tokens, &mut batch_rng);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        let mut diverged = false;
        for batch in batches {
            let System::Delib(model) = &system else {
                unreachable!()
            };
            let tape = Tape::<f32>::new();
            let ctx = FwdCtx {
                tape: &tape,
                store: &model.store,
                config: &model.config,
                drop_rng: Some(&drop_rng),
            };
            let items: Vec<Stage2Item> = batch
                .iter()
                .map(|&b| {
                    let (i, h) = instances[b];
                    Stage2Item {
                        tgt: &data.train.pairs[i].tgt,
                        enc_h: &train_fp[i].enc_h,
                        enc_allow: &train_fp[i].enc_allow,
                        fp_concat: &train_fp[i].hypotheses[h].concat,
                        feature: features.train.as_ref().map(|f| &f[i]),
                    }
                })
                .collect();
            let loss = second_pass_loss(
                &ctx,
                &model.dec2p,
                model.mode(),
                model.action_table,
                &items,
            )?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                diverged = true;
                break;
            }
            loss_sum += value;
            loss_count += 1;
            let grads = tape.backward(loss)?;
            match optimizer.apply(system.store_mut(), &grads) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            stop = StopReason::Diverged;
            log(&format!("stage2 epoch {epoch}: diverged, keeping best"));
            break;
        }
        let epoch_loss = loss_sum / loss_count.max(1) as f64;
        loss_history.push(epoch_loss);
        let bleu = validation_bleu(&system, data, &features.valid, opts)?;
        log(&format!(
            "stage2 epoch {epoch}: loss {epoch_loss:.4} valid_bleu {bleu:.2}"
        ));
        if tracker.record(epoch, bleu, system.store(), opts.patience_deliberation) {
            stop = StopReason::Patience;
            break;
        }
    }

    if let Some(best) = tracker.best_store.take() {
        *system.store_mut() = best;
    }
    let System::Delib(model) = &system else {
        unreachable!()
    };
    if model.frozen_hash() != frozen_before {
        return Err(Error::Train(
            "freeze invariant violated: encoder/first-pass parameters changed in stage 2".into(),
        ));
    }
    let snapshot = snapshot_optimizer(system.store(), &optimizer);
    Ok(TrainOutcome {
        system,
        best_bleu: tracker.best_bleu,
        history: tracker.history,
        loss_history,
        stop,
        optimizer: Some(snapshot),
    })
}

/// Family dispatch; vocabulary sizes come from the prepared data.
pub fn train_system(
    spec: &ExperimentSpec,
    data: &PreparedData,
    features: &SetupFeatures,
    opts: &TrainOpts,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    let mut config = spec.resolved_config();
    config.src_vocab = data.src_vocab.len();
    config.tgt_vocab = data.tgt_vocab.len();
    match config.family {
        crate::model::Family::Transformer => train_transformer(&config, data, features, opts, log),
        _ => train_deliberation(&config, data, features, opts, log),
    }
}


#[cfg(test)]
mod divergence_tests {
    use super::*;
    use crate::model::{Family, VisualMode};
    use crate::pipeline::data::prepare;
    use rand::Rng;

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let line = |rng: &mut ChaCha8Rng| -> String {
            let len = rng.gen_range(3..6);
            (0..len)
                .map(|_| format!("w{}", rng.gen_range(0..8)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for (split, count) in [("train", 20usize), ("valid", 5), ("test", 5)] {
            let lines: Vec<String> = (0..count).map(|_| line(&mut rng)).collect();
            let text = lines.join("\n") + "\n";
            std::fs::write(dir.path().join(format!("{split}.src")), &text).unwrap();
            std::fs::write(dir.path().join(format!("{split}.tgt")), &text).unwrap();
        }
        let paths = crate::pipeline::config::DataPaths::for_task_dir(dir.path(), 50);
        let data = prepare(&paths).unwrap();
        let mut config = crate::model::ModelConfig::desk_default();
        config.d_model = 16;
        config.n_heads = 2;
        config.n_enc_blocks = 1;
        config.n_dec_blocks = 1;
        config.d_ffn = 32;
        config.d_emb = 16;
        config.dropout = 0.0;
        config.family = Family::Transformer;
        config.visual_mode = VisualMode::None;
        config.seed = 77;
        config.src_vocab = data.src_vocab.len();
        config.tgt_vocab = data.tgt_vocab.len();
        // an absurd learning rate blows the parameters up within an epoch
        let opts = TrainOpts {
            batch_tokens: 64,
            max_epochs: 10,
            base_lr: 1e9,
            warmup_steps: 1,
            ..TrainOpts::default()
        };
        let outcome =
            train_transformer(&config, &data, &SetupFeatures::none(), &opts, &mut |_| {})
                .unwrap();
        assert_eq!(outcome.stop, StopReason::Diverged);
        // the returned system still decodes (last good parameters)
        let ids = outcome
            .system
            .translate(&data.test.pairs[0].src, None, 1, 0.0)
            .unwrap();
        assert!(!ids.is_empty());
        assert!(outcome.system.store().value(crate::tensor::ParamId(0)).is_finite());
    }
}
