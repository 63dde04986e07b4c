//! Two-pass deliberation: first-pass n-best generation, the additive and
//! cascade second-pass decoder blocks, and the frozen two-stage regime.

use super::attention::{multi_head_attention, AttnProbe, Mask};
use super::init::{
    decoder_ids, encoder_ids, encoder_wants_cond, two_pass_ids, visual_param_ids, Init,
    TwoPassBlockIds, TwoPassDecoderIds,
};
use super::transformer::{
    encode_value_with, last_row_log_probs, visual_context_var, DecoderOut, EncoderOutput, FwdCtx,
    TransformerModel,
};
use super::{DecoderIds, EncoderIds, Family, ModelConfig, VisualMode};
use crate::decode::{beam_search, StepScorer};
use crate::error::{Error, Result};
use crate::features::VisualFeature;
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// How the second pass combines its two textual attentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelibMode {
    /// Parallel sub-layers over one input; outputs summed under one norm.
    Additive,
    /// Successive residual layers; the first-pass layer chains behind the
    /// encoder-attention layer.
    Cascade,
}

impl DelibMode {
    pub fn from_family(family: Family) -> Result<DelibMode> {
        match family {
            Family::AdditiveDelib => Ok(DelibMode::Additive),
            Family::CascadeDelib => Ok(DelibMode::Cascade),
            Family::Transformer => Err(Error::Config(
                "transformer family has no deliberation mode".into(),
            )),
        }
    }
}

/// First-pass hypothesis with its teacher-forced states.
///
/// `concat` row t is `[s_t ; E(y_t)]`: the pre-softmax state next to the
/// embedding of the token it emitted; its left half equals `states` exactly.
#[derive(Clone, Debug)]
pub struct FirstPassOutput {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub states: Tensor<f32>,
    pub concat: Tensor<f32>,
}

/// Structural trace of one second-pass block.
pub struct TwoPassBlockTrace {
    /// Output of the self-attention sublayer (the dual layer's input).
    pub self_out: Var,
    /// Query stream entering the encoder attention.
    pub enc_query: Var,
    /// Value feeding the first-pass attention: the self output for the
    /// additive flavor, the encoder layer's output for cascade.
    pub fp_query_src: Option<Var>,
    /// Cascade only: output of the chained encoder-attention layer.
    pub enc_layer_out: Option<Var>,
    pub attn_weights: Vec<Var>,
}

#[derive(Default)]
pub struct TwoPassProbe {
    pub blocks: Vec<TwoPassBlockTrace>,
}

#[allow(clippy::too_many_arguments)]
fn two_pass_block<F: Scalar>(
    ctx: &FwdCtx<F>,
    block: &TwoPassBlockIds,
    mode: DelibMode,
    x: Var,
    enc_h: Var,
    self_mask: &Mask,
    cross_mask: &Mask,
    fp_concat: Option<Var>,
    visual: Option<Var>,
    probe: Option<&mut TwoPassProbe>,
) -> Result<Var> {
    let t = ctx.tape;
    let n_heads = ctx.config.n_heads;
    let mut weights = Vec::new();

    let mut self_probe = AttnProbe::default();
    let sa = multi_head_attention(
        t,
        ctx.store,
        &block.self_attn,
        x,
        x,
        Some(self_mask),
        n_heads,
        Some(&mut self_probe),
    )?;
    let u = ctx.residual(x, sa, &block.ln_self)?;
    weights.extend(self_probe.weights);

    // encoder attention, present in every block
    let mut enc_probe = AttnProbe::default();
    let a = multi_head_attention(
        t,
        ctx.store,
        &block.enc_attn,
        u,
        enc_h,
        Some(cross_mask),
        n_heads,
        Some(&mut enc_probe),
    )?;
    weights.extend(enc_probe.weights);

    let fp_ctx = match (&block.fp, fp_concat) {
        (Some(fp), Some(c)) => Some((fp, t.matmul(c, t.param(ctx.store, fp.proj_c))?)),
        (Some(_), None) => {
            return Err(Error::invalid(
                "second-pass block carries first-pass attention but no first-pass output was given",
            ))
        }
        (None, _) => None,
    };

    let mut fp_query_src = None;
    let mut enc_layer_out = None;
    let mut y = match mode {
        DelibMode::Additive => {
            // both sub-layers read u; their outputs join one residual sum
            let mut s = t.add(u, ctx.dropout(a)?)?;
            if let Some((fp, cp)) = &fp_ctx {
                fp_query_src = Some(u);
                let mut fp_probe = AttnProbe::default();
                let b = multi_head_attention(
                    t,
                    ctx.store,
                    &fp.attn,
                    u,
                    *cp,
                    None,
                    n_heads,
                    Some(&mut fp_probe),
                )?;
                weights.extend(fp_probe.weights);
                s = t.add(s, ctx.dropout(b)?)?;
            }
            ctx.layer_norm(s, &block.ln_dual)?
        }
        DelibMode::Cascade => {
            let y1 = ctx.residual(u, a, &block.ln_dual)?;
            enc_layer_out = Some(y1);
            match &fp_ctx {
                Some((fp, cp)) => {
                    fp_query_src = Some(y1);
                    let ln = fp.ln_pre.as_ref().expect("cascade fp has a pre-norm");
                    let normed = ctx.layer_norm(y1, ln)?;
                    let mut fp_probe = AttnProbe::default();
                    let b = multi_head_attention(
                        t,
                        ctx.store,
                        &fp.attn,
                        normed,
                        *cp,
                        None,
                        n_heads,
                        Some(&mut fp_probe),
                    )?;
                    weights.extend(fp_probe.weights);
                    t.add(y1, ctx.dropout(b)?)?
                }
                None => y1,
            }
        }
    };

    if let Some(vis) = &block.vis {
        let Some(ctx_rows) = visual else {
            return Err(Error::invalid(
                "second-pass block has a visual sublayer but no visual context was provided",
            ));
        };
        let normed = ctx.layer_norm(y, &vis.ln_pre)?;
        let mut vis_probe = AttnProbe::default();
        let va = multi_head_attention(
            t,
            ctx.store,
            &vis.attn,
            normed,
            ctx_rows,
            None,
            n_heads,
            Some(&mut vis_probe),
        )?;
        weights.extend(vis_probe.weights);
        y = t.add(y, ctx.dropout(va)?)?;
    }

    let ff = ctx.ffn(y, &block.ffn)?;
    let out = ctx.residual(y, ff, &block.ln_ffn)?;
    if let Some(p) = probe {
        p.blocks.push(TwoPassBlockTrace {
            self_out: u,
            enc_query: u,
            fp_query_src,
            enc_layer_out,
            attn_weights: weights,
        });
    }
    Ok(out)
}

/// Second-pass decoder over a BOS-led target prefix, teacher-forced.
#[allow(clippy::too_many_arguments)]
pub fn second_pass_forward<F: Scalar>(
    ctx: &FwdCtx<F>,
    ids: &TwoPassDecoderIds,
    mode: DelibMode,
    tgt_in: &[u32],
    enc: &EncoderOutput,
    fp_concat: Option<Var>,
    visual: Option<Var>,
    mut probe: Option<&mut TwoPassProbe>,
) -> Result<DecoderOut> {
    if tgt_in.is_empty() || tgt_in.len() > ctx.config.max_seq_len {
        return Err(Error::invalid(format!(
            "second pass input length {} out of range",
            tgt_in.len()
        )));
    }
    let tgt_allow: Vec<bool> = tgt_in.iter().map(|&t| t != PAD_ID).collect();
    let self_mask = Mask::causal_with_padding(&tgt_allow);
    self_mask.check_rows()?;
    let cross_mask = Mask::padding(tgt_in.len(), &enc.allow);
    cross_mask.check_rows()?;

    let mut x = super::transformer::embed_sequence(ctx, ids.embed, tgt_in)?;
    for block in &ids.blocks {
        x = two_pass_block(
            ctx,
            block,
            mode,
            x,
            enc.h,
            &self_mask,
            &cross_mask,
            fp_concat,
            visual,
            probe.as_deref_mut(),
        )?;
    }
    let embed = ctx.tape.param(ctx.store, ids.embed);
    let logits = ctx.tape.matmul(x, ctx.tape.transpose(embed)?)?;
    Ok(DecoderOut { states: x, logits })
}

/// A deliberation system: shared encoder, first-pass decoder and the
/// second-pass refinement decoder. During stage-2 training the encoder and
/// first pass stay frozen.
#[derive(Clone)]
pub struct DelibModel {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub encoder: EncoderIds,
    pub dec1p: DecoderIds,
    pub dec2p: TwoPassDecoderIds,
    pub action_table: Option<ParamId>,
}

impl DelibModel {
    pub fn mode(&self) -> DelibMode {
        DelibMode::from_family(self.config.family).expect("deliberation family")
    }

    /// Fresh untrained model (tests, gradient checks).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mode = DelibMode::from_family(config.family)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, &config);
        let encoder = init.encoder(&config, encoder_wants_cond(config.visual_mode));
        // the first pass is always a vanilla decoder; visual attention
        // lives in the second pass only
        let dec1p = init.decoder(&config, "dec1p", false);
        let dec2p = init.two_pass_decoder(
            &config,
            mode == DelibMode::Cascade,
            config.visual_mode.is_attention(),
        );
        let action_table = (config.visual_mode == VisualMode::AttnEmb)
            .then(|| Init::new(&mut store, &config).action_table(&config));
        Ok(DelibModel {
            config,
            store,
            encoder,
            dec1p,
            dec2p,
            action_table,
        })
    }

    /// Config of the underlying stage-1 transformer for a deliberation
    /// config: conditioning stays on the encoder, attention modes train a
    /// text-only stage 1 (the first pass is vanilla).
    pub fn stage1_config(config: &ModelConfig) -> ModelConfig {
        let mut c = config.clone();
        c.family = Family::Transformer;
        c.visual_mode = match config.visual_mode {
            VisualMode::CondAvgPool => VisualMode::CondAvgPool,
            _ => VisualMode::None,
        };
        c
    }

    /// Initialize encoder and first pass from a trained stage-1
    /// transformer; the second pass starts fresh.
    pub fn from_stage1(stage1: &TransformerModel, config: ModelConfig) -> Result<Self> {
        let expect = Self::stage1_config(&config);
        let mut got = stage1.config.clone();
        got.seed = expect.seed; // seeds may differ between stages
        if got != expect {
            return Err(Error::Train(format!(
                "stage-2 started without compatible stage-1 weights: stage-1 is {}/{}, expected {}/{}",
                stage1.config.family.label(),
                stage1.config.visual_mode.label(),
                expect.family.label(),
                expect.visual_mode.label()
            )));
        }
        let mut model = Self::new(config)?;
        super::init::copy_values(
            &stage1.store,
            &encoder_ids(&stage1.encoder),
            &mut model.store,
            &encoder_ids(&model.encoder),
        )?;
        super::init::copy_values(
            &stage1.store,
            &decoder_ids(&stage1.decoder),
            &mut model.store,
            &decoder_ids(&model.dec1p),
        )?;
        Ok(model)
    }

    /// Parameters frozen across stage 2: encoder (with any conditioning
    /// projection) and the whole first pass.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let mut out = encoder_ids(&self.encoder);
        out.extend(decoder_ids(&self.dec1p));
        out
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut out = two_pass_ids(&self.dec2p);
        if let Some(t) = self.action_table {
            out.push(t);
        }
        out
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut out = self.frozen_ids();
        out.extend(self.trainable_ids());
        out
    }

    pub fn frozen_hash(&self) -> u64 {
        self.store.hash_subset(&self.frozen_ids())
    }

    pub fn visual_ids(&self) -> Vec<ParamId> {
        visual_param_ids(&self.encoder, self.dec2p.blocks.iter().map(|b| b.vis.clone()))
    }

    pub fn zero_visual_params(&mut self) {
        for id in self.visual_ids() {
            let shape = self.store.value(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }

    /// Encoder values for one source sentence (inference path).
    pub fn encode_value(
        &self,
        src: &[u32],
        feature: Option<&VisualFeature>,
    ) -> Result<(Tensor<f32>, Vec<bool>)> {
        encode_value_with(&self.store, &self.config, &self.encoder, src, feature)
    }
}

/// First-pass scorer: the vanilla decoder over fixed encoder states.
struct Dec1pScorer<'a> {
    model: &'a DelibModel,
    h: &'a Tensor<f32>,
    allow: &'a [bool],
}

impl<'a> StepScorer for Dec1pScorer<'a> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn step_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let tape = Tape::<f32>::new();
        let ctx = FwdCtx::eval(&tape, &self.model.store, &self.model.config);
        let enc = EncoderOutput {
            h: tape.constant(self.h.clone()),
            allow: self.allow.to_vec(),
        };
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(prefix);
        let out = super::transformer::decoder_forward(
            &ctx,
            &self.model.dec1p,
            &dec_in,
            &enc,
            None,
            None,
        )?;
        Ok(last_row_log_probs(&tape.value(out.logits)))
    }
}

/// Beam-search the first pass and teacher-force each returned hypothesis
/// to recover its pre-softmax states and the concatenated rows.
pub fn first_pass(
    model: &DelibModel,
    src: &[u32],
    feature: Option<&VisualFeature>,
    beam: usize,
    n_best: usize,
    max_len: usize,
) -> Result<Vec<FirstPassOutput>> {
    if n_best > beam {
        return Err(Error::invalid(format!(
            "n_best {n_best} exceeds beam {beam}"
        )));
    }
    let (h, allow) = model.encode_value(src, feature)?;
    let scorer = Dec1pScorer {
        model,
        h: &h,
        allow: &allow,
    };
    let mut hyps = beam_search(&scorer, beam, max_len, EOS_ID, 0.0, None)?;
    hyps.truncate(n_best);
    hyps.iter()
        .map(|hyp| teacher_force_first_pass(model, &h, &allow, &hyp.tokens, hyp.score))
        .collect()
}

/// States and concatenated rows for one first-pass hypothesis.
pub fn teacher_force_first_pass(
    model: &DelibModel,
    h: &Tensor<f32>,
    allow: &[bool],
    tokens: &[u32],
    score: f64,
) -> Result<FirstPassOutput> {
    if tokens.is_empty() {
        return Err(Error::invalid("first-pass hypothesis is empty"));
    }
    let tape = Tape::<f32>::new();
    let ctx = FwdCtx::eval(&tape, &model.store, &model.config);
    let enc = EncoderOutput {
        h: tape.constant(h.clone()),
        allow: allow.to_vec(),
    };
    let mut dec_in = Vec::with_capacity(tokens.len());
    dec_in.push(BOS_ID);
    dec_in.extend_from_slice(&tokens[..tokens.len() - 1]);
    let out = super::transformer::decoder_forward(&ctx, &model.dec1p, &dec_in, &enc, None, None)?;
    let states = tape.value(out.states);

    // concat rows: [state ; raw embedding of the emitted token]
    let d = model.config.d_model;
    let embed = model.store.value(model.dec1p.embed);
    let m = tokens.len();
    let mut concat = Tensor::zeros(&[m, 2 * d]);
    for t in 0..m {
        concat.data_mut()[t * 2 * d..t * 2 * d + d]
            .copy_from_slice(&states.data()[t * d..(t + 1) * d]);
        let row = tokens[t] as usize * d;
        concat.data_mut()[t * 2 * d + d..(t + 1) * 2 * d]
            .copy_from_slice(&embed.data()[row..row + d]);
    }
    Ok(FirstPassOutput {
        tokens: tokens.to_vec(),
        score,
        states,
        concat,
    })
}

/// One stage-2 teacher-forcing instance: gold target, frozen encoder
/// states, one first-pass hypothesis.
pub struct Stage2Item<'a> {
    pub tgt: &'a [u32],
    pub enc_h: &'a Tensor<f32>,
    pub enc_allow: &'a [bool],
    pub fp_concat: &'a Tensor<f32>,
    pub feature: Option<&'a VisualFeature>,
}

/// Token-weighted second-pass batch loss. Encoder states and first-pass
/// rows enter as constants: the frozen stage contributes no gradients.
pub fn second_pass_loss<F: Scalar>(
    ctx: &FwdCtx<F>,
    ids: &TwoPassDecoderIds,
    mode: DelibMode,
    action_table: Option<ParamId>,
    items: &[Stage2Item],
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::invalid("second_pass_loss: empty batch"));
    }
    let t = ctx.tape;
    let mut acc: Option<Var> = None;
    let mut total_tokens = 0usize;
    for item in items {
        let enc = EncoderOutput {
            h: t.constant(item.enc_h.cast::<F>()),
            allow: item.enc_allow.to_vec(),
        };
        let fp = t.constant(item.fp_concat.cast::<F>());
        let visual = match (ctx.config.visual_mode.is_attention(), item.feature) {
            (true, Some(f)) => Some(visual_context_var(ctx, action_table, f)?),
            (true, None) => {
                return Err(Error::invalid(
                    "attention visual mode requires a feature per sentence",
                ))
            }
            (false, _) => None,
        };
        let mut dec_in = Vec::with_capacity(item.tgt.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(item.tgt);
        let mut targets = Vec::with_capacity(item.tgt.len() + 1);
        targets.extend_from_slice(item.tgt);
        targets.push(EOS_ID);

        let out = second_pass_forward(ctx, ids, mode, &dec_in, &enc, Some(fp), visual, None)?;
        let loss = t.cross_entropy(out.logits, &targets, PAD_ID, ctx.config.label_smoothing)?;
        let n = targets.iter().filter(|&&x| x != PAD_ID).count();
        total_tokens += n;
        let weighted = t.mul_scalar(loss, F::from_f64(n as f64));
        acc = Some(match acc {
            None => weighted,
            Some(a) => t.add(a, weighted)?,
        });
    }
    Ok(t.mul_scalar(acc.unwrap(), F::from_f64(1.0 / total_tokens as f64)))
}

/// The two-stage frozen training regime lives in the pipeline (it needs
/// batching, validation decoding and early stopping); this alias keeps the
/// operation discoverable next to the model it trains.
pub use crate::pipeline::train::train_deliberation as two_stage_train;

/// Second-pass scorer for inference: fixed encoder states and the
/// first-pass best hypothesis.
pub struct Dec2pScorer<'a> {
    pub model: &'a DelibModel,
    pub h: Tensor<f32>,
    pub allow: Vec<bool>,
    pub fp_concat: Tensor<f32>,
    pub feature: Option<&'a VisualFeature>,
}

impl<'a> StepScorer for Dec2pScorer<'a> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn step_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let tape = Tape::<f32>::new();
        let ctx = FwdCtx::eval(&tape, &self.model.store, &self.model.config);
        let enc = EncoderOutput {
            h: tape.constant(self.h.clone()),
            allow: self.allow.clone(),
        };
        let fp = tape.constant(self.fp_concat.clone());
        let visual = match (self.model.config.visual_mode.is_attention(), self.feature) {
            (true, Some(f)) => Some(visual_context_var(&ctx, self.model.action_table, f)?),
            (true, None) => {
                return Err(Error::invalid("attention visual mode requires a feature"))
            }
            (false, _) => None,
        };
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(prefix);
        let out = second_pass_forward(
            &ctx,
            &self.model.dec2p,
            self.model.mode(),
            &dec_in,
            &enc,
            Some(fp),
            visual,
            None,
        )?;
        Ok(last_row_log_probs(&tape.value(out.logits)))
    }
}
