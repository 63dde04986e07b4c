//! Transformer encoder/decoder forwards and the multimodal variants:
//! additive visual conditioning on the encoder output and visual
//! cross-attention inside decoder blocks.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{multi_head_attention, AttnProbe, Mask};
use super::init::{
    decoder_ids, encoder_ids, encoder_wants_cond, visual_param_ids, DecBlockIds, DecoderIds,
    EncoderIds, FfnIds, Init, LnIds,
};
use super::{ModelConfig, VisualMode};
use crate::error::{Error, Result};
use crate::features::{
    avgpool_to_matrix, conv_to_regions, ten_hot_mask, VisualFeature, N_ACTION_CATEGORIES,
};
use crate::subword::PAD_ID;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Everything a forward pass needs. `drop_rng` present means training mode
/// (inverted dropout); absent means inference.
pub struct FwdCtx<'a, F: Scalar> {
    pub tape: &'a Tape<F>,
    pub store: &'a ParamStore<F>,
    pub config: &'a ModelConfig,
    pub drop_rng: Option<&'a RefCell<ChaCha8Rng>>,
}

impl<'a, F: Scalar> FwdCtx<'a, F> {
    pub fn eval(tape: &'a Tape<F>, store: &'a ParamStore<F>, config: &'a ModelConfig) -> Self {
        FwdCtx {
            tape,
            store,
            config,
            drop_rng: None,
        }
    }

    pub(crate) fn dropout(&self, x: Var) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(cell) = self.drop_rng else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape_of(x);
        let numel: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let scale = F::from_f64(1.0 / keep);
        let mut rng = cell.borrow_mut();
        let data: Vec<F> = (0..numel)
            .map(|_| {
                if rng.gen_bool(keep) {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        self.tape.mul_mask(x, Tensor::new(shape, data)?)
    }

    pub(crate) fn layer_norm(&self, x: Var, ln: &LnIds) -> Result<Var> {
        self.tape.layer_norm(
            x,
            self.tape.param(self.store, ln.g),
            self.tape.param(self.store, ln.b),
            LN_EPS,
        )
    }

    /// Post-norm residual sublayer: LN(x + dropout(sub)).
    pub(crate) fn residual(&self, x: Var, sub: Var, ln: &LnIds) -> Result<Var> {
        let sub = self.dropout(sub)?;
        self.layer_norm(self.tape.add(x, sub)?, ln)
    }

    pub(crate) fn ffn(&self, x: Var, ids: &FfnIds) -> Result<Var> {
        let t = self.tape;
        let h = t.add_row(
            t.matmul(x, t.param(self.store, ids.w1))?,
            t.param(self.store, ids.b1),
        )?;
        let h = t.relu(h);
        t.add_row(
            t.matmul(h, t.param(self.store, ids.w2))?,
            t.param(self.store, ids.b2),
        )
    }
}

/// Sinusoidal position encodings for `len` positions.
fn positional_encoding<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64(v));
        }
    }
    Tensor::new(vec![len, d], data).expect("pe shape")
}

/// Token embedding * sqrt(d_model) + positional encoding, then dropout.
pub(crate) fn embed_sequence<F: Scalar>(ctx: &FwdCtx<F>, embed: ParamId, tokens: &[u32]) -> Result<Var> {
    let t = ctx.tape;
    let d = ctx.config.d_model;
    let indices: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let table = t.param(ctx.store, embed);
    let e = t.gather_rows(table, &indices)?;
    let e = t.mul_scalar(e, F::from_f64((d as f64).sqrt()));
    let pe = t.constant(positional_encoding::<F>(tokens.len(), d));
    ctx.dropout(t.add(e, pe)?)
}

/// Encoder states plus the key-validity mask used by every consumer.
pub struct EncoderOutput {
    pub h: Var,
    pub allow: Vec<bool>,
}

fn check_len(config: &ModelConfig, len: usize, what: &str) -> Result<()> {
    if len == 0 {
        return Err(Error::invalid(format!("{what}: empty sequence")));
    }
    if len > config.max_seq_len {
        return Err(Error::invalid(format!(
            "{what}: length {len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    Ok(())
}

/// Vanilla transformer encoder (Enc-Van).
pub fn encoder_forward<F: Scalar>(
    ctx: &FwdCtx<F>,
    ids: &EncoderIds,
    tokens: &[u32],
) -> Result<EncoderOutput> {
    check_len(ctx.config, tokens.len(), "encoder input")?;
    let allow: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
    let mask = Mask::padding(tokens.len(), &allow);
    mask.check_rows()?;

    let mut x = embed_sequence(ctx, ids.embed, tokens)?;
    for block in &ids.blocks {
        let sa = multi_head_attention(
            ctx.tape,
            ctx.store,
            &block.self_attn,
            x,
            x,
            Some(&mask),
            ctx.config.n_heads,
            None,
        )?;
        x = ctx.residual(x, sa, &block.ln_self)?;
        let ff = ctx.ffn(x, &block.ffn)?;
        x = ctx.residual(x, ff, &block.ln_ffn)?;
    }
    Ok(EncoderOutput { h: x, allow })
}

/// Enc-Cond: vanilla encoder plus a strictly linear projection of the
/// pooled visual vector added to every output position.
pub fn encoder_cond_forward<F: Scalar>(
    ctx: &FwdCtx<F>,
    ids: &EncoderIds,
    tokens: &[u32],
    feature: &VisualFeature,
) -> Result<EncoderOutput> {
    let Some(wvis) = ids.cond_proj else {
        return Err(Error::invalid(
            "encoder_cond_forward on a model without a conditioning projection",
        ));
    };
    let VisualFeature::AvgPool(values) = feature else {
        return Err(Error::invalid(format!(
            "visual conditioning needs an avgpool feature, got {}",
            feature.tag().name()
        )));
    };
    feature.validate()?;
    let out = encoder_forward(ctx, ids, tokens)?;
    let t = ctx.tape;
    let v = t.constant(Tensor::new(
        vec![1, values.len()],
        values.iter().map(|&x| F::from_f64(x as f64)).collect(),
    )?);
    let proj = t.matmul(v, t.param(ctx.store, wvis))?;
    let row = t.reshape(proj, vec![ctx.config.d_model])?;
    let h = t.add_row(out.h, row)?;
    Ok(EncoderOutput { h, allow: out.allow })
}

/// Dispatch on whether the encoder carries the conditioning projection.
pub fn encoder_forward_auto<F: Scalar>(
    ctx: &FwdCtx<F>,
    ids: &EncoderIds,
    tokens: &[u32],
    feature: Option<&VisualFeature>,
) -> Result<EncoderOutput> {
    match (ids.cond_proj.is_some(), feature) {
        (true, Some(f)) => encoder_cond_forward(ctx, ids, tokens, f),
        (true, None) => Err(Error::invalid(
            "conditioned encoder requires a visual feature",
        )),
        (false, _) => encoder_forward(ctx, ids, tokens),
    }
}

/// Visual context rows for the attention modes. For the ten-hot mode the
/// learned action table is row-masked on the tape, so gradients reach it.
pub fn visual_context_var<F: Scalar>(
    ctx: &FwdCtx<F>,
    table: Option<ParamId>,
    feature: &VisualFeature,
) -> Result<Var> {
    feature.validate()?;
    let mode = ctx.config.visual_mode;
    let expected = mode
        .feature_tag()
        .ok_or_else(|| Error::invalid("visual_context_var in a non-attention mode"))?;
    if feature.tag() != expected {
        return Err(Error::invalid(format!(
            "visual mode {} expects {} features, got {}",
            mode.label(),
            expected.name(),
            feature.tag().name()
        )));
    }
    let t = ctx.tape;
    match mode {
        VisualMode::AttnAvgPool => {
            let m = avgpool_to_matrix(feature)?;
            Ok(t.constant(m.matrix.cast::<F>()))
        }
        VisualMode::AttnConv => {
            let m = conv_to_regions(feature)?;
            Ok(t.constant(m.matrix.cast::<F>()))
        }
        VisualMode::AttnEmb => {
            let table = table.ok_or_else(|| {
                Error::invalid("attn-emb mode requires the action embedding table")
            })?;
            let keep = ten_hot_mask(feature)?;
            let d = ctx.config.d_emb;
            let mut mask = Tensor::zeros(&[N_ACTION_CATEGORIES, d]);
            for (r, k) in keep.iter().enumerate() {
                if *k != 0.0 {
                    for j in 0..d {
                        mask.data_mut()[r * d + j] = F::one();
                    }
                }
            }
            t.mul_mask(t.param(ctx.store, table), mask)
        }
        _ => unreachable!("guarded by feature_tag"),
    }
}

/// Pre-softmax states and logits of one decoder pass.
pub struct DecoderOut {
    pub states: Var,
    pub logits: Var,
}

/// Attention distributions recorded per decoder block.
#[derive(Default)]
pub struct DecoderProbe {
    pub self_weights: Vec<Var>,
    pub cross_weights: Vec<Var>,
    pub visual_weights: Vec<Var>,
}

fn decoder_block<F: Scalar>(
    ctx: &FwdCtx<F>,
    block: &DecBlockIds,
    x: Var,
    enc: &EncoderOutput,
    self_mask: &Mask,
    cross_mask: &Mask,
    visual: Option<Var>,
    probe: Option<&mut DecoderProbe>,
) -> Result<Var> {
    let n_heads = ctx.config.n_heads;
    let mut self_probe = AttnProbe::default();
    let sa = multi_head_attention(
        ctx.tape,
        ctx.store,
        &block.self_attn,
        x,
        x,
        Some(self_mask),
        n_heads,
        Some(&mut self_probe),
    )?;
    let u = ctx.residual(x, sa, &block.ln_self)?;

    let mut cross_probe = AttnProbe::default();
    let ca = multi_head_attention(
        ctx.tape,
        ctx.store,
        &block.cross,
        u,
        enc.h,
        Some(cross_mask),
        n_heads,
        Some(&mut cross_probe),
    )?;
    let mut y = ctx.residual(u, ca, &block.ln_cross)?;

    let mut vis_probe = AttnProbe::default();
    if let Some(vis) = &block.vis {
        let Some(ctx_rows) = visual else {
            return Err(Error::invalid(
                "decoder block has a visual sublayer but no visual context was provided",
            ));
        };
        // pre-norm residual: zeroed projections leave y bit-identical
        let normed = ctx.layer_norm(y, &vis.ln_pre)?;
        let va = multi_head_attention(
            ctx.tape,
            ctx.store,
            &vis.attn,
            normed,
            ctx_rows,
            None,
            n_heads,
            Some(&mut vis_probe),
        )?;
        y = ctx.tape.add(y, ctx.dropout(va)?)?;
    }

    let ff = ctx.ffn(y, &block.ffn)?;
    let out = ctx.residual(y, ff, &block.ln_ffn)?;
    if let Some(p) = probe {
        p.self_weights.extend(self_probe.weights);
        p.cross_weights.extend(cross_probe.weights);
        p.visual_weights.extend(vis_probe.weights);
    }
    Ok(out)
}

/// Decoder pass over a BOS-led target prefix. Returns the pre-softmax
/// hidden states and the logits (states times the shared embedding,
/// transposed).
pub fn decoder_forward<F: Scalar>(
    ctx: &FwdCtx<F>,
    ids: &DecoderIds,
    tgt_in: &[u32],
    enc: &EncoderOutput,
    visual: Option<Var>,
    mut probe: Option<&mut DecoderProbe>,
) -> Result<DecoderOut> {
    check_len(ctx.config, tgt_in.len(), "decoder input")?;
    let has_vis_blocks = ids.blocks.iter().any(|b| b.vis.is_some());
    if !has_vis_blocks && visual.is_some() {
        return Err(Error::invalid(
            "visual context provided to a decoder without visual sublayers",
        ));
    }

    let tgt_allow: Vec<bool> = tgt_in.iter().map(|&t| t != PAD_ID).collect();
    let self_mask = Mask::causal_with_padding(&tgt_allow);
    self_mask.check_rows()?;
    let cross_mask = Mask::padding(tgt_in.len(), &enc.allow);
    cross_mask.check_rows()?;

    let mut x = embed_sequence(ctx, ids.embed, tgt_in)?;
    for block in &ids.blocks {
        x = decoder_block(
            ctx,
            block,
            x,
            enc,
            &self_mask,
            &cross_mask,
            visual,
            probe.as_deref_mut(),
        )?;
    }
    let embed = ctx.tape.param(ctx.store, ids.embed);
    let logits = ctx.tape.matmul(x, ctx.tape.transpose(embed)?)?;
    Ok(DecoderOut { states: x, logits })
}

/// One teacher-forcing example.
pub struct BatchItem<'a> {
    pub src: &'a [u32],
    pub tgt: &'a [u32],
    pub feature: Option<&'a VisualFeature>,
}

/// Teacher-forced batch loss: BOS-shifted inputs, EOS-terminated targets,
/// token-weighted mean over the batch.
pub fn translate_loss<F: Scalar>(
    ctx: &FwdCtx<F>,
    encoder: &EncoderIds,
    decoder: &DecoderIds,
    action_table: Option<ParamId>,
    batch: &[BatchItem],
) -> Result<Var> {
    use crate::subword::{BOS_ID, EOS_ID};
    if batch.is_empty() {
        return Err(Error::invalid("translate_loss: empty batch"));
    }
    let t = ctx.tape;
    let mut acc: Option<Var> = None;
    let mut total_tokens = 0usize;
    for item in batch {
        let enc = encoder_forward_auto(ctx, encoder, item.src, item.feature)?;
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

        let out = decoder_forward(ctx, decoder, &dec_in, &enc, visual, None)?;
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

/// A single-pass system: encoder, decoder, and (for the ten-hot mode) the
/// learned action embedding table.
#[derive(Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
    pub action_table: Option<ParamId>,
}

impl TransformerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.family != super::Family::Transformer {
            return Err(Error::Config(format!(
                "TransformerModel::new with family {}",
                config.family.label()
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, &config);
        let encoder = init.encoder(&config, encoder_wants_cond(config.visual_mode));
        let decoder = init.decoder(&config, "dec", config.visual_mode.is_attention());
        let action_table = (config.visual_mode == VisualMode::AttnEmb)
            .then(|| Init::new(&mut store, &config).action_table(&config));
        Ok(TransformerModel {
            config,
            store,
            encoder,
            decoder,
            action_table,
        })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut out = encoder_ids(&self.encoder);
        out.extend(decoder_ids(&self.decoder));
        if let Some(t) = self.action_table {
            out.push(t);
        }
        out
    }

    pub fn visual_ids(&self) -> Vec<ParamId> {
        visual_param_ids(
            &self.encoder,
            self.decoder.blocks.iter().map(|b| b.vis.clone()),
        )
    }

    /// Zero the visual projections; the model then computes exactly what
    /// its text-only counterpart computes.
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

/// Run the encoder in evaluation mode and extract plain values, reusable
/// across decode steps.
pub fn encode_value_with(
    store: &ParamStore<f32>,
    config: &ModelConfig,
    ids: &EncoderIds,
    src: &[u32],
    feature: Option<&VisualFeature>,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    let tape = Tape::<f32>::new();
    let ctx = FwdCtx::eval(&tape, store, config);
    let enc = encoder_forward_auto(&ctx, ids, src, feature)?;
    Ok((tape.value(enc.h), enc.allow))
}

/// Next-token log-probabilities from the last logits row, in f64.
pub fn last_row_log_probs(logits: &Tensor<f32>) -> Vec<f64> {
    let v = logits.cols();
    let rows = logits.rows();
    let last: Vec<f64> = logits.data()[(rows - 1) * v..]
        .iter()
        .map(|&x| x as f64)
        .collect();
    let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = last.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    last.into_iter().map(|x| x - max - lse).collect()
}

/// Step scorer over a fixed source encoding, for beam and greedy decoding.
pub struct TransScorer<'a> {
    pub model: &'a TransformerModel,
    pub h: Tensor<f32>,
    pub allow: Vec<bool>,
    pub feature: Option<&'a VisualFeature>,
}

impl<'a> TransScorer<'a> {
    pub fn new(
        model: &'a TransformerModel,
        src: &[u32],
        feature: Option<&'a VisualFeature>,
    ) -> Result<Self> {
        let (h, allow) = model.encode_value(src, feature)?;
        Ok(TransScorer {
            model,
            h,
            allow,
            feature,
        })
    }
}

impl<'a> crate::decode::StepScorer for TransScorer<'a> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn step_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        use crate::subword::BOS_ID;
        let tape = Tape::<f32>::new();
        let ctx = FwdCtx::eval(&tape, &self.model.store, &self.model.config);
        let enc = EncoderOutput {
            h: tape.constant(self.h.clone()),
            allow: self.allow.clone(),
        };
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
        let out = decoder_forward(&ctx, &self.model.decoder, &dec_in, &enc, visual, None)?;
        Ok(last_row_log_probs(&tape.value(out.logits)))
    }
}
