//! Parameter layout and initialization for all model families.
//!
//! Every parameter is initialized from a generator seeded by the model seed
//! and the parameter's own name, so a parameter's initial value does not
//! depend on which other parameters exist. Multimodal variants therefore
//! share bit-identical core weights with their text-only counterparts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::attention::AttnIds;
use super::{ModelConfig, VisualMode};
use crate::features::N_ACTION_CATEGORIES;
use crate::tensor::{fnv1a64, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncBlockIds {
    pub self_attn: AttnIds,
    pub ln_self: LnIds,
    pub ffn: FfnIds,
    pub ln_ffn: LnIds,
}

/// Inserted visual cross-attention sublayer (pre-norm residual, so zeroed
/// projections degenerate to the text-only computation exactly).
#[derive(Clone, Debug)]
pub struct VisIds {
    pub attn: AttnIds,
    pub ln_pre: LnIds,
}

#[derive(Clone, Debug)]
pub struct DecBlockIds {
    pub self_attn: AttnIds,
    pub ln_self: LnIds,
    pub cross: AttnIds,
    pub ln_cross: LnIds,
    pub vis: Option<VisIds>,
    pub ffn: FfnIds,
    pub ln_ffn: LnIds,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub embed: ParamId,
    pub blocks: Vec<EncBlockIds>,
    /// Enc-Cond: strictly linear 2048 -> d_model projection, no bias.
    pub cond_proj: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub embed: ParamId,
    pub blocks: Vec<DecBlockIds>,
}

/// First-pass attention of a second-pass block: the concatenated
/// state/embedding rows are projected from 2*d_model to d_model before
/// serving as keys and values. Cascade blocks pre-normalize their chained
/// input (`ln_pre`); additive blocks share the dual-layer norm instead.
#[derive(Clone, Debug)]
pub struct FirstPassAttnIds {
    pub proj_c: ParamId,
    pub attn: AttnIds,
    pub ln_pre: Option<LnIds>,
}

#[derive(Clone, Debug)]
pub struct TwoPassBlockIds {
    pub self_attn: AttnIds,
    pub ln_self: LnIds,
    pub enc_attn: AttnIds,
    pub ln_dual: LnIds,
    pub fp: Option<FirstPassAttnIds>,
    pub vis: Option<VisIds>,
    pub ffn: FfnIds,
    pub ln_ffn: LnIds,
}

#[derive(Clone, Debug)]
pub struct TwoPassDecoderIds {
    pub embed: ParamId,
    pub blocks: Vec<TwoPassBlockIds>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Builder for one parameter store.
pub struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    seed: u64,
    d_model: usize,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, config: &ModelConfig) -> Self {
        Init {
            store,
            seed: config.seed,
            d_model: config.d_model,
        }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a64(name.as_bytes())))
    }

    /// Xavier-uniform weight matrix.
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new(-limit, limit);
        let mut rng = self.rng(name);
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        self.store
            .add(name, Tensor::new(vec![rows, cols], data).unwrap())
    }

    /// Embedding table, N(0, cols^-1/2).
    fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let dist = Normal::new(0.0, (cols as f64).powf(-0.5)).unwrap();
        let mut rng = self.rng(name);
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        self.store
            .add(name, Tensor::new(vec![rows, cols], data).unwrap())
    }

    fn zeros(&mut self, name: &str, d: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[d]))
    }

    fn layer_norm(&mut self, prefix: &str) -> LnIds {
        let d = self.d_model;
        LnIds {
            g: self.store.add(format!("{prefix}.g"), Tensor::ones(&[d])),
            b: self.store.add(format!("{prefix}.b"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, prefix: &str, kv_cols: usize) -> AttnIds {
        let d = self.d_model;
        AttnIds {
            wq: self.weight(&format!("{prefix}.wq"), d, d),
            wk: self.weight(&format!("{prefix}.wk"), kv_cols, d),
            wv: self.weight(&format!("{prefix}.wv"), kv_cols, d),
            wo: self.weight(&format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d_ffn: usize) -> FfnIds {
        let d = self.d_model;
        FfnIds {
            w1: self.weight(&format!("{prefix}.w1"), d, d_ffn),
            b1: self.zeros(&format!("{prefix}.b1"), d_ffn),
            w2: self.weight(&format!("{prefix}.w2"), d_ffn, d),
            b2: self.zeros(&format!("{prefix}.b2"), d),
        }
    }

    fn vis(&mut self, prefix: &str, ctx_cols: usize) -> VisIds {
        VisIds {
            attn: self.attn(&format!("{prefix}.vis"), ctx_cols),
            ln_pre: self.layer_norm(&format!("{prefix}.vis.ln")),
        }
    }

    pub fn encoder(&mut self, config: &ModelConfig, with_cond: bool) -> EncoderIds {
        let embed = self.embedding("enc.embed", config.src_vocab, config.d_model);
        let blocks = (0..config.n_enc_blocks)
            .map(|i| {
                let p = format!("enc.b{i}");
                EncBlockIds {
                    self_attn: self.attn(&format!("{p}.self"), config.d_model),
                    ln_self: self.layer_norm(&format!("{p}.ln_self")),
                    ffn: self.ffn(&format!("{p}.ffn"), config.d_ffn),
                    ln_ffn: self.layer_norm(&format!("{p}.ln_ffn")),
                }
            })
            .collect();
        let cond_proj = with_cond.then(|| {
            self.weight(
                "enc.cond.wvis",
                crate::features::AVGPOOL_DIM,
                config.d_model,
            )
        });
        EncoderIds {
            embed,
            blocks,
            cond_proj,
        }
    }

    /// Single-pass decoder; `prefix` distinguishes the transformer decoder
    /// ("dec") from a deliberation first pass ("dec1p").
    pub fn decoder(&mut self, config: &ModelConfig, prefix: &str, with_visual: bool) -> DecoderIds {
        let embed = self.embedding(&format!("{prefix}.embed"), config.tgt_vocab, config.d_model);
        let ctx_cols = config.visual_mode.context_cols(config.d_emb);
        let blocks = (0..config.n_dec_blocks)
            .map(|i| {
                let p = format!("{prefix}.b{i}");
                DecBlockIds {
                    self_attn: self.attn(&format!("{p}.self"), config.d_model),
                    ln_self: self.layer_norm(&format!("{p}.ln_self")),
                    cross: self.attn(&format!("{p}.cross"), config.d_model),
                    ln_cross: self.layer_norm(&format!("{p}.ln_cross")),
                    vis: (with_visual && config.visual_block_enabled(i))
                        .then(|| self.vis(&p, ctx_cols)),
                    ffn: self.ffn(&format!("{p}.ffn"), config.d_ffn),
                    ln_ffn: self.layer_norm(&format!("{p}.ln_ffn")),
                }
            })
            .collect();
        DecoderIds { embed, blocks }
    }

    /// Second-pass decoder; first-pass attention lives in the initial
    /// `ceil(n/2)` blocks, the cascade flavor chains it behind the encoder
    /// attention layer.
    pub fn two_pass_decoder(
        &mut self,
        config: &ModelConfig,
        cascade: bool,
        with_visual: bool,
    ) -> TwoPassDecoderIds {
        let embed = self.embedding("dec2p.embed", config.tgt_vocab, config.d_model);
        let ctx_cols = config.visual_mode.context_cols(config.d_emb);
        let n_fp = config.first_pass_blocks();
        let blocks = (0..config.n_dec_blocks)
            .map(|i| {
                let p = format!("dec2p.b{i}");
                let fp = (i < n_fp).then(|| FirstPassAttnIds {
                    proj_c: self.weight(
                        &format!("{p}.fp.proj_c"),
                        2 * config.d_model,
                        config.d_model,
                    ),
                    attn: self.attn(&format!("{p}.fp"), config.d_model),
                    ln_pre: cascade.then(|| self.layer_norm(&format!("{p}.fp.ln"))),
                });
                TwoPassBlockIds {
                    self_attn: self.attn(&format!("{p}.self"), config.d_model),
                    ln_self: self.layer_norm(&format!("{p}.ln_self")),
                    enc_attn: self.attn(&format!("{p}.enc"), config.d_model),
                    ln_dual: self.layer_norm(&format!("{p}.ln_dual")),
                    fp,
                    vis: (with_visual && config.visual_block_enabled(i))
                        .then(|| self.vis(&p, ctx_cols)),
                    ffn: self.ffn(&format!("{p}.ffn"), config.d_ffn),
                    ln_ffn: self.layer_norm(&format!("{p}.ln_ffn")),
                }
            })
            .collect();
        TwoPassDecoderIds { embed, blocks }
    }

    /// Learned action-category embedding table for the ten-hot mode.
    pub fn action_table(&mut self, config: &ModelConfig) -> ParamId {
        self.embedding("action_table", N_ACTION_CATEGORIES, config.d_emb)
    }
}

// ---- id collection (checkpointing, freezing, copying) -------------------

pub fn attn_ids(a: &AttnIds) -> Vec<ParamId> {
    vec![a.wq, a.wk, a.wv, a.wo]
}

pub fn ln_ids(l: &LnIds) -> Vec<ParamId> {
    vec![l.g, l.b]
}

pub fn ffn_ids(f: &FfnIds) -> Vec<ParamId> {
    vec![f.w1, f.b1, f.w2, f.b2]
}

fn vis_ids(v: &VisIds) -> Vec<ParamId> {
    let mut out = attn_ids(&v.attn);
    out.extend(ln_ids(&v.ln_pre));
    out
}

pub fn encoder_ids(e: &EncoderIds) -> Vec<ParamId> {
    let mut out = vec![e.embed];
    for b in &e.blocks {
        out.extend(attn_ids(&b.self_attn));
        out.extend(ln_ids(&b.ln_self));
        out.extend(ffn_ids(&b.ffn));
        out.extend(ln_ids(&b.ln_ffn));
    }
    if let Some(c) = e.cond_proj {
        out.push(c);
    }
    out
}

pub fn decoder_ids(d: &DecoderIds) -> Vec<ParamId> {
    let mut out = vec![d.embed];
    for b in &d.blocks {
        out.extend(attn_ids(&b.self_attn));
        out.extend(ln_ids(&b.ln_self));
        out.extend(attn_ids(&b.cross));
        out.extend(ln_ids(&b.ln_cross));
        if let Some(v) = &b.vis {
            out.extend(vis_ids(v));
        }
        out.extend(ffn_ids(&b.ffn));
        out.extend(ln_ids(&b.ln_ffn));
    }
    out
}

pub fn two_pass_ids(d: &TwoPassDecoderIds) -> Vec<ParamId> {
    let mut out = vec![d.embed];
    for b in &d.blocks {
        out.extend(attn_ids(&b.self_attn));
        out.extend(ln_ids(&b.ln_self));
        out.extend(attn_ids(&b.enc_attn));
        out.extend(ln_ids(&b.ln_dual));
        if let Some(fp) = &b.fp {
            out.push(fp.proj_c);
            out.extend(attn_ids(&fp.attn));
            if let Some(ln) = &fp.ln_pre {
                out.extend(ln_ids(ln));
            }
        }
        if let Some(v) = &b.vis {
            out.extend(vis_ids(v));
        }
        out.extend(ffn_ids(&b.ffn));
        out.extend(ln_ids(&b.ln_ffn));
    }
    out
}

/// Ids of the strictly visual parameters: the conditioning projection and
/// every visual-attention projection. Zeroing them makes any multimodal
/// variant compute exactly its text-only counterpart.
pub fn visual_param_ids(
    encoder: &EncoderIds,
    dec_blocks_vis: impl Iterator<Item = Option<VisIds>>,
) -> Vec<ParamId> {
    let mut out = Vec::new();
    if let Some(c) = encoder.cond_proj {
        out.push(c);
    }
    for v in dec_blocks_vis.flatten() {
        out.extend(attn_ids(&v.attn));
    }
    out
}

/// Names-free structural copy: both id lists must come from identically
/// shaped builders.
pub fn copy_values(
    src: &ParamStore<f32>,
    src_ids: &[ParamId],
    dst: &mut ParamStore<f32>,
    dst_ids: &[ParamId],
) -> crate::error::Result<()> {
    if src_ids.len() != dst_ids.len() {
        return Err(crate::error::Error::invalid(format!(
            "copy_values: {} source ids vs {} destination ids",
            src_ids.len(),
            dst_ids.len()
        )));
    }
    for (s, d) in src_ids.iter().zip(dst_ids) {
        dst.set(*d, src.value(*s).clone())?;
    }
    Ok(())
}

/// `VisualMode` decides which components get visual parameters.
pub fn encoder_wants_cond(mode: VisualMode) -> bool {
    matches!(mode, VisualMode::CondAvgPool)
}
