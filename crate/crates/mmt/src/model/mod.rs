//! Model families: transformer encoder/decoder, the multimodal integration
//! schemes, and the two-pass deliberation decoders.

pub mod attention;
pub mod deliberation;
pub mod init;
pub mod transformer;

#[cfg(test)]
mod tests;

pub use attention::{multi_head_attention, AttnIds, AttnProbe, Mask, MaskKind};
pub use init::{
    DecBlockIds, DecoderIds, EncBlockIds, EncoderIds, FfnIds, FirstPassAttnIds, LnIds,
    TwoPassBlockIds, TwoPassDecoderIds, VisIds,
};
pub use transformer::{
    encoder_cond_forward, encoder_forward, translate_loss, visual_context_var, BatchItem,
    DecoderOut, EncoderOutput, FwdCtx, TransformerModel,
};

use crate::error::{Error, Result};
use crate::features::FeatureTag;

/// Architecture family: single-pass transformer or one of the two-pass
/// deliberation variants, which differ in how the second pass combines
/// its textual attentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Transformer,
    AdditiveDelib,
    CascadeDelib,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Transformer => "trans",
            Family::AdditiveDelib => "a-delib",
            Family::CascadeDelib => "c-delib",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trans" => Ok(Family::Transformer),
            "a-delib" => Ok(Family::AdditiveDelib),
            "c-delib" => Ok(Family::CascadeDelib),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }

    pub fn is_deliberation(self) -> bool {
        !matches!(self, Family::Transformer)
    }

    pub const ALL: [Family; 3] = [
        Family::Transformer,
        Family::AdditiveDelib,
        Family::CascadeDelib,
    ];
}

/// Visual integration scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualMode {
    /// Text only.
    None,
    /// Linear projection of the pooled vector added to encoder outputs.
    CondAvgPool,
    /// Decoder cross-attention over the reshaped 32x64 pooled matrix.
    AttnAvgPool,
    /// Decoder cross-attention over ten-hot action category embeddings.
    AttnEmb,
    /// Decoder cross-attention over the 49 convolutional regions.
    AttnConv,
}

impl VisualMode {
    pub fn label(self) -> &'static str {
        match self {
            VisualMode::None => "baseline",
            VisualMode::CondAvgPool => "cond-avgpool",
            VisualMode::AttnAvgPool => "attn-avgpool",
            VisualMode::AttnEmb => "attn-emb",
            VisualMode::AttnConv => "attn-conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(VisualMode::None),
            "cond-avgpool" => Ok(VisualMode::CondAvgPool),
            "attn-avgpool" => Ok(VisualMode::AttnAvgPool),
            "attn-emb" => Ok(VisualMode::AttnEmb),
            "attn-conv" => Ok(VisualMode::AttnConv),
            other => Err(Error::Config(format!("unknown visual mode {other:?}"))),
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            VisualMode::AttnAvgPool | VisualMode::AttnEmb | VisualMode::AttnConv
        )
    }

    pub fn is_multimodal(self) -> bool {
        !matches!(self, VisualMode::None)
    }

    /// Feature type this mode consumes.
    pub fn feature_tag(self) -> Option<FeatureTag> {
        match self {
            VisualMode::None => None,
            VisualMode::CondAvgPool | VisualMode::AttnAvgPool => Some(FeatureTag::AvgPool),
            VisualMode::AttnEmb => Some(FeatureTag::ActionScores),
            VisualMode::AttnConv => Some(FeatureTag::Conv),
        }
    }

    /// Column count of the visual context rows fed to the K/V projections.
    pub fn context_cols(self, d_emb: usize) -> usize {
        match self {
            VisualMode::None | VisualMode::CondAvgPool => 0,
            VisualMode::AttnAvgPool => crate::features::AVGPOOL_COLS,
            VisualMode::AttnEmb => d_emb,
            VisualMode::AttnConv => crate::features::CONV_CHANNELS,
        }
    }

    pub const ALL: [VisualMode; 5] = [
        VisualMode::None,
        VisualMode::CondAvgPool,
        VisualMode::AttnAvgPool,
        VisualMode::AttnEmb,
        VisualMode::AttnConv,
    ];
}

/// Full hyperparameter record; one config describes any system in the
/// family x setup grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub family: Family,
    pub visual_mode: VisualMode,
    pub d_emb: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Per-block toggle for the inserted visual sublayer; `None` inserts
    /// it in every decoder block.
    pub visual_blocks: Option<Vec<bool>>,
}

impl ModelConfig {
    /// Desk-scale defaults; the paper-scale values stay expressible.
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            d_ffn: 128,
            dropout: 0.1,
            label_smoothing: 0.1,
            src_vocab: 0,
            tgt_vocab: 0,
            family: Family::Transformer,
            visual_mode: VisualMode::None,
            d_emb: 64,
            max_seq_len: 256,
            seed: 1,
            visual_blocks: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_blocks", self.n_enc_blocks),
            ("n_dec_blocks", self.n_dec_blocks),
            ("d_ffn", self.d_ffn),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_emb", self.d_emb),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if let Some(blocks) = &self.visual_blocks {
            if blocks.len() != self.n_dec_blocks {
                return Err(Error::Config(format!(
                    "visual_blocks has {} entries for {} decoder blocks",
                    blocks.len(),
                    self.n_dec_blocks
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether decoder block `i` carries the visual sublayer.
    pub fn visual_block_enabled(&self, block: usize) -> bool {
        if !self.visual_mode.is_attention() {
            return false;
        }
        match &self.visual_blocks {
            None => true,
            Some(flags) => flags.get(block).copied().unwrap_or(false),
        }
    }

    /// Second-pass blocks carrying first-pass attention: the initial half,
    /// `ceil(n/2)` (three of six at paper scale).
    pub fn first_pass_blocks(&self) -> usize {
        self.n_dec_blocks.div_ceil(2)
    }

    /// Canonical serialization, the basis of the checkpoint config hash.
    pub fn canonical_string(&self) -> String {
        let visual_blocks = match &self.visual_blocks {
            None => "all".to_string(),
            Some(flags) => flags
                .iter()
                .map(|f| if *f { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(""),
        };
        format!(
            "d_model = {}\nn_heads = {}\nn_enc_blocks = {}\nn_dec_blocks = {}\nd_ffn = {}\n\
             dropout = {}\nlabel_smoothing = {}\nsrc_vocab = {}\ntgt_vocab = {}\nfamily = {}\n\
             visual_mode = {}\nd_emb = {}\nmax_seq_len = {}\nseed = {}\nvisual_blocks = {}\n",
            self.d_model,
            self.n_heads,
            self.n_enc_blocks,
            self.n_dec_blocks,
            self.d_ffn,
            self.dropout,
            self.label_smoothing,
            self.src_vocab,
            self.tgt_vocab,
            self.family.label(),
            self.visual_mode.label(),
            self.d_emb,
            self.max_seq_len,
            self.seed,
            visual_blocks,
        )
    }

    pub fn config_hash(&self) -> u64 {
        crate::tensor::fnv1a64(self.canonical_string().as_bytes())
    }
}

#[cfg(test)]
mod config_tests {
    use super::*;

    #[test]
    fn desk_default_validates_once_vocabs_set() {
        let mut cfg = ModelConfig::desk_default();
        assert!(cfg.validate().is_err(), "zero vocab must fail");
        cfg.src_vocab = 10;
        cfg.tgt_vocab = 12;
        cfg.validate().unwrap();
    }

    #[test]
    fn head_divisibility_checked() {
        let mut cfg = ModelConfig::desk_default();
        cfg.src_vocab = 10;
        cfg.tgt_vocab = 10;
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn first_pass_block_halving() {
        let mut cfg = ModelConfig::desk_default();
        cfg.n_dec_blocks = 6;
        assert_eq!(cfg.first_pass_blocks(), 3);
        cfg.n_dec_blocks = 2;
        assert_eq!(cfg.first_pass_blocks(), 1);
        cfg.n_dec_blocks = 1;
        assert_eq!(cfg.first_pass_blocks(), 1);
        cfg.n_dec_blocks = 5;
        assert_eq!(cfg.first_pass_blocks(), 3);
    }

    #[test]
    fn config_hash_sensitive_to_fields() {
        let mut a = ModelConfig::desk_default();
        a.src_vocab = 10;
        a.tgt_vocab = 10;
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.d_ffn = 256;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn labels_roundtrip() {
        for f in Family::ALL {
            assert_eq!(Family::parse(f.label()).unwrap(), f);
        }
        for v in VisualMode::ALL {
            assert_eq!(VisualMode::parse(v.label()).unwrap(), v);
        }
    }
}
