//! Encoder-decoder transformer over symbol-grid images and text.
//!
//! The encoder reads `[image ; SEP ; text]`, where each image cell is a
//! learned symbol embedding plus separate row and column embeddings. Blocks
//! are pre-norm with GELU feed-forward layers. The decoder is a standard
//! causal stack with cross-attention to the encoder memory and an untied
//! output projection.
//!
//! Forward passes are per sample: one [`Session`] (tape) per sample, with
//! batches handled by mapping over samples.

mod config;
mod forward;
mod mask;
mod params;
mod session;

pub use config::ModelConfig;
pub use forward::{EncodedBatch, Memory, PrefixInputs, Provenance};
pub use mask::{inject_prefix, AttentionMask};
pub(crate) use params::normal_tensor;
pub use params::{Param, ParamGroup, ParamId, ParamKind, ParamStore};
pub use session::{AttentionTrace, Session};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    /// `[in × out]`
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

/// Bottleneck residual block `y + up(gelu(down(y)))`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterIds {
    pub down: LinearIds,
    pub up: LinearIds,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerIds {
    pub ln1: NormIds,
    pub attn: AttentionIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    /// After self-attention and after the FFN.
    pub adapters: Option<[AdapterIds; 2]>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerIds {
    pub ln1: NormIds,
    pub self_attn: AttentionIds,
    pub ln2: NormIds,
    pub cross_attn: AttentionIds,
    pub ln3: NormIds,
    pub ffn: FfnIds,
    pub adapters: Option<[AdapterIds; 2]>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub token: ParamId,
    pub image: ParamId,
    pub row: ParamId,
    pub col: ParamId,
    pub text_pos: ParamId,
    pub target_pos: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub enc_norm: NormIds,
    pub dec_norm: NormIds,
    pub out: LinearIds,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

struct Builder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    group: ParamGroup,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> LinearIds {
        let w = normal_tensor(&mut self.rng, &[fan_in, fan_out], std);
        LinearIds {
            w: self.store.add(format!("{name}.w"), w, ParamKind::Weight, self.group),
            b: self
                .store
                .add(format!("{name}.b"), Tensor::zeros(&[fan_out]), ParamKind::Bias, self.group),
        }
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        self.linear(name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    fn norm(&mut self, name: &str, h: usize) -> NormIds {
        NormIds {
            g: self
                .store
                .add(format!("{name}.g"), Tensor::full(&[h], 1.0), ParamKind::NormGain, self.group),
            b: self
                .store
                .add(format!("{name}.b"), Tensor::zeros(&[h]), ParamKind::NormBias, self.group),
        }
    }

    fn embedding(&mut self, name: &str, rows: usize, h: usize) -> ParamId {
        let t = normal_tensor(&mut self.rng, &[rows, h], EMBED_STD);
        self.store.add(name, t, ParamKind::Embedding, self.group)
    }

    fn attention(&mut self, name: &str, h: usize) -> AttentionIds {
        AttentionIds {
            q: self.dense(&format!("{name}.q"), h, h),
            k: self.dense(&format!("{name}.k"), h, h),
            v: self.dense(&format!("{name}.v"), h, h),
            o: self.dense(&format!("{name}.o"), h, h),
        }
    }

    fn ffn(&mut self, name: &str, h: usize, f: usize) -> FfnIds {
        FfnIds {
            up: self.dense(&format!("{name}.up"), h, f),
            down: self.dense(&format!("{name}.down"), f, h),
        }
    }
}

impl TransformerModel {
    /// Fresh backbone with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let h = c.hidden_dim;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Backbone,
        };
        let token = b.embedding("embed.token", c.vocab_size, h);
        let image = b.embedding("embed.image", c.image_vocab_size, h);
        let row = b.embedding("embed.row", c.grid_side, h);
        let col = b.embedding("embed.col", c.grid_side, h);
        let text_pos = b.embedding("embed.text_pos", c.max_text_len, h);
        let target_pos = b.embedding("embed.target_pos", c.max_target_len, h);
        let encoder = (0..c.num_encoder_layers)
            .map(|i| EncoderLayerIds {
                ln1: b.norm(&format!("enc.{i}.ln1"), h),
                attn: b.attention(&format!("enc.{i}.attn"), h),
                ln2: b.norm(&format!("enc.{i}.ln2"), h),
                ffn: b.ffn(&format!("enc.{i}.ffn"), h, c.ffn_dim),
                adapters: None,
            })
            .collect();
        let decoder = (0..c.num_decoder_layers)
            .map(|i| DecoderLayerIds {
                ln1: b.norm(&format!("dec.{i}.ln1"), h),
                self_attn: b.attention(&format!("dec.{i}.self"), h),
                ln2: b.norm(&format!("dec.{i}.ln2"), h),
                cross_attn: b.attention(&format!("dec.{i}.cross"), h),
                ln3: b.norm(&format!("dec.{i}.ln3"), h),
                ffn: b.ffn(&format!("dec.{i}.ffn"), h, c.ffn_dim),
                adapters: None,
            })
            .collect();
        let enc_norm = b.norm("enc.norm", h);
        let dec_norm = b.norm("dec.norm", h);
        let out = b.dense("out", h, c.vocab_size);
        let layout = Layout {
            token,
            image,
            row,
            col,
            text_pos,
            target_pos,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            out,
        };
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Insert Houlsby-style adapters after every attention and FFN sublayer.
    /// The up projection starts at zero so the model is unchanged at init.
    pub fn add_adapters(&mut self, bottleneck: usize, seed: u64) {
        let h = self.config.hidden_dim;
        let mut b = Builder {
            store: &mut self.params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Adapter,
        };
        let make = |b: &mut Builder, name: String| AdapterIds {
            down: b.linear(&format!("{name}.down"), h, bottleneck, 1e-3),
            up: b.linear(&format!("{name}.up"), bottleneck, h, 0.0),
        };
        for (i, l) in self.layout.encoder.iter_mut().enumerate() {
            l.adapters = Some([
                make(&mut b, format!("enc.{i}.adapter_attn")),
                make(&mut b, format!("enc.{i}.adapter_ffn")),
            ]);
        }
        for (i, l) in self.layout.decoder.iter_mut().enumerate() {
            l.adapters = Some([
                make(&mut b, format!("dec.{i}.adapter_attn")),
                make(&mut b, format!("dec.{i}.adapter_ffn")),
            ]);
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.layout.encoder.iter().any(|l| l.adapters.is_some())
    }

    /// RMS over the token and image embedding tables, the scale FGSM
    /// budgets are expressed in.
    pub fn embedding_rms(&self) -> f64 {
        let t = self.params.tensor(self.layout.token);
        let i = self.params.tensor(self.layout.image);
        let sq: f64 = t.data().iter().chain(i.data()).map(|v| v * v).sum();
        (sq / (t.len() + i.len()) as f64).sqrt()
    }

    /// Parameters belonging to the backbone proper.
    pub fn backbone_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Backbone)
            .map(|(_, p)| p.tensor.len())
            .sum()
    }
}
