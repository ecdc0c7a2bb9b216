use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    normal_tensor, LinearIds, ModelConfig, ParamGroup, ParamKind, PrefixInputs, Session,
    TransformerModel,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    EncoderOnly,
    DecoderOnly,
    Both,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::EncoderOnly, Placement::DecoderOnly, Placement::Both];

    pub fn name(self) -> &'static str {
        match self {
            Placement::EncoderOnly => "encoder_only",
            Placement::DecoderOnly => "decoder_only",
            Placement::Both => "both",
        }
    }

    pub fn encoder(self) -> bool {
        self != Placement::DecoderOnly
    }

    pub fn decoder(self) -> bool {
        self != Placement::EncoderOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reparam {
    None,
    /// Shared `h -> mid_dim -> h` GELU MLP over the base table.
    Mlp { mid_dim: usize },
}

impl Reparam {
    pub fn name(self) -> &'static str {
        match self {
            Reparam::None => "none",
            Reparam::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptInit {
    Gaussian { std: f64 },
    /// Copy rows of the token embedding table at random vocabulary ids.
    FromVocabSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub length: usize,
    pub placement: Placement,
    pub reparam: Reparam,
    pub init: PromptInit,
    /// Carry prompt outputs into the next layer instead of replacing them.
    pub carry: bool,
    pub strip_encoder_prompts: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: 64,
            placement: Placement::Both,
            reparam: Reparam::None,
            init: PromptInit::Gaussian { std: 0.02 },
            carry: false,
            strip_encoder_prompts: false,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if let Reparam::Mlp { mid_dim: 0 } = self.reparam {
            return Err(Error::Config("strategy.reparam.mid_dim must be >= 1".into()));
        }
        if let PromptInit::Gaussian { std } = self.init {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("strategy.init.std must be finite and >= 0, got {std}")));
            }
        }
        Ok(())
    }

    /// Number of layers that receive prompts.
    pub fn selected_layers(&self, c: &ModelConfig) -> usize {
        let mut n = 0;
        if self.placement.encoder() {
            n += c.num_encoder_layers;
        }
        if self.placement.decoder() {
            n += c.num_decoder_layers;
        }
        n
    }

    /// Closed-form trainable count: `L_sel · l · h` plus the MLP.
    pub fn param_count(&self, c: &ModelConfig) -> usize {
        let h = c.hidden_dim;
        let table = self.selected_layers(c) * self.length * h;
        match self.reparam {
            Reparam::None => table,
            Reparam::Mlp { mid_dim } => table + h * mid_dim + mid_dim + mid_dim * h + h,
        }
    }
}

/// A layer that can host prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSite {
    Encoder(usize),
    Decoder(usize),
}

/// One layer's prompt rows.
#[derive(Clone, Debug)]
pub struct PromptBlock {
    pub site: PromptSite,
    /// `[l × h]`
    pub embeddings: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptMlp {
    pub up: LinearIds,
    pub down: LinearIds,
}

/// Per-layer prompt table `[L_sel × l × h]`, optionally passed through a
/// shared MLP. Parameters live in the model's store.
#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub config: PromptConfig,
    pub sites: Vec<PromptSite>,
    pub table: crate::model::ParamId,
    pub mlp: Option<PromptMlp>,
    hidden: usize,
}

impl PromptGenerator {
    pub fn new(model: &mut TransformerModel, config: PromptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = model.config.clone();
        let h = c.hidden_dim;
        let l = config.length;
        let mut sites = Vec::new();
        if config.placement.encoder() {
            sites.extend((0..c.num_encoder_layers).map(PromptSite::Encoder));
        }
        if config.placement.decoder() {
            sites.extend((0..c.num_decoder_layers).map(PromptSite::Decoder));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [sites.len(), l, h];
        let base = match config.init {
            PromptInit::Gaussian { std } => normal_tensor(&mut rng, &shape, std),
            PromptInit::FromVocabSample => {
                let tok = model.params.tensor(model.layout.token);
                let mut data = Vec::with_capacity(sites.len() * l * h);
                for _ in 0..sites.len() * l {
                    let id = rng.gen_range(0..c.vocab_size);
                    data.extend_from_slice(tok.row(id));
                }
                Tensor::new(shape.to_vec(), data)?
            }
        };
        let table = model
            .params
            .add("prompt.table", base, ParamKind::Embedding, ParamGroup::Prompt);
        let mlp = match config.reparam {
            Reparam::None => None,
            Reparam::Mlp { mid_dim } => {
                let mut lin = |name: &str, i: usize, o: usize| LinearIds {
                    w: model.params.add(
                        format!("prompt.mlp.{name}.w"),
                        normal_tensor(&mut rng, &[i, o], 1.0 / (i as f64).sqrt()),
                        ParamKind::Weight,
                        ParamGroup::PromptMlp,
                    ),
                    b: model.params.add(
                        format!("prompt.mlp.{name}.b"),
                        Tensor::zeros(&[o]),
                        ParamKind::Bias,
                        ParamGroup::PromptMlp,
                    ),
                };
                Some(PromptMlp {
                    up: lin("up", h, mid_dim),
                    down: lin("down", mid_dim, h),
                })
            }
        };
        Ok(Self {
            config,
            sites,
            table,
            mlp,
            hidden: h,
        })
    }

    pub fn length(&self) -> usize {
        self.config.length
    }

    fn mlp_on_tape<'a>(&self, s: &mut Session<'a>, x: Var, m: PromptMlp) -> Result<Var> {
        let (uw, ub, dw, db) = (s.p(m.up.w), s.p(m.up.b), s.p(m.down.w), s.p(m.down.b));
        let u = s.tape.matmul(x, uw)?;
        let u = s.tape.add_row(u, ub)?;
        let a = s.tape.gelu(u);
        let d = s.tape.matmul(a, dw)?;
        Ok(s.tape.add_row(d, db)?)
    }

    /// The `[l × h]` prompt rows of one layer.
    pub fn generate_prompts<'a>(&self, s: &mut Session<'a>, site: PromptSite) -> Result<PromptBlock> {
        let j = self
            .sites
            .iter()
            .position(|x| *x == site)
            .ok_or_else(|| Error::contract(format!("{site:?} does not receive prompts")))?;
        let l = self.length();
        if l == 0 {
            let empty = s.tape.constant(Tensor::zeros(&[0, self.hidden]));
            return Ok(PromptBlock { site, embeddings: empty });
        }
        let table = s.p(self.table);
        let ids: Vec<usize> = (j * l..(j + 1) * l).collect();
        let mut e = s.tape.gather(table, &ids)?;
        if let Some(m) = self.mlp {
            e = self.mlp_on_tape(s, e, m)?;
        }
        Ok(PromptBlock { site, embeddings: e })
    }

    /// Prompts for every selected layer, shaped for the model forward. The
    /// MLP, when present, runs once over the whole table.
    pub fn prefix_inputs<'a>(&self, s: &mut Session<'a>) -> Result<PrefixInputs> {
        let mut out = PrefixInputs {
            carry: self.config.carry,
            strip_encoder: self.config.strip_encoder_prompts,
            ..Default::default()
        };
        let l = self.length();
        if l == 0 {
            return Ok(out);
        }
        let table = s.p(self.table);
        let all: Vec<usize> = (0..self.sites.len() * l).collect();
        let mut rows = s.tape.gather(table, &all)?;
        if let Some(m) = self.mlp {
            rows = self.mlp_on_tape(s, rows, m)?;
        }
        for (j, site) in self.sites.iter().enumerate() {
            let block = if self.sites.len() == 1 {
                rows
            } else {
                s.tape.slice(rows, 0, j * l, l)?
            };
            match site {
                PromptSite::Encoder(_) => out.encoder.push(block),
                PromptSite::Decoder(_) => out.decoder.push(block),
            }
        }
        Ok(out)
    }

    /// Replace the table by `MLP(table)` and drop the MLP. Returns `false`
    /// (and changes nothing) when there is no MLP.
    pub fn bake(&mut self, model: &mut TransformerModel) -> Result<bool> {
        let Some(m) = self.mlp.take() else {
            return Ok(false);
        };
        let baked = {
            let p = &model.params;
            let base = p.tensor(self.table);
            let rows = base.shape()[0] * base.shape()[1];
            let mut tape = Tape::new();
            let x = tape.constant(base.clone().reshape(&[rows, self.hidden])?);
            let uw = tape.param(p.tensor(m.up.w), false);
            let ub = tape.param(p.tensor(m.up.b), false);
            let dw = tape.param(p.tensor(m.down.w), false);
            let db = tape.param(p.tensor(m.down.b), false);
            let u = tape.matmul(x, uw)?;
            let u = tape.add_row(u, ub)?;
            let a = tape.gelu(u);
            let d = tape.matmul(a, dw)?;
            let d = tape.add_row(d, db)?;
            tape.value(d).clone().reshape(base.shape())?
        };
        model.params.assign(self.table, baked)?;
        for id in [m.up.w, m.up.b, m.down.w, m.down.b] {
            model.params.remove(id);
        }
        self.config.reparam = Reparam::None;
        Ok(true)
    }
}

/// Free-function form of [`PromptGenerator::generate_prompts`].
pub fn generate_prompts<'a>(
    gen: &PromptGenerator,
    s: &mut Session<'a>,
    site: PromptSite,
) -> Result<PromptBlock> {
    gen.generate_prompts(s, site)
}

/// Collapse the MLP reparameterization into a plain table.
pub fn bake_reparam(gen: &mut PromptGenerator, model: &mut TransformerModel) -> Result<bool> {
    gen.bake(model)
}
