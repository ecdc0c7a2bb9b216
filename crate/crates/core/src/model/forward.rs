use super::{
    inject_prefix, AdapterIds, AttentionIds, AttentionMask, FfnIds, LinearIds, NormIds, Session,
    TransformerModel,
};
use crate::error::{Error, Result};
use crate::tasks::{TaskKind, TaskSample, Vocab};
use crate::tensor::{row_log_softmax, row_softmax, Var};

const LN_EPS: f64 = 1e-5;

/// Where an encoder source position came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Image,
    Separator,
    Text,
    Padding,
}

/// Embedded encoder input for one sample: `[S × h]` rows laid out as
/// `[image ; SEP ; text ; padding]`.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub embeddings: Var,
    pub provenance: Vec<Provenance>,
}

impl EncodedBatch {
    /// Number of non-padding positions.
    pub fn len(&self) -> usize {
        self.provenance.iter().filter(|p| **p != Provenance::Padding).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `true` for positions that may be attended to.
    pub fn key_mask(&self) -> Vec<bool> {
        self.provenance.iter().map(|p| *p != Provenance::Padding).collect()
    }
}

/// Per-layer prompt rows (each `[l × h]`) for each stack. An empty list
/// leaves that stack unprompted.
#[derive(Clone, Debug, Default)]
pub struct PrefixInputs {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    /// Feed each layer's prompt outputs forward, adding the next layer's
    /// prompts, instead of replacing them.
    pub carry: bool,
    /// Drop the final encoder prompt rows from the memory.
    pub strip_encoder: bool,
}

/// Encoder output seen by cross-attention.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub key_ok: Vec<bool>,
    /// Leading rows that came from prompts.
    pub prompt_rows: usize,
    /// Cross-attention keys and values per decoder layer, computed once so
    /// repeated decoder passes (greedy steps, candidates) share them.
    pub cross_kv: Vec<(Var, Var)>,
}

impl<'a> TransformerModel {
    fn linear(&'a self, s: &mut Session<'a>, x: Var, ids: LinearIds) -> Result<Var> {
        let w = s.p(ids.w);
        let b = s.p(ids.b);
        let y = s.tape.matmul(x, w)?;
        Ok(s.tape.add_row(y, b)?)
    }

    fn norm(&'a self, s: &mut Session<'a>, x: Var, ids: NormIds) -> Result<Var> {
        let g = s.p(ids.g);
        let b = s.p(ids.b);
        Ok(s.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn ffn(&'a self, s: &mut Session<'a>, x: Var, ids: FfnIds) -> Result<Var> {
        let u = self.linear(s, x, ids.up)?;
        let a = s.tape.gelu(u);
        self.linear(s, a, ids.down)
    }

    fn adapter(&'a self, s: &mut Session<'a>, x: Var, ids: AdapterIds) -> Result<Var> {
        let d = self.linear(s, x, ids.down)?;
        let a = s.tape.gelu(d);
        let u = self.linear(s, a, ids.up)?;
        Ok(s.tape.add(x, u)?)
    }

    /// Keys (transposed, `[h × m]`) and values (`[m × h]`) for `kv_in`.
    fn project_kv(&'a self, s: &mut Session<'a>, ids: &AttentionIds, kv_in: Var) -> Result<(Var, Var)> {
        let k = self.linear(s, kv_in, ids.k)?;
        let v = self.linear(s, kv_in, ids.v)?;
        Ok((s.tape.transpose(k)?, v))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &'a self,
        s: &mut Session<'a>,
        site: &'static str,
        layer: usize,
        ids: &AttentionIds,
        q_in: Var,
        kv: (Var, Var),
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let q = self.linear(s, q_in, ids.q)?;
        let q = s.tape.scale(q, 1.0 / (dh as f64).sqrt());
        let (kt, v) = kv;
        let nq = s.tape.value(q).rows();
        let nk = s.tape.value(v).rows();
        s.record(site, layer, nq, nk);
        let bias = match mask {
            Some(m) if (m.queries(), m.keys()) != (nq, nk) => {
                return Err(Error::contract(format!(
                    "{site} layer {layer}: mask is {}x{} but scores are {nq}x{nk}",
                    m.queries(),
                    m.keys()
                )))
            }
            Some(m) if !m.is_full() => Some(s.tape.constant(m.bias())),
            _ => None,
        };
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = s.tape.slice(q, 1, hd * dh, dh)?;
            let kh = s.tape.slice(kt, 0, hd * dh, dh)?;
            let mut sc = s.tape.matmul(qh, kh)?;
            if let Some(b) = bias {
                sc = s.tape.add(sc, b)?;
            }
            let a = s.tape.softmax(sc, 1)?;
            let vh = s.tape.slice(v, 1, hd * dh, dh)?;
            outs.push(s.tape.matmul(a, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            s.tape.concat(&outs, 1)?
        };
        self.linear(s, cat, ids.o)
    }

    /// One pre-norm encoder block. `kv_prefix` rows join the keys and
    /// values only; their own outputs are never computed.
    fn encoder_layer(
        &'a self,
        s: &mut Session<'a>,
        i: usize,
        x: Var,
        kv_prefix: Option<Var>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let l = &self.layout.encoder[i];
        let a = self.norm(s, x, l.ln1)?;
        let kv = match kv_prefix {
            Some(p) => {
                let ap = self.norm(s, p, l.ln1)?;
                s.tape.concat(&[ap, a], 0)?
            }
            None => a,
        };
        let kv = self.project_kv(s, &l.attn, kv)?;
        let mut y = self.attention(s, "encoder", i, &l.attn, a, kv, mask)?;
        y = s.dropout(y)?;
        if let Some(ad) = l.adapters {
            y = self.adapter(s, y, ad[0])?;
        }
        let x = s.tape.add(x, y)?;
        let n = self.norm(s, x, l.ln2)?;
        let mut f = self.ffn(s, n, l.ffn)?;
        f = s.dropout(f)?;
        if let Some(ad) = l.adapters {
            f = self.adapter(s, f, ad[1])?;
        }
        Ok(s.tape.add(x, f)?)
    }

    fn decoder_layer(
        &'a self,
        s: &mut Session<'a>,
        i: usize,
        x: Var,
        kv_prefix: Option<Var>,
        self_mask: &AttentionMask,
        memory: &Memory,
    ) -> Result<Var> {
        let l = &self.layout.decoder[i];
        let a = self.norm(s, x, l.ln1)?;
        let kv = match kv_prefix {
            Some(p) => {
                let ap = self.norm(s, p, l.ln1)?;
                s.tape.concat(&[ap, a], 0)?
            }
            None => a,
        };
        let kv = self.project_kv(s, &l.self_attn, kv)?;
        let mut y = self.attention(s, "decoder_self", i, &l.self_attn, a, kv, Some(self_mask))?;
        y = s.dropout(y)?;
        if let Some(ad) = l.adapters {
            y = self.adapter(s, y, ad[0])?;
        }
        let x = s.tape.add(x, y)?;
        let c = self.norm(s, x, l.ln2)?;
        let nq = s.tape.value(c).rows();
        let cross_mask = AttentionMask::full(nq, memory.key_ok.len()).restrict_keys(&memory.key_ok);
        let mut y = self.attention(s, "decoder_cross", i, &l.cross_attn, c, memory.cross_kv[i], Some(&cross_mask))?;
        y = s.dropout(y)?;
        let x = s.tape.add(x, y)?;
        let n = self.norm(s, x, l.ln3)?;
        let mut f = self.ffn(s, n, l.ffn)?;
        f = s.dropout(f)?;
        if let Some(ad) = l.adapters {
            f = self.adapter(s, f, ad[1])?;
        }
        Ok(s.tape.add(x, f)?)
    }

    /// Embed `[image ; SEP ; text]`, optionally padded with `PAD` rows up to
    /// `pad_to` positions.
    pub fn embed_inputs(
        &'a self,
        s: &mut Session<'a>,
        sample: &TaskSample,
        pad_to: Option<usize>,
    ) -> Result<EncodedBatch> {
        let c = &self.config;
        let g = c.grid_side;
        if sample.grid_side != g || sample.grid.len() != g * g {
            return Err(Error::contract(format!(
                "sample grid is {}x{} ({} cells) but the model expects {g}x{g}",
                sample.grid_side,
                sample.grid_side,
                sample.grid.len()
            )));
        }
        if let Some(&bad) = sample.grid.iter().find(|&&v| v >= c.image_vocab_size) {
            return Err(Error::contract(format!(
                "grid symbol {bad} outside image vocabulary of {}",
                c.image_vocab_size
            )));
        }
        if sample.text.len() > c.max_text_len {
            return Err(Error::Truncation {
                len: sample.text.len(),
                max: c.max_text_len,
            });
        }
        if let Some(&bad) = sample.text.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::contract(format!("text token {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let cells = g * g;
        let rows: Vec<usize> = (0..cells).map(|i| i / g).collect();
        let cols: Vec<usize> = (0..cells).map(|i| i % g).collect();
        let ly = &self.layout;
        let (image, row, col, token) = (s.p(ly.image), s.p(ly.row), s.p(ly.col), s.p(ly.token));
        let e = s.tape.gather(image, &sample.grid)?;
        let r = s.tape.gather(row, &rows)?;
        let cpos = s.tape.gather(col, &cols)?;
        let e = s.tape.add(e, r)?;
        let img = s.tape.add(e, cpos)?;
        let sep = s.tape.gather(token, &[Vocab::SEP])?;
        let mut parts = vec![img, sep];
        let mut provenance = vec![Provenance::Image; cells];
        provenance.push(Provenance::Separator);
        let n = sample.text.len();
        if n > 0 {
            let tp = s.p(ly.text_pos);
            let t = s.tape.gather(token, &sample.text)?;
            let pos: Vec<usize> = (0..n).collect();
            let p = s.tape.gather(tp, &pos)?;
            parts.push(s.tape.add(t, p)?);
            provenance.extend(std::iter::repeat(Provenance::Text).take(n));
        }
        if let Some(total) = pad_to {
            if total > provenance.len() {
                let k = total - provenance.len();
                parts.push(s.tape.gather(token, &vec![Vocab::PAD; k])?);
                provenance.extend(std::iter::repeat(Provenance::Padding).take(k));
            }
        }
        Ok(EncodedBatch {
            embeddings: s.tape.concat(&parts, 0)?,
            provenance,
        })
    }

    /// Validated prompt length for a stack, `None` when unprompted or `l = 0`.
    fn prompt_len(&self, s: &Session<'a>, blocks: &[Var], layers: usize, stack: &str) -> Result<Option<usize>> {
        if blocks.is_empty() {
            return Ok(None);
        }
        if blocks.len() != layers {
            return Err(Error::contract(format!(
                "{stack} prompts cover {} layers, expected {layers}",
                blocks.len()
            )));
        }
        let h = self.config.hidden_dim;
        let l = s.tape.value(blocks[0]).rows();
        for b in blocks {
            let t = s.tape.value(*b);
            if t.rank() != 2 || t.cols() != h || t.rows() != l {
                return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                    op: "prompt block",
                    lhs: vec![l, h],
                    rhs: t.shape().to_vec(),
                }));
            }
        }
        Ok((l > 0).then_some(l))
    }

    pub fn encoder_forward(
        &'a self,
        s: &mut Session<'a>,
        batch: &EncodedBatch,
        prefix: Option<&PrefixInputs>,
    ) -> Result<Memory> {
        let layers = self.config.num_encoder_layers;
        let src = batch.provenance.len();
        let key_ok = batch.key_mask();
        let padded = key_ok.iter().any(|ok| !ok);
        let prompts = match prefix {
            Some(p) => self.prompt_len(s, &p.encoder, layers, "encoder")?.map(|l| (p, l)),
            None => None,
        };
        let mut x = batch.embeddings;
        let mut carried: Option<Var> = None;
        for i in 0..layers {
            match prompts {
                None => {
                    let mask = padded.then(|| AttentionMask::full(src, src).restrict_keys(&key_ok));
                    x = self.encoder_layer(s, i, x, None, mask.as_ref())?;
                }
                Some((p, l)) => {
                    let block = match carried {
                        Some(c) if p.carry => s.tape.add(c, p.encoder[i])?,
                        _ => p.encoder[i],
                    };
                    let mut ok = vec![true; l];
                    ok.extend_from_slice(&key_ok);
                    let last = i + 1 == layers;
                    if p.carry || (last && !p.strip_encoder) {
                        let (joined, mask) = inject_prefix(&mut s.tape, x, block, false)?;
                        let mask = mask.restrict_keys(&ok);
                        let out = self.encoder_layer(s, i, joined, None, Some(&mask))?;
                        carried = Some(s.tape.slice(out, 0, 0, l)?);
                        x = s.tape.slice(out, 0, l, src)?;
                    } else {
                        let mask = AttentionMask::full(src, l + src).restrict_keys(&ok);
                        x = self.encoder_layer(s, i, x, Some(block), Some(&mask))?;
                    }
                }
            }
        }
        let (states, key_ok, prompt_rows) = match (prompts, carried) {
            (Some((p, l)), Some(c)) if !p.strip_encoder => {
                let mut ok = vec![true; l];
                ok.extend_from_slice(&key_ok);
                (s.tape.concat(&[c, x], 0)?, ok, l)
            }
            _ => (x, key_ok, 0),
        };
        let states = self.norm(s, states, self.layout.enc_norm)?;
        self.memory_from_states(s, states, key_ok, prompt_rows)
    }

    /// Wrap final encoder states, projecting the cross-attention keys and
    /// values of every decoder layer.
    pub fn memory_from_states(
        &'a self,
        s: &mut Session<'a>,
        states: Var,
        key_ok: Vec<bool>,
        prompt_rows: usize,
    ) -> Result<Memory> {
        let mut cross_kv = Vec::with_capacity(self.layout.decoder.len());
        for l in &self.layout.decoder {
            cross_kv.push(self.project_kv(s, &l.cross_attn, states)?);
        }
        Ok(Memory {
            states,
            key_ok,
            prompt_rows,
            cross_kv,
        })
    }

    /// Logits `[T × V]` for decoder input `tokens` (starting with `BOS`).
    pub fn decoder_forward(
        &'a self,
        s: &mut Session<'a>,
        memory: &Memory,
        tokens: &[usize],
        prefix: Option<&PrefixInputs>,
    ) -> Result<Var> {
        let c = &self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::contract("decoder input must start with BOS"));
        }
        if t > c.max_target_len {
            return Err(Error::Truncation {
                len: t,
                max: c.max_target_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x >= c.vocab_size) {
            return Err(Error::contract(format!("target token {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let ly = &self.layout;
        let (token, tpos) = (s.p(ly.token), s.p(ly.target_pos));
        let e = s.tape.gather(token, tokens)?;
        let pos: Vec<usize> = (0..t).collect();
        let p = s.tape.gather(tpos, &pos)?;
        let mut y = s.tape.add(e, p)?;
        let layers = c.num_decoder_layers;
        let prompts = match prefix {
            Some(p) => self.prompt_len(s, &p.decoder, layers, "decoder")?.map(|l| (p, l)),
            None => None,
        };
        let mut carried: Option<Var> = None;
        for i in 0..layers {
            match prompts {
                None => {
                    y = self.decoder_layer(s, i, y, None, &AttentionMask::causal(t), memory)?;
                }
                Some((p, l)) => {
                    let block = match carried {
                        Some(c) if p.carry => s.tape.add(c, p.decoder[i])?,
                        _ => p.decoder[i],
                    };
                    if p.carry {
                        let (joined, mask) = inject_prefix(&mut s.tape, y, block, true)?;
                        let out = self.decoder_layer(s, i, joined, None, &mask, memory)?;
                        carried = Some(s.tape.slice(out, 0, 0, l)?);
                        y = s.tape.slice(out, 0, l, t)?;
                    } else {
                        let mask = AttentionMask::new(t, l + t, |q, k| k < l || k - l <= q);
                        y = self.decoder_layer(s, i, y, Some(block), &mask, memory)?;
                    }
                }
            }
        }
        let h = self.norm(s, y, ly.dec_norm)?;
        self.linear(s, h, ly.out)
    }

    /// Teacher-forced loss (mean token cross-entropy, target + EOS).
    pub fn loss(
        &'a self,
        s: &mut Session<'a>,
        sample: &TaskSample,
        prefix: Option<&PrefixInputs>,
        smoothing: f64,
    ) -> Result<Var> {
        let batch = self.embed_inputs(s, sample, None)?;
        let memory = self.encoder_forward(s, &batch, prefix)?;
        self.loss_from_memory(s, &memory, sample, prefix, smoothing)
    }

    pub fn loss_from_memory(
        &'a self,
        s: &mut Session<'a>,
        memory: &Memory,
        sample: &TaskSample,
        prefix: Option<&PrefixInputs>,
        smoothing: f64,
    ) -> Result<Var> {
        let (input, labels) = sample.teacher_forcing();
        let logits = self.decoder_forward(s, memory, &input, prefix)?;
        Ok(s.tape.cross_entropy(logits, &labels, smoothing)?)
    }

    /// Argmax decoding until `EOS` or `max_len` tokens. Ties go to the
    /// lowest token id.
    pub fn greedy_decode(
        &'a self,
        s: &mut Session<'a>,
        memory: &Memory,
        prefix: Option<&PrefixInputs>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("greedy_decode needs max_len >= 1"));
        }
        let max_len = max_len.min(self.config.max_target_len - 1);
        let mut tokens = vec![Vocab::BOS];
        for _ in 0..max_len {
            let logits = self.decoder_forward(s, memory, &tokens, prefix)?;
            let v = s.tape.value(logits);
            let last = v.row(v.rows() - 1);
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == Vocab::EOS {
                break;
            }
            tokens.push(best);
        }
        tokens.remove(0);
        Ok(tokens)
    }

    /// Sequence log-likelihood (target tokens plus the closing `EOS`) of
    /// each candidate, softmaxed across candidates.
    pub fn score_candidates(
        &'a self,
        s: &mut Session<'a>,
        memory: &Memory,
        prefix: Option<&PrefixInputs>,
        candidates: &[Vec<usize>],
    ) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::contract("score_candidates needs at least one candidate"));
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for cand in candidates {
            if cand.is_empty() {
                return Err(Error::contract("empty candidate sequence"));
            }
            let mut input = vec![Vocab::BOS];
            input.extend_from_slice(cand);
            let logits = self.decoder_forward(s, memory, &input, prefix)?;
            let v = s.tape.value(logits);
            let mut total = 0.0;
            for (r, &label) in cand.iter().chain(std::iter::once(&Vocab::EOS)).enumerate() {
                total += row_log_softmax(v.row(r))[label];
            }
            scores.push(total);
        }
        row_softmax(&mut scores);
        Ok(scores)
    }

    /// Task prediction: candidate argmax for QA, greedy decoding otherwise.
    pub fn predict(
        &'a self,
        s: &mut Session<'a>,
        sample: &TaskSample,
        prefix: Option<&PrefixInputs>,
    ) -> Result<Vec<usize>> {
        let batch = self.embed_inputs(s, sample, None)?;
        self.predict_from_batch(s, &batch, sample, prefix)
    }

    /// [`Self::predict`] from already embedded encoder inputs.
    pub fn predict_from_batch(
        &'a self,
        s: &mut Session<'a>,
        batch: &EncodedBatch,
        sample: &TaskSample,
        prefix: Option<&PrefixInputs>,
    ) -> Result<Vec<usize>> {
        let memory = self.encoder_forward(s, batch, prefix)?;
        match (&sample.candidates, sample.kind) {
            (Some(cands), TaskKind::Qa) => {
                let probs = self.score_candidates(s, &memory, prefix, cands)?;
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                Ok(cands[best].clone())
            }
            _ => self.greedy_decode(s, &memory, prefix, self.config.max_target_len - 1),
        }
    }
}
