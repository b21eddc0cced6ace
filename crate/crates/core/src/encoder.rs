//! Entity- and timestep-aware step inputs, a small pre-norm transformer, and
//! the start/end span head.
//!
//! Every step of one entity is encoded in a single batch: inputs are padded
//! to a common length `m` and stacked into an `[S * m, d]` matrix, tokens as
//! rows. Attention never crosses step boundaries.

use std::ops::Range;
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ingest::vocab::{self, Vocab, CLS, PAD, SEP};
use crate::numerics::{uniform_init, Bound, NumericsError, ParamId, ParamStore, Rng64, Tape, Tensor, Var, NEG_MASK};
use crate::schema::{EntityState, ProceduralExample, Span};

/// Timestep ids.
pub const T_PAD: usize = 0;
pub const T_PAST: usize = 1;
pub const T_CURRENT: usize = 2;
pub const T_FUTURE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub m_max: usize,
    pub max_span_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            d: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            m_max: 256,
            max_span_len: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.vocab_size <= vocab::NUM_SPECIALS {
            return Err(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.m_max < 8 || self.max_span_len == 0 || self.ff == 0 {
            return Err("m_max >= 8, max_span_len >= 1 and ff >= 1 are required".into());
        }
        Ok(())
    }
}

/// Ablation switches. `no_go` only affects the action head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Per-step cross-entropy and argmax instead of the CRF.
    pub no_go: bool,
    /// Step `t` sees sentences `1..=t` only.
    pub no_gc: bool,
    /// Timestep embeddings dropped.
    pub no_t: bool,
    /// Question omits the entity name.
    pub no_e: bool,
}

/// One encoder input: `[CLS] question [SEP] paragraph [SEP]`, then padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepInput {
    pub step: usize,
    pub entity: String,
    pub tokens: Vec<usize>,
    pub timesteps: Vec<usize>,
    /// 1-based sentence of each paragraph token.
    pub sentence_of: Vec<Option<usize>>,
    /// Byte range of each paragraph token in the joined paragraph text.
    pub offsets: Vec<Option<(usize, usize)>>,
    /// Token positions of the paragraph region.
    pub paragraph: Range<usize>,
    /// Tokens before padding.
    pub valid_len: usize,
    /// Paragraph tokens dropped to fit `m_max`.
    pub truncated: usize,
}

impl StepInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_to(&mut self, m: usize) {
        assert!(m >= self.tokens.len(), "cannot pad {} tokens down to {m}", self.tokens.len());
        self.tokens.resize(m, PAD);
        self.timesteps.resize(m, T_PAD);
        self.sentence_of.resize(m, None);
        self.offsets.resize(m, None);
    }

    pub fn is_pad(&self, i: usize) -> bool {
        i >= self.valid_len
    }

    /// Gold `(start, end)` token indices for a state; `(0, 0)` is the [CLS]
    /// answer, used for non-location states and spans outside the input.
    pub fn target(&self, state: &EntityState) -> (usize, usize) {
        let Some(span) = state.span() else { return (0, 0) };
        let start = self
            .paragraph
            .clone()
            .find(|&i| self.offsets[i].is_some_and(|(s, e)| s <= span.start && span.start < e));
        let end = self
            .paragraph
            .clone()
            .rev()
            .find(|&i| self.offsets[i].is_some_and(|(s, e)| s < span.end && span.end <= e));
        match (start, end) {
            (Some(i), Some(j)) if i <= j => (i, j),
            _ => (0, 0),
        }
    }

    /// Paragraph span covered by token positions `start..=end`.
    pub fn span_text(&self, example: &ProceduralExample, start: usize, end: usize) -> Option<Span> {
        let (s, _) = self.offsets.get(start).copied().flatten()?;
        let (_, e) = self.offsets.get(end).copied().flatten()?;
        let sent = self.sentence_of[start]?;
        let text = example.paragraph_text();
        Some(Span::new(text.get(s..e)?, sent, s, e))
    }
}

fn timestep_for(sentence: usize, step: usize) -> usize {
    if step == 0 || sentence > step {
        T_FUTURE
    } else if sentence < step {
        T_PAST
    } else {
        T_CURRENT
    }
}

/// Builds the unpadded input of `entity` at step `t` (`0..=n`).
pub fn build_step_input(
    example: &ProceduralExample,
    entity: &str,
    t: usize,
    vocab: &Vocab,
    config: &EncoderConfig,
    ablations: &Ablations,
) -> StepInput {
    let n = example.steps();
    assert!(t <= n, "step {t} outside 0..={n}");
    let question = if ablations.no_e {
        "where is".to_string()
    } else {
        format!("where is {entity}")
    };
    let mut tokens = vec![CLS];
    tokens.extend(vocab.tokenize(&question));
    tokens.push(SEP);
    let para_start = tokens.len();
    let mut timesteps = vec![T_CURRENT; para_start];
    let mut sentence_of = vec![None; para_start];
    let mut offsets = vec![None; para_start];

    let budget = config.m_max.saturating_sub(para_start + 1);
    let visible = if ablations.no_gc { t } else { n };
    let bases = example.sentence_offsets();
    let mut truncated = 0;
    for (s, sentence) in example.sentences.iter().enumerate().take(visible) {
        for tok in vocab::split(sentence) {
            if tokens.len() - para_start >= budget {
                truncated += 1;
                continue;
            }
            tokens.push(vocab.id(&tok.text));
            timesteps.push(timestep_for(s + 1, t));
            sentence_of.push(Some(s + 1));
            offsets.push(Some((bases[s] + tok.start, bases[s] + tok.end)));
        }
    }
    let para_end = tokens.len();
    tokens.push(SEP);
    timesteps.push(T_CURRENT);
    sentence_of.push(None);
    offsets.push(None);
    let valid_len = tokens.len();
    StepInput {
        step: t,
        entity: entity.to_string(),
        tokens,
        timesteps,
        sentence_of,
        offsets,
        paragraph: para_start..para_end,
        valid_len,
        truncated,
    }
}

/// Inputs for `steps` of one entity, padded to their common maximum length.
pub fn build_entity_inputs(
    example: &ProceduralExample,
    entity: &str,
    steps: impl IntoIterator<Item = usize>,
    vocab: &Vocab,
    config: &EncoderConfig,
    ablations: &Ablations,
) -> Vec<StepInput> {
    let mut inputs: Vec<StepInput> = steps
        .into_iter()
        .map(|t| build_step_input(example, entity, t, vocab, config, ablations))
        .collect();
    let m = inputs.iter().map(StepInput::len).max().unwrap_or(0);
    for inp in &mut inputs {
        inp.pad_to(m);
    }
    inputs
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of the encoder and span head inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    time: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_start: ParamId,
    w_end: ParamId,
}

/// Encoder output for a batch of `steps` inputs of length `len`.
pub struct Encoded<'t> {
    /// `[steps * len, d]`.
    pub hidden: Var<'t>,
    pub steps: usize,
    pub len: usize,
}

impl<'t> Encoded<'t> {
    /// Stacked [CLS] rows, `[steps, d]`.
    pub fn cls(&self) -> Result<Var<'t>, NumericsError> {
        let ids: Vec<usize> = (0..self.steps).map(|s| s * self.len).collect();
        self.hidden.gather(&ids)
    }
}

/// Attention probabilities recorded during a traced forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub steps: usize,
    pub heads: usize,
    pub len: usize,
    /// Per layer, `[steps * heads * len, len]` with rows `(step, head, query)`.
    pub layers: Vec<Tensor>,
}

impl AttentionTrace {
    pub fn weight(&self, layer: usize, step: usize, head: usize, query: usize, key: usize) -> f64 {
        let row = (step * self.heads + head) * self.len + query;
        self.layers[layer].at(row, key)
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng64) -> Self {
        Self::with_prefix("enc", config, store, rng)
    }

    pub fn with_prefix(prefix: &str, config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng64) -> Self {
        let EncoderConfig { vocab_size, d, ff, m_max, .. } = config;
        let mut init = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.add(format!("{prefix}.{name}"), uniform_init(shape, rng))
        };
        // layer norms start at the identity
        let norm = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{prefix}.{name}_g"), Tensor::filled(&[d], 1.0)),
                store.add(format!("{prefix}.{name}_b"), Tensor::zeros(&[d])),
            )
        };
        let tok = init(store, "tok".into(), &[vocab_size, d]);
        let pos = init(store, "pos".into(), &[m_max, d]);
        let time = init(store, "time".into(), &[4, d]);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let (ln1_g, ln1_b) = norm(store, format!("l{l}.ln1"));
            let wq = init(store, format!("l{l}.wq"), &[d, d]);
            let wk = init(store, format!("l{l}.wk"), &[d, d]);
            let wv = init(store, format!("l{l}.wv"), &[d, d]);
            let wo = init(store, format!("l{l}.wo"), &[d, d]);
            let (ln2_g, ln2_b) = norm(store, format!("l{l}.ln2"));
            let w1 = init(store, format!("l{l}.w1"), &[d, ff]);
            let b1 = init(store, format!("l{l}.b1"), &[ff]);
            let w2 = init(store, format!("l{l}.w2"), &[ff, d]);
            let b2 = init(store, format!("l{l}.b2"), &[d]);
            layers.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let (lnf_g, lnf_b) = norm(store, "lnf".into());
        let w_start = init(store, "w_start".into(), &[d, 1]);
        let w_end = init(store, "w_end".into(), &[d, 1]);
        Self {
            config,
            tok,
            pos,
            time,
            layers,
            lnf_g,
            lnf_b,
            w_start,
            w_end,
        }
    }

    pub fn timestep_table(&self) -> ParamId {
        self.time
    }

    pub fn span_weights(&self) -> (ParamId, ParamId) {
        (self.w_start, self.w_end)
    }

    pub fn encode<'t>(
        &self,
        bound: &Bound<'t>,
        inputs: &[StepInput],
        no_t: bool,
    ) -> Result<Encoded<'t>, NumericsError> {
        self.run(bound, inputs, no_t, None)
    }

    /// Like [`Self::encode`], also returning every attention matrix.
    pub fn encode_with_attention<'t>(
        &self,
        bound: &Bound<'t>,
        inputs: &[StepInput],
        no_t: bool,
    ) -> Result<(Encoded<'t>, AttentionTrace), NumericsError> {
        let mut layers = Vec::new();
        let enc = self.run(bound, inputs, no_t, Some(&mut layers))?;
        let trace = AttentionTrace {
            steps: enc.steps,
            heads: self.config.heads,
            len: enc.len,
            layers,
        };
        Ok((enc, trace))
    }

    fn run<'t>(
        &self,
        bound: &Bound<'t>,
        inputs: &[StepInput],
        no_t: bool,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Encoded<'t>, NumericsError> {
        let steps = inputs.len();
        let len = inputs.first().map_or(0, StepInput::len);
        if steps == 0 || len == 0 {
            return Err(NumericsError::Shape {
                op: "encode",
                detail: "empty input batch".into(),
            });
        }
        if let Some(bad) = inputs.iter().find(|i| i.len() != len) {
            return Err(NumericsError::Shape {
                op: "encode",
                detail: format!("step {} has length {}, batch length {}", bad.step, bad.len(), len),
            });
        }
        if len > self.config.m_max {
            return Err(NumericsError::Shape {
                op: "encode",
                detail: format!("length {} exceeds m_max {}", len, self.config.m_max),
            });
        }
        let tokens: Vec<usize> = inputs.iter().flat_map(|i| i.tokens.iter().copied()).collect();
        let positions: Vec<usize> = (0..steps).flat_map(|_| 0..len).collect();
        let valid: Vec<bool> = inputs.iter().flat_map(|i| (0..len).map(|p| !i.is_pad(p))).collect();

        let mut x = bound.get(self.tok).gather(&tokens)?.add(bound.get(self.pos).gather(&positions)?)?;
        if !no_t {
            let ts: Vec<usize> = inputs.iter().flat_map(|i| i.timesteps.iter().copied()).collect();
            x = x.add(bound.get(self.time).gather(&ts)?)?;
        }
        let valid = Rc::new(valid);
        for layer in &self.layers {
            let h = x.layer_norm(bound.get(layer.ln1_g), bound.get(layer.ln1_b))?;
            let q = h.matmul(bound.get(layer.wq))?;
            let k = h.matmul(bound.get(layer.wk))?;
            let v = h.matmul(bound.get(layer.wv))?;
            let a = attention(q, k, v, Rc::clone(&valid), steps, len, self.config.heads)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(attention_probs(&q.value(), &k.value(), &valid, steps, len, self.config.heads));
            }
            x = x.add(a.matmul(bound.get(layer.wo))?)?;
            let h = x.layer_norm(bound.get(layer.ln2_g), bound.get(layer.ln2_b))?;
            let f = h
                .matmul(bound.get(layer.w1))?
                .add_bias(bound.get(layer.b1))?
                .gelu()?
                .matmul(bound.get(layer.w2))?
                .add_bias(bound.get(layer.b2))?;
            x = x.add(f)?;
        }
        let hidden = x.layer_norm(bound.get(self.lnf_g), bound.get(self.lnf_b))?;
        Ok(Encoded { hidden, steps, len })
    }

    /// Start and end logits `[steps, len]`, padding masked out.
    pub fn span_logits<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        encoded: &Encoded<'t>,
        inputs: &[StepInput],
    ) -> Result<(Var<'t>, Var<'t>), NumericsError> {
        let shape = [encoded.steps, encoded.len];
        let mask: Vec<f64> = inputs
            .iter()
            .flat_map(|i| (0..encoded.len).map(|p| if i.is_pad(p) { NEG_MASK } else { 0.0 }))
            .collect();
        let mask = tape.constant(Tensor::new(shape.to_vec(), mask)?);
        let start = encoded.hidden.matmul(bound.get(self.w_start))?.reshape(&shape)?.add(mask)?;
        let end = encoded.hidden.matmul(bound.get(self.w_end))?.reshape(&shape)?.add(mask)?;
        Ok((start, end))
    }
}

fn head_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax weights of one query row over the valid keys of its step; pads
/// receive exactly zero. Keys are visited in order, so appending padding
/// never changes the result.
#[allow(clippy::too_many_arguments)]
fn attend_row(
    q: &Tensor,
    k: &Tensor,
    valid: &[bool],
    row: usize,
    base: usize,
    len: usize,
    cols: Range<usize>,
    scale: f64,
    out: &mut [f64],
) {
    let d = q.cols();
    let qi = &q.data()[row * d + cols.start..row * d + cols.end];
    let mut max = f64::NEG_INFINITY;
    for j in 0..len {
        if valid[base + j] {
            let kj = &k.data()[(base + j) * d + cols.start..(base + j) * d + cols.end];
            out[j] = head_dot(qi, kj) * scale;
            max = max.max(out[j]);
        }
    }
    let mut sum = 0.0;
    for j in 0..len {
        if valid[base + j] {
            out[j] = (out[j] - max).exp();
            sum += out[j];
        } else {
            out[j] = 0.0;
        }
    }
    for p in out.iter_mut().take(len) {
        *p /= sum;
    }
}

/// Probabilities `[steps * heads * len, len]`, rows ordered `(step, head, query)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, valid: &[bool], steps: usize, len: usize, heads: usize) -> Tensor {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[steps * heads * len, len]);
    for s in 0..steps {
        for h in 0..heads {
            for i in 0..len {
                let row = (s * heads + h) * len + i;
                let dst = &mut out.data_mut()[row * len..(row + 1) * len];
                attend_row(q, k, valid, s * len + i, s * len, len, h * dh..(h + 1) * dh, scale, dst);
            }
        }
    }
    out
}

/// Multi-head scaled dot-product attention over `steps` independent blocks
/// of `len` rows, with a key-padding mask. `q`, `k`, `v` are `[steps * len, d]`.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    valid: Rc<Vec<bool>>,
    steps: usize,
    len: usize,
    heads: usize,
) -> Result<Var<'t>, NumericsError> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let shape = qv.shape().to_vec();
    if shape.len() != 2 || kv.shape() != shape.as_slice() || vv.shape() != shape.as_slice() {
        return Err(NumericsError::Shape {
            op: "attention",
            detail: format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
        });
    }
    let (rows, d) = (shape[0], shape[1]);
    if rows != steps * len || valid.len() != rows || heads == 0 || d % heads != 0 {
        return Err(NumericsError::Shape {
            op: "attention",
            detail: format!("{rows} rows for {steps} x {len}, d = {d}, heads = {heads}"),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[rows, d]);
    let mut p = vec![0.0; len];
    for s in 0..steps {
        let base = s * len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                attend_row(&qv, &kv, &valid, base + i, base, len, cols.clone(), scale, &mut p);
                let o = &mut out.data_mut()[(base + i) * d + cols.start..(base + i) * d + cols.end];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != 0.0 {
                        let vj = &vv.data()[(base + j) * d + cols.start..(base + j) * d + cols.end];
                        for (o, x) in o.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
    }
    let tape = q.tape();
    tape.custom(&[q, k, v], out, move |g, ins| {
        attention_backward(g, &ins[0], &ins[1], &ins[2], &valid, steps, len, heads)
    })
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &Tensor,
    q: &Arc<Tensor>,
    k: &Arc<Tensor>,
    v: &Arc<Tensor>,
    valid: &[bool],
    steps: usize,
    len: usize,
    heads: usize,
) -> Vec<Tensor> {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let shape = q.shape().to_vec();
    let (mut dq, mut dk, mut dv) = (Tensor::zeros(&shape), Tensor::zeros(&shape), Tensor::zeros(&shape));
    let mut p = vec![0.0; len];
    let mut dp = vec![0.0; len];
    for s in 0..steps {
        let base = s * len;
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..len {
                let row = base + i;
                attend_row(q, k, valid, row, base, len, c0..c0 + dh, scale, &mut p);
                let go = &g.data()[row * d + c0..row * d + c0 + dh];
                let mut dot = 0.0;
                for j in 0..len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let r = (base + j) * d + c0;
                    dp[j] = head_dot(go, &v.data()[r..r + dh]);
                    dot += p[j] * dp[j];
                    for (x, y) in dv.data_mut()[r..r + dh].iter_mut().zip(go) {
                        *x += p[j] * y;
                    }
                }
                let qi = &q.data()[row * d + c0..row * d + c0 + dh];
                for j in 0..len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let r = (base + j) * d + c0;
                    for t in 0..dh {
                        dq.data_mut()[row * d + c0 + t] += ds * k.data()[r + t];
                        dk.data_mut()[r + t] += ds * qi[t];
                    }
                }
            }
        }
    }
    vec![dq, dk, dv]
}

/// Decoded span: the [CLS] answer or inclusive token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanChoice {
    Cls,
    Tokens { start: usize, end: usize },
}

/// Exhaustive argmax of `p_start[i] * p_end[j]` over valid pairs: `(0, 0)`,
/// or `i <= j < i + max_span_len` inside the paragraph. Ties keep the pair
/// seen first (lowest start, then lowest end).
pub fn decode_span(p_start: &[f64], p_end: &[f64], paragraph: Range<usize>, max_span_len: usize) -> (SpanChoice, f64) {
    let mut best = (SpanChoice::Cls, p_start[0] * p_end[0]);
    for i in paragraph.clone() {
        let last = (i + max_span_len).min(paragraph.end);
        for j in i..last {
            let score = p_start[i] * p_end[j];
            if score > best.1 {
                best = (SpanChoice::Tokens { start: i, end: j }, score);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::procedural::{parse_jsonl, ActionSource};
    use crate::numerics::{seeded_rng, softmax};
    use crate::schema::RecreationPolicy;

    fn example(sentences: &[&str]) -> ProceduralExample {
        let sents: Vec<String> = sentences.iter().map(|s| format!("{s:?}")).collect();
        let line = format!(r#"{{"para_id":"p","sentences":[{}],"entities":[],"annotated":true}}"#, sents.join(","));
        parse_jsonl(&line, ActionSource::Derive, RecreationPolicy::Reject).unwrap().remove(0)
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 64,
            d: 8,
            layers: 1,
            heads: 2,
            ff: 8,
            m_max: 32,
            max_span_len: 3,
        }
    }

    #[test]
    fn timestep_rule_table() {
        let ex = example(&["a b", "c d", "e f"]);
        let (v, cfg, ab) = (Vocab::new(64), EncoderConfig::default(), Ablations::default());
        let inp = build_step_input(&ex, "water", 2, &v, &cfg, &ab);
        assert_eq!(inp.timesteps, vec![2, 2, 2, 2, 2, 1, 1, 2, 2, 3, 3, 2]);
        let t0 = build_step_input(&ex, "water", 0, &v, &cfg, &ab);
        assert_eq!(&t0.timesteps[5..11], &[3; 6]);
        let t3 = build_step_input(&ex, "water", 3, &v, &cfg, &ab);
        assert_eq!(&t3.timesteps[5..11], &[1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn truncation_is_counted() {
        let ex = example(&["a b c d e f g h i j k l"]);
        let cfg = EncoderConfig {
            m_max: 10,
            ..EncoderConfig::default()
        };
        let inp = build_step_input(&ex, "x", 1, &Vocab::new(64), &cfg, &Ablations::default());
        assert_eq!(inp.len(), 10);
        assert_eq!(inp.truncated, 12 - 4);
    }

    #[test]
    fn targets_follow_offsets() {
        let ex = example(&["Water moves to the soil.", "It stays."]);
        let v = Vocab::new(64);
        let inp = build_step_input(&ex, "water", 1, &v, &EncoderConfig::default(), &Ablations::default());
        let span = ex.locate_span("the soil", 1).unwrap();
        let (i, j) = inp.target(&EntityState::Location(span.clone()));
        assert_eq!(inp.span_text(&ex, i, j).unwrap(), span);
        assert_eq!(inp.target(&EntityState::UnknownLocation), (0, 0));
    }

    #[test]
    fn cls_pair_from_one_hot_cls() {
        let p = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(decode_span(&p, &p, 2..4, 8).0, SpanChoice::Cls);
    }

    #[test]
    fn reversed_peaks_never_decode_backwards() {
        let mut ps = vec![0.01; 10];
        let mut pe = vec![0.01; 10];
        ps[5] = 0.9;
        pe[4] = 0.9;
        let (choice, score) = decode_span(&ps, &pe, 2..9, 8);
        // brute force over all valid pairs
        let mut best = ps[0] * pe[0];
        for i in 2..9 {
            for j in i..9 {
                if j - i < 8 {
                    best = best.max(ps[i] * pe[j]);
                }
            }
        }
        assert_eq!(score, best);
        assert_ne!(choice, SpanChoice::Tokens { start: 5, end: 4 });
    }

    #[test]
    fn uniform_ties_pick_earliest() {
        let p = vec![0.1; 10];
        assert_eq!(decode_span(&p, &p, 3..9, 4).0, SpanChoice::Cls);
        // with [CLS] scoring lower, the earliest paragraph pair wins
        let mut q = p.clone();
        q[0] = 0.0;
        assert_eq!(decode_span(&q, &q, 3..9, 4).0, SpanChoice::Tokens { start: 3, end: 3 });
    }

    #[test]
    fn span_width_limit() {
        let mut ps = vec![0.0; 12];
        let mut pe = vec![0.0; 12];
        ps[2] = 1.0;
        pe[10] = 1.0;
        pe[4] = 0.1;
        let (choice, _) = decode_span(&ps, &pe, 2..11, 3);
        assert_eq!(choice, SpanChoice::Tokens { start: 2, end: 4 });
    }

    fn padded_inputs() -> (Encoder, ParamStore, Vec<StepInput>) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_config(), &mut store, &mut seeded_rng(3));
        let inp = StepInput {
            step: 1,
            entity: "x".into(),
            tokens: vec![CLS, 7],
            timesteps: vec![2, 2],
            sentence_of: vec![None, Some(1)],
            offsets: vec![None, Some((0, 1))],
            paragraph: 1..2,
            valid_len: 2,
            truncated: 0,
        };
        let mut padded = inp.clone();
        padded.pad_to(4);
        (enc, store, vec![padded])
    }

    #[test]
    fn padding_gets_zero_attention() {
        let (enc, store, inputs) = padded_inputs();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (_, trace) = enc.encode_with_attention(&bound, &inputs, false).unwrap();
        for l in 0..trace.layers.len() {
            for h in 0..trace.heads {
                for q in 0..2 {
                    assert_eq!(trace.weight(l, 0, h, q, 2), 0.0);
                    assert_eq!(trace.weight(l, 0, h, q, 3), 0.0);
                    let s: f64 = (0..4).map(|k| trace.weight(l, 0, h, q, k)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn padding_does_not_change_valid_rows() {
        let (enc, store, padded) = padded_inputs();
        let mut short = padded[0].clone();
        short.tokens.truncate(2);
        short.timesteps.truncate(2);
        short.sentence_of.truncate(2);
        short.offsets.truncate(2);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let a = enc.encode(&bound, &padded, false).unwrap().hidden.value();
        let b = enc.encode(&bound, &[short], false).unwrap().hidden.value();
        assert_eq!(&a.data()[..16], b.data());
    }

    #[test]
    fn span_probabilities_sum_to_one() {
        let (enc, store, inputs) = padded_inputs();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let e = enc.encode(&bound, &inputs, false).unwrap();
        let (s, en) = enc.span_logits(&tape, &bound, &e, &inputs).unwrap();
        for l in [s, en] {
            let p = softmax(&l.value());
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p.data()[2], 0.0);
        }
    }

    #[test]
    fn zero_timestep_table_makes_steps_identical() {
        let ex = example(&["a b", "c d", "e f"]);
        let cfg = small_config();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut seeded_rng(1));
        store.set(enc.timestep_table(), Tensor::zeros(&[4, cfg.d]));
        let inputs = build_entity_inputs(&ex, "x", 1..=2, &Vocab::new(64), &cfg, &Ablations::default());
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = enc.encode(&bound, &inputs, false).unwrap().hidden.value();
        let m = inputs[0].len() * cfg.d;
        assert_eq!(&h.data()[..m], &h.data()[m..]);
    }
}
