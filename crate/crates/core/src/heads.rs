//! Multi-head attention and the four slot-conditioned prediction heads.
//!
//! Heads run batched: all slot representations form the query rows of one
//! attention call against a turn's token matrix.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, l2_distance, Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateClass {
    None,
    Dontcare,
    Span,
    Inform,
    Refer,
    True,
    False,
}

impl GateClass {
    pub const ALL: [GateClass; 7] = [
        GateClass::None,
        GateClass::Dontcare,
        GateClass::Span,
        GateClass::Inform,
        GateClass::Refer,
        GateClass::True,
        GateClass::False,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<GateClass> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GateClass::None => "none",
            GateClass::Dontcare => "dontcare",
            GateClass::Span => "span",
            GateClass::Inform => "inform",
            GateClass::Refer => "refer",
            GateClass::True => "true",
            GateClass::False => "false",
        }
    }
}

impl fmt::Display for GateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateClass {
    type Err = DstError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| DstError::Unknown { kind: "gate class", value: s.to_string() })
    }
}

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.xavier(&format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.zeros(&format!("{name}.b"), 1, fan_out);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm { gain: store.ones(&format!("{name}.gain"), 1, d), bias: store.zeros(&format!("{name}.bias"), 1, d) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Output of one attention call.
pub struct Attention {
    /// Projected context, `queries × d`.
    pub output: Var,
    /// Head-averaged attention distribution, `queries × keys`.
    pub weights: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Mha {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(DstError::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        Ok(Mha {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        })
    }

    /// Scaled dot-product attention. Keys with `key_mask[j] == false` get
    /// weight exactly zero.
    pub fn forward(&self, g: &mut Graph, query: Var, keys: Var, values: Var, key_mask: Option<&[bool]>) -> Result<Attention> {
        let (qr, qc) = g.value(query).shape();
        let (kr, kc) = g.value(keys).shape();
        let (vr, vc) = g.value(values).shape();
        if qc != self.d || kc != self.d || vc != self.d {
            return Err(DstError::Dimension(format!("attention expects width {}, got {qc}/{kc}/{vc}", self.d)));
        }
        if kr != vr {
            return Err(DstError::Dimension(format!("{kr} keys but {vr} values")));
        }
        if let Some(m) = key_mask {
            if m.len() != kr {
                return Err(DstError::Dimension(format!("mask of length {} for {kr} keys", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(DstError::Numeric("attention with every key masked".into()));
            }
        }
        if qr == 0 || kr == 0 {
            return Err(DstError::Empty("attention over an empty query or key set".into()));
        }
        let q = self.wq.forward(g, query);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, values);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = key_mask {
                scores = g.mask_cols(scores, m);
            }
            let p = g.softmax(scores)?;
            contexts.push(g.matmul(p, vh));
            probs.push(p);
        }
        let ctx = if self.heads == 1 { contexts[0] } else { g.concat_cols(&contexts) };
        let output = self.wo.forward(g, ctx);
        let weights = if self.heads == 1 { probs[0] } else { g.mean(&probs) };
        Ok(Attention { output, weights })
    }
}

/// Pre-softmax scaled dot-product logits of one query against key rows.
pub fn scaled_dot_logits(query: &[f64], keys: &Mat) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    (0..keys.rows).map(|j| dot(query, keys.row(j)) * scale).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub d: usize,
    pub mha_g: Mha,
    pub ln_g: LayerNorm,
    pub w3_g: Linear,
    pub w4_g: Linear,
    pub w5_g: Linear,
    pub mha_q: Mha,
    pub ln_q: LayerNorm,
    pub mha_f: Mha,
    pub w1_f: Linear,
    pub w2_f: Linear,
    pub mha_m: Mha,
    pub ln_v: LayerNorm,
}

/// Graph handles produced by [`HeadParams::forward`].
pub struct HeadOutputs {
    /// Gate logits, `|S| × 7`.
    pub gate_logits: Var,
    /// Tag distribution over turn tokens, `|S| × |X|` (absent when no user token exists).
    pub tag_weights: Option<Var>,
    /// `q_2`, `|S| × d`.
    pub context: Option<Var>,
    /// Refer distribution, `|S| × |S|`.
    pub refer_weights: Var,
    /// Per-slot match distribution `1 × |V_i|` (absent for slots without candidates).
    pub match_weights: Vec<Option<Var>>,
}

impl HeadParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(HeadParams {
            d,
            mha_g: Mha::new(store, "mha_g", d, heads, rng)?,
            ln_g: LayerNorm::new(store, "ln_g", d),
            w3_g: Linear::new(store, "gate.w3", d, d, rng),
            w4_g: Linear::new(store, "gate.w4", 2 * d, 2 * d, rng),
            w5_g: Linear::new(store, "gate.w5", 2 * d, GateClass::ALL.len(), rng),
            mha_q: Mha::new(store, "mha_q", d, heads, rng)?,
            ln_q: LayerNorm::new(store, "ln_q", d),
            mha_f: Mha::new(store, "mha_f", d, heads, rng)?,
            w1_f: Linear::new(store, "refer.w1", d, d, rng),
            w2_f: Linear::new(store, "refer.w2", 2 * d, d, rng),
            mha_m: Mha::new(store, "mha_m", d, heads, rng)?,
            ln_v: LayerNorm::new(store, "ln_v", d),
        })
    }

    /// Slot gate: returns `(logits, g_2)`.
    pub fn gate(&self, g: &mut Graph, slots: Var, turn: Var) -> Result<(Var, Var)> {
        let att = self.mha_g.forward(g, slots, turn, turn, None)?;
        let g2 = self.ln_g.forward(g, att.output);
        let g3 = self.w3_g.forward(g, g2);
        let g3 = g.gelu(g3);
        let cat = g.concat_cols(&[slots, g3]);
        let g4 = self.w4_g.forward(g, cat);
        let g4 = g.gelu(g4);
        Ok((self.w5_g.forward(g, g4), g2))
    }

    /// Sequence tagger: `(tag weights, q_2)`.
    pub fn tag(&self, g: &mut Graph, slots: Var, turn: Var, user_mask: &[bool]) -> Result<(Var, Var)> {
        if !user_mask.iter().any(|&b| b) {
            return Err(DstError::Empty("user mask has no allowed position".into()));
        }
        let att = self.mha_q.forward(g, slots, turn, turn, Some(user_mask))?;
        let q2 = self.ln_q.forward(g, att.output);
        Ok((att.weights, q2))
    }

    pub fn refer(&self, g: &mut Graph, slots: Var, g2: Var, all_slots: Var) -> Result<Var> {
        if g.value(all_slots).rows < 2 {
            return Err(DstError::Dimension("refer head needs at least 2 slots".into()));
        }
        let f1 = self.w1_f.forward(g, g2);
        let f1 = g.gelu(f1);
        let cat = g.concat_cols(&[slots, f1]);
        let f2 = self.w2_f.forward(g, cat);
        let f2 = g.gelu(f2);
        Ok(self.mha_f.forward(g, f2, all_slots, all_slots, None)?.weights)
    }

    /// Value representation `r_V = LayerNorm(MHA_q(r_S, R_V, R_V))` for one slot.
    pub fn value_repr(&self, g: &mut Graph, slot: Var, value_tokens: Var) -> Result<Var> {
        let att = self.mha_q.forward(g, slot, value_tokens, value_tokens, None)?;
        Ok(self.ln_v.forward(g, att.output))
    }

    /// Match weights of `q_2` (1×d) over stacked value representations.
    pub fn match_values(&self, g: &mut Graph, context: Var, values: Var) -> Result<Var> {
        if g.value(values).rows == 0 {
            return Err(DstError::Empty("value matching without candidates".into()));
        }
        Ok(self.mha_m.forward(g, context, values, values, None)?.weights)
    }

    /// All heads for every slot at once. `value_reprs[i]` is `R_{V_i}` for
    /// slot `i` (empty matrix when the slot has no candidates).
    pub fn forward(&self, g: &mut Graph, slots: Var, turn: Var, user_mask: &[bool], value_reprs: &[Mat]) -> Result<HeadOutputs> {
        let n = g.value(slots).rows;
        if value_reprs.len() != n {
            return Err(DstError::Dimension(format!("{} value sets for {n} slots", value_reprs.len())));
        }
        let (gate_logits, g2) = self.gate(g, slots, turn)?;
        let refer_weights = self.refer(g, slots, g2, slots)?;
        let (tag_weights, context) = if user_mask.iter().any(|&b| b) {
            let (t, c) = self.tag(g, slots, turn, user_mask)?;
            (Some(t), Some(c))
        } else {
            (None, None)
        };
        let mut match_weights = Vec::with_capacity(n);
        for (i, rv) in value_reprs.iter().enumerate() {
            match context {
                Some(c) if rv.rows > 0 => {
                    let ci = g.rows(c, &[i]);
                    let vals = g.constant(rv.clone());
                    match_weights.push(Some(self.match_values(g, ci, vals)?));
                }
                _ => match_weights.push(None),
            }
        }
        Ok(HeadOutputs { gate_logits, tag_weights, context, refer_weights, match_weights })
    }
}

/// Per-slot inference outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub gate: Vec<f64>,
    pub tag_weights: Vec<f64>,
    pub context_summary: Vec<f64>,
    pub refer_weights: Vec<f64>,
    pub match_weights: Vec<f64>,
    pub l2_scores: Vec<f64>,
}

impl SlotPrediction {
    pub fn gate_class(&self) -> GateClass {
        GateClass::from_index(argmax(&self.gate)).expect("seven gate classes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    /// Surface tokens of the assembled input, aligned with `tag_weights`.
    pub tokens: Vec<String>,
    pub slots: Vec<SlotPrediction>,
}

impl TurnPrediction {
    /// Reads plain numbers off a finished forward pass.
    pub fn from_outputs(g: &Graph, out: &HeadOutputs, tokens: Vec<String>, value_reprs: &[Mat]) -> Self {
        let probs = softmax_rows(g.value(out.gate_logits));
        let refer = g.value(out.refer_weights);
        let n = refer.rows;
        let slots = (0..n)
            .map(|i| {
                let context_summary = out.context.map(|c| g.value(c).row(i).to_vec()).unwrap_or_default();
                let tag_weights = out.tag_weights.map(|t| g.value(t).row(i).to_vec()).unwrap_or_else(|| vec![0.0; tokens.len()]);
                let match_weights = out.match_weights[i].map(|m| g.value(m).row(0).to_vec()).unwrap_or_default();
                let l2_scores = if context_summary.is_empty() {
                    Vec::new()
                } else {
                    let rv = &value_reprs[i];
                    (0..rv.rows).map(|j| l2_distance(&context_summary, rv.row(j))).collect()
                };
                SlotPrediction {
                    gate: probs.row(i).to_vec(),
                    tag_weights,
                    context_summary,
                    refer_weights: refer.row(i).to_vec(),
                    match_weights,
                    l2_scores,
                }
            })
            .collect();
        TurnPrediction { tokens, slots }
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `q̂_j = (q_j − 1/|X|) / max q`; positive entries are `I` tags.
pub fn normalize_tags(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(DstError::Empty("tag weights of length 0".into()));
    }
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Err(DstError::Numeric("tag weights have no positive entry".into()));
    }
    let base = 1.0 / weights.len() as f64;
    Ok(weights.iter().map(|&q| (q - base) / max).collect())
}

/// Maximal runs of positive entries as half-open ranges.
pub fn positive_runs(normalized: &[f64]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in normalized.iter().enumerate() {
        match (v > 0.0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, normalized.len()));
    }
    runs
}

/// Run with the highest mean weight; ties go to the earliest run.
pub fn best_run(normalized: &[f64]) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (s, e) in positive_runs(normalized) {
        let mean = normalized[s..e].iter().sum::<f64>() / (e - s) as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some(((s, e), mean));
        }
    }
    best.map(|(r, _)| r)
}

pub fn extract_value<S: AsRef<str>>(normalized: &[f64], tokens: &[S]) -> Option<String> {
    let (s, e) = best_run(normalized)?;
    Some(tokens[s..e].iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" "))
}
