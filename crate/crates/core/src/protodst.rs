//! Spanless training support: a proto tagger trained on random
//! self-labelled token sequences, value tagging with an acceptance rule,
//! morphological closing and automatic span labelling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{derive_gate_labels_with, Dialogue, Schema, Span, Turn, UnresolvedPolicy, Utterance, DONTCARE};
use crate::encoder::{Encoder, EncoderConfig, Tokenizer, CLS, NONE, SEP};
use crate::error::{DstError, Result};
use crate::eval::WeightedTagCase;
use crate::heads::{normalize_tags, positive_runs, Mha};
use crate::params::{AdamW, GradAccumulator, LinearSchedule, ParamStore};
use crate::tensor::Graph;
use crate::text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default = "ProtoConfig::desk", deny_unknown_fields)]
pub struct ProtoConfig {
    pub max_random_len: usize,
    pub p_neg: f64,
    pub nu: f64,
    /// Whether `[NONE]` and negative sampling are used at all.
    pub use_none: bool,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Overrides the encoder's dropout while training the tagger.
    pub encoder_dropout: Option<f64>,
    /// Share of `max_epochs` after which the failed-start probe runs.
    pub probe_fraction: f64,
    pub probes: usize,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            max_random_len: 4,
            p_neg: 0.1,
            nu: 0.3,
            use_none: true,
            max_epochs: 50,
            learning_rate: 2e-3,
            warmup_fraction: 0.1,
            batch_size: 16,
            weight_decay: 0.01,
            encoder_dropout: None,
            probe_fraction: 0.1,
            probes: 64,
            max_restarts: 3,
            seed: 0,
        }
    }
}

impl ProtoConfig {
    /// Longer, smaller-batch, dropout-free schedule for the from-scratch
    /// encoder; with few negatives per epoch the `[NONE]` behaviour is the
    /// last thing learned.
    pub fn desk() -> Self {
        ProtoConfig { max_epochs: 200, batch_size: 8, encoder_dropout: Some(0.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_random_len < 1 {
            return Err(DstError::Config("max_random_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_neg) || !(0.0..1.0).contains(&self.nu) {
            return Err(DstError::Config("p_neg must lie in [0, 1] and nu in [0, 1)".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.probes == 0 {
            return Err(DstError::Config("max_epochs, batch_size and probes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.probe_fraction) {
            return Err(DstError::Config("invalid learning rate or probe fraction".into()));
        }
        Ok(())
    }

    fn probe_epoch(&self) -> usize {
        ((self.probe_fraction * self.max_epochs as f64).ceil() as usize).clamp(1, self.max_epochs)
    }
}

/// `[CLS] [NONE] [SEP] U_t [SEP] M_t [SEP]`, without history.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoInput {
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub none_position: usize,
    /// Position of every user word, in utterance order.
    pub user_positions: Vec<usize>,
    pub system_positions: Vec<usize>,
}

impl ProtoInput {
    pub fn new(turn: &Turn, tok: &Tokenizer) -> Self {
        let mut p = ProtoInput {
            token_ids: vec![CLS, NONE, SEP],
            tokens: vec!["[CLS]".into(), "[NONE]".into(), "[SEP]".into()],
            none_position: 1,
            user_positions: Vec::new(),
            system_positions: Vec::new(),
        };
        for (words, system) in [(turn.user_words(), false), (turn.system_words(), true)] {
            for w in words {
                let pos = p.token_ids.len();
                p.token_ids.push(tok.id(&w));
                p.tokens.push(w);
                if system {
                    p.system_positions.push(pos);
                } else {
                    p.user_positions.push(pos);
                }
            }
            p.token_ids.push(SEP);
            p.tokens.push("[SEP]".into());
        }
        p
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn word_positions(&self) -> Vec<usize> {
        let mut w = self.user_positions.clone();
        w.extend(&self.system_positions);
        w
    }

    /// Attention mask over the given word positions plus `[NONE]`.
    pub fn mask(&self, positions: &[usize], use_none: bool) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &p in positions {
            m[p] = true;
        }
        m[self.none_position] = use_none;
        m
    }

    /// Every position covered by an occurrence of `query` within `positions`.
    fn occurrences(&self, positions: &[usize], query: &[String]) -> Vec<usize> {
        let mut out = Vec::new();
        for segment in [&self.user_positions, &self.system_positions] {
            let seg: Vec<usize> = segment.iter().copied().filter(|p| positions.contains(p)).collect();
            let words: Vec<&str> = seg.iter().map(|&p| self.tokens[p].as_str()).collect();
            let q: Vec<&str> = query.iter().map(String::as_str).collect();
            for s in text::find_all(&words, &q) {
                out.extend(&seg[s..s + q.len()]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// A sampled query with its `|X|` target distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub words: Vec<String>,
    pub target: Vec<f64>,
    pub negative: bool,
}

fn occurrence_target(input: &ProtoInput, query: &[String]) -> Option<Vec<f64>> {
    let occ = input.occurrences(&input.word_positions(), query);
    if occ.is_empty() {
        return None;
    }
    let mut t = vec![0.0; input.len()];
    for &p in &occ {
        t[p] = 1.0 / occ.len() as f64;
    }
    Some(t)
}

fn negative_query<R: Rng>(input: &ProtoInput, positive: &[String], tok: &Tokenizer, cfg: &ProtoConfig, rng: &mut R) -> Option<Vec<String>> {
    const RETRIES: usize = 16;
    let absent = |q: &[String]| input.occurrences(&input.word_positions(), q).is_empty();
    if positive.len() > 1 {
        for _ in 0..RETRIES {
            let mut q = positive.to_vec();
            q.shuffle(rng);
            if absent(&q) {
                return Some(q);
            }
        }
    }
    if tok.word_count() == 0 {
        return None;
    }
    for _ in 0..RETRIES {
        let n = rng.gen_range(1..=cfg.max_random_len);
        let q: Vec<String> = (0..n).map(|_| tok.token(tok.rank_id(rng.gen_range(1..=tok.word_count()))).to_string()).collect();
        if absent(&q) {
            return Some(q);
        }
    }
    None
}

/// Draws a positive run from the input's words, or with probability `p_neg`
/// a run that does not occur in it.
pub fn sample_query<R: Rng>(input: &ProtoInput, tok: &Tokenizer, cfg: &ProtoConfig, rng: &mut R) -> Result<Query> {
    let segments: Vec<&Vec<usize>> = [&input.user_positions, &input.system_positions].into_iter().filter(|s| !s.is_empty()).collect();
    let total: usize = segments.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(DstError::Empty("proto input without word tokens".into()));
    }
    let mut start = rng.gen_range(0..total);
    let mut seg = segments[0];
    for s in &segments {
        if start < s.len() {
            seg = s;
            break;
        }
        start -= s.len();
    }
    let len = rng.gen_range(1..=cfg.max_random_len).min(seg.len() - start);
    let words: Vec<String> = seg[start..start + len].iter().map(|&p| input.tokens[p].clone()).collect();
    if cfg.use_none && rng.gen_bool(cfg.p_neg) {
        match negative_query(input, &words, tok, cfg, rng) {
            Some(q) => {
                let mut target = vec![0.0; input.len()];
                target[input.none_position] = 1.0;
                return Ok(Query { words: q, target, negative: true });
            }
            None => warn!("no negative query found for {:?}; using a positive one", words),
        }
    }
    let target = occurrence_target(input, &words).expect("sampled run occurs in its own input");
    Ok(Query { words, target, negative: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoModel {
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub mha: Mha,
    pub store: ParamStore,
}

impl ProtoModel {
    pub fn new(tokenizer: Tokenizer, config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = Encoder::new(&mut store, config.clone(), tokenizer.len(), &mut rng)?;
        let mha = Mha::new(&mut store, "proto.mha_q", config.d, config.heads, &mut rng)?;
        Ok(ProtoModel { tokenizer, encoder, mha, store })
    }

    pub fn query_ids(&self, words: &[String]) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(self.tokenizer.encode_words(words));
        ids.push(SEP);
        ids
    }

    /// Tag distribution of `query` over `input` restricted to `mask`.
    pub fn weights(&self, input: &ProtoInput, query: &[String], mask: &[bool]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let x = self.encoder.encode::<ChaCha8Rng>(&mut g, &input.token_ids, None)?;
        let q = self.encoder.encode::<ChaCha8Rng>(&mut g, &self.query_ids(query), None)?;
        let att = self.mha.forward(&mut g, q.pooled, x.tokens, x.tokens, Some(mask))?;
        Ok(g.value(att.weights).data.clone())
    }
}

pub const PROTO_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoCheckpoint {
    pub version: u32,
    pub model: ProtoModel,
    pub config: ProtoConfig,
    pub restarts: usize,
}

impl ProtoCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| DstError::Checkpoint(e.to_string()))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| DstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        let mut c: ProtoCheckpoint = serde_json::from_str(&raw).map_err(|e| DstError::Checkpoint(e.to_string()))?;
        if c.version != PROTO_VERSION {
            return Err(DstError::Checkpoint(format!("unsupported proto checkpoint version {}", c.version)));
        }
        c.model.tokenizer.reindex();
        Ok(c)
    }
}

/// Near-uniform tagging: mean max weight below twice the uniform level.
pub fn detect_failed_start(probes: &[Vec<f64>]) -> bool {
    if probes.is_empty() {
        return false;
    }
    let n = probes.len() as f64;
    let mean_max = probes.iter().map(|p| p.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / n;
    let threshold = probes.iter().map(|p| 2.0 / p.len().max(1) as f64).sum::<f64>() / n;
    mean_max < threshold
}

/// Attention weights of the first `n` positive probes, restricted to allowed positions.
fn probe_predictions(model: &ProtoModel, inputs: &[ProtoInput], cfg: &ProtoConfig, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = ProtoConfig { p_neg: 0.0, ..cfg.clone() };
    let mut out = Vec::new();
    for input in inputs.iter().cycle().take(n.min(inputs.len().max(1) * 4)) {
        if out.len() == n {
            break;
        }
        let q = sample_query(input, &model.tokenizer, &positive, &mut rng)?;
        let positions = input.word_positions();
        let w = model.weights(input, &q.words, &input.mask(&positions, cfg.use_none))?;
        out.push(positions.iter().map(|&p| w[p]).collect());
    }
    Ok(out)
}

fn train_once(inputs: &[ProtoInput], tokenizer: &Tokenizer, encoder: &EncoderConfig, cfg: &ProtoConfig, seed: u64) -> Result<(ProtoModel, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ProtoModel::new(tokenizer.clone(), encoder.clone(), rng.gen())?;
    let steps_per_epoch = inputs.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.warmup_fraction, steps_per_epoch * cfg.max_epochs);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut acc = GradAccumulator::default();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let input = &inputs[i];
                let mut srng = ChaCha8Rng::seed_from_u64(rng.gen());
                let q = sample_query(input, &model.tokenizer, cfg, &mut srng)?;
                let mut g = Graph::new(&model.store);
                let x = model.encoder.encode(&mut g, &input.token_ids, Some(&mut srng))?;
                let r = model.encoder.encode(&mut g, &model.query_ids(&q.words), Some(&mut srng))?;
                let att = model.mha.forward(&mut g, r.pooled, x.tokens, x.tokens, Some(&input.mask(&input.word_positions(), cfg.use_none)))?;
                let loss = g.mse_rows(att.weights, vec![(0, q.target)]);
                let loss = g.scale(loss, scale);
                let l = g.scalar(loss);
                if !l.is_finite() {
                    return Err(DstError::Diverged { epoch, step, loss: l });
                }
                epoch_loss += l;
                acc.add(g.backward(loss).params);
            }
            opt.step(&mut model.store, &acc, schedule.lr(step));
        }
        info!("proto epoch {epoch}: loss {:.6}", epoch_loss / steps_per_epoch as f64);
        if epoch == cfg.probe_epoch() {
            let probes = probe_predictions(&model, inputs, cfg, cfg.probes, seed ^ 0x5eed)?;
            if detect_failed_start(&probes) {
                return Ok((model, false));
            }
        }
    }
    Ok((model, true))
}

/// Trains the proto tagger, restarting with a fresh seed after a failed start.
pub fn proto_train(corpus: &[Dialogue], tokenizer: &Tokenizer, encoder: &EncoderConfig, cfg: &ProtoConfig) -> Result<ProtoCheckpoint> {
    cfg.validate()?;
    let encoder = &EncoderConfig { dropout: cfg.encoder_dropout.unwrap_or(encoder.dropout), ..encoder.clone() };
    encoder.validate()?;
    let inputs: Vec<ProtoInput> = corpus
        .iter()
        .flat_map(|d| &d.turns)
        .map(|t| ProtoInput::new(t, tokenizer))
        .filter(|p| !p.word_positions().is_empty() && p.len() <= encoder.max_len)
        .collect();
    if inputs.is_empty() {
        return Err(DstError::Empty("no turn with words to train the proto tagger on".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    for restart in 0..=cfg.max_restarts {
        let (model, ok) = train_once(&inputs, tokenizer, encoder, cfg, seeds.gen())?;
        if ok {
            return Ok(ProtoCheckpoint { version: PROTO_VERSION, model, config: cfg.clone(), restarts: restart });
        }
        warn!("proto tagger failed to start (attempt {}); restarting", restart + 1);
    }
    Err(DstError::RestartBudget {
        restarts: cfg.max_restarts,
        diagnostic: format!("tags stayed near-uniform after {} epochs in every attempt", cfg.probe_epoch()),
    })
}

/// Closing: window-3 dilation of the zero-extended weights, threshold `> ν`,
/// window-3 erosion. Erosion at a border sees the thresholded dilation of the
/// virtual position just outside, so a peak next to the border does not grow
/// onto the last word.
pub fn close_tags(weights: &[f64], nu: f64) -> Vec<bool> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let at = |i: isize| if i < 0 || i >= n as isize { 0.0 } else { weights[i as usize] };
    // Positions -1..=n.
    let binary: Vec<bool> = (-1..=n as isize).map(|i| at(i - 1).max(at(i)).max(at(i + 1)) > nu).collect();
    (1..=n).map(|j| binary[j - 1] && binary[j] && binary[j + 1]).collect()
}

/// Result of tagging one value in one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTagging {
    pub accepted: bool,
    /// Closed I/O tags over user words.
    pub tags: Vec<bool>,
    /// Normalized weights over user words, before closing.
    pub normalized: Vec<f64>,
    pub word_mass: f64,
}

/// Tags `value` in the user utterance; accepted iff more than half of the
/// mass lands on words rather than `[NONE]`.
pub fn tag_value(proto: &ProtoModel, turn: &Turn, value: &str, cfg: &ProtoConfig) -> Result<ValueTagging> {
    let input = ProtoInput::new(turn, &proto.tokenizer);
    let n_user = input.user_positions.len();
    if n_user == 0 {
        return Ok(ValueTagging { accepted: false, tags: Vec::new(), normalized: Vec::new(), word_mass: 0.0 });
    }
    let mask = input.mask(&input.user_positions, cfg.use_none);
    let w = proto.weights(&input, &text::words(value), &mask)?;
    let word_mass: f64 = input.user_positions.iter().map(|&p| w[p]).sum();
    let normalized_all = normalize_tags(&w)?;
    let normalized: Vec<f64> = input.user_positions.iter().map(|&p| normalized_all[p]).collect();
    let tags = close_tags(&normalized, cfg.nu);
    Ok(ValueTagging { accepted: word_mass > 0.5, tags, normalized, word_mass })
}

/// Per-slot counts of tagging attempts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub per_slot: BTreeMap<String, (usize, usize, usize)>,
}

impl RejectionStats {
    fn record(&mut self, slot: &str, accepted: bool) {
        let e = self.per_slot.entry(slot.to_string()).or_default();
        e.0 += 1;
        if accepted {
            e.1 += 1;
        } else {
            e.2 += 1;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("slot,attempts,accepted,rejected\n");
        for (slot, (a, ok, rej)) in &self.per_slot {
            let _ = writeln!(s, "{slot},{a},{ok},{rej}");
        }
        s
    }
}

/// Replaces span labels with proto-tagger labels and re-derives gates.
/// Rejected taggings leave the slot untagged for that turn.
pub fn autolabel(proto: &ProtoModel, corpus: &[Dialogue], schema: &Schema, cfg: &ProtoConfig) -> Result<(Vec<Dialogue>, RejectionStats)> {
    let mut stats = RejectionStats::default();
    let mut out = Vec::with_capacity(corpus.len());
    for d in corpus {
        if d.turns.iter().all(|t| t.state.is_empty()) {
            out.push(d.clone());
            continue;
        }
        let mut labelled = d.clone();
        for turn in labelled.turns.iter_mut() {
            let mut spans: BTreeMap<String, Vec<Span>> = BTreeMap::new();
            for slot in &schema.slots {
                let Some(value) = turn.state.get(&slot.name) else { continue };
                if slot.is_boolean || value == DONTCARE {
                    continue;
                }
                let tagging = tag_value(proto, turn, value, cfg)?;
                stats.record(&slot.name, tagging.accepted);
                if !tagging.accepted {
                    continue;
                }
                let runs = positive_runs(&tagging.tags.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>());
                if !runs.is_empty() {
                    spans.insert(slot.name.clone(), runs.into_iter().map(|(s, e)| Span(Utterance::User, s, e)).collect());
                }
            }
            turn.span_labels = Some(spans);
            turn.gate_labels = None;
        }
        let mut labelled = derive_gate_labels_with(&labelled, schema, UnresolvedPolicy::SpanUntagged)?;
        labelled.provenance = Some("auto".into());
        out.push(labelled);
    }
    for (slot, (a, ok, _)) in &stats.per_slot {
        info!("autolabel {slot}: {ok}/{a} accepted");
    }
    Ok((out, stats))
}

/// Withheld-label oracle cases: every turn-slot whose span label covers a
/// verbatim occurrence of the state value in the user utterance. Gold tags
/// mark all occurrences of the value.
pub fn positive_cases(proto: &ProtoModel, corpus: &[Dialogue], cfg: &ProtoConfig) -> Result<Vec<WeightedTagCase>> {
    let mut cases = Vec::new();
    for d in corpus {
        for turn in &d.turns {
            let uw = turn.user_words();
            for (slot, spans) in turn.span_labels.iter().flatten() {
                let Some(value) = turn.state.get(slot) else { continue };
                let vw = text::words(value);
                let verbatim = spans.iter().any(|s| s.utterance() == Utterance::User && uw.get(s.start()..s.end()) == Some(&vw[..]));
                if !verbatim {
                    continue;
                }
                let mut gold = vec![false; uw.len()];
                for s in text::find_all(&uw, &vw) {
                    gold[s..s + vw.len()].iter_mut().for_each(|g| *g = true);
                }
                let tagging = tag_value(proto, turn, value, cfg)?;
                cases.push(WeightedTagCase { slot: slot.clone(), weights: tagging.normalized, gold });
            }
        }
    }
    Ok(cases)
}

/// Share of sampled negative queries that put more than half the mass on `[NONE]`.
pub fn negative_probe_rate(proto: &ProtoModel, corpus: &[Dialogue], cfg: &ProtoConfig, probes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<ProtoInput> = corpus.iter().flat_map(|d| &d.turns).map(|t| ProtoInput::new(t, &proto.tokenizer)).filter(|p| !p.word_positions().is_empty()).collect();
    if inputs.is_empty() {
        return Err(DstError::Empty("no probe inputs".into()));
    }
    let mut hits = 0;
    let mut n = 0;
    while n < probes {
        let input = &inputs[rng.gen_range(0..inputs.len())];
        let positive = sample_query(input, &proto.tokenizer, &ProtoConfig { p_neg: 0.0, ..cfg.clone() }, &mut rng)?;
        let Some(q) = negative_query(input, &positive.words, &proto.tokenizer, cfg, &mut rng) else { continue };
        let w = proto.weights(input, &q, &input.mask(&input.word_positions(), true))?;
        hits += (w[input.none_position] > 0.5) as usize;
        n += 1;
    }
    Ok(hits as f64 / probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn turn(user: &str, system: &str) -> Turn {
        Turn { user_utterance: user.into(), system_utterance: system.into(), ..Turn::default() }
    }

    fn tok() -> Tokenizer {
        let d = Dialogue { id: "d".into(), turns: vec![turn("book a table for a table", "purple train ok")], provenance: None };
        Tokenizer::build(&[d], &Schema::new(vec![], vec![]).unwrap(), 1).unwrap()
    }

    #[test]
    fn closing_fills_single_gaps() {
        let c = close_tags(&[0.8, 0.0, 0.9, 0.0, 0.0], 0.3);
        assert_eq!(c, vec![true, true, true, false, false]);
        assert!(close_tags(&[0.1, 0.2, 0.29], 0.3).iter().all(|&b| !b));
        assert_eq!(close_tags(&[1.0, 1.0, 0.0, 0.0], 0.3), vec![true, true, false, false]);
        assert!(close_tags(&[], 0.3).is_empty());
    }

    #[test]
    fn closing_does_not_grow_at_borders() {
        assert_eq!(close_tags(&[0.0, 0.0, 0.95, 0.0], 0.3), vec![false, false, true, false]);
        assert_eq!(close_tags(&[0.0, 0.95, 0.0, 0.0], 0.3), vec![false, true, false, false]);
        assert_eq!(close_tags(&[0.9], 0.3), vec![true]);
    }

    #[test]
    fn proto_input_layout() {
        let t = tok();
        let p = ProtoInput::new(&turn("book a table", "ok"), &t);
        assert_eq!(&p.token_ids[..3], &[CLS, NONE, SEP]);
        assert_eq!(p.none_position, 1);
        assert_eq!(p.user_positions, vec![3, 4, 5]);
        assert_eq!(p.system_positions, vec![7]);
        assert_eq!(p.token_ids[6], SEP);
        assert_eq!(*p.token_ids.last().unwrap(), SEP);
    }

    #[test]
    fn targets_spread_over_occurrences() {
        let t = tok();
        let p = ProtoInput::new(&turn("book a table", "ok"), &t);
        let target = occurrence_target(&p, &text::words("a table")).unwrap();
        assert_eq!(target[4], 0.5);
        assert_eq!(target[5], 0.5);
        let p = ProtoInput::new(&turn("a table for a table", ""), &t);
        let target = occurrence_target(&p, &text::words("a")).unwrap();
        let hot: Vec<usize> = (0..target.len()).filter(|&i| target[i] > 0.0).collect();
        assert_eq!(hot.len(), 2);
        assert!(hot.iter().all(|&i| target[i] == 0.5));
        assert!(occurrence_target(&p, &text::words("purple train")).is_none());
    }

    #[test]
    fn negatives_point_at_none() {
        let t = tok();
        let p = ProtoInput::new(&turn("book a table for a table", "ok"), &t);
        let cfg = ProtoConfig { p_neg: 1.0, ..ProtoConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = sample_query(&p, &t, &cfg, &mut rng).unwrap();
            if q.negative {
                assert_eq!(q.target[p.none_position], 1.0);
                assert!(p.occurrences(&p.word_positions(), &q.words).is_empty());
            }
            assert!((q.target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn failed_start_detector() {
        assert!(detect_failed_start(&[vec![0.25; 4], vec![0.25; 4]]));
        assert!(!detect_failed_start(&[vec![1.0, 0.0, 0.0, 0.0]]));
        // Mean max 0.45 against a threshold of 0.5.
        assert!(detect_failed_start(&[vec![0.6, 0.2, 0.1, 0.1], vec![0.3, 0.3, 0.2, 0.2]]));
        // Exactly at the threshold is not a failure.
        assert!(!detect_failed_start(&[vec![0.5, 0.5, 0.0, 0.0]]));
    }

    proptest! {
        #[test]
        fn closing_is_idempotent(w in proptest::collection::vec(0.0f64..1.0, 1..30), nu in 0.0f64..0.99) {
            let once = close_tags(&w, nu);
            let as_f: Vec<f64> = once.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            prop_assert_eq!(close_tags(&as_f, nu), once);
        }

        #[test]
        fn closing_is_local(w in proptest::collection::vec(0.0f64..1.0, 1..30), nu in 0.0f64..0.99) {
            let c = close_tags(&w, nu);
            for (i, &b) in c.iter().enumerate() {
                if b {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 1).min(w.len() - 1);
                    prop_assert!(w[lo..=hi].iter().any(|&v| v > nu));
                }
            }
        }
    }
}
