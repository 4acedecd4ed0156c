//! Joint loss, input-level dropout, the training loop and checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, Schema, Turn, Utterance};
use crate::encoder::{assemble_turn, AssembledInput, EncoderConfig, Tokenizer, UNK};
use crate::error::{DstError, Result};
use crate::eval::evaluate;
use crate::heads::{GateClass, HeadOutputs, TurnPrediction};
use crate::model::Model;
use crate::params::{AdamW, GradAccumulator, LinearSchedule};
use crate::tensor::{Graph, Mat, Var};
use crate::tracker::{ConceptDB, TrackerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenDropoutMode {
    /// Replace with a word of frequency rank `U(1, K)`.
    #[default]
    RandomToken,
    /// Replace with `[UNK]`.
    UnkToken,
}

impl FromStr for TokenDropoutMode {
    type Err = DstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_token" => Ok(TokenDropoutMode::RandomToken),
            "unk_token" => Ok(TokenDropoutMode::UnkToken),
            other => Err(DstError::Unknown { kind: "token dropout mode", value: other.to_string() }),
        }
    }
}

/// How squared errors over a distribution are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over entries.
    #[default]
    Mean,
    /// Sum over entries (squared L2 distance), independent of input length.
    Sum,
}

impl FromStr for Reduction {
    type Err = DstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(DstError::Unknown { kind: "reduction", value: other.to_string() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default = "TrainConfig::desk", deny_unknown_fields)]
pub struct TrainConfig {
    /// `(λ_g, λ_q, λ_f, λ_m)`.
    pub lambdas: [f64; 4],
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub max_epochs: usize,
    pub patience_fraction: f64,
    pub batch_size: usize,
    pub p_td: f64,
    pub p_hd: f64,
    pub p_unk_mode: TokenDropoutMode,
    /// `K / |V_enc|`.
    pub token_dropout_k_fraction: f64,
    pub inform_masking: bool,
    pub none_class_weight: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Reduction of the tag and match squared errors.
    pub squared_error: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: [0.8, 0.1, 0.1, 0.1],
            learning_rate: 5e-5,
            warmup_fraction: 0.1,
            max_epochs: 50,
            patience_fraction: 0.2,
            batch_size: 16,
            p_td: 0.3,
            p_hd: 0.3,
            p_unk_mode: TokenDropoutMode::RandomToken,
            token_dropout_k_fraction: 0.2,
            inform_masking: false,
            none_class_weight: 0.1,
            weight_decay: 0.01,
            tau: 0.5,
            squared_error: Reduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the small from-scratch encoder: a larger step size,
    /// smaller batches, and summed squared errors with a heavier tag weight so
    /// the tagging signal does not shrink with input length.
    pub fn desk() -> Self {
        TrainConfig {
            lambdas: [0.8, 2.0, 0.1, 0.1],
            learning_rate: 2e-3,
            batch_size: 8,
            max_epochs: 40,
            squared_error: Reduction::Sum,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(DstError::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_td", self.p_td)?;
        prob("p_hd", self.p_hd)?;
        prob("warmup_fraction", self.warmup_fraction)?;
        prob("patience_fraction", self.patience_fraction)?;
        prob("tau", self.tau)?;
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(DstError::Config(format!("loss weights {:?} must be non-negative", self.lambdas)));
        }
        if !(self.token_dropout_k_fraction > 0.0 && self.token_dropout_k_fraction <= 1.0) {
            return Err(DstError::Config("token_dropout_k_fraction must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(DstError::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.none_class_weight < 0.0 || self.weight_decay < 0.0 {
            return Err(DstError::Config("learning rate must be positive, weights non-negative".into()));
        }
        Ok(())
    }

    /// `K` for a vocabulary of `word_count` words.
    pub fn token_dropout_k(&self, word_count: usize) -> usize {
        ((self.token_dropout_k_fraction * word_count as f64).round() as usize).max(1)
    }

    pub fn patience(&self) -> usize {
        ((self.patience_fraction * self.max_epochs as f64).ceil() as usize).max(1)
    }
}

/// Per-turn training targets, indexed like `schema.slots`.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnLabels {
    pub gate: Vec<GateClass>,
    /// Binary `l^q` over the assembled input (span-gated slots with a span label).
    pub tag_target: Vec<Option<Vec<f64>>>,
    /// Source slot index of refer-gated slots.
    pub refer_target: Vec<Option<usize>>,
    /// Candidate index of span-gated categorical slots.
    pub match_target: Vec<Option<usize>>,
}

/// Targets for turn `t` of `dialogue` given its (possibly perturbed) assembly.
/// History user occurrences count when the history turn held the same value.
pub fn build_labels(dialogue: &Dialogue, t: usize, input: &AssembledInput, schema: &Schema) -> Result<TurnLabels> {
    let turn = &dialogue.turns[t];
    let missing = |what: &str| DstError::Parse { dialogue: dialogue.id.clone(), turn: t + 1, message: what.to_string() };
    if turn.gate_labels.is_none() {
        return Err(missing("missing gate labels"));
    }
    let n = schema.len();
    let mut labels = TurnLabels { gate: Vec::with_capacity(n), tag_target: vec![None; n], refer_target: vec![None; n], match_target: vec![None; n] };
    for (i, slot) in schema.slots.iter().enumerate() {
        let gate = turn.gate(&slot.name).unwrap_or(GateClass::None);
        labels.gate.push(gate);
        match gate {
            GateClass::Span => {
                let value = turn.state.get(&slot.name);
                let user_spans = turn.spans(&slot.name).iter().any(|s| s.utterance() == Utterance::User);
                if user_spans {
                    let mut target = vec![0.0; input.len()];
                    for (p, o) in input.origin.iter().enumerate() {
                        let Some(o) = o else { continue };
                        if o.utterance != Utterance::User || !input.user_mask[p] {
                            continue;
                        }
                        let src = &dialogue.turns[t - o.turns_back];
                        let same = o.turns_back == 0 || src.state.get(&slot.name) == value;
                        if same && src.spans(&slot.name).iter().any(|s| s.utterance() == Utterance::User && (s.start()..s.end()).contains(&o.index)) {
                            target[p] = 1.0;
                        }
                    }
                    if target.iter().all(|&v| v == 0.0) {
                        return Err(DstError::LabelConflict { dialogue: dialogue.id.clone(), turn: t + 1, slots: vec![slot.name.clone()] });
                    }
                    labels.tag_target[i] = Some(target);
                }
                if slot.is_categorical {
                    labels.match_target[i] = value.and_then(|v| slot.candidate_values.iter().position(|c| c == v));
                }
            }
            GateClass::Refer => {
                let src = turn.refer_source(&slot.name).ok_or_else(|| missing("refer gate without a source"))?;
                labels.refer_target[i] = Some(schema.index_of(src).ok_or_else(|| DstError::Unknown { kind: "slot", value: src.to_string() })?);
            }
            _ => {}
        }
    }
    Ok(labels)
}

/// Component losses and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub gate: f64,
    pub tag: f64,
    pub refer: f64,
    pub matching: f64,
}

/// `λ_g L_g + λ_q L_q + λ_f L_f + λ_m L_m`.
pub fn combine(components: [f64; 4], lambdas: [f64; 4]) -> f64 {
    components.iter().zip(lambdas).map(|(c, l)| c * l).sum()
}

fn scaled_target(t: &[f64]) -> Vec<f64> {
    let s: f64 = t.iter().sum();
    t.iter().map(|v| v / s).collect()
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn squared_error(a: &[f64], b: &[f64], r: Reduction) -> f64 {
    let s = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    match r {
        Reduction::Mean => s / a.len() as f64,
        Reduction::Sum => s,
    }
}

fn reduce(g: &mut Graph, mean_loss: Var, width: usize, r: Reduction) -> Var {
    match r {
        Reduction::Mean => mean_loss,
        Reduction::Sum => g.scale(mean_loss, width as f64),
    }
}

fn gate_weight(g: GateClass, none_weight: f64) -> f64 {
    if g == GateClass::None {
        none_weight
    } else {
        1.0
    }
}

/// The joint loss on the graph, summed over slots.
pub fn joint_loss(g: &mut Graph, out: &HeadOutputs, labels: &TurnLabels, cfg: &TrainConfig) -> Result<(Var, LossParts)> {
    let gate_targets: Vec<(usize, usize, f64)> =
        labels.gate.iter().enumerate().map(|(i, &c)| (i, c.index(), gate_weight(c, cfg.none_class_weight))).collect();
    let lg = g.cross_entropy_logits(out.gate_logits, &gate_targets);
    let mut terms = vec![(lg, cfg.lambdas[0])];
    let mut parts = LossParts { gate: g.scalar(lg), ..LossParts::default() };

    let tag_targets: Vec<(usize, Vec<f64>)> =
        labels.tag_target.iter().enumerate().filter_map(|(i, t)| t.as_ref().map(|t| (i, scaled_target(t)))).collect();
    if !tag_targets.is_empty() {
        let tw = out.tag_weights.ok_or_else(|| DstError::Empty("tag target without user tokens".into()))?;
        let width = g.value(tw).cols;
        let lq = g.mse_rows(tw, tag_targets);
        let lq = reduce(g, lq, width, cfg.squared_error);
        parts.tag = g.scalar(lq);
        terms.push((lq, cfg.lambdas[1]));
    }

    let refer_targets: Vec<(usize, usize)> = labels.refer_target.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
    if !refer_targets.is_empty() {
        let lf = g.nll_probs(out.refer_weights, &refer_targets);
        parts.refer = g.scalar(lf);
        terms.push((lf, cfg.lambdas[2]));
    }

    let mut match_terms = Vec::new();
    for (i, m) in labels.match_target.iter().enumerate() {
        if let (Some(j), Some(w)) = (m, out.match_weights[i]) {
            let k = g.value(w).cols;
            let l = g.mse_rows(w, vec![(0, one_hot(k, *j))]);
            match_terms.push(reduce(g, l, k, cfg.squared_error));
        }
    }
    if !match_terms.is_empty() {
        let ones: Vec<(Var, f64)> = match_terms.iter().map(|&v| (v, 1.0)).collect();
        let lm = g.weighted_sum(&ones);
        parts.matching = g.scalar(lm);
        terms.push((lm, cfg.lambdas[3]));
    }
    let total = g.weighted_sum(&terms);
    parts.total = g.scalar(total);
    Ok((total, parts))
}

/// The same loss evaluated on plain prediction values.
pub fn joint_loss_value(pred: &TurnPrediction, labels: &TurnLabels, cfg: &TrainConfig) -> Result<LossParts> {
    if pred.slots.len() != labels.gate.len() {
        return Err(DstError::Dimension(format!("{} slot predictions for {} labels", pred.slots.len(), labels.gate.len())));
    }
    let mut c = [0.0; 4];
    for (i, sp) in pred.slots.iter().enumerate() {
        let gate = labels.gate[i];
        c[0] += -gate_weight(gate, cfg.none_class_weight) * sp.gate[gate.index()].max(f64::MIN_POSITIVE).ln();
        if let Some(t) = &labels.tag_target[i] {
            c[1] += squared_error(&sp.tag_weights, &scaled_target(t), cfg.squared_error);
        }
        if let Some(s) = labels.refer_target[i] {
            c[2] += -sp.refer_weights[s].max(f64::MIN_POSITIVE).ln();
        }
        if let (Some(j), false) = (labels.match_target[i], sp.match_weights.is_empty()) {
            c[3] += squared_error(&sp.match_weights, &one_hot(sp.match_weights.len(), j), cfg.squared_error);
        }
    }
    Ok(LossParts { total: combine(c, cfg.lambdas), gate: c[0], tag: c[1], refer: c[2], matching: c[3] })
}

/// Replaces each value-target token with probability `p_td`.
pub fn token_dropout<R: Rng>(input: &AssembledInput, p_td: f64, k: usize, mode: TokenDropoutMode, tok: &Tokenizer, rng: &mut R) -> Result<AssembledInput> {
    if k < 1 || k > tok.word_count() {
        return Err(DstError::Config(format!("token dropout K = {k} outside 1..={}", tok.word_count())));
    }
    let mask = input.value_target_mask.as_ref().ok_or_else(|| DstError::Empty("input has no value target mask".into()))?;
    let mut out = input.clone();
    if p_td <= 0.0 {
        return Ok(out);
    }
    for (p, &m) in mask.iter().enumerate() {
        if m && rng.gen_bool(p_td) {
            let id = match mode {
                TokenDropoutMode::RandomToken => tok.rank_id(rng.gen_range(1..=k)),
                TokenDropoutMode::UnkToken => UNK,
            };
            out.token_ids[p] = id;
            out.tokens[p] = tok.token(id).to_string();
        }
    }
    Ok(out)
}

/// With probability `p_hd` keeps only the `c ~ U(1, t−1)` most recent turns
/// of a most-recent-first history.
pub fn history_dropout<'a, R: Rng>(history: &[&'a Turn], p_hd: f64, rng: &mut R) -> Vec<&'a Turn> {
    if history.is_empty() || p_hd <= 0.0 || !rng.gen_bool(p_hd) {
        return history.to_vec();
    }
    let c = rng.gen_range(1..=history.len());
    history[..c].to_vec()
}

/// Replaces informed-value tokens in system utterances with `[UNK]`.
pub fn mask_informed(input: &AssembledInput, enabled: bool) -> AssembledInput {
    let mut out = input.clone();
    let Some(mask) = input.inform_mask.as_ref().filter(|_| enabled) else {
        return out;
    };
    for (p, &m) in mask.iter().enumerate() {
        if m && input.origin[p].is_some_and(|o| o.utterance == Utterance::System) {
            out.token_ids[p] = UNK;
            out.tokens[p] = "[UNK]".to_string();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossParts,
    pub dev_jga: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,L,L_g,L_q,L_f,L_m,dev_jga,lr\n");
        for r in &self.rows {
            let dev = r.dev_jga.map(|v| v.to_string()).unwrap_or_default();
            let l = r.loss;
            let _ = writeln!(s, "{},{},{},{},{},{},{},{},{}", r.epoch, r.step, l.total, l.gate, l.tag, l.refer, l.matching, dev, r.lr);
        }
        s
    }

    pub fn dev_curve(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.dev_jga.map(|j| (r.epoch, j))).collect()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to track with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub train_config: TrainConfig,
    pub schema: Schema,
    pub best_dev_jga: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| DstError::Checkpoint(e.to_string()))
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let mut c: Checkpoint = serde_json::from_str(raw).map_err(|e| DstError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(DstError::Checkpoint(format!("unsupported checkpoint version {}", c.version)));
        }
        c.model.tokenizer.reindex();
        Ok(c)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| DstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub epochs_run: usize,
}

/// Builds one perturbed training example.
fn training_example<R: Rng>(
    dialogue: &Dialogue,
    t: usize,
    model: &Model,
    schema: &Schema,
    cfg: &TrainConfig,
    k: usize,
    rng: &mut R,
) -> Result<Option<(AssembledInput, TurnLabels)>> {
    let full: Vec<&Turn> = dialogue.turns[..t].iter().rev().collect();
    let history = history_dropout(&full, cfg.p_hd, rng);
    let input = match assemble_turn(&dialogue.turns[t], &history, &model.tokenizer, model.encoder.config.max_len) {
        Ok(i) => i,
        Err(DstError::Oversize { len, max_len }) => {
            warn!("skipping {} turn {}: {len} tokens exceed {max_len}", dialogue.id, t + 1);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let input = mask_informed(&input, cfg.inform_masking);
    let input = token_dropout(&input, cfg.p_td, k, cfg.p_unk_mode, &model.tokenizer, rng)?;
    let labels = build_labels(dialogue, t, &input, schema)?;
    Ok(Some((input, labels)))
}

/// Trains from scratch; `dev` drives early stopping and model selection.
pub fn train(corpus: &[Dialogue], dev: &[Dialogue], schema: &Schema, tokenizer: Tokenizer, encoder: EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(DstError::Empty("development split has no dialogues".into()));
    }
    let examples: Vec<(usize, usize)> = corpus.iter().enumerate().flat_map(|(d, dl)| (0..dl.turns.len()).map(move |t| (d, t))).collect();
    if examples.is_empty() {
        return Err(DstError::Empty("training corpus has no turns".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(tokenizer, encoder, rng.gen())?;
    let k = cfg.token_dropout_k(model.tokenizer.word_count());
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.warmup_fraction, steps_per_epoch * cfg.max_epochs);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let tracker = TrackerConfig::with_tau(cfg.tau);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let slot_reprs = model.slot_reprs(schema)?;
        let value_reprs = model.value_reprs(schema, &slot_reprs)?;
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = schedule.lr(step);
            let mut acc = GradAccumulator::default();
            let mut sum = [0.0; 5];
            {
                let mut gs = Graph::new(&model.store);
                let rs = model.encode_slots(&mut gs, schema, Some(&mut rng))?;
                let rs_value = gs.value(rs).clone();
                let mut rs_grad = Mat::zeros(rs_value.rows, rs_value.cols);
                let scale = 1.0 / batch.len() as f64;
                for &e in batch {
                    let (d, t) = examples[e];
                    let mut srng = ChaCha8Rng::seed_from_u64(rng.gen());
                    let Some((input, labels)) = training_example(&corpus[d], t, &model, schema, cfg, k, &mut srng)? else {
                        continue;
                    };
                    let mut g = Graph::new(&model.store);
                    let rs_in = g.input(rs_value.clone());
                    let enc = model.encoder.encode(&mut g, &input.token_ids, Some(&mut srng))?;
                    let out = model.heads.forward(&mut g, rs_in, enc.tokens, &input.user_mask, &value_reprs)?;
                    let (loss, parts) = joint_loss(&mut g, &out, &labels, cfg)?;
                    if !parts.total.is_finite() {
                        return Err(DstError::Diverged { epoch, step, loss: parts.total });
                    }
                    let scaled = g.scale(loss, scale);
                    let grads = g.backward(scaled);
                    if let Some(gr) = grads.input(rs_in) {
                        rs_grad.add_assign(gr);
                    }
                    acc.add(grads.params);
                    for (s, v) in sum.iter_mut().zip([parts.total, parts.gate, parts.tag, parts.refer, parts.matching]) {
                        *s += v * scale;
                    }
                }
                acc.add(gs.backward_with(&[(rs, rs_grad)]).params);
            }
            if !acc.is_finite() {
                return Err(DstError::Diverged { epoch, step, loss: sum[0] });
            }
            opt.step(&mut model.store, &acc, lr);
            let loss = LossParts { total: sum[0], gate: sum[1], tag: sum[2], refer: sum[3], matching: sum[4] };
            log.rows.push(LogRow { epoch, step, loss, dev_jga: None, lr });
        }

        let db = ConceptDB::build(&model, schema)?;
        let jga = evaluate(&model, &db, dev, schema, &tracker)?.jga;
        if let Some(last) = log.rows.last_mut() {
            last.dev_jga = Some(jga);
        }
        info!("epoch {epoch}: loss {:.4} dev JGA {jga:.4}", log.rows.last().map_or(0.0, |r| r.loss.total));
        if best.as_ref().is_none_or(|(b, _, _)| jga > *b) {
            best = Some((jga, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if jga >= 1.0 || since_best >= cfg.patience() {
            break;
        }
    }
    let (best_dev_jga, best_epoch, model) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint { version: CHECKPOINT_VERSION, model, train_config: cfg.clone(), schema: schema.clone(), best_dev_jga, best_epoch };
    Ok(TrainOutcome { checkpoint, log, epochs_run })
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::*;
    use crate::corpus::{gen_synthetic, GeneratorConfig, SlotSpec, Span};

    fn schema() -> Schema {
        let slot = |name: &str, cat: bool, values: &[&str]| SlotSpec {
            name: name.into(),
            description: name.replace('-', " "),
            is_categorical: cat,
            is_boolean: false,
            candidate_values: values.iter().map(|v| v.to_string()).collect(),
        };
        Schema::new(
            vec!["hotel".into()],
            vec![slot("hotel-area", true, &["north", "south"]), slot("hotel-name", false, &["palace hotel", "city hotel"])],
        )
        .unwrap()
    }

    fn span_turn(system: &str, user: &str, slot: &str, value: &str, span: (usize, usize)) -> Turn {
        Turn {
            system_utterance: system.into(),
            user_utterance: user.into(),
            state: BTreeMap::from([(slot.to_string(), value.to_string())]),
            informed: BTreeMap::new(),
            gate_labels: Some(BTreeMap::from([(slot.to_string(), GateClass::Span)])),
            span_labels: Some(BTreeMap::from([(slot.to_string(), vec![Span(Utterance::User, span.0, span.1)])])),
            refer_labels: Some(BTreeMap::new()),
        }
    }

    fn dialogue(turns: Vec<Turn>) -> Dialogue {
        Dialogue { id: "d".into(), turns, provenance: None }
    }

    fn synthetic() -> (Schema, Vec<Dialogue>, Tokenizer) {
        let (schema, corpus) = gen_synthetic(&GeneratorConfig::default(), 3).unwrap();
        let corpus: Vec<Dialogue> = corpus.into_iter().take(20).collect();
        let tok = Tokenizer::build(&corpus, &schema, 1).unwrap();
        (schema, corpus, tok)
    }

    #[test]
    fn combine_weights_components() {
        assert!((combine([1.0, 2.0, 3.0, 4.0], [0.8, 0.1, 0.1, 0.1]) - 1.7).abs() < 1e-12);
        assert_eq!(combine([1.0, 2.0, 3.0, 4.0], [0.0; 4]), 0.0);
    }

    #[test]
    fn config_defaults_follow_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lambdas, [0.8, 0.1, 0.1, 0.1]);
        assert_eq!((c.learning_rate, c.warmup_fraction, c.batch_size), (5e-5, 0.1, 16));
        assert_eq!((c.p_td, c.p_hd, c.token_dropout_k_fraction), (0.3, 0.3, 0.2));
        assert_eq!((c.none_class_weight, c.weight_decay, c.patience_fraction), (0.1, 0.01, 0.2));
        assert_eq!(c.patience(), 10);
        assert_eq!(c.token_dropout_k(179), 36);
        assert_eq!(c.token_dropout_k(2), 1);
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        assert!(TrainConfig { p_td: 1.2, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn two_token_value_gets_a_split_tag_target() {
        let s = schema();
        let d = dialogue(vec![span_turn("hello", "i want the palace hotel", "hotel-name", "palace hotel", (3, 5))]);
        let tok = Tokenizer::build(std::slice::from_ref(&d), &s, 1).unwrap();
        let input = assemble_turn(&d.turns[0], &[], &tok, 64).unwrap();
        let labels = build_labels(&d, 0, &input, &s).unwrap();
        assert_eq!(labels.gate, vec![GateClass::None, GateClass::Span]);
        let target = labels.tag_target[1].as_ref().unwrap();
        let on: Vec<usize> = (0..target.len()).filter(|&p| target[p] > 0.0).collect();
        assert_eq!(on, vec![4, 5]);
        assert_eq!(scaled_target(target).iter().filter(|&&v| v == 0.5).count(), 2);
        assert_eq!(labels.match_target, vec![None, None]);
    }

    #[test]
    fn categorical_span_gets_a_match_target_and_perfect_predictions_cost_nothing() {
        let s = schema();
        let d = dialogue(vec![span_turn("hello", "somewhere south please", "hotel-area", "south", (1, 2))]);
        let tok = Tokenizer::build(std::slice::from_ref(&d), &s, 1).unwrap();
        let input = assemble_turn(&d.turns[0], &[], &tok, 64).unwrap();
        let labels = build_labels(&d, 0, &input, &s).unwrap();
        assert_eq!(labels.match_target, vec![Some(1), None]);
        let pred = crate::tracker::gold_prediction(&d, 0, &input, &s).unwrap();
        let parts = joint_loss_value(&pred, &labels, &TrainConfig::default()).unwrap();
        assert_eq!((parts.gate, parts.tag, parts.refer, parts.matching, parts.total), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn unlocatable_span_is_a_labeling_conflict() {
        let s = schema();
        let d = dialogue(vec![span_turn("hello", "the palace hotel", "hotel-name", "palace hotel", (7, 9))]);
        let tok = Tokenizer::build(std::slice::from_ref(&d), &s, 1).unwrap();
        let input = assemble_turn(&d.turns[0], &[], &tok, 64).unwrap();
        assert!(matches!(build_labels(&d, 0, &input, &s), Err(DstError::LabelConflict { .. })));
    }

    #[test]
    fn graph_and_value_losses_agree() {
        let (schema, corpus, tok) = synthetic();
        let cfg = EncoderConfig { d: 16, ffn_dim: 32, ..EncoderConfig::default() };
        let model = Model::new(tok, cfg, 5).unwrap();
        let slot_reprs = model.slot_reprs(&schema).unwrap();
        let value_reprs = model.value_reprs(&schema, &slot_reprs).unwrap();
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let tc = TrainConfig { squared_error: reduction, ..TrainConfig::default() };
            for d in corpus.iter().take(4) {
                for t in 0..d.turns.len() {
                    let input = crate::tracker::assemble_at(d, t, &model).unwrap();
                    let labels = build_labels(d, t, &input, &schema).unwrap();
                    let mut g = Graph::new(&model.store);
                    let rs = g.input(slot_reprs.clone());
                    let enc = model.encoder.encode(&mut g, &input.token_ids, None::<&mut ChaCha8Rng>).unwrap();
                    let out = model.heads.forward(&mut g, rs, enc.tokens, &input.user_mask, &value_reprs).unwrap();
                    let (_, graph) = joint_loss(&mut g, &out, &labels, &tc).unwrap();
                    let pred = model.predict(&input, &slot_reprs, &value_reprs).unwrap();
                    let value = joint_loss_value(&pred, &labels, &tc).unwrap();
                    for (a, b) in [(graph.total, value.total), (graph.gate, value.gate), (graph.tag, value.tag), (graph.refer, value.refer), (graph.matching, value.matching)] {
                        assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
                    }
                    assert!(graph.total >= 0.0);
                }
            }
        }
    }

    #[test]
    fn joint_loss_is_linear_in_each_weight() {
        let parts = [0.7, 1.3, 0.2, 2.5];
        let base = [0.8, 0.1, 0.1, 0.1];
        for i in 0..4 {
            let mut l = base;
            l[i] *= 3.0;
            let delta = combine(parts, l) - combine(parts, base);
            assert!((delta - 2.0 * base[i] * parts[i]).abs() < 1e-12);
        }
    }

    fn target_input() -> (AssembledInput, Tokenizer) {
        let (schema, corpus, tok) = synthetic();
        let d = corpus.iter().find(|d| d.turns.len() >= 3).unwrap();
        let history: Vec<&Turn> = d.turns[..2].iter().rev().collect();
        let input = assemble_turn(&d.turns[2], &history, &tok, 180).unwrap();
        assert!(input.value_target_mask.as_ref().unwrap().iter().any(|&m| m));
        let _ = schema;
        (input, tok)
    }

    #[test]
    fn token_dropout_identity_and_range() {
        let (input, tok) = target_input();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 10;
        assert_eq!(token_dropout(&input, 0.0, k, TokenDropoutMode::RandomToken, &tok, &mut rng).unwrap(), input);
        let allowed: BTreeSet<usize> = (1..=k).map(|r| tok.rank_id(r)).collect();
        let mask = input.value_target_mask.clone().unwrap();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = token_dropout(&input, 1.0, k, TokenDropoutMode::RandomToken, &tok, &mut rng).unwrap();
            assert_eq!(out.len(), input.len());
            assert_eq!((&out.user_mask, &out.origin, &out.value_target_mask), (&input.user_mask, &input.origin, &input.value_target_mask));
            for p in 0..input.len() {
                if mask[p] {
                    assert!(allowed.contains(&out.token_ids[p]));
                } else {
                    assert_eq!(out.token_ids[p], input.token_ids[p]);
                }
            }
        }
        let out = token_dropout(&input, 1.0, k, TokenDropoutMode::UnkToken, &tok, &mut rng).unwrap();
        for p in 0..input.len() {
            assert_eq!(out.token_ids[p] == UNK, mask[p] || input.token_ids[p] == UNK);
        }
        assert!(token_dropout(&input, 0.3, 0, TokenDropoutMode::RandomToken, &tok, &mut rng).is_err());
        assert!(token_dropout(&input, 0.3, tok.word_count() + 1, TokenDropoutMode::RandomToken, &tok, &mut rng).is_err());
    }

    #[test]
    fn history_dropout_identities_and_range() {
        let turns: Vec<Turn> = (0..3).map(|i| Turn { user_utterance: format!("u{i}"), ..Turn::default() }).collect();
        let history: Vec<&Turn> = turns.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(history_dropout(&history, 0.0, &mut rng), history);
        assert!(history_dropout(&[], 1.0, &mut rng).is_empty());
        for _ in 0..200 {
            let kept = history_dropout(&history, 1.0, &mut rng);
            assert!((1..=3).contains(&kept.len()));
            assert_eq!(kept[..], history[..kept.len()]);
        }
    }

    #[test]
    fn informed_values_are_masked_in_system_utterances_only() {
        let s = schema();
        let mut turn = span_turn("i recommend the palace hotel", "is the palace hotel cheap", "hotel-name", "palace hotel", (2, 4));
        turn.informed.insert("hotel-name".into(), "palace hotel".into());
        let d = dialogue(vec![turn]);
        let tok = Tokenizer::build(std::slice::from_ref(&d), &s, 1).unwrap();
        let input = assemble_turn(&d.turns[0], &[], &tok, 64).unwrap();
        assert_eq!(mask_informed(&input, false), input);
        let masked = mask_informed(&input, true);
        let unk: Vec<usize> = (0..masked.len()).filter(|&p| masked.token_ids[p] == UNK).collect();
        // [CLS] is the cheap ... : user words sit at 1..=5, system words at 7..=11.
        assert_eq!(unk, vec![10, 11]);
        assert_eq!(&masked.tokens[3..5], &["palace", "hotel"]);
    }

    #[test]
    fn train_rejects_an_empty_dev_split() {
        let (schema, corpus, tok) = synthetic();
        let r = train(&corpus[..2], &[], &schema, tok, EncoderConfig::default(), &TrainConfig::desk());
        assert!(matches!(r, Err(DstError::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_other_versions() {
        let (schema, _, tok) = synthetic();
        let model = Model::new(tok, EncoderConfig { d: 16, ffn_dim: 32, ..EncoderConfig::default() }, 1).unwrap();
        let c = Checkpoint { version: CHECKPOINT_VERSION, model, train_config: TrainConfig::desk(), schema, best_dev_jga: 0.5, best_epoch: 3 };
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
        assert_eq!(back.model.tokenizer.id("hotel"), c.model.tokenizer.id("hotel"));
        let other = Checkpoint { version: CHECKPOINT_VERSION + 1, ..c };
        assert!(matches!(Checkpoint::from_json(&other.to_json().unwrap()), Err(DstError::Checkpoint(_))));
    }

    #[test]
    fn log_csv_has_one_row_per_step() {
        let log = TrainLog {
            rows: vec![
                LogRow { epoch: 1, step: 1, loss: LossParts::default(), dev_jga: None, lr: 0.1 },
                LogRow { epoch: 1, step: 2, loss: LossParts::default(), dev_jga: Some(0.5), lr: 0.2 },
            ],
        };
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,step,L,L_g,L_q,L_f,L_m,dev_jga,lr\n"));
        assert_eq!(log.dev_curve(), vec![(1, 0.5)]);
    }
}
