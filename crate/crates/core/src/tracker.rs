//! Inference: concept databases, confidence-gated value selection and the
//! dialogue state update.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Schema, SlotSpec, SlotValues, Turn, DONTCARE};
use crate::encoder::{assemble_turn, AssembledInput, Origin};
use crate::error::{DstError, Result};
use crate::heads::{argmax, extract_value, normalize_tags, GateClass, SlotPrediction, TurnPrediction};
use crate::model::Model;
use crate::tensor::Mat;
use crate::text;

/// Encoded slots and candidate values, indexed like `schema.slots`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDB {
    pub slots: Vec<String>,
    pub slot_reprs: Mat,
    pub values: Vec<Vec<String>>,
    pub value_reprs: Vec<Mat>,
    pub value_token_encodings: Vec<Vec<Mat>>,
}

impl ConceptDB {
    pub fn build(model: &Model, schema: &Schema) -> Result<Self> {
        if let Some(bad) = schema.slots.iter().find(|s| s.description.trim().is_empty()) {
            return Err(DstError::Schema(format!("slot {} has no description", bad.name)));
        }
        let slot_reprs = model.slot_reprs(schema)?;
        let mut db = ConceptDB {
            slots: schema.slots.iter().map(|s| s.name.clone()).collect(),
            slot_reprs,
            values: Vec::new(),
            value_reprs: Vec::new(),
            value_token_encodings: Vec::new(),
        };
        for (i, slot) in schema.slots.iter().enumerate() {
            let tokens = slot.candidate_values.iter().map(|v| model.value_tokens(slot, v)).collect::<Result<Vec<_>>>()?;
            let rows = tokens.iter().map(|t| model.value_repr(db.slot_reprs.row(i), t)).collect::<Result<Vec<_>>>()?;
            db.values.push(slot.candidate_values.clone());
            db.value_reprs.push(if rows.is_empty() { Mat::zeros(0, model.d()) } else { Mat::stack_rows(&rows) });
            db.value_token_encodings.push(tokens);
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Adds a candidate at runtime; other slots are untouched.
    pub fn add_value(&mut self, model: &Model, slot: &SlotSpec, value: &str) -> Result<()> {
        let i = self
            .slots
            .iter()
            .position(|s| *s == slot.name)
            .ok_or_else(|| DstError::Unknown { kind: "slot", value: slot.name.clone() })?;
        let value = text::normalize(value);
        if self.values[i].contains(&value) {
            return Ok(());
        }
        let tokens = model.value_tokens(slot, &value)?;
        let repr = model.value_repr(self.slot_reprs.row(i), &tokens)?;
        let old = &self.value_reprs[i];
        let mut data = old.data.clone();
        data.extend(repr);
        self.value_reprs[i] = Mat::from_vec(old.rows + 1, model.d(), data);
        self.values[i].push(value);
        self.value_token_encodings[i].push(tokens);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Tag,
    MatchAttention,
    MatchL2,
    Inform,
    Refer,
    Dontcare,
    Boolean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub assignments: SlotValues,
    pub provenance: BTreeMap<String, Provenance>,
}

/// `I_t`: values the system informed in the current turn.
pub type InformMemory = SlotValues;

/// Which end of the L2 scores counts as the best candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Rule {
    /// Smallest distance wins.
    #[default]
    Argmin,
    /// Largest score wins, as the selection rule is literally printed.
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub tau: f64,
    pub value_matching: bool,
    pub l2_rule: L2Rule,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { tau: 0.5, value_matching: true, l2_rule: L2Rule::Argmin }
    }
}

impl TrackerConfig {
    pub fn with_tau(tau: f64) -> Self {
        TrackerConfig { tau, ..Self::default() }
    }

    /// Pure extraction.
    pub fn no_vm() -> Self {
        TrackerConfig { tau: 1.0, value_matching: false, l2_rule: L2Rule::Argmin }
    }
}

/// `Conf(C) = 1 − min(C) / ((ΣC − min(C)) / |C|)`.
pub fn confidence(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(DstError::UndefinedConfidence(format!("{} scores", scores.len())));
    }
    let lo = scores.iter().enumerate().fold(0, |b, (i, &v)| if v < scores[b] { i } else { b });
    let min = scores[lo];
    let rest: f64 = scores.iter().enumerate().filter(|&(i, _)| i != lo).map(|(_, v)| v).sum();
    if rest == 0.0 {
        return Err(DstError::UndefinedConfidence("all scores equal the minimum of zero".into()));
    }
    Ok(1.0 - min * scores.len() as f64 / rest)
}

fn confident(scores: &[f64], tau: f64) -> bool {
    confidence(scores).is_ok_and(|c| c > tau)
}

fn best_by_l2(scores: &[f64], rule: L2Rule) -> usize {
    match rule {
        L2Rule::Argmax => argmax(scores),
        L2Rule::Argmin => {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            argmax(&neg)
        }
    }
}

/// `Val(q̂)`: the tagged value, if any.
pub fn tagged_value(pred: &SlotPrediction, tokens: &[String]) -> Option<String> {
    let normalized = normalize_tags(&pred.tag_weights).ok()?;
    extract_value(&normalized, tokens).map(|v| text::normalize(&v))
}

/// Value for a span-gated slot; `None` when neither tagging nor matching yields one.
pub fn resolve_span_value(
    pred: &SlotPrediction,
    tokens: &[String],
    slot: &SlotSpec,
    candidates: &[String],
    cfg: &TrackerConfig,
) -> Option<(String, Provenance)> {
    let tagged = || tagged_value(pred, tokens).map(|v| (v, Provenance::Tag));
    if !cfg.value_matching || candidates.len() < 2 {
        return tagged();
    }
    if slot.is_categorical && pred.match_weights.len() == candidates.len() && confident(&pred.match_weights, cfg.tau) {
        return Some((candidates[argmax(&pred.match_weights)].clone(), Provenance::MatchAttention));
    }
    if pred.l2_scores.len() == candidates.len() && confident(&pred.l2_scores, cfg.tau) {
        return Some((candidates[best_by_l2(&pred.l2_scores, cfg.l2_rule)].clone(), Provenance::MatchL2));
    }
    tagged()
}

/// Applies one turn's predictions. Refer copies from `prev`, so slot order
/// never matters. Returns the new state and flags for unresolved slots.
pub fn update_state(
    prev: &DialogueState,
    pred: &TurnPrediction,
    inform: &InformMemory,
    schema: &Schema,
    candidates: &[Vec<String>],
    cfg: &TrackerConfig,
) -> Result<(DialogueState, Vec<String>)> {
    if pred.slots.len() != schema.len() || candidates.len() != schema.len() {
        return Err(DstError::Dimension(format!("{} predictions for {} slots", pred.slots.len(), schema.len())));
    }
    let mut next = prev.clone();
    let mut flags = Vec::new();
    for (i, (slot, sp)) in schema.slots.iter().zip(&pred.slots).enumerate() {
        let name = &slot.name;
        let assigned = match sp.gate_class() {
            GateClass::None => continue,
            GateClass::Dontcare => Some((DONTCARE.to_string(), Provenance::Dontcare)),
            GateClass::True => Some(("true".to_string(), Provenance::Boolean)),
            GateClass::False => Some(("false".to_string(), Provenance::Boolean)),
            GateClass::Inform => inform.get(name).map(|v| (v.clone(), Provenance::Inform)),
            GateClass::Refer => {
                let src = &schema.slots[argmax(&sp.refer_weights)].name;
                prev.assignments.get(src).map(|v| (v.clone(), Provenance::Refer))
            }
            GateClass::Span => resolve_span_value(sp, &pred.tokens, slot, &candidates[i], cfg),
        };
        match assigned {
            Some((v, p)) => {
                next.assignments.insert(name.clone(), v);
                next.provenance.insert(name.clone(), p);
            }
            None => flags.push(format!("{name}: {} gate without a value", sp.gate_class())),
        }
    }
    Ok((next, flags))
}

/// One line of tracker output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue: String,
    pub turn: usize,
    pub state: DialogueState,
    pub gates: BTreeMap<String, GateClass>,
    pub gate_posteriors: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Why a turn produced no prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum Skipped {
    Oversize(String),
    EmptyUser,
}

impl fmt::Display for Skipped {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Skipped::Oversize(m) => write!(f, "skipped: {m}"),
            Skipped::EmptyUser => f.write_str("skipped: empty user utterance"),
        }
    }
}

pub type TurnOutcome = std::result::Result<TurnPrediction, Skipped>;

/// Full-history assembly for turn index `t`.
pub fn assemble_at(dialogue: &Dialogue, t: usize, model: &Model) -> Result<AssembledInput> {
    let history: Vec<&Turn> = dialogue.turns[..t].iter().rev().collect();
    assemble_turn(&dialogue.turns[t], &history, &model.tokenizer, model.encoder.config.max_len)
}

/// Model outputs for every turn. These do not depend on the state, so
/// threshold sweeps can replay them without re-encoding.
pub fn predict_dialogue(model: &Model, db: &ConceptDB, dialogue: &Dialogue) -> Result<Vec<TurnOutcome>> {
    (0..dialogue.turns.len())
        .map(|t| {
            let input = match assemble_at(dialogue, t, model) {
                Ok(i) => i,
                Err(e @ DstError::Oversize { .. }) => return Ok(Err(Skipped::Oversize(e.to_string()))),
                Err(e) => return Err(e),
            };
            if !input.user_mask.iter().any(|&b| b) {
                return Ok(Err(Skipped::EmptyUser));
            }
            Ok(Ok(model.predict(&input, &db.slot_reprs, &db.value_reprs)?))
        })
        .collect()
}

/// Runs the state machine over precomputed predictions.
pub fn replay(
    dialogue: &Dialogue,
    outcomes: &[TurnOutcome],
    schema: &Schema,
    candidates: &[Vec<String>],
    cfg: &TrackerConfig,
) -> Result<Vec<TurnRecord>> {
    let mut state = DialogueState::default();
    let mut records = Vec::with_capacity(outcomes.len());
    for (t, (turn, outcome)) in dialogue.turns.iter().zip(outcomes).enumerate() {
        let mut record = TurnRecord {
            dialogue: dialogue.id.clone(),
            turn: t + 1,
            state: state.clone(),
            gates: BTreeMap::new(),
            gate_posteriors: BTreeMap::new(),
            flags: Vec::new(),
        };
        match outcome {
            Ok(pred) => {
                let (next, flags) = update_state(&state, pred, &turn.informed, schema, candidates, cfg)?;
                for (slot, sp) in schema.slots.iter().zip(&pred.slots) {
                    record.gates.insert(slot.name.clone(), sp.gate_class());
                    record.gate_posteriors.insert(slot.name.clone(), sp.gate.clone());
                }
                record.flags = flags;
                state = next;
                record.state = state.clone();
            }
            Err(skip) => record.flags.push(skip.to_string()),
        }
        records.push(record);
    }
    Ok(records)
}

pub fn track_dialogue(model: &Model, db: &ConceptDB, dialogue: &Dialogue, schema: &Schema, cfg: &TrackerConfig) -> Result<Vec<TurnRecord>> {
    let outcomes = predict_dialogue(model, db, dialogue)?;
    replay(dialogue, &outcomes, schema, &db.values, cfg)
}

pub fn write_jsonl(path: &Path, records: &[TurnRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| DstError::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DstError::Checkpoint(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| DstError::io(path, e))?;
    }
    f.flush().map_err(|e| DstError::io(path, e))
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// A prediction that reproduces the turn's gold labels exactly: one-hot
/// gates and refer sources, uniform tag weights over the gold span tokens,
/// peaked match and L2 scores on the gold candidate.
pub fn gold_prediction(dialogue: &Dialogue, t: usize, input: &AssembledInput, schema: &Schema) -> Result<TurnPrediction> {
    let turn = &dialogue.turns[t];
    if turn.gate_labels.is_none() {
        return Err(DstError::Parse { dialogue: dialogue.id.clone(), turn: t + 1, message: "missing gate labels".into() });
    }
    let n = schema.len();
    let idx = input.origin_index();
    let slots = schema
        .slots
        .iter()
        .map(|slot| {
            let gate = turn.gate(&slot.name).unwrap_or(GateClass::None);
            let mut tags = vec![0.0; input.len()];
            for sp in turn.spans(&slot.name) {
                for i in sp.start()..sp.end() {
                    if let Some(&p) = idx.get(&Origin { turns_back: 0, utterance: sp.utterance(), index: i }) {
                        tags[p] = 1.0;
                    }
                }
            }
            let mass: f64 = tags.iter().sum();
            if mass > 0.0 {
                tags.iter_mut().for_each(|v| *v /= mass);
            }
            let refer = turn
                .refer_source(&slot.name)
                .and_then(|s| schema.index_of(s))
                .map_or_else(|| vec![1.0 / n as f64; n], |i| one_hot(n, i));
            let gold = turn.state.get(&slot.name).and_then(|v| slot.candidate_values.iter().position(|c| c == v));
            let k = slot.candidate_values.len();
            let (match_weights, l2_scores) = match gold {
                Some(j) if gate == GateClass::Span => {
                    (one_hot(k, j), (0..k).map(|i| if i == j { 0.0 } else { 1.0 }).collect())
                }
                _ => (vec![1.0 / k.max(1) as f64; k], vec![1.0; k]),
            };
            SlotPrediction {
                gate: one_hot(GateClass::ALL.len(), gate.index()),
                tag_weights: tags,
                context_summary: Vec::new(),
                refer_weights: refer,
                match_weights,
                l2_scores,
            }
        })
        .collect();
    Ok(TurnPrediction { tokens: input.tokens.clone(), slots })
}

/// Replays the gold labels of a dialogue through [`update_state`].
pub fn replay_gold(dialogue: &Dialogue, schema: &Schema, max_len: usize, tok: &crate::encoder::Tokenizer, cfg: &TrackerConfig) -> Result<Vec<TurnRecord>> {
    let outcomes = (0..dialogue.turns.len())
        .map(|t| {
            let history: Vec<&Turn> = dialogue.turns[..t].iter().rev().collect();
            let input = assemble_turn(&dialogue.turns[t], &history, tok, max_len)?;
            Ok(Ok(gold_prediction(dialogue, t, &input, schema)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<Vec<String>> = schema.slots.iter().map(|s| s.candidate_values.clone()).collect();
    replay(dialogue, &outcomes, schema, &candidates, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Schema {
        let slot = |name: &str, cat: bool, values: &[&str]| SlotSpec {
            name: name.into(),
            description: name.replace('-', " "),
            is_categorical: cat,
            is_boolean: false,
            candidate_values: values.iter().map(|v| v.to_string()).collect(),
        };
        Schema::new(
            vec!["hotel".into(), "taxi".into()],
            vec![
                slot("hotel-area", true, &["north", "south", "centre"]),
                slot("hotel-name", false, &["ashley inn", "city hotel"]),
                slot("taxi-destination", false, &[]),
            ],
        )
        .unwrap()
    }

    fn tokens() -> Vec<String> {
        ["[CLS]", "the", "north", "at", "city", "hotel", "[SEP]"].iter().map(|s| s.to_string()).collect()
    }

    fn none() -> SlotPrediction {
        slot_pred(GateClass::None)
    }

    fn slot_pred(gate: GateClass) -> SlotPrediction {
        SlotPrediction {
            gate: one_hot(7, gate.index()),
            tag_weights: vec![1.0 / 7.0; 7],
            context_summary: Vec::new(),
            refer_weights: vec![1.0 / 3.0; 3],
            match_weights: Vec::new(),
            l2_scores: Vec::new(),
        }
    }

    fn tagged(gate: GateClass, positions: &[usize]) -> SlotPrediction {
        let mut s = slot_pred(gate);
        s.tag_weights = vec![0.0; 7];
        for &p in positions {
            s.tag_weights[p] = 1.0 / positions.len() as f64;
        }
        s
    }

    fn candidates(s: &Schema) -> Vec<Vec<String>> {
        s.slots.iter().map(|s| s.candidate_values.clone()).collect()
    }

    fn step(prev: &DialogueState, slots: Vec<SlotPrediction>, cfg: &TrackerConfig) -> (DialogueState, Vec<String>) {
        let s = schema();
        let pred = TurnPrediction { tokens: tokens(), slots };
        update_state(prev, &pred, &InformMemory::new(), &s, &candidates(&s), cfg).unwrap()
    }

    #[test]
    fn confidence_examples() {
        assert!((confidence(&[0.98, 0.01, 0.01]).unwrap() - 0.9697).abs() < 1e-4);
        assert_eq!(confidence(&[1.0 / 3.0; 3]).unwrap(), -0.5);
        assert_eq!(confidence(&[0.5, 0.5]).unwrap(), -1.0);
        assert_eq!(confidence(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(confidence(&[0.4]), Err(DstError::UndefinedConfidence(_))));
        assert!(matches!(confidence(&[0.0, 0.0]), Err(DstError::UndefinedConfidence(_))));
    }

    proptest! {
        #[test]
        fn confidence_is_scale_invariant(c in prop::collection::vec(0.01f64..10.0, 2..12), alpha in 0.01f64..100.0) {
            let scaled: Vec<f64> = c.iter().map(|v| v * alpha).collect();
            prop_assert!((confidence(&c).unwrap() - confidence(&scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn confidence_is_at_most_one(c in prop::collection::vec(0.0f64..10.0, 2..12)) {
            if let Ok(v) = confidence(&c) {
                prop_assert!(v <= 1.0);
            }
        }
    }

    #[test]
    fn none_gate_carries_the_state() {
        let mut prev = DialogueState::default();
        prev.assignments.insert("hotel-area".into(), "north".into());
        let (next, flags) = step(&prev, vec![none(), none(), none()], &TrackerConfig::default());
        assert_eq!(next, prev);
        assert!(flags.is_empty());
    }

    #[test]
    fn span_gate_uses_the_tagged_value_without_matching() {
        let (next, _) = step(&DialogueState::default(), vec![none(), tagged(GateClass::Span, &[4, 5]), none()], &TrackerConfig::no_vm());
        assert_eq!(next.assignments["hotel-name"], "city hotel");
        assert_eq!(next.provenance["hotel-name"], Provenance::Tag);
    }

    #[test]
    fn confident_attention_match_overrides_the_tag() {
        let mut area = tagged(GateClass::Span, &[2]);
        area.match_weights = vec![0.02, 0.96, 0.02];
        area.l2_scores = vec![1.0, 1.0, 1.0];
        let (next, _) = step(&DialogueState::default(), vec![area.clone(), none(), none()], &TrackerConfig::with_tau(0.5));
        assert_eq!(next.assignments["hotel-area"], "south");
        assert_eq!(next.provenance["hotel-area"], Provenance::MatchAttention);
        // A threshold of one is never exceeded.
        let (next, _) = step(&DialogueState::default(), vec![area, none(), none()], &TrackerConfig::with_tau(1.0));
        assert_eq!(next.assignments["hotel-area"], "north");
        assert_eq!(next.provenance["hotel-area"], Provenance::Tag);
    }

    #[test]
    fn l2_match_follows_an_unconfident_attention_match() {
        let mut area = tagged(GateClass::Span, &[2]);
        area.match_weights = vec![0.34, 0.33, 0.33];
        area.l2_scores = vec![2.0, 2.0, 0.01];
        let (next, _) = step(&DialogueState::default(), vec![area.clone(), none(), none()], &TrackerConfig::with_tau(0.5));
        assert_eq!(next.assignments["hotel-area"], "centre");
        assert_eq!(next.provenance["hotel-area"], Provenance::MatchL2);
        let cfg = TrackerConfig { l2_rule: L2Rule::Argmax, ..TrackerConfig::with_tau(0.5) };
        let (next, _) = step(&DialogueState::default(), vec![area, none(), none()], &cfg);
        assert_eq!(next.assignments["hotel-area"], "north");
    }

    #[test]
    fn non_categorical_slots_skip_attention_matching() {
        let mut name = tagged(GateClass::Span, &[5]);
        name.match_weights = vec![0.99, 0.01];
        name.l2_scores = vec![1.0, 1.0];
        let (next, _) = step(&DialogueState::default(), vec![none(), name, none()], &TrackerConfig::with_tau(0.0));
        assert_eq!(next.assignments["hotel-name"], "hotel");
        assert_eq!(next.provenance["hotel-name"], Provenance::Tag);
    }

    #[test]
    fn refer_copies_from_the_previous_state() {
        let mut prev = DialogueState::default();
        prev.assignments.insert("hotel-name".into(), "ashley inn".into());
        let mut dest = slot_pred(GateClass::Refer);
        dest.refer_weights = vec![0.1, 0.8, 0.1];
        // The same-turn update of the source slot is not what gets copied.
        let (next, _) = step(&prev, vec![none(), tagged(GateClass::Span, &[4, 5]), dest], &TrackerConfig::no_vm());
        assert_eq!(next.assignments["hotel-name"], "city hotel");
        assert_eq!(next.assignments["taxi-destination"], "ashley inn");
        assert_eq!(next.provenance["taxi-destination"], Provenance::Refer);
    }

    #[test]
    fn dontcare_inform_and_unresolved_gates() {
        let s = schema();
        let mut inform = InformMemory::new();
        inform.insert("hotel-name".into(), "ashley inn".into());
        let pred = TurnPrediction { tokens: tokens(), slots: vec![slot_pred(GateClass::Dontcare), slot_pred(GateClass::Inform), slot_pred(GateClass::Inform)] };
        let (next, flags) = update_state(&DialogueState::default(), &pred, &inform, &s, &candidates(&s), &TrackerConfig::default()).unwrap();
        assert_eq!(next.assignments["hotel-area"], DONTCARE);
        assert_eq!(next.assignments["hotel-name"], "ashley inn");
        assert!(!next.assignments.contains_key("taxi-destination"));
        assert_eq!(flags.len(), 1);
        assert!(flags[0].starts_with("taxi-destination"));
    }

    #[test]
    fn misaligned_predictions_are_rejected() {
        let s = schema();
        let pred = TurnPrediction { tokens: tokens(), slots: vec![none()] };
        assert!(update_state(&DialogueState::default(), &pred, &InformMemory::new(), &s, &candidates(&s), &TrackerConfig::default()).is_err());
    }
}
