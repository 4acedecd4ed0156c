//! Dialogue data model, corpus I/O, gate-label derivation, domain splits and
//! conversion to non-dialogue training formats.

mod synth;

pub use synth::{gen_synthetic, DomainConfig, GeneratorConfig, SlotTemplates};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::heads::GateClass;
use crate::text;

pub const DONTCARE: &str = "dontcare";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub description: String,
    #[serde(rename = "categorical")]
    pub is_categorical: bool,
    #[serde(rename = "boolean")]
    pub is_boolean: bool,
    #[serde(rename = "values", default)]
    pub candidate_values: Vec<String>,
}

impl SlotSpec {
    pub fn domain(&self) -> &str {
        self.name.split('-').next().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub domains: Vec<String>,
    pub slots: Vec<SlotSpec>,
}

impl Schema {
    /// Validates and normalises candidate values.
    pub fn new(domains: Vec<String>, mut slots: Vec<SlotSpec>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for slot in &mut slots {
            if slot.name.is_empty() {
                return Err(DstError::Schema("empty slot name".into()));
            }
            if !seen.insert(slot.name.clone()) {
                return Err(DstError::Schema(format!("duplicate slot {}", slot.name)));
            }
            if !domains.iter().any(|d| d == slot.domain()) {
                return Err(DstError::Schema(format!("slot {} has unknown domain {}", slot.name, slot.domain())));
            }
            slot.candidate_values = slot.candidate_values.iter().map(|v| text::normalize(v)).collect();
            let mut vs = BTreeSet::new();
            for v in &slot.candidate_values {
                if !vs.insert(v.clone()) {
                    return Err(DstError::Schema(format!("slot {} lists value {v} twice", slot.name)));
                }
                if slot.is_boolean && v != "true" && v != "false" {
                    return Err(DstError::Schema(format!("boolean slot {} has value {v}", slot.name)));
                }
            }
        }
        Ok(Schema { domains, slots })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        let s: Schema = serde_json::from_str(&raw).map_err(|e| DstError::Schema(e.to_string()))?;
        Schema::new(s.domains, s.slots)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = serde_json::to_string_pretty(self).expect("schema serializes");
        fs::write(path, raw).map_err(|e| DstError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn slots_of_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a SlotSpec> + 'a {
        self.slots.iter().filter(move |s| s.domain() == domain)
    }

    pub fn domain_of(&self, slot: &str) -> Option<&str> {
        self.slot(slot).map(SlotSpec::domain)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Utterance {
    User,
    System,
}

/// Half-open token range `[start, end)` inside one utterance of the same turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span(pub Utterance, pub usize, pub usize);

impl Span {
    pub fn utterance(&self) -> Utterance {
        self.0
    }
    pub fn start(&self) -> usize {
        self.1
    }
    pub fn end(&self) -> usize {
        self.2
    }
}

pub type SlotValues = BTreeMap<String, String>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "system")]
    pub system_utterance: String,
    #[serde(rename = "user")]
    pub user_utterance: String,
    #[serde(default)]
    pub state: SlotValues,
    #[serde(default)]
    pub informed: SlotValues,
    #[serde(rename = "gate", default, skip_serializing_if = "Option::is_none")]
    pub gate_labels: Option<BTreeMap<String, GateClass>>,
    #[serde(rename = "spans", default, skip_serializing_if = "Option::is_none")]
    pub span_labels: Option<BTreeMap<String, Vec<Span>>>,
    #[serde(rename = "refer", default, skip_serializing_if = "Option::is_none")]
    pub refer_labels: Option<BTreeMap<String, String>>,
}

impl Turn {
    pub fn user_words(&self) -> Vec<String> {
        text::words(&self.user_utterance)
    }

    pub fn system_words(&self) -> Vec<String> {
        text::words(&self.system_utterance)
    }

    pub fn words_of(&self, u: Utterance) -> Vec<String> {
        match u {
            Utterance::User => self.user_words(),
            Utterance::System => self.system_words(),
        }
    }

    /// Gate of a slot; a present gate map treats missing slots as `none`.
    pub fn gate(&self, slot: &str) -> Option<GateClass> {
        self.gate_labels.as_ref().map(|g| g.get(slot).copied().unwrap_or(GateClass::None))
    }

    pub fn spans(&self, slot: &str) -> &[Span] {
        self.span_labels.as_ref().and_then(|s| s.get(slot)).map_or(&[], Vec::as_slice)
    }

    pub fn refer_source(&self, slot: &str) -> Option<&str> {
        self.refer_labels.as_ref().and_then(|r| r.get(slot)).map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    /// `"auto"` when labels were produced by automatic span labelling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl Dialogue {
    /// Slots that appear in any state or informed map.
    pub fn touched_slots(&self) -> BTreeSet<&str> {
        self.turns.iter().flat_map(|t| t.state.keys().chain(t.informed.keys())).map(String::as_str).collect()
    }

    pub fn touches_domain(&self, schema: &Schema, domain: &str) -> bool {
        self.touched_slots().iter().any(|s| schema.domain_of(s) == Some(domain))
    }

    /// Previous cumulative state for turn index `t` (0-based); empty at the first turn.
    pub fn prev_state(&self, t: usize) -> SlotValues {
        if t == 0 {
            SlotValues::new()
        } else {
            self.turns[t - 1].state.clone()
        }
    }
}

fn normalize_map(m: &SlotValues) -> SlotValues {
    m.iter().map(|(k, v)| (k.clone(), text::normalize(v))).collect()
}

/// Normalises text and values, then checks every corpus invariant.
pub fn validate_dialogue(d: &mut Dialogue, schema: &Schema) -> Result<()> {
    if d.turns.is_empty() {
        return Err(DstError::Parse { dialogue: d.id.clone(), turn: 0, message: "dialogue has no turns".into() });
    }
    let mut prev = SlotValues::new();
    for (ti, turn) in d.turns.iter_mut().enumerate() {
        let tn = ti + 1;
        turn.system_utterance = text::normalize(&turn.system_utterance);
        turn.user_utterance = text::normalize(&turn.user_utterance);
        turn.state = normalize_map(&turn.state);
        turn.informed = normalize_map(&turn.informed);
        let mut names: Vec<&String> = turn.state.keys().chain(turn.informed.keys()).collect();
        if let Some(g) = &turn.gate_labels {
            names.extend(g.keys());
        }
        if let Some(s) = &turn.span_labels {
            names.extend(s.keys());
        }
        if let Some(r) = &turn.refer_labels {
            names.extend(r.keys().chain(r.values()));
        }
        for n in names {
            if schema.index_of(n).is_none() {
                return Err(DstError::Schema(format!("dialogue {} turn {tn}: unknown slot {n}", d.id)));
            }
        }
        for k in prev.keys() {
            if !turn.state.contains_key(k) {
                return Err(DstError::Monotone {
                    dialogue: d.id.clone(),
                    turn: tn,
                    message: format!("slot {k} dropped from state"),
                });
            }
        }
        if let Some(spans) = &turn.span_labels {
            let (uw, sw) = (turn.user_words().len(), turn.system_words().len());
            for (slot, list) in spans {
                for sp in list {
                    let len = if sp.utterance() == Utterance::User { uw } else { sw };
                    if sp.start() >= sp.end() || sp.end() > len {
                        return Err(DstError::Parse {
                            dialogue: d.id.clone(),
                            turn: tn,
                            message: format!("span {sp:?} for {slot} outside utterance of {len} tokens"),
                        });
                    }
                }
            }
        }
        prev = turn.state.clone();
    }
    Ok(())
}

/// Reads a line-delimited corpus (one JSON dialogue per line).
pub fn load_corpus(path: &Path, schema: &Schema) -> Result<Vec<Dialogue>> {
    let raw = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    parse_corpus(&raw, schema)
}

pub fn parse_corpus(raw: &str, schema: &Schema) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (li, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| DstError::Parse {
            dialogue: format!("<line {}>", li + 1),
            turn: 0,
            message: e.to_string(),
        })?;
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string).ok_or_else(|| DstError::Parse {
            dialogue: format!("<line {}>", li + 1),
            turn: 0,
            message: "missing string field \"id\"".into(),
        })?;
        let turns_raw = value.get("turns").and_then(|v| v.as_array()).ok_or_else(|| DstError::Parse {
            dialogue: id.clone(),
            turn: 0,
            message: "missing array field \"turns\"".into(),
        })?;
        let mut turns = Vec::with_capacity(turns_raw.len());
        for (ti, t) in turns_raw.iter().enumerate() {
            let turn: Turn = serde_json::from_value(t.clone()).map_err(|e| DstError::Parse {
                dialogue: id.clone(),
                turn: ti + 1,
                message: e.to_string(),
            })?;
            turns.push(turn);
        }
        let provenance = value.get("provenance").and_then(|v| v.as_str()).map(str::to_string);
        let mut d = Dialogue { id, turns, provenance };
        validate_dialogue(&mut d, schema)?;
        out.push(d);
    }
    Ok(out)
}

pub fn corpus_to_string(corpus: &[Dialogue]) -> String {
    let mut s = String::new();
    for d in corpus {
        s.push_str(&serde_json::to_string(d).expect("dialogue serializes"));
        s.push('\n');
    }
    s
}

pub fn save_corpus(path: &Path, corpus: &[Dialogue]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| DstError::io(path, e))?;
    f.write_all(corpus_to_string(corpus).as_bytes()).map_err(|e| DstError::io(path, e))
}

/// What to do with a changed slot value that no rule can explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnresolvedPolicy {
    /// Report a labeling conflict.
    Error,
    /// Label it `span` without a span label (the tagger gets no target).
    SpanUntagged,
}

/// Fills gate labels for every slot-turn from state, informed, refer and span labels.
pub fn derive_gate_labels(dialogue: &Dialogue, schema: &Schema) -> Result<Dialogue> {
    derive_gate_labels_with(dialogue, schema, UnresolvedPolicy::Error)
}

pub fn derive_gate_labels_with(dialogue: &Dialogue, schema: &Schema, policy: UnresolvedPolicy) -> Result<Dialogue> {
    let mut out = dialogue.clone();
    let mut user_history: Vec<Vec<String>> = Vec::new();
    for ti in 0..out.turns.len() {
        let prev = dialogue.prev_state(ti);
        let turn = &dialogue.turns[ti];
        user_history.push(turn.user_words());
        let mut gates = BTreeMap::new();
        let mut conflicts = Vec::new();
        for slot in &schema.slots {
            let name = &slot.name;
            let Some(new) = turn.state.get(name) else {
                continue;
            };
            if prev.get(name) == Some(new) {
                continue;
            }
            let gate = if new == DONTCARE {
                GateClass::Dontcare
            } else if slot.is_boolean {
                match new.as_str() {
                    "true" => GateClass::True,
                    "false" => GateClass::False,
                    _ => {
                        conflicts.push(name.clone());
                        continue;
                    }
                }
            } else if turn.informed.get(name) == Some(new) {
                GateClass::Inform
            } else if turn.refer_source(name).is_some_and(|src| prev.get(src) == Some(new)) {
                GateClass::Refer
            } else if !turn.spans(name).is_empty()
                || user_history.iter().any(|u| !text::find_all(u, &text::words(new)).is_empty())
                || policy == UnresolvedPolicy::SpanUntagged
            {
                GateClass::Span
            } else {
                conflicts.push(name.clone());
                continue;
            };
            if gate != GateClass::None {
                gates.insert(name.clone(), gate);
            }
        }
        if !conflicts.is_empty() {
            return Err(DstError::LabelConflict { dialogue: dialogue.id.clone(), turn: ti + 1, slots: conflicts });
        }
        out.turns[ti].gate_labels = Some(gates);
    }
    Ok(out)
}

/// Splits off every dialogue that touches `domain`.
pub fn leave_out_domain(corpus: &[Dialogue], schema: &Schema, domain: &str) -> Result<(Vec<Dialogue>, Vec<Dialogue>)> {
    if !schema.domains.iter().any(|d| d == domain) {
        return Err(DstError::Unknown { kind: "domain", value: domain.to_string() });
    }
    let (test, train): (Vec<_>, Vec<_>) = corpus.iter().cloned().partition(|d| d.touches_domain(schema, domain));
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonDialogueStyle {
    Review,
    Faq,
    FaqPlus,
}

impl std::str::FromStr for NonDialogueStyle {
    type Err = DstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "review" => Ok(NonDialogueStyle::Review),
            "faq" => Ok(NonDialogueStyle::Faq),
            "faq_plus" | "faq+" => Ok(NonDialogueStyle::FaqPlus),
            other => Err(DstError::Unknown { kind: "non-dialogue style", value: other.to_string() }),
        }
    }
}

/// Projects domain labels onto an isolated example: only values of `domain`
/// slots that literally occur in the emitted text survive.
fn project_example(id: String, system: &str, user: &str, labels: &SlotValues, schema: &Schema, domain: &str) -> Dialogue {
    let sw = text::words(system);
    let uw = text::words(user);
    let mut state = SlotValues::new();
    let mut spans: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    let mut gates = BTreeMap::new();
    for slot in schema.slots_of_domain(domain) {
        let Some(v) = labels.get(&slot.name) else { continue };
        let vw = text::words(v);
        let mut found = Vec::new();
        for s in text::find_all(&uw, &vw) {
            found.push(Span(Utterance::User, s, s + vw.len()));
        }
        for s in text::find_all(&sw, &vw) {
            found.push(Span(Utterance::System, s, s + vw.len()));
        }
        if !found.is_empty() {
            state.insert(slot.name.clone(), v.clone());
            gates.insert(slot.name.clone(), GateClass::Span);
            spans.insert(slot.name.clone(), found);
        }
    }
    Dialogue {
        id,
        turns: vec![Turn {
            system_utterance: system.to_string(),
            user_utterance: user.to_string(),
            state,
            informed: SlotValues::new(),
            gate_labels: Some(gates),
            span_labels: Some(spans),
            refer_labels: Some(BTreeMap::new()),
        }],
        provenance: None,
    }
}

/// Converts dialogues touching `domain` into history-free non-dialogue examples.
pub fn to_nondialogue(corpus: &[Dialogue], schema: &Schema, domain: &str, style: NonDialogueStyle) -> Result<Vec<Dialogue>> {
    if !schema.domains.iter().any(|d| d == domain) {
        return Err(DstError::Unknown { kind: "domain", value: domain.to_string() });
    }
    let mut review = Vec::new();
    let mut faq = Vec::new();
    let mut questions = Vec::new();
    for d in corpus.iter().filter(|d| d.touches_domain(schema, domain)) {
        for (ti, turn) in d.turns.iter().enumerate() {
            let mut labels = turn.state.clone();
            labels.extend(turn.informed.clone());
            let sys = &turn.system_utterance;
            if !sys.is_empty() && !text::is_question(sys) {
                review.push(project_example(format!("{}:{}:review", d.id, ti + 1), sys, "", &labels, schema, domain));
            }
            let user = &turn.user_utterance;
            if text::is_question(user) {
                if let Some(next) = d.turns.get(ti + 1) {
                    let ans = &next.system_utterance;
                    if !ans.is_empty() && !text::is_question(ans) {
                        let mut pair_labels = labels.clone();
                        pair_labels.extend(next.state.clone());
                        pair_labels.extend(next.informed.clone());
                        faq.push(project_example(format!("{}:{}:faq", d.id, ti + 1), ans, user, &pair_labels, schema, domain));
                    }
                }
                questions.push(project_example(format!("{}:{}:question", d.id, ti + 1), "", user, &labels, schema, domain));
            }
        }
    }
    Ok(match style {
        NonDialogueStyle::Review => review,
        NonDialogueStyle::Faq => faq,
        NonDialogueStyle::FaqPlus => review.into_iter().chain(faq).chain(questions).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(
            vec!["hotel".into(), "taxi".into()],
            vec![
                SlotSpec {
                    name: "hotel-area".into(),
                    description: "area of the hotel".into(),
                    is_categorical: true,
                    is_boolean: false,
                    candidate_values: vec!["north".into(), "south".into()],
                },
                SlotSpec {
                    name: "hotel-name".into(),
                    description: "name of the hotel".into(),
                    is_categorical: false,
                    is_boolean: false,
                    candidate_values: vec![],
                },
                SlotSpec {
                    name: "hotel-parking".into(),
                    description: "whether the hotel has parking".into(),
                    is_categorical: true,
                    is_boolean: true,
                    candidate_values: vec!["true".into(), "false".into()],
                },
                SlotSpec {
                    name: "taxi-destination".into(),
                    description: "where the taxi goes".into(),
                    is_categorical: false,
                    is_boolean: false,
                    candidate_values: vec![],
                },
            ],
        )
        .unwrap()
    }

    fn turn(system: &str, user: &str, state: &[(&str, &str)]) -> Turn {
        Turn {
            system_utterance: system.into(),
            user_utterance: user.into(),
            state: state.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn schema_rejects_bad_boolean_and_duplicates() {
        let mut s = schema();
        s.slots[2].candidate_values = vec!["yes".into()];
        assert!(Schema::new(s.domains.clone(), s.slots.clone()).is_err());
        let mut s = schema();
        s.slots[0].candidate_values = vec!["north".into(), "North".into()];
        assert!(Schema::new(s.domains.clone(), s.slots.clone()).is_err());
        let mut s = schema();
        s.slots.push(s.slots[0].clone());
        assert!(Schema::new(s.domains.clone(), s.slots.clone()).is_err());
    }

    #[test]
    fn minimal_corpus_with_empty_state() {
        let raw = r#"{"id":"d1","turns":[{"system":"","user":"Hello  THERE","state":{},"informed":{}}]}"#;
        let c = parse_corpus(raw, &schema()).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].turns[0].state.is_empty());
        assert_eq!(c[0].turns[0].user_utterance, "hello there");
    }

    #[test]
    fn dropped_slot_is_a_monotone_error() {
        let raw = r#"{"id":"d1","turns":[{"system":"","user":"north please","state":{"hotel-area":"north"}},{"system":"ok","user":"thanks","state":{}}]}"#;
        match parse_corpus(raw, &schema()) {
            Err(DstError::Monotone { turn, .. }) => assert_eq!(turn, 2),
            other => panic!("expected monotone error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_dialogue_and_turn() {
        let raw = r#"{"id":"d7","turns":[{"system":"","user":"x"},{"system":3,"user":"y"}]}"#;
        match parse_corpus(raw, &schema()) {
            Err(DstError::Parse { dialogue, turn, .. }) => {
                assert_eq!(dialogue, "d7");
                assert_eq!(turn, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let raw = r#"{"id":"d8","turns":[{"system":"","user":"x","state":{"train-day":"monday"}}]}"#;
        assert!(matches!(parse_corpus(raw, &schema()), Err(DstError::Schema(_))));
    }

    #[test]
    fn gate_derivation_classes() {
        let mut d = Dialogue {
            id: "g".into(),
            turns: vec![
                turn("", "a hotel in the north", &[("hotel-area", "north")]),
                turn("how about palace hotel .", "yes", &[("hotel-area", "north"), ("hotel-name", "palace hotel")]),
                turn("ok", "i need parking , any area", &[("hotel-area", "dontcare"), ("hotel-name", "palace hotel"), ("hotel-parking", "true")]),
                turn(
                    "ok",
                    "a taxi to the hotel",
                    &[("hotel-area", "dontcare"), ("hotel-name", "palace hotel"), ("hotel-parking", "true"), ("taxi-destination", "palace hotel")],
                ),
            ],
            provenance: None,
        };
        d.turns[1].informed.insert("hotel-name".into(), "palace hotel".into());
        d.turns[3].refer_labels = Some([("taxi-destination".to_string(), "hotel-name".to_string())].into());
        let g = derive_gate_labels(&d, &schema()).unwrap();
        assert_eq!(g.turns[0].gate("hotel-area"), Some(GateClass::Span));
        assert_eq!(g.turns[1].gate("hotel-area"), Some(GateClass::None));
        assert_eq!(g.turns[1].gate("hotel-name"), Some(GateClass::Inform));
        assert_eq!(g.turns[2].gate("hotel-area"), Some(GateClass::Dontcare));
        assert_eq!(g.turns[2].gate("hotel-parking"), Some(GateClass::True));
        assert_eq!(g.turns[3].gate("taxi-destination"), Some(GateClass::Refer));
        assert_eq!(g.turns[3].gate("hotel-name"), Some(GateClass::None));
    }

    #[test]
    fn unexplainable_value_is_a_conflict() {
        let d = Dialogue {
            id: "c".into(),
            turns: vec![turn("", "somewhere nice", &[("hotel-area", "north")])],
            provenance: None,
        };
        match derive_gate_labels(&d, &schema()) {
            Err(DstError::LabelConflict { slots, .. }) => assert_eq!(slots, vec!["hotel-area".to_string()]),
            other => panic!("expected conflict, got {other:?}"),
        }
        let lenient = derive_gate_labels_with(&d, &schema(), UnresolvedPolicy::SpanUntagged).unwrap();
        assert_eq!(lenient.turns[0].gate("hotel-area"), Some(GateClass::Span));
    }

    #[test]
    fn leave_out_single_domain_corpus() {
        let d = Dialogue { id: "h".into(), turns: vec![turn("", "north", &[("hotel-area", "north")])], provenance: None };
        let (train, test) = leave_out_domain(std::slice::from_ref(&d), &schema(), "hotel").unwrap();
        assert!(train.is_empty());
        assert_eq!(test, vec![d]);
        assert!(leave_out_domain(&[], &schema(), "train").is_err());
    }

    #[test]
    fn review_projection_and_question_filter() {
        let mut t1 = turn("what area do you prefer ?", "the north", &[("hotel-area", "north")]);
        t1.informed = SlotValues::new();
        let t2 = turn("the hotel is in the north .", "thanks", &[("hotel-area", "north")]);
        let d = Dialogue { id: "r".into(), turns: vec![t1, t2], provenance: None };
        let review = to_nondialogue(&[d], &schema(), "hotel", NonDialogueStyle::Review).unwrap();
        assert_eq!(review.len(), 1);
        let ex = &review[0].turns[0];
        assert_eq!(ex.system_utterance, "the hotel is in the north .");
        assert_eq!(ex.user_utterance, "");
        assert_eq!(ex.state.get("hotel-area").map(String::as_str), Some("north"));
        assert!("bogus".parse::<NonDialogueStyle>().is_err());
    }
}
