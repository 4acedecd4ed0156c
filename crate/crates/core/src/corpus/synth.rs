//! Deterministic template-based multi-domain dialogue generator.
//!
//! Every emitted turn carries gold span, refer and gate labels. The gold spans
//! are only used as a held-out oracle when evaluating automatic labelling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_gate_labels, validate_dialogue, Dialogue, Schema, SlotSpec, SlotValues, Span, Turn, Utterance, DONTCARE};
use crate::error::{DstError, Result};
use crate::text;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotTemplates {
    pub name: String,
    pub description: String,
    pub categorical: bool,
    pub boolean: bool,
    /// Value inventory used for generation.
    pub values: Vec<String>,
    /// Whether `values` is published as the slot's candidate list in the schema.
    pub expose_candidates: bool,
    /// Alternative surface forms per canonical value.
    pub variants: BTreeMap<String, Vec<String>>,
    /// User clauses stating a value, with a `{value}` placeholder.
    pub mention: Vec<String>,
    pub dontcare: Vec<String>,
    pub true_templates: Vec<String>,
    pub false_templates: Vec<String>,
    /// Source slot → user clauses that bind this slot to the source's value.
    pub refer: BTreeMap<String, Vec<String>>,
    /// System statements offering a value (`{value}`).
    pub offer: Vec<String>,
    /// System questions requesting this slot.
    pub request: Vec<String>,
    /// User questions about this slot.
    pub question: Vec<String>,
    /// System statements answering a question (`{value}`).
    pub answer: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub name: String,
    pub slots: Vec<SlotTemplates>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub max_domains: usize,
    pub multi_domain_prob: f64,
    /// Target share of slot-turn pairs per update class:
    /// `span`, `dontcare`, `inform`, `refer`, `true`, `false`.
    pub class_targets: BTreeMap<String, f64>,
    pub max_clauses: usize,
    /// Probability of each further clause in a user turn.
    pub extra_clause_prob: f64,
    pub question_prob: f64,
    pub chitchat_prob: f64,
    pub variant_prob: f64,
    pub offer_prob: f64,
    pub greeting: String,
    pub accept: Vec<String>,
    pub chitchat: Vec<String>,
    pub acknowledge: Vec<String>,
    pub domains: Vec<DomainConfig>,
}

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn refer(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
    pairs.iter().map(|(k, v)| (k.to_string(), s(v))).collect()
}

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];

impl Default for GeneratorConfig {
    fn default() -> Self {
        let hotel_names = ["palace lodge", "ashley inn", "acorn house", "river view", "city stay"];
        let restaurant_names = ["graffiti", "golden curry", "pizza express", "nirala", "bedouin"];
        let places = ["railway station", "airport", "cinema", "museum", "theatre"];
        let taxi_values: Vec<&str> = places.iter().chain(&hotel_names).chain(&restaurant_names).copied().collect();
        let hotel = DomainConfig {
            name: "hotel".into(),
            slots: vec![
                SlotTemplates {
                    name: "hotel-area".into(),
                    description: "area or part of town of the hotel".into(),
                    categorical: true,
                    values: s(AREAS),
                    expose_candidates: true,
                    mention: s(&["i want a hotel in the {value}", "the hotel should be in the {value}", "somewhere in the {value} please"]),
                    dontcare: s(&["any area is fine for the hotel", "the hotel area does not matter"]),
                    refer: refer(&[("restaurant-area", &["the hotel should be in the same area as the restaurant"])]),
                    request: s(&["what area would you like the hotel in ?"]),
                    question: s(&["what area is the hotel in ?"]),
                    answer: s(&["the hotel is in the {value} .", "it is located in the {value} ."]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "hotel-pricerange".into(),
                    description: "price budget of the hotel".into(),
                    categorical: true,
                    values: s(&["cheap", "moderate", "expensive"]),
                    expose_candidates: true,
                    variants: refer(&[("expensive", &["upscale"]), ("cheap", &["budget"])]),
                    mention: s(&["i want a {value} hotel", "the hotel should be {value}"]),
                    dontcare: s(&["any price is fine for the hotel"]),
                    request: s(&["what price range do you want ?"]),
                    question: s(&["how pricey is the hotel ?"]),
                    answer: s(&["the hotel is {value} ."]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "hotel-name".into(),
                    description: "name of the hotel".into(),
                    values: s(&hotel_names),
                    expose_candidates: true,
                    mention: s(&["i am looking for {value}", "is {value} available"]),
                    offer: s(&["i recommend {value} .", "{value} is a nice hotel ."]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "hotel-parking".into(),
                    description: "whether the hotel has free parking".into(),
                    categorical: true,
                    boolean: true,
                    true_templates: s(&["i need free parking", "the hotel must have parking"]),
                    false_templates: s(&["i do not need parking", "parking is not needed"]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "hotel-internet".into(),
                    description: "whether the hotel offers wifi".into(),
                    categorical: true,
                    boolean: true,
                    true_templates: s(&["i need wifi", "internet is required"]),
                    false_templates: s(&["i do not need internet", "wifi is not important"]),
                    ..Default::default()
                },
            ],
        };
        let restaurant = DomainConfig {
            name: "restaurant".into(),
            slots: vec![
                SlotTemplates {
                    name: "restaurant-area".into(),
                    description: "area or part of town of the restaurant".into(),
                    categorical: true,
                    values: s(AREAS),
                    expose_candidates: true,
                    mention: s(&["a restaurant in the {value}", "i want to eat in the {value}"]),
                    dontcare: s(&["any area is fine for the restaurant"]),
                    refer: refer(&[("hotel-area", &["a restaurant in the same area as the hotel", "i want to eat near the hotel"])]),
                    request: s(&["where should the restaurant be ?"]),
                    question: s(&["where is the restaurant ?"]),
                    answer: s(&["the restaurant is in the {value} ."]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "restaurant-food".into(),
                    description: "type of food served by the restaurant".into(),
                    categorical: true,
                    values: s(&["italian", "chinese", "indian", "thai", "british"]),
                    expose_candidates: true,
                    mention: s(&["i want {value} food", "something serving {value} food"]),
                    dontcare: s(&["any type of food is fine"]),
                    request: s(&["what kind of food would you like ?"]),
                    question: s(&["what food do they serve ?"]),
                    answer: s(&["they serve {value} food ."]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "restaurant-outdoor".into(),
                    description: "whether the restaurant has outdoor seating".into(),
                    categorical: true,
                    boolean: true,
                    true_templates: s(&["i want to sit outside", "we would like outdoor seating"]),
                    false_templates: s(&["indoor seating is fine", "we do not need to sit outside"]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "restaurant-name".into(),
                    description: "name of the restaurant".into(),
                    values: s(&restaurant_names),
                    expose_candidates: true,
                    mention: s(&["i am looking for the restaurant {value}", "can you find {value} for me"]),
                    offer: s(&["{value} is a great restaurant .", "i suggest {value} ."]),
                    ..Default::default()
                },
            ],
        };
        let taxi = DomainConfig {
            name: "taxi".into(),
            slots: vec![
                SlotTemplates {
                    name: "taxi-departure".into(),
                    description: "place where the taxi picks you up".into(),
                    values: s(&taxi_values),
                    mention: s(&["i am leaving from {value}", "pick me up at {value}"]),
                    refer: refer(&[
                        ("hotel-name", &["pick me up from the hotel"]),
                        ("restaurant-name", &["i am leaving from the restaurant"]),
                    ]),
                    request: s(&["where will you leave from ?"]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "taxi-destination".into(),
                    description: "place where the taxi takes you".into(),
                    values: s(&taxi_values),
                    mention: s(&["i want to go to {value}", "take me to {value}"]),
                    refer: refer(&[
                        ("hotel-name", &["take me to the hotel"]),
                        ("restaurant-name", &["i want to go to the restaurant"]),
                    ]),
                    request: s(&["where are you going ?"]),
                    ..Default::default()
                },
                SlotTemplates {
                    name: "taxi-leaveat".into(),
                    description: "time when the taxi should leave".into(),
                    values: s(&["five pm", "six pm", "noon", "ten am", "seven pm"]),
                    expose_candidates: true,
                    variants: refer(&[("five pm", &["5 pm"]), ("noon", &["midday"])]),
                    mention: s(&["i want to leave at {value}", "the taxi should come at {value}"]),
                    dontcare: s(&["any time is fine"]),
                    request: s(&["when do you want to leave ?"]),
                    ..Default::default()
                },
            ],
        };
        GeneratorConfig {
            dialogues: 500,
            min_turns: 3,
            max_turns: 5,
            max_domains: 3,
            multi_domain_prob: 0.9,
            class_targets: [("span", 0.04), ("dontcare", 0.025), ("inform", 0.05), ("refer", 0.08), ("true", 0.03), ("false", 0.03)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            max_clauses: 3,
            extra_clause_prob: 0.6,
            question_prob: 0.08,
            chitchat_prob: 0.03,
            variant_prob: 0.15,
            offer_prob: 0.75,
            greeting: "hello , how can i help you ?".into(),
            accept: s(&["yes , that sounds good", "great , i will take it", "perfect"]),
            chitchat: s(&["thank you", "that is all for now"]),
            acknowledge: s(&["i have noted that .", "okay ."]),
            domains: vec![hotel, restaurant, taxi],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(DstError::Config("generator needs at least 2 domains".into()));
        }
        for d in &self.domains {
            if d.slots.len() < 3 {
                return Err(DstError::Config(format!("domain {} needs at least 3 slots", d.name)));
            }
            for sl in &d.slots {
                if !sl.name.starts_with(&format!("{}-", d.name)) {
                    return Err(DstError::Config(format!("slot {} does not belong to domain {}", sl.name, d.name)));
                }
                if sl.boolean && (sl.true_templates.is_empty() || sl.false_templates.is_empty()) {
                    return Err(DstError::Config(format!("boolean slot {} lacks true/false templates", sl.name)));
                }
                if !sl.boolean && sl.values.len() < 2 {
                    return Err(DstError::Config(format!("slot {} needs at least 2 values", sl.name)));
                }
            }
        }
        let has_variants =
            self.domains.iter().flat_map(|d| &d.slots).any(|sl| !sl.categorical && sl.variants.values().any(|v| !v.is_empty()));
        if !has_variants {
            return Err(DstError::Config("no non-categorical slot has surface variants".into()));
        }
        const KINDS: [&str; 6] = ["span", "dontcare", "inform", "refer", "true", "false"];
        for (k, v) in &self.class_targets {
            if !KINDS.contains(&k.as_str()) || !(0.0..=1.0).contains(v) {
                return Err(DstError::Config(format!("invalid class target {k} = {v}")));
            }
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return Err(DstError::Config("invalid turn range".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema> {
        let domains = self.domains.iter().map(|d| d.name.clone()).collect();
        let slots = self
            .domains
            .iter()
            .flat_map(|d| &d.slots)
            .map(|sl| SlotSpec {
                name: sl.name.clone(),
                description: sl.description.clone(),
                is_categorical: sl.categorical,
                is_boolean: sl.boolean,
                candidate_values: if sl.expose_candidates && !sl.boolean { sl.values.clone() } else { Vec::new() },
            })
            .collect();
        Schema::new(domains, slots)
    }

    fn slot(&self, name: &str) -> Option<&SlotTemplates> {
        self.domains.iter().flat_map(|d| &d.slots).find(|s| s.name == name)
    }
}

/// A user clause under construction: text tokens plus label side effects.
struct Clause {
    tokens: Vec<String>,
    /// (slot, value, token range of the mention within `tokens`)
    span: Option<(String, String, usize, usize)>,
    update: Option<(String, String)>,
    refer: Option<(String, String)>,
}

fn fill(template: &str, value: &str) -> (Vec<String>, Option<(usize, usize)>) {
    match template.find("{value}") {
        None => (text::words(template), None),
        Some(i) => {
            let mut toks = text::words(&template[..i]);
            let start = toks.len();
            toks.extend(text::words(value));
            let end = toks.len();
            toks.extend(text::words(&template[i + "{value}".len()..]));
            (toks, Some((start, end)))
        }
    }
}

struct DialogueBuilder<'a> {
    cfg: &'a GeneratorConfig,
    rng: ChaCha8Rng,
    state: SlotValues,
}

impl<'a> DialogueBuilder<'a> {
    fn pick<'b, T>(&mut self, v: &'b [T]) -> &'b T {
        v.choose(&mut self.rng).expect("non-empty choice")
    }

    fn clause(&mut self, kind: &str, domain: &DomainConfig, offered: &SlotValues, used: &[String]) -> Option<Clause> {
        let free = |s: &&SlotTemplates| !used.contains(&s.name);
        match kind {
            "span" => {
                let slots: Vec<&SlotTemplates> = domain.slots.iter().filter(free).filter(|s| !s.mention.is_empty()).collect();
                let slot = *slots.choose(&mut self.rng)?;
                let current = self.state.get(&slot.name).cloned();
                let values: Vec<&String> = slot.values.iter().filter(|v| Some(*v) != current.as_ref()).collect();
                let value = (*values.choose(&mut self.rng)?).clone();
                let surface = match slot.variants.get(&value) {
                    Some(vars) if !vars.is_empty() && self.rng.gen_bool(self.cfg.variant_prob) => self.pick(vars).clone(),
                    _ => value.clone(),
                };
                let template = self.pick(&slot.mention).clone();
                let (tokens, range) = fill(&template, &surface);
                let (st, en) = range?;
                Some(Clause {
                    tokens,
                    span: Some((slot.name.clone(), value.clone(), st, en)),
                    update: Some((slot.name.clone(), value)),
                    refer: None,
                })
            }
            "dontcare" => {
                let slots: Vec<&SlotTemplates> = domain
                    .slots
                    .iter()
                    .filter(free)
                    .filter(|s| !s.dontcare.is_empty() && self.state.get(&s.name).map(String::as_str) != Some(DONTCARE))
                    .collect();
                let slot = *slots.choose(&mut self.rng)?;
                let template = self.pick(&slot.dontcare).clone();
                Some(Clause { tokens: text::words(&template), span: None, update: Some((slot.name.clone(), DONTCARE.into())), refer: None })
            }
            "true" | "false" => {
                let value = kind == "true";
                let slots: Vec<&SlotTemplates> = domain
                    .slots
                    .iter()
                    .filter(free)
                    .filter(|s| s.boolean && self.state.get(&s.name).map(String::as_str) != Some(kind))
                    .collect();
                let slot = *slots.choose(&mut self.rng)?;
                let templates = if value { &slot.true_templates } else { &slot.false_templates };
                let template = self.pick(templates).clone();
                Some(Clause {
                    tokens: text::words(&template),
                    span: None,
                    update: Some((slot.name.clone(), value.to_string())),
                    refer: None,
                })
            }
            "refer" => {
                let mut options = Vec::new();
                for slot in domain.slots.iter().filter(free) {
                    for (src, templates) in &slot.refer {
                        if let Some(v) = self.state.get(src) {
                            if v != DONTCARE && self.state.get(&slot.name) != Some(v) && !templates.is_empty() {
                                options.push((slot, src.clone(), v.clone(), templates));
                            }
                        }
                    }
                }
                let (slot, src, value, templates) = options.choose(&mut self.rng)?.clone();
                let template = self.pick(templates).clone();
                Some(Clause {
                    tokens: text::words(&template),
                    span: None,
                    update: Some((slot.name.clone(), value)),
                    refer: Some((slot.name.clone(), src)),
                })
            }
            "inform" => {
                let (slot, value) = offered.iter().find(|(k, v)| self.state.get(*k) != Some(*v) && !used.contains(k))?;
                let template = self.pick(&self.cfg.accept).clone();
                Some(Clause { tokens: text::words(&template), span: None, update: Some((slot.clone(), value.clone())), refer: None })
            }
            _ => None,
        }
    }
}

/// Generates `(schema, corpus)` as a pure function of `(config, seed)`.
pub fn gen_synthetic(config: &GeneratorConfig, seed: u64) -> Result<(Schema, Vec<Dialogue>)> {
    config.validate()?;
    let schema = config.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(config.dialogues);
    let mut tally = Tally::default();
    for di in 0..config.dialogues {
        let dseed: u64 = rng.gen();
        let d = gen_dialogue(config, &schema, format!("syn-{seed}-{di:05}"), dseed, &mut tally)?;
        corpus.push(d);
    }
    Ok((schema, corpus))
}

/// Running class counts that steer clause choice towards the targets.
#[derive(Default)]
struct Tally {
    slot_turns: f64,
    counts: BTreeMap<String, f64>,
}

impl Tally {
    /// Relative shortfall against the target, at most 1.
    fn shortfall(&self, cfg: &GeneratorConfig, kind: &str) -> f64 {
        let want = cfg.class_targets[kind] * self.slot_turns;
        (want - self.counts.get(kind).copied().unwrap_or(0.0)) / (want + 1.0)
    }
}

/// Number of slots a domain's refer templates borrow from other domains.
fn foreign_sources(d: &DomainConfig) -> usize {
    let prefix = format!("{}-", d.name);
    d.slots.iter().flat_map(|s| s.refer.keys()).filter(|src| !src.starts_with(&prefix)).count()
}

fn gen_dialogue(cfg: &GeneratorConfig, schema: &Schema, id: String, seed: u64, tally: &mut Tally) -> Result<Dialogue> {
    let mut b = DialogueBuilder { cfg, rng: ChaCha8Rng::seed_from_u64(seed), state: SlotValues::new() };
    let mut order: Vec<&DomainConfig> = cfg.domains.iter().collect();
    order.shuffle(&mut b.rng);
    let max_domains = cfg.max_domains.clamp(1, order.len());
    let n_domains = if max_domains > 1 && b.rng.gen_bool(cfg.multi_domain_prob) { b.rng.gen_range(2..=max_domains) } else { 1 };
    order.truncate(n_domains);
    // Domains that borrow values from others come later.
    order.sort_by_key(|d| foreign_sources(d));
    let n_turns = b.rng.gen_range(cfg.min_turns..=cfg.max_turns).max(n_domains);

    let mut turns = Vec::with_capacity(n_turns);
    let mut system = cfg.greeting.clone();
    let mut informed = SlotValues::new();
    let mut domain_idx = 0;
    for t in 0..n_turns {
        // Spread domains over the dialogue.
        let target = (t * n_domains) / n_turns;
        if target > domain_idx {
            domain_idx = target;
        }
        let domain = order[domain_idx];
        tally.slot_turns += schema.len() as f64;
        let mut clauses: Vec<Clause> = Vec::new();
        let mut used: Vec<String> = Vec::new();
        let mut question: Option<&SlotTemplates> = None;
        let roll: f64 = b.rng.gen();
        if roll < cfg.question_prob {
            let qs: Vec<&SlotTemplates> = domain.slots.iter().filter(|s| !s.question.is_empty() && !s.answer.is_empty()).collect();
            question = qs.choose(&mut b.rng).copied();
        } else if roll < cfg.question_prob + cfg.chitchat_prob {
            let c = b.pick(&cfg.chitchat).clone();
            clauses.push(Clause { tokens: text::words(&c), span: None, update: None, refer: None });
        }
        if question.is_none() && clauses.is_empty() {
            let mut n_clauses = 1;
            while n_clauses < cfg.max_clauses && b.rng.gen_bool(cfg.extra_clause_prob) {
                n_clauses += 1;
            }
            while clauses.len() < n_clauses {
                let mut kinds: Vec<(f64, &str)> = cfg
                    .class_targets
                    .keys()
                    .filter(|k| clauses.is_empty() || k.as_str() != "inform")
                    .map(|k| (tally.shortfall(cfg, k) + b.rng.gen::<f64>() * 0.5, k.as_str()))
                    .collect();
                kinds.sort_by(|a, b| b.0.total_cmp(&a.0));
                let Some((kind, c)) = kinds.iter().find_map(|(_, k)| b.clause(k, domain, &informed, &used).map(|c| (*k, c))) else {
                    break;
                };
                *tally.counts.entry(kind.to_string()).or_default() += 1.0;
                if let Some((slot, _)) = &c.update {
                    used.push(slot.clone());
                }
                clauses.push(c);
            }
        }

        // Assemble the user utterance and its labels.
        let mut tokens: Vec<String> = Vec::new();
        let mut spans: BTreeMap<String, Vec<Span>> = BTreeMap::new();
        let mut refers = BTreeMap::new();
        let mut state = b.state.clone();
        for (ci, c) in clauses.iter().enumerate() {
            if ci > 0 {
                tokens.push("and".into());
            }
            let off = tokens.len();
            tokens.extend(c.tokens.iter().cloned());
            if let Some((slot, _, st, en)) = &c.span {
                spans.entry(slot.clone()).or_default().push(Span(Utterance::User, off + st, off + en));
            }
            if let Some((slot, value)) = &c.update {
                state.insert(slot.clone(), value.clone());
            }
            if let Some((slot, src)) = &c.refer {
                refers.insert(slot.clone(), src.clone());
            }
        }
        if let Some(q) = question {
            let qt = b.pick(&q.question).clone();
            tokens.extend(text::words(&qt));
        }
        if tokens.is_empty() {
            let c = b.pick(&cfg.chitchat).clone();
            tokens.extend(text::words(&c));
        }
        turns.push(Turn {
            system_utterance: system.clone(),
            user_utterance: text::detokenize(&tokens),
            state: state.clone(),
            informed: informed.clone(),
            gate_labels: None,
            span_labels: Some(spans),
            refer_labels: Some(refers),
        });
        b.state = state;

        // Next system utterance.
        informed = SlotValues::new();
        let next_domain = order[((t + 1) * n_domains / n_turns).min(n_domains - 1)];
        if let Some(q) = question {
            let value = b.pick(&q.values).clone();
            let template = b.pick(&q.answer).clone();
            system = text::detokenize(&fill(&template, &value).0);
            informed.insert(q.name.clone(), value);
        } else {
            let offerable: Vec<&SlotTemplates> = next_domain
                .slots
                .iter()
                .filter(|s| (!s.offer.is_empty() || !s.answer.is_empty()) && !b.state.contains_key(&s.name))
                .collect();
            if !offerable.is_empty() && b.rng.gen_bool(cfg.offer_prob) {
                // Named entities are what systems usually recommend.
                let named: Vec<&SlotTemplates> = offerable.iter().copied().filter(|s| !s.offer.is_empty()).collect();
                let slot = if !named.is_empty() && b.rng.gen_bool(0.7) { *b.pick(&named) } else { *b.pick(&offerable) };
                let value = b.pick(&slot.values).clone();
                let templates = if slot.offer.is_empty() { &slot.answer } else { &slot.offer };
                let template = b.pick(templates).clone();
                system = text::detokenize(&fill(&template, &value).0);
                informed.insert(slot.name.clone(), value);
            } else {
                let requestable: Vec<&SlotTemplates> =
                    next_domain.slots.iter().filter(|s| !s.request.is_empty() && !b.state.contains_key(&s.name)).collect();
                system = match requestable.choose(&mut b.rng) {
                    Some(slot) if b.rng.gen_bool(0.7) => b.pick(&slot.request).clone(),
                    _ => b.pick(&cfg.acknowledge).clone(),
                };
            }
        }
    }
    let mut d = Dialogue { id, turns, provenance: None };
    validate_dialogue(&mut d, schema)?;
    let d = derive_gate_labels(&d, schema)?;
    debug_assert!(cfg.slot("hotel-area").is_none() || !d.turns.is_empty());
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_string, parse_corpus};
    use crate::heads::GateClass;

    fn small() -> GeneratorConfig {
        GeneratorConfig { dialogues: 40, ..Default::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let (_, a) = gen_synthetic(&small(), 7).unwrap();
        let (_, b) = gen_synthetic(&small(), 7).unwrap();
        assert_eq!(corpus_to_string(&a), corpus_to_string(&b));
        let (_, c) = gen_synthetic(&small(), 8).unwrap();
        assert_ne!(corpus_to_string(&a), corpus_to_string(&c));
    }

    #[test]
    fn round_trips_through_text_format() {
        let (schema, corpus) = gen_synthetic(&small(), 3).unwrap();
        let back = parse_corpus(&corpus_to_string(&corpus), &schema).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn boolean_slot_without_templates_is_rejected() {
        let mut cfg = small();
        cfg.domains[0].slots[3].false_templates.clear();
        assert!(matches!(gen_synthetic(&cfg, 1), Err(DstError::Config(_))));
        let mut cfg = small();
        cfg.domains.truncate(1);
        assert!(gen_synthetic(&cfg, 1).is_err());
    }

    #[test]
    fn refer_turns_name_their_source() {
        let (_, corpus) = gen_synthetic(&small(), 11).unwrap();
        let mut found = 0;
        for d in &corpus {
            for t in &d.turns {
                for (slot, g) in t.gate_labels.as_ref().unwrap() {
                    if *g == GateClass::Refer {
                        let src = t.refer_source(slot).expect("refer label present");
                        assert_ne!(src, slot);
                        found += 1;
                    }
                }
            }
        }
        assert!(found >= 1);
    }

    #[test]
    fn every_gate_class_is_at_least_two_percent() {
        for seed in 0..3 {
            let (schema, corpus) = gen_synthetic(&GeneratorConfig::default(), seed).unwrap();
            let mut counts = [0usize; 7];
            let mut total = 0;
            for t in corpus.iter().flat_map(|d| &d.turns) {
                for s in &schema.slots {
                    counts[t.gate(&s.name).unwrap().index()] += 1;
                    total += 1;
                }
            }
            for c in GateClass::ALL {
                let share = counts[c.index()] as f64 / total as f64;
                assert!(share >= 0.02, "seed {seed}: class {c} at {share:.4}");
            }
        }
    }

    #[test]
    fn gold_spans_cover_value_or_variant() {
        let cfg = small();
        let (schema, corpus) = gen_synthetic(&cfg, 5).unwrap();
        for d in &corpus {
            for t in &d.turns {
                let uw = t.user_words();
                for (slot, spans) in t.span_labels.as_ref().unwrap() {
                    let value = &t.state[slot];
                    let st = cfg.slot(slot).unwrap();
                    let mut forms = vec![value.clone()];
                    forms.extend(st.variants.get(value).cloned().unwrap_or_default());
                    for sp in spans {
                        let surface = text::detokenize(&uw[sp.start()..sp.end()]);
                        assert!(forms.contains(&surface), "{surface} not a form of {value}");
                    }
                }
            }
        }
        assert_eq!(schema.len(), 12);
    }
}

