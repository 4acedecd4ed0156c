//! Word-level tokenizer, input assembly and the shared transformer encoder.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Schema, SlotSpec, Turn, Utterance};
use crate::error::{DstError, Result};
use crate::heads::{LayerNorm, Linear, Mha};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};
use crate::text;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const NONE: usize = 4;
const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[NONE]"];
const VOCAB_HEADER: &str = "#dst-vocab v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Specials first, then words by descending corpus frequency.
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Tokenizer { vocab, index }
    }

    /// Counts words in every utterance, slot description and candidate value.
    pub fn build(corpus: &[Dialogue], schema: &Schema, min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(DstError::Empty("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut add = |s: &str| {
            for w in text::words(s) {
                *counts.entry(w).or_default() += 1;
            }
        };
        for d in corpus {
            for t in &d.turns {
                add(&t.user_utterance);
                add(&t.system_utterance);
                for v in t.state.values().chain(t.informed.values()) {
                    add(v);
                }
            }
        }
        for s in &schema.slots {
            add(&s.name);
            add(&s.description);
            add(". is");
            for v in &s.candidate_values {
                add(v);
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let vocab = SPECIALS.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w)).collect();
        Ok(Self::from_vocab(vocab))
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Number of word (non-special) entries, `|V_enc|`.
    pub fn word_count(&self) -> usize {
        self.vocab.len() - SPECIALS.len()
    }

    /// Id of the word with frequency rank `k` (1-based).
    pub fn rank_id(&self, k: usize) -> usize {
        SPECIALS.len() - 1 + k
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for w in &self.vocab {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(raw: &str) -> Result<Self> {
        let mut lines = raw.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(DstError::Checkpoint("vocabulary file has an unknown version header".into()));
        }
        let vocab: Vec<String> = lines.map(str::to_string).collect();
        if vocab.len() < SPECIALS.len() || vocab.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(DstError::Checkpoint("vocabulary does not start with the special tokens".into()));
        }
        Ok(Self::from_vocab(vocab))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| DstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| DstError::io(path, e))?)
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }
}

/// Where an assembled position came from: `turns_back` 0 is the current turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub turns_back: usize,
    pub utterance: Utterance,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Positions of the three separators.
    pub segment_boundaries: Vec<usize>,
    pub user_mask: Vec<bool>,
    pub value_target_mask: Option<Vec<bool>>,
    pub inform_mask: Option<Vec<bool>>,
    pub origin: Vec<Option<Origin>>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn position_of(&self, o: Origin) -> Option<usize> {
        self.origin.iter().position(|p| *p == Some(o))
    }

    /// Position lookup keyed by origin.
    pub fn origin_index(&self) -> HashMap<Origin, usize> {
        self.origin.iter().enumerate().filter_map(|(i, o)| o.map(|o| (o, i))).collect()
    }
}

struct Builder<'a> {
    tok: &'a Tokenizer,
    out: AssembledInput,
}

impl Builder<'_> {
    fn new(tok: &Tokenizer) -> Builder<'_> {
        Builder {
            tok,
            out: AssembledInput {
                token_ids: Vec::new(),
                tokens: Vec::new(),
                segment_boundaries: Vec::new(),
                user_mask: Vec::new(),
                value_target_mask: None,
                inform_mask: None,
                origin: Vec::new(),
            },
        }
    }

    fn special(&mut self, id: usize) {
        if id == SEP {
            self.out.segment_boundaries.push(self.out.token_ids.len());
        }
        self.out.token_ids.push(id);
        self.out.tokens.push(SPECIALS[id].to_string());
        self.out.user_mask.push(false);
        self.out.origin.push(None);
    }

    fn word(&mut self, w: &str, origin: Option<Origin>) {
        self.out.token_ids.push(self.tok.id(w));
        self.out.tokens.push(w.to_string());
        self.out.user_mask.push(origin.is_some_and(|o| o.utterance == Utterance::User));
        self.out.origin.push(origin);
    }

    fn utterance(&mut self, words: &[String], turns_back: usize, utterance: Utterance, limit: usize) {
        for (index, w) in words.iter().enumerate().take(limit) {
            self.word(w, Some(Origin { turns_back, utterance, index }));
        }
    }
}

fn value_positions(words: &[String], value: &str) -> Vec<usize> {
    let vw = text::words(value);
    text::find_all(words, &vw).into_iter().flat_map(|s| s..s + vw.len()).collect()
}

/// `[CLS] U_t [SEP] M_t [SEP] H_t [SEP]` with `history` most-recent-first.
/// History overflow is cut from the oldest end.
pub fn assemble_turn(turn: &Turn, history: &[&Turn], tok: &Tokenizer, max_len: usize) -> Result<AssembledInput> {
    let (uw, sw) = (turn.user_words(), turn.system_words());
    let base = 4 + uw.len() + sw.len();
    if base > max_len {
        return Err(DstError::Oversize { len: base, max_len });
    }
    let mut b = Builder::new(tok);
    b.special(CLS);
    b.utterance(&uw, 0, Utterance::User, usize::MAX);
    b.special(SEP);
    b.utterance(&sw, 0, Utterance::System, usize::MAX);
    b.special(SEP);
    let mut budget = max_len - base;
    for (k, h) in history.iter().enumerate() {
        for (u, words) in [(Utterance::User, h.user_words()), (Utterance::System, h.system_words())] {
            let take = words.len().min(budget);
            b.utterance(&words, k + 1, u, take);
            budget -= take;
        }
        if budget == 0 {
            break;
        }
    }
    b.special(SEP);
    let mut input = b.out;

    // Informed values in system utterances and extractable value tokens.
    let turns: Vec<&Turn> = std::iter::once(turn).chain(history.iter().copied()).collect();
    let idx = input.origin_index();
    let mut inform = vec![false; input.len()];
    let mut target = vec![false; input.len()];
    for (k, t) in turns.iter().enumerate() {
        let (tu, ts) = (t.user_words(), t.system_words());
        let mark = |mask: &mut Vec<bool>, u: Utterance, i: usize| {
            if let Some(&p) = idx.get(&Origin { turns_back: k, utterance: u, index: i }) {
                mask[p] = true;
            }
        };
        for v in t.informed.values() {
            for i in value_positions(&ts, v) {
                mark(&mut inform, Utterance::System, i);
            }
        }
        match &t.span_labels {
            Some(spans) => {
                for sp in spans.values().flatten() {
                    for i in sp.start()..sp.end() {
                        mark(&mut target, sp.utterance(), i);
                    }
                }
            }
            None => {
                for v in t.state.values() {
                    for i in value_positions(&tu, v) {
                        mark(&mut target, Utterance::User, i);
                    }
                }
            }
        }
    }
    input.inform_mask = Some(inform);
    input.value_target_mask = Some(target);
    Ok(input)
}

/// `[CLS] slot . description [SEP]`
pub fn assemble_slot(slot: &SlotSpec, tok: &Tokenizer) -> AssembledInput {
    if slot.description.trim().is_empty() {
        warn!("slot {} has an empty description", slot.name);
    }
    let mut b = Builder::new(tok);
    b.special(CLS);
    b.word(&slot.name, None);
    b.word(".", None);
    for w in text::words(&slot.description) {
        b.word(&w, None);
    }
    b.special(SEP);
    b.out
}

/// `[CLS] slot is value [SEP]`
pub fn assemble_value(slot: &SlotSpec, value: &str, tok: &Tokenizer) -> AssembledInput {
    let mut b = Builder::new(tok);
    b.special(CLS);
    b.word(&slot.name, None);
    b.word("is", None);
    for w in text::words(value) {
        b.word(&w, None);
    }
    b.special(SEP);
    b.out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d: 32, layers: 2, heads: 2, ffn_dim: 64, max_len: 180, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(DstError::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        if self.layers == 0 || self.max_len < 4 || !(0.0..1.0).contains(&self.dropout) {
            return Err(DstError::Config("invalid encoder shape or dropout".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    attn: Mha,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    tok_emb: crate::params::ParamId,
    pos_emb: crate::params::ParamId,
    ln_emb: LayerNorm,
    blocks: Vec<Block>,
}

/// Graph handles of an encoding.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub pooled: Var,
    pub tokens: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub pooled: Vec<f64>,
    pub tokens: Mat,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let tok_emb = store.gaussian("emb.tok", vocab_size, d, 0.1, rng);
        let pos_emb = store.gaussian("emb.pos", config.max_len, d, 0.1, rng);
        let ln_emb = LayerNorm::new(store, "emb.ln", d);
        let blocks = (0..config.layers)
            .map(|l| {
                Ok(Block {
                    attn: Mha::new(store, &format!("enc{l}.attn"), d, config.heads, rng)?,
                    ln1: LayerNorm::new(store, &format!("enc{l}.ln1"), d),
                    ff1: Linear::new(store, &format!("enc{l}.ff1"), d, config.ffn_dim, rng),
                    ff2: Linear::new(store, &format!("enc{l}.ff2"), config.ffn_dim, d, rng),
                    ln2: LayerNorm::new(store, &format!("enc{l}.ln2"), d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { config, vocab_size, tok_emb, pos_emb, ln_emb, blocks })
    }

    /// Records the encoder on `g`. Passing an RNG selects train mode
    /// (inverted dropout on the output); `None` is deterministic inference.
    pub fn encode<R: Rng>(&self, g: &mut Graph, ids: &[usize], dropout: Option<&mut R>) -> Result<Encoded> {
        if ids.is_empty() {
            return Err(DstError::Empty("empty input sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(DstError::Oversize { len: ids.len(), max_len: self.config.max_len });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(DstError::TokenOutOfRange { id: bad, vocab: self.vocab_size });
        }
        let table = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let e = g.rows(table, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.rows(pos, &positions);
        let x = g.add(e, p);
        let mut x = self.ln_emb.forward(g, x);
        for b in &self.blocks {
            let a = b.attn.forward(g, x, x, x, None)?.output;
            let r = g.add(x, a);
            let h = b.ln1.forward(g, r);
            let f = b.ff1.forward(g, h);
            let f = g.gelu(f);
            let f = b.ff2.forward(g, f);
            let r = g.add(h, f);
            x = b.ln2.forward(g, r);
        }
        if let Some(rng) = dropout {
            let keep = 1.0 - self.config.dropout;
            if keep < 1.0 {
                let (rows, cols) = g.value(x).shape();
                let mask = (0..rows * cols).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
                x = g.mul_const(x, Mat::from_vec(rows, cols, mask));
            }
        }
        let pooled = g.rows(x, &[0]);
        Ok(Encoded { pooled, tokens: x })
    }

    /// Inference-mode encoding as plain values.
    pub fn encode_infer(&self, store: &ParamStore, ids: &[usize]) -> Result<EncoderOutput> {
        let mut g = Graph::new(store);
        let e = self.encode::<rand_chacha::ChaCha8Rng>(&mut g, ids, None)?;
        Ok(EncoderOutput { pooled: g.value(e.pooled).data.clone(), tokens: g.value(e.tokens).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use crate::tensor::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Schema {
        Schema::new(
            vec!["hotel".into()],
            vec![SlotSpec {
                name: "hotel-area".into(),
                description: "area of the hotel".into(),
                is_categorical: true,
                is_boolean: false,
                candidate_values: vec!["north".into()],
            }],
        )
        .unwrap()
    }

    fn turn(sys: &str, user: &str) -> Turn {
        Turn { system_utterance: sys.into(), user_utterance: user.into(), ..Default::default() }
    }

    fn dialogue(turns: Vec<Turn>) -> Dialogue {
        Dialogue { id: "d".into(), turns, provenance: None }
    }

    #[test]
    fn vocab_is_frequency_sorted_and_deterministic() {
        let c = vec![dialogue(vec![turn("", "a a b")])];
        let s = Schema::new(vec!["x".into()], vec![]).unwrap();
        let t = Tokenizer::build(&c, &s, 1).unwrap();
        assert!(t.id("a") < t.id("b"));
        assert_eq!(t.id("a"), t.rank_id(1));
        assert_eq!(t.id("zebra"), UNK);
        assert_eq!(Tokenizer::build(&c, &s, 1).unwrap(), t);
        assert!(Tokenizer::build(&[], &s, 1).is_err());
        let back = Tokenizer::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.id("b"), t.id("b"));
        let rare = Tokenizer::build(&c, &s, 2).unwrap();
        assert_eq!(rare.id("b"), UNK);
    }

    #[test]
    fn slot_and_value_layouts() {
        let c = vec![dialogue(vec![turn("", "north")])];
        let t = Tokenizer::build(&c, &schema(), 1).unwrap();
        let slot = &schema().slots[0];
        assert_eq!(assemble_slot(slot, &t).tokens.join(" "), "[CLS] hotel-area . area of the hotel [SEP]");
        assert_eq!(assemble_value(slot, "north", &t).tokens.join(" "), "[CLS] hotel-area is north [SEP]");
        let mut empty = slot.clone();
        empty.description.clear();
        assert_eq!(assemble_slot(&empty, &t).tokens.join(" "), "[CLS] hotel-area . [SEP]");
    }

    #[test]
    fn turn_layout_history_and_truncation() {
        let d = dialogue(vec![turn("hi", "one one"), turn("two sys", "two"), turn("three sys", "three")]);
        let t = Tokenizer::build(std::slice::from_ref(&d), &schema(), 1).unwrap();
        let first = assemble_turn(&d.turns[0], &[], &t, 180).unwrap();
        assert_eq!(first.tokens.join(" "), "[CLS] one one [SEP] hi [SEP] [SEP]");
        let x = assemble_turn(&d.turns[2], &[&d.turns[1], &d.turns[0]], &t, 180).unwrap();
        assert_eq!(x.tokens.join(" "), "[CLS] three [SEP] three sys [SEP] two two sys one one hi [SEP]");
        assert_eq!(x.user_mask.iter().filter(|&&b| b).count(), 1 + 1 + 2);
        for (i, &m) in x.user_mask.iter().enumerate() {
            if m {
                assert_eq!(x.origin[i].unwrap().utterance, Utterance::User);
            }
        }
        let cut = assemble_turn(&d.turns[2], &[&d.turns[1], &d.turns[0]], &t, 12).unwrap();
        assert_eq!(cut.tokens.join(" "), "[CLS] three [SEP] three sys [SEP] two two sys one one [SEP]");
        assert_eq!(cut.len(), 12);
        assert!(matches!(assemble_turn(&d.turns[2], &[], &t, 5), Err(DstError::Oversize { .. })));
    }

    #[test]
    fn inform_and_value_masks() {
        let mut t1 = turn("i recommend palace lodge .", "palace lodge please");
        t1.informed.insert("hotel-area".into(), "palace lodge".into());
        t1.span_labels = Some([("hotel-area".to_string(), vec![Span(Utterance::User, 0, 2)])].into());
        let d = dialogue(vec![t1]);
        let t = Tokenizer::build(std::slice::from_ref(&d), &schema(), 1).unwrap();
        let x = assemble_turn(&d.turns[0], &[], &t, 180).unwrap();
        let inform: Vec<&str> =
            x.inform_mask.as_ref().unwrap().iter().zip(&x.tokens).filter(|(m, _)| **m).map(|(_, w)| w.as_str()).collect();
        assert_eq!(inform, ["palace", "lodge"]);
        let tgt = x.value_target_mask.as_ref().unwrap();
        assert_eq!(tgt.iter().filter(|&&b| b).count(), 2);
        assert!(tgt[1] && tgt[2]);
    }

    #[test]
    fn encoder_shapes_determinism_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        let enc = Encoder::new(&mut store, EncoderConfig { d: 16, max_len: 20, ..Default::default() }, 10, &mut rng).unwrap();
        let a = enc.encode_infer(&store, &[1, 5, 6, 2]).unwrap();
        let b = enc.encode_infer(&store, &[1, 5, 6, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.rows, 4);
        assert_eq!(a.pooled.len(), 16);
        assert_eq!(a.pooled, a.tokens.row(0));
        assert!(matches!(enc.encode_infer(&store, &[1, 10]), Err(DstError::TokenOutOfRange { .. })));
        assert!(Encoder::new(&mut store, EncoderConfig { d: 15, heads: 2, ..Default::default() }, 10, &mut rng).is_err());
    }

    #[test]
    fn encoder_gradient_check_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::default();
        let cfg = EncoderConfig { d: 16, layers: 2, heads: 2, ffn_dim: 24, max_len: 8, dropout: 0.0 };
        let enc = Encoder::new(&mut store, cfg, 9, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = gradient_check(&mut store, &ids, |g| {
            let e = enc.encode::<ChaCha8Rng>(g, &[1, 5, 7, 5, 2], None).unwrap();
            let pooled = g.mse_rows(e.pooled, vec![(0, target.clone())]);
            let toks = g.mse_rows(e.tokens, vec![(2, target.iter().rev().cloned().collect()), (3, target.clone())]);
            g.weighted_sum(&[(pooled, 1.0), (toks, 0.5)])
        });
        assert!(err < 1e-4, "encoder gradient error {err}");
    }
}
