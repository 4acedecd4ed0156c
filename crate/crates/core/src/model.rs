//! The tracker network: tokenizer, shared encoder and prediction heads over
//! one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Schema, SlotSpec};
use crate::encoder::{assemble_slot, assemble_value, AssembledInput, Encoder, EncoderConfig, Tokenizer};
use crate::error::{DstError, Result};
use crate::heads::{HeadParams, TurnPrediction};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub heads: HeadParams,
    pub store: ParamStore,
}

impl Model {
    pub fn new(tokenizer: Tokenizer, config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = Encoder::new(&mut store, config.clone(), tokenizer.len(), &mut rng)?;
        let heads = HeadParams::new(&mut store, config.d, config.heads, &mut rng)?;
        Ok(Model { tokenizer, encoder, heads, store })
    }

    pub fn d(&self) -> usize {
        self.encoder.config.d
    }

    /// Records pooled slot encodings `R_S` (`|S| × d`) on `g`.
    pub fn encode_slots<R: Rng>(&self, g: &mut Graph, schema: &Schema, mut dropout: Option<&mut R>) -> Result<Var> {
        let mut pooled = Vec::with_capacity(schema.len());
        for slot in &schema.slots {
            let ids = assemble_slot(slot, &self.tokenizer).token_ids;
            pooled.push(self.encoder.encode(g, &ids, dropout.as_deref_mut())?.pooled);
        }
        Ok(g.stack_rows(&pooled))
    }

    /// Inference-mode `R_S`.
    pub fn slot_reprs(&self, schema: &Schema) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let rs = self.encode_slots::<ChaCha8Rng>(&mut g, schema, None)?;
        Ok(g.value(rs).clone())
    }

    /// Token encodings of `[CLS] slot is value [SEP]`.
    pub fn value_tokens(&self, slot: &SlotSpec, value: &str) -> Result<Mat> {
        let ids = assemble_value(slot, value, &self.tokenizer).token_ids;
        Ok(self.encoder.encode_infer(&self.store, &ids)?.tokens)
    }

    /// `r_V` of one candidate from its token encodings.
    pub fn value_repr(&self, slot_repr: &[f64], value_tokens: &Mat) -> Result<Vec<f64>> {
        if slot_repr.len() != self.d() {
            return Err(DstError::Dimension(format!("slot representation of width {}", slot_repr.len())));
        }
        let mut g = Graph::new(&self.store);
        let s = g.constant(Mat::row_vector(slot_repr.to_vec()));
        let v = g.constant(value_tokens.clone());
        let r = self.heads.value_repr(&mut g, s, v)?;
        Ok(g.value(r).data.clone())
    }

    /// Stacked `R_{V_i}` for every slot (empty matrices for slots without candidates).
    pub fn value_reprs(&self, schema: &Schema, slot_reprs: &Mat) -> Result<Vec<Mat>> {
        schema
            .slots
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                let rows = slot
                    .candidate_values
                    .iter()
                    .map(|v| self.value_repr(slot_reprs.row(i), &self.value_tokens(slot, v)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(if rows.is_empty() { Mat::zeros(0, self.d()) } else { Mat::stack_rows(&rows) })
            })
            .collect()
    }

    /// Deterministic forward pass over one assembled turn.
    pub fn predict(&self, input: &AssembledInput, slot_reprs: &Mat, value_reprs: &[Mat]) -> Result<TurnPrediction> {
        let mut g = Graph::new(&self.store);
        let rs = g.constant(slot_reprs.clone());
        let enc = self.encoder.encode::<ChaCha8Rng>(&mut g, &input.token_ids, None)?;
        let out = self.heads.forward(&mut g, rs, enc.tokens, &input.user_mask, value_reprs)?;
        Ok(TurnPrediction::from_outputs(&g, &out, input.tokens.clone(), value_reprs))
    }
}
