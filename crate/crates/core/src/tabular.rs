//! Tabular path: per-field feature tokenizer and a PreNorm transformer
//! encoder that summarizes the tokens in a trailing CLS token.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalField {
    pub name: String,
    pub vocabulary: Vec<String>,
}

impl CategoricalField {
    pub fn cardinality(&self) -> usize {
        self.vocabulary.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub numerical: Vec<String>,
    pub categorical: Vec<CategoricalField>,
}

/// One subject's tabular fields keyed by name. Categorical values are
/// vocabulary indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TabularRecord {
    pub numerical: BTreeMap<String, f64>,
    pub categorical: BTreeMap<String, usize>,
}

impl TabularSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.numerical.iter().chain(self.categorical.iter().map(|c| &c.name)) {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate tabular field `{name}`")));
            }
        }
        for c in &self.categorical {
            if c.cardinality() < 2 {
                return Err(Error::Config(format!("categorical field `{}` needs >= 2 categories", c.name)));
            }
        }
        if seen.is_empty() {
            return Err(Error::Config("tabular schema has no fields".into()));
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.numerical.len() + self.categorical.len()
    }

    /// Orders a record's values by the schema, checking presence and range.
    pub fn encode(&self, record: &TabularRecord) -> Result<(Vec<f64>, Vec<usize>)> {
        let num = self
            .numerical
            .iter()
            .map(|n| record.numerical.get(n).copied().ok_or_else(|| Error::MissingField(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        let cat = self
            .categorical
            .iter()
            .map(|c| {
                let &v = record.categorical.get(&c.name).ok_or_else(|| Error::MissingField(c.name.clone()))?;
                if v >= c.cardinality() {
                    return Err(Error::CategoryOutOfRange {
                        field: c.name.clone(),
                        index: v,
                        cardinality: c.cardinality(),
                    });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((num, cat))
    }
}

/// Per-field embeddings: `b_j + x_j·W_j` for numerical fields and
/// `b_j + W_j[x_j]` for categorical ones, followed by a learnable CLS row.
#[derive(Clone, Debug)]
pub struct FeatureTokenizer {
    pub num_weight: Option<ParamId>,
    pub num_bias: Option<ParamId>,
    pub cat_tables: Vec<ParamId>,
    pub cat_bias: Option<ParamId>,
    pub cls: ParamId,
    pub d: usize,
    cardinalities: Vec<usize>,
    names: Vec<String>,
}

impl FeatureTokenizer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        schema: &TabularSchema,
        d: usize,
        feature_biases: bool,
    ) -> Self {
        let k_num = schema.numerical.len();
        let k_cat = schema.categorical.len();
        let bound = 1.0 / (d as f64).sqrt();
        let num_weight = (k_num > 0).then(|| store.add("tab.tok.num_weight", init.uniform(&[k_num, d], bound)));
        let num_bias = (k_num > 0 && feature_biases).then(|| store.add("tab.tok.num_bias", init.uniform(&[k_num, d], bound)));
        let cat_tables = schema
            .categorical
            .iter()
            .map(|c| store.add(format!("tab.tok.cat.{}", c.name), init.uniform(&[c.cardinality(), d], bound)))
            .collect();
        let cat_bias = (k_cat > 0 && feature_biases).then(|| store.add("tab.tok.cat_bias", init.uniform(&[k_cat, d], bound)));
        let cls = store.add("tab.tok.cls", init.uniform(&[d], bound));
        Self {
            num_weight,
            num_bias,
            cat_tables,
            cat_bias,
            cls,
            d,
            cardinalities: schema.categorical.iter().map(|c| c.cardinality()).collect(),
            names: schema.categorical.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn has_feature_biases(&self) -> bool {
        self.num_bias.is_some() || self.cat_bias.is_some()
    }

    /// Token matrix `[(k_num + k_cat + 1) × d]`: numerical rows, categorical
    /// rows, CLS last.
    pub fn tokenize<T: Real>(&self, ctx: &mut Ctx<'_, T>, numerical: &[T], categorical: &[usize]) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        if let Some(w) = self.num_weight {
            let w = ctx.param(w);
            let k_num = ctx.graph.shape(w)[0];
            if numerical.len() != k_num {
                return Err(Error::Shape {
                    op: "tokenize",
                    lhs: vec![numerical.len()],
                    rhs: vec![k_num],
                });
            }
            let x = ctx.constant(Tensor::new(vec![k_num], numerical.to_vec())?);
            let mut tok = ctx.graph.mul_col(w, x)?;
            if let Some(b) = self.num_bias {
                let b = ctx.param(b);
                tok = ctx.graph.add(tok, b)?;
            }
            parts.push(tok);
        }
        if !self.cat_tables.is_empty() {
            if categorical.len() != self.cat_tables.len() {
                return Err(Error::Shape {
                    op: "tokenize",
                    lhs: vec![categorical.len()],
                    rhs: vec![self.cat_tables.len()],
                });
            }
            let mut rows = Vec::with_capacity(categorical.len());
            for (j, &v) in categorical.iter().enumerate() {
                if v >= self.cardinalities[j] {
                    return Err(Error::CategoryOutOfRange {
                        field: self.names[j].clone(),
                        index: v,
                        cardinality: self.cardinalities[j],
                    });
                }
                let table = ctx.param(self.cat_tables[j]);
                // one-hot row selection
                let map: Vec<usize> = (v * self.d..(v + 1) * self.d).collect();
                rows.push(ctx.graph.gather(table, Arc::new(map), &[1, self.d])?);
            }
            let mut tok = ctx.graph.concat(&rows)?;
            if let Some(b) = self.cat_bias {
                let b = ctx.param(b);
                tok = ctx.graph.add(tok, b)?;
            }
            parts.push(tok);
        }
        let cls = ctx.param(self.cls);
        parts.push(ctx.graph.reshape(cls, &[1, self.d])?);
        ctx.graph.concat(&parts)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    /// Absent on the first layer when its leading normalization is removed.
    pub attn_norm: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// PreNorm transformer over the token matrix, no positional encodings.
#[derive(Clone, Debug)]
pub struct TabularEncoder {
    pub tokenizer: FeatureTokenizer,
    pub layers: Vec<EncoderLayer>,
}

pub struct EncodedTokens {
    pub tokens: Var,
    /// Attention weights per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

impl TabularEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        schema: &TabularSchema,
        d: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
        remove_first_norm: bool,
        feature_biases: bool,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("tabular encoder needs at least one layer".into()));
        }
        let tokenizer = FeatureTokenizer::new(store, init, schema, d, feature_biases);
        let layers = (0..layers)
            .map(|l| {
                let attn_norm = (l > 0 || !remove_first_norm).then(|| LayerNorm::new(store, &format!("tab.l{l}.attn_norm"), d));
                Ok(EncoderLayer {
                    attn_norm,
                    attn: MultiHeadAttention::new(store, init, &format!("tab.l{l}.attn"), d, heads)?,
                    ff_norm: LayerNorm::new(store, &format!("tab.l{l}.ff_norm"), d),
                    ff_in: Linear::new(store, init, &format!("tab.l{l}.ff_in"), d, ff_mult * d),
                    ff_out: Linear::new(store, init, &format!("tab.l{l}.ff_out"), ff_mult * d, d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tokenizer, layers })
    }

    pub fn encode_tokens<T: Real>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<EncodedTokens> {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = match &layer.attn_norm {
                Some(n) => n.forward(ctx, x)?,
                None => x,
            };
            let a = layer.attn.forward(ctx, h, h)?;
            attention.push(a.weights);
            let a = ctx.dropout(a.out)?;
            x = ctx.graph.add(x, a)?;
            let h = layer.ff_norm.forward(ctx, x)?;
            let h = layer.ff_in.forward(ctx, h)?;
            let h = ctx.graph.gelu(h);
            let h = layer.ff_out.forward(ctx, h)?;
            let h = ctx.dropout(h)?;
            x = ctx.graph.add(x, h)?;
        }
        Ok(EncodedTokens { tokens: x, attention })
    }

    /// The CLS row `[1×d]` of the final layer.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<Var> {
        let enc = self.encode_tokens(ctx, tokens)?;
        let n = ctx.graph.shape(enc.tokens)[0];
        ctx.graph.slice_rows(enc.tokens, n - 1, n)
    }

    /// Tokenize and encode in one step.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, numerical: &[T], categorical: &[usize]) -> Result<Var> {
        let tokens = self.tokenizer.tokenize(ctx, numerical, categorical)?;
        self.encode(ctx, tokens)
    }
}
