//! Cross-modal attention aggregation and the classifier head.

use crate::config::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Attended, Ctx, Init, Linear, MultiHeadAttention, ParamStore};
use crate::tape::Var;
use crate::tensor::Real;

/// Learned linear map from an EEG feature series `[T × C]` to a fixed
/// volume `[C' × a × b × c]`.
#[derive(Clone, Debug)]
pub struct EegTo3d {
    pub proj: Linear,
    pub shape: [usize; 4],
}

impl EegTo3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, t_len: usize, channels: usize, shape: [usize; 4]) -> Self {
        let out: usize = shape.iter().product();
        Self {
            proj: Linear::new(store, init, "fusion.eeg3d", t_len * channels, out),
            shape,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = ctx.graph.value(x).len();
        if n != self.proj.d_in {
            return Err(Error::Shape {
                op: "eeg_to_3d",
                lhs: ctx.graph.shape(x).to_vec(),
                rhs: vec![self.proj.d_in],
            });
        }
        let flat = ctx.graph.reshape(x, &[1, n])?;
        let y = self.proj.forward(ctx, flat)?;
        ctx.graph.reshape(y, &self.shape)
    }
}

/// Token views of a channel-first feature map `[C × ...]`: one token per
/// spatial position, `[N × C]`.
pub fn map_to_tokens<T: Real>(ctx: &mut Ctx<'_, T>, map: Var) -> Result<Var> {
    let shape = ctx.graph.shape(map).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let flat = ctx.graph.reshape(map, &[c, n])?;
    ctx.graph.transpose(flat)
}

/// Scaled dot-product attention with queries from one modality and
/// keys/values from the other.
pub fn cross_attention<T: Real>(ctx: &mut Ctx<'_, T>, attn: &MultiHeadAttention, queries: Var, context: Var) -> Result<Attended> {
    attn.forward(ctx, queries, context)
}

/// All three modalities projected to the shared width `d_f`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFeatures {
    /// `[N_e × d_f]`
    pub eeg_tokens: Var,
    /// `[N_m × d_f]`
    pub mri_tokens: Var,
    /// `[1 × d_f]`
    pub tab_cls: Var,
}

#[derive(Clone, Debug)]
pub struct CrossModal {
    /// EEG tokens query MRI tokens.
    pub eeg_from_mri: MultiHeadAttention,
    /// MRI tokens query EEG tokens.
    pub mri_from_eeg: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    pub eeg_proj: Linear,
    pub mri_proj: Linear,
    pub tab_proj: Linear,
    pub cmaa: Option<CrossModal>,
    pub skip: Linear,
    pub dense1: Linear,
    pub dense2: Linear,
    pub classifier: Linear,
    pub d_f: usize,
}

pub struct FusionDims {
    pub eeg_channels: usize,
    pub mri_channels: usize,
    pub tab_width: usize,
    pub d_f: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl FusionHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, dims: &FusionDims, cmaa: bool) -> Result<Self> {
        let d_f = dims.d_f;
        let eeg_proj = Linear::new(store, init, "fusion.eeg_proj", dims.eeg_channels, d_f);
        let mri_proj = Linear::new(store, init, "fusion.mri_proj", dims.mri_channels, d_f);
        let tab_proj = Linear::new(store, init, "fusion.tab_proj", dims.tab_width, d_f);
        let cmaa = if cmaa {
            Some(CrossModal {
                eeg_from_mri: MultiHeadAttention::new(store, init, "fusion.cmaa.eeg_from_mri", d_f, dims.heads)?,
                mri_from_eeg: MultiHeadAttention::new(store, init, "fusion.cmaa.mri_from_eeg", d_f, dims.heads)?,
            })
        } else {
            None
        };
        let paths = if cmaa.is_some() { 5 } else { 3 };
        let skip = Linear::new(store, init, "fusion.agg.skip", paths * d_f, dims.hidden);
        let dense1 = Linear::new(store, init, "fusion.agg.dense1", dims.hidden, dims.hidden);
        let dense2 = Linear::new(store, init, "fusion.agg.dense2", dims.hidden, dims.hidden);
        let classifier = Linear {
            weight: store.add("fusion.classifier.weight", init.normal(&[dims.hidden, NUM_CLASSES], 0.01)),
            bias: store.add("fusion.classifier.bias", crate::tensor::Tensor::zeros(&[NUM_CLASSES])),
            d_in: dims.hidden,
            d_out: NUM_CLASSES,
        };
        Ok(Self {
            eeg_proj,
            mri_proj,
            tab_proj,
            cmaa,
            skip,
            dense1,
            dense2,
            classifier,
            d_f,
        })
    }

    /// Projects raw modality outputs to the shared width.
    pub fn project<T: Real>(&self, ctx: &mut Ctx<'_, T>, eeg_volume: Var, mri_map: Var, tab_cls: Var) -> Result<ModalityFeatures> {
        let e = map_to_tokens(ctx, eeg_volume)?;
        let m = map_to_tokens(ctx, mri_map)?;
        Ok(ModalityFeatures {
            eeg_tokens: self.eeg_proj.forward(ctx, e)?,
            mri_tokens: self.mri_proj.forward(ctx, m)?,
            tab_cls: self.tab_proj.forward(ctx, tab_cls)?,
        })
    }

    /// Logits `[3]`.
    pub fn aggregate_and_classify<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: &ModalityFeatures) -> Result<Var> {
        let mut paths = Vec::with_capacity(5);
        if let Some(cm) = &self.cmaa {
            let e = cross_attention(ctx, &cm.eeg_from_mri, feats.eeg_tokens, feats.mri_tokens)?;
            let m = cross_attention(ctx, &cm.mri_from_eeg, feats.mri_tokens, feats.eeg_tokens)?;
            paths.push(ctx.graph.mean_rows(e.out)?);
            paths.push(ctx.graph.mean_rows(m.out)?);
        }
        paths.push(ctx.graph.mean_rows(feats.eeg_tokens)?);
        paths.push(ctx.graph.mean_rows(feats.mri_tokens)?);
        paths.push(feats.tab_cls);
        let joined = ctx.graph.concat(&paths)?;
        let width = paths.len() * self.d_f;
        let joined = ctx.graph.reshape(joined, &[1, width])?;

        let z0 = self.skip.forward(ctx, joined)?;
        let h = self.dense1.forward(ctx, z0)?;
        let h = ctx.graph.gelu(h);
        let h = ctx.dropout(h)?;
        let z1 = ctx.graph.add(z0, h)?;
        let h = self.dense2.forward(ctx, z1)?;
        let h = ctx.graph.gelu(h);
        let h = ctx.dropout(h)?;
        let z2 = ctx.graph.add(z1, h)?;
        let logits = self.classifier.forward(ctx, z2)?;
        ctx.graph.reshape(logits, &[NUM_CLASSES])
    }
}
