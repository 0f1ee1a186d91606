//! 3D dense-convolution encoder for volumes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Per-channel normalization over the spatial extent (no batch
/// statistics), followed by a per-channel affine.
#[derive(Clone, Copy, Debug)]
pub struct ChannelNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl ChannelNorm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[channels], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let c = shape[0];
        let flat = ctx.graph.reshape(x, &[c, shape[1..].iter().product()])?;
        let n = ctx.graph.normalize_rows(flat)?;
        let g = ctx.param(self.gain);
        let b = ctx.param(self.bias);
        let n = ctx.graph.mul_col(n, g)?;
        let n = ctx.graph.add_col(n, b)?;
        ctx.graph.reshape(n, &shape)
    }
}

/// `x[C×D×H×W] ⊛ W + b` with same padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3d {
    fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let fan_in = c_in * k * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), init.uniform(&[c_out, c_in, k, k, k], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.graph.conv3d(x, w)?;
        ctx.graph.add_col(y, b)
    }
}

/// norm → nonlinearity → 3³ conv producing `growth` new channels.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub norm: ChannelNorm,
    pub conv: Conv3d,
}

/// 1³ conv halving the channels, then 2³ average pooling.
#[derive(Clone, Debug)]
pub struct Transition {
    pub conv: Conv3d,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub transition: Transition,
    pub in_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockParams {
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub blocks: usize,
}

impl DenseBlockParams {
    /// Channels entering each block and leaving the encoder.
    pub fn channel_plan(&self, c0: usize) -> (Vec<usize>, usize) {
        let mut ins = Vec::with_capacity(self.blocks);
        let mut c = c0;
        for _ in 0..self.blocks {
            ins.push(c);
            c = ((c + self.layers_per_block * self.growth_rate) / 2).max(1);
        }
        (ins, c)
    }
}

impl DenseBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, index: usize, c_in: usize, p: &DenseBlockParams) -> Self {
        let mut c = c_in;
        let layers = (0..p.layers_per_block)
            .map(|l| {
                let name = format!("img.b{index}.l{l}");
                let layer = DenseLayer {
                    norm: ChannelNorm::new(store, &format!("{name}.norm"), c),
                    conv: Conv3d::new(store, init, &format!("{name}.conv"), c, p.growth_rate, 3),
                };
                c += p.growth_rate;
                layer
            })
            .collect();
        let out_channels = (c / 2).max(1);
        let transition = Transition {
            conv: Conv3d::new(store, init, &format!("img.b{index}.transition"), c, out_channels, 1),
            out_channels,
        };
        Self {
            layers,
            transition,
            in_channels: c_in,
        }
    }

    /// The concatenated feature stack before the transition.
    pub fn forward_stack<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut stack = x;
        for layer in &self.layers {
            let h = layer.norm.forward(ctx, stack)?;
            let h = ctx.graph.gelu(h);
            let h = layer.conv.forward(ctx, h)?;
            stack = ctx.graph.concat(&[stack, h])?;
        }
        Ok(stack)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let stack = self.forward_stack(ctx, x)?;
        let y = self.transition.conv.forward(ctx, stack)?;
        ctx.graph.avg_pool3d(y)
    }
}

/// Single strided 3D projection used when the dense blocks are ablated:
/// non-overlapping `s³` patches mapped to `C_out` channels.
#[derive(Clone, Debug)]
pub struct PatchProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub out_channels: usize,
}

impl PatchProjection {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let s = self.stride;
        let (od, oh, ow) = (d / s, h / s, w / s);
        let patch = c * s * s * s;
        let mut map = Vec::with_capacity(od * oh * ow * patch);
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        for a in 0..s {
                            for b in 0..s {
                                for e in 0..s {
                                    map.push(((ch * d + z * s + a) * h + y * s + b) * w + xx * s + e);
                                }
                            }
                        }
                    }
                }
            }
        }
        let patches = ctx.graph.gather(x, Arc::new(map), &[od * oh * ow, patch])?;
        let wt = ctx.param(self.weight);
        let bias = ctx.param(self.bias);
        let tokens = ctx.graph.matmul(patches, wt)?;
        let tokens = ctx.graph.add_row(tokens, bias)?;
        let map = ctx.graph.transpose(tokens)?;
        ctx.graph.reshape(map, &[self.out_channels, od, oh, ow])
    }
}

#[derive(Clone, Debug)]
pub enum ImagingEncoder {
    Dense(Vec<DenseBlock>),
    Patch(PatchProjection),
}

impl ImagingEncoder {
    pub fn dense<T: Real>(store: &mut ParamStore<T>, init: &mut Init, c0: usize, p: &DenseBlockParams) -> Self {
        let (ins, _) = p.channel_plan(c0);
        Self::Dense(ins.iter().enumerate().map(|(b, &c)| DenseBlock::new(store, init, b, c, p)).collect())
    }

    /// Strided projection producing the same output geometry as `p` would.
    pub fn patch<T: Real>(store: &mut ParamStore<T>, init: &mut Init, c0: usize, p: &DenseBlockParams) -> Self {
        let (_, c_out) = p.channel_plan(c0);
        let stride = 1 << p.blocks;
        let fan_in = c0 * stride * stride * stride;
        Self::Patch(PatchProjection {
            weight: store.add("img.patch.weight", init.xavier(&[fan_in, c_out], fan_in, c_out)),
            bias: store.add("img.patch.bias", Tensor::zeros(&[c_out])),
            stride,
            out_channels: c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Dense(blocks) => blocks.last().map(|b| b.transition.out_channels).unwrap_or(1),
            Self::Patch(p) => p.out_channels,
        }
    }

    fn downsample(&self) -> usize {
        match self {
            Self::Dense(blocks) => 1 << blocks.len(),
            Self::Patch(p) => p.stride,
        }
    }

    /// Spatial extent of the output map for an input of `dims`.
    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let s = self.downsample();
        dims.map(|v| v / s)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let s = self.downsample();
        if dims.iter().any(|&v| v < s || v % s != 0) {
            return Err(Error::VolumeTooSmall {
                dims,
                blocks: s.trailing_zeros() as usize,
            });
        }
        Ok(())
    }

    /// Feature map `[C_img × D' × H' × W']` of a `[C × D × H × W]` input.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape {
                op: "imaging",
                lhs: shape,
                rhs: vec![0; 4],
            });
        }
        self.check_dims([shape[1], shape[2], shape[3]])?;
        match self {
            Self::Dense(blocks) => {
                let mut h = x;
                for b in blocks {
                    h = b.forward(ctx, h)?;
                }
                Ok(h)
            }
            Self::Patch(p) => p.forward(ctx, x),
        }
    }
}

/// Zero-mean, unit-variance copy of a volume (constant volumes map to zeros).
pub fn standardize<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(v.len() as f64);
    let mean = v.data().iter().copied().sum::<T>() / n;
    let var = v.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv = if var > T::zero() { T::one() / var.sqrt() } else { T::zero() };
    Tensor::from_fn(v.shape(), |i| (v.data()[i] - mean) * inv)
}
