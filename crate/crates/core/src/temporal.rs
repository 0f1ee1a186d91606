//! TimesBlock temporal encoder.
//!
//! Each block finds the dominant periods of its input, folds the series
//! into one `[C × p × f]` grid per period (column `j` holds the `j`-th
//! period), filters every grid with a multi-scale 2D inception block,
//! unfolds back to `[T × C]`, and mixes the branches with softmax weights
//! over their amplitudes. The block output is `x + mix`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId, ParamStore};
use crate::spectral::{self, PeriodSet};
use crate::tape::{softmax, Var, PAD};
use crate::tensor::{Real, Tensor};

/// A series folded by one period.
#[derive(Clone, Copy, Debug)]
pub struct Folded2D {
    /// `[C × period × freq]`
    pub var: Var,
    pub period: usize,
    pub freq: usize,
    /// Zeros appended to reach `period · freq` steps.
    pub pad_len: usize,
}

/// Gather map from `[T × C]` to `[C × p × f]`, zero-padding the tail.
pub fn fold_map(t_len: usize, channels: usize, period: usize, freq: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(channels * period * freq);
    for c in 0..channels {
        for i in 0..period {
            for j in 0..freq {
                let t = j * period + i;
                map.push(if t < t_len { t * channels + c } else { PAD });
            }
        }
    }
    map
}

/// Gather map from `[C × p × f]` back to `[T × C]`, dropping the padding.
pub fn unfold_map(t_len: usize, channels: usize, period: usize, freq: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(t_len * channels);
    for t in 0..t_len {
        let (i, j) = (t % period, t / period);
        for c in 0..channels {
            map.push((c * period + i) * freq + j);
        }
    }
    map
}

pub fn fold<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, period: usize, freq: usize) -> Result<Folded2D> {
    let (t_len, c) = series_dims(ctx, x)?;
    if freq == 0 || period * freq < t_len {
        return Err(Error::Shape {
            op: "fold",
            lhs: vec![t_len, c],
            rhs: vec![period, freq],
        });
    }
    let map = fold_map(t_len, c, period, freq);
    let var = ctx.graph.gather(x, Arc::new(map), &[c, period, freq])?;
    Ok(Folded2D {
        var,
        period,
        freq,
        pad_len: period * freq - t_len,
    })
}

pub fn unfold<T: Real>(ctx: &mut Ctx<'_, T>, y: &Folded2D, t_len: usize) -> Result<Var> {
    let shape = ctx.graph.shape(y.var).to_vec();
    let consistent = shape.len() == 3
        && shape[1] == y.period
        && shape[2] == y.freq
        && y.period * y.freq >= t_len
        && y.period * y.freq - t_len == y.pad_len;
    if !consistent {
        return Err(Error::Shape {
            op: "unfold",
            lhs: shape,
            rhs: vec![t_len],
        });
    }
    let c = shape[0];
    let map = unfold_map(t_len, c, y.period, y.freq);
    ctx.graph.gather(y.var, Arc::new(map), &[t_len, c])
}

fn series_dims<T: Real>(ctx: &Ctx<'_, T>, x: Var) -> Result<(usize, usize)> {
    match *ctx.graph.shape(x) {
        [t, c] => Ok((t, c)),
        ref s => Err(Error::Shape {
            op: "series",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Parallel same-padded square 2D convolutions (channel-mixing `C → C`),
/// averaged.
#[derive(Clone, Debug)]
pub struct Inception {
    pub kernels: Vec<ParamId>,
    pub sizes: Vec<usize>,
}

impl Inception {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("inception kernel sizes must be odd, got {sizes:?}")));
        }
        let kernels = sizes
            .iter()
            .map(|&k| {
                let fan = channels * k * k;
                store.add(format!("{name}.k{k}"), init.xavier(&[channels, channels, k, k], fan, fan))
            })
            .collect();
        Ok(Self {
            kernels,
            sizes: sizes.to_vec(),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, y: &Folded2D) -> Result<Folded2D> {
        let mut acc: Option<Var> = None;
        for &k in &self.kernels {
            let w = ctx.param(k);
            let out = ctx.graph.conv2d(y.var, w)?;
            acc = Some(match acc {
                Some(a) => ctx.graph.add(a, out)?,
                None => out,
            });
        }
        let sum = acc.expect("non-empty kernel set");
        let var = ctx.graph.scale(sum, T::lit(1.0 / self.kernels.len() as f64));
        Ok(Folded2D { var, ..*y })
    }
}

/// Softmax of the amplitudes, used as branch weights.
pub fn aggregation_weights<T: Real>(amplitudes: &[T]) -> Vec<T> {
    softmax(amplitudes)
}

/// `Σ_i softmax(amplitudes)_i · branch_i` with the weights held constant.
pub fn aggregate<T: Real>(ctx: &mut Ctx<'_, T>, branches: &[(Var, T)]) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let amps: Vec<T> = branches.iter().map(|b| b.1).collect();
    let weights = aggregation_weights(&amps);
    let mut acc: Option<Var> = None;
    for (&(v, _), &w) in branches.iter().zip(&weights) {
        let part = if branches.len() == 1 { v } else { ctx.graph.scale(v, w) };
        acc = Some(match acc {
            Some(a) => ctx.graph.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Same mixture, but the amplitudes of the selected frequencies are
/// recomputed on the tape so gradients reach the block input through them.
fn aggregate_differentiable<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, periods: &PeriodSet<T>, branches: &[Var]) -> Result<Var> {
    let (t_len, c) = series_dims(ctx, x)?;
    let k = periods.k_top();
    let mut cos = Vec::with_capacity(k * t_len);
    let mut sin = Vec::with_capacity(k * t_len);
    for e in &periods.entries {
        for t in 0..t_len {
            let ang = 2.0 * std::f64::consts::PI * (e.frequency * t) as f64 / t_len as f64;
            cos.push(T::lit(ang.cos()));
            sin.push(T::lit(ang.sin()));
        }
    }
    let cos = ctx.constant(Tensor::new(vec![k, t_len], cos)?);
    let sin = ctx.constant(Tensor::new(vec![k, t_len], sin)?);
    let re = ctx.graph.matmul(cos, x)?;
    let im = ctx.graph.matmul(sin, x)?;
    let re2 = ctx.graph.mul(re, re)?;
    let im2 = ctx.graph.mul(im, im)?;
    let pow = ctx.graph.add(re2, im2)?;
    let mag = ctx.graph.sqrt(pow);
    let avg = ctx.constant(Tensor::full(&[c, 1], T::one() / T::lit(c as f64)));
    let amp = ctx.graph.matmul(mag, avg)?;
    let amp = ctx.graph.reshape(amp, &[1, k])?;
    let weights = ctx.graph.softmax_rows(amp);
    let mut acc: Option<Var> = None;
    for (i, &b) in branches.iter().enumerate() {
        let w = ctx.graph.slice_cols(weights, i, i + 1)?;
        let w = ctx.graph.reshape(w, &[1])?;
        let flat = ctx.graph.reshape(b, &[1, t_len * c])?;
        let part = ctx.graph.mul_col(flat, w)?;
        let part = ctx.graph.reshape(part, &[t_len, c])?;
        acc = Some(match acc {
            Some(a) => ctx.graph.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("non-empty"))
}

#[derive(Clone, Debug)]
pub struct TimesBlock {
    pub inception: Inception,
    pub k_top: usize,
    pub amplitude_grad: bool,
}

/// What a block did to one input, for inspection.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub periods: PeriodSet<T>,
    pub weights: Vec<T>,
}

impl TimesBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        index: usize,
        channels: usize,
        k_top: usize,
        kernel_sizes: &[usize],
        amplitude_grad: bool,
    ) -> Result<Self> {
        Ok(Self {
            inception: Inception::new(store, init, &format!("times.b{index}.inception"), channels, kernel_sizes)?,
            k_top,
            amplitude_grad,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x).map(|(v, _)| v)
    }

    pub fn forward_traced<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, BlockTrace<T>)> {
        let (t_len, _) = series_dims(ctx, x)?;
        let spectrum = spectral::amplitude_spectrum(ctx.graph.value(x))?;
        let periods = spectral::top_k_periods(&spectrum, self.k_top.min(t_len / 2))?;
        let mut branches = Vec::with_capacity(periods.k_top());
        for e in &periods.entries {
            let folded = fold(ctx, x, e.period, e.frequency)?;
            let filtered = self.inception.forward(ctx, &folded)?;
            branches.push(unfold(ctx, &filtered, t_len)?);
        }
        let weights = aggregation_weights(&periods.amplitudes());
        let mixed = if self.amplitude_grad {
            aggregate_differentiable(ctx, x, &periods, &branches)?
        } else {
            let pairs: Vec<(Var, T)> = branches.iter().copied().zip(periods.amplitudes()).collect();
            aggregate(ctx, &pairs)?
        };
        let out = ctx.graph.add(x, mixed)?;
        Ok((out, BlockTrace { periods, weights }))
    }
}
