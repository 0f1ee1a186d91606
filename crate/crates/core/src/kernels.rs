//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::Real;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Geometry of a "same"-padded, stride-1 3D cross-correlation. 2D
/// convolutions use `depth = 1, kd = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvGeom {
    fn ksize(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn padded(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.dims[i] + self.kernel[i] - 1)
    }

    /// Offset of every kernel tap inside the padded grid.
    fn shifts(&self) -> Vec<usize> {
        let [_, hp, wp] = self.padded();
        let [kd, kh, kw] = self.kernel;
        let mut out = Vec::with_capacity(self.ksize());
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    out.push((a * hp + b) * wp + c);
                }
            }
        }
        out
    }

    /// Length of the anchored output span: output `(z, y, x)` lives at
    /// padded index `(z, y, x)` and reads `pad[o + shift]`.
    fn span(&self) -> usize {
        let [dp, hp, wp] = self.padded();
        let [kd, kh, kw] = self.kernel;
        dp * hp * wp - ((kd - 1) * hp + kh - 1) * wp - (kw - 1)
    }

}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// Maps channel `c`, voxel `(z, y, x)` of the unpadded grid into either
/// the centred padded layout (`centred = true`) or the anchored one.
fn scatter_padded<T: Real>(x: &[T], channels: usize, g: &ConvGeom, centred: bool) -> Vec<T> {
    let [d, h, w] = g.dims;
    let [dp, hp, wp] = g.padded();
    let (oz, oy, ox) = if centred {
        (g.kernel[0] / 2, g.kernel[1] / 2, g.kernel[2] / 2)
    } else {
        (0, 0, 0)
    };
    let pv = dp * hp * wp;
    let mut out = vec![T::zero(); channels * pv];
    for c in 0..channels {
        for z in 0..d {
            for y in 0..h {
                let src = &x[((c * d + z) * h + y) * w..][..w];
                let dst = c * pv + ((z + oz) * hp + y + oy) * wp + ox;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    out
}

fn gather_padded<T: Real>(p: &[T], channels: usize, g: &ConvGeom, centred: bool) -> Vec<T> {
    let [d, h, w] = g.dims;
    let [dp, hp, wp] = g.padded();
    let (oz, oy, ox) = if centred {
        (g.kernel[0] / 2, g.kernel[1] / 2, g.kernel[2] / 2)
    } else {
        (0, 0, 0)
    };
    let pv = dp * hp * wp;
    let mut out = Vec::with_capacity(channels * d * h * w);
    for c in 0..channels {
        for z in 0..d {
            for y in 0..h {
                let src = c * pv + ((z + oz) * hp + y + oy) * wp + ox;
                out.extend_from_slice(&p[src..src + w]);
            }
        }
    }
    out
}

pub fn conv_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let ks = g.ksize();
    let [dp, hp, wp] = g.padded();
    let pv = dp * hp * wp;
    let span = g.span();
    let shifts = g.shifts();
    let xp = scatter_padded(x, g.c_in, g, true);
    let mut out = vec![T::zero(); g.c_out * pv];
    for co in 0..g.c_out {
        let dst = &mut out[co * pv..co * pv + span];
        for ci in 0..g.c_in {
            let src = &xp[ci * pv..(ci + 1) * pv];
            for (tap, &sh) in shifts.iter().enumerate() {
                let wv = weight[(co * g.c_in + ci) * ks + tap];
                if wv != T::zero() {
                    axpy(wv, &src[sh..sh + span], dst);
                }
            }
        }
    }
    gather_padded(&out, g.c_out, g, false)
}

/// Returns `(d_input, d_weight)` for upstream gradient `grad`.
pub fn conv_backward<T: Real>(x: &[T], weight: &[T], grad: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let ks = g.ksize();
    let [dp, hp, wp] = g.padded();
    let pv = dp * hp * wp;
    let span = g.span();
    let shifts = g.shifts();
    let xp = scatter_padded(x, g.c_in, g, true);
    // zero outside the valid outputs, so wrapped positions contribute nothing
    let gp = scatter_padded(grad, g.c_out, g, false);
    let mut dxp = vec![T::zero(); g.c_in * pv];
    let mut dw = vec![T::zero(); weight.len()];
    for co in 0..g.c_out {
        let gsrc = &gp[co * pv..co * pv + span];
        for ci in 0..g.c_in {
            let xsrc = &xp[ci * pv..(ci + 1) * pv];
            let dst = &mut dxp[ci * pv..(ci + 1) * pv];
            for (tap, &sh) in shifts.iter().enumerate() {
                let widx = (co * g.c_in + ci) * ks + tap;
                dw[widx] += dot(gsrc, &xsrc[sh..sh + span]);
                let wv = weight[widx];
                if wv != T::zero() {
                    axpy(wv, gsrc, &mut dst[sh..sh + span]);
                }
            }
        }
    }
    (gather_padded(&dxp, g.c_in, g, true), dw)
}

/// 2×2×2 average pooling with stride 2 over `[c, d, h, w]`.
pub fn avg_pool2_forward<T: Real>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::lit(0.125);
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = T::zero();
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                s += x[((ch * d + 2 * z + a) * h + 2 * y + b) * w + 2 * xx + e];
                            }
                        }
                    }
                    out[((ch * od + z) * oh + y) * ow + xx] = s * eighth;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::lit(0.125);
    let mut dx = vec![T::zero(); c * d * h * w];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = grad[((ch * od + z) * oh + y) * ow + xx] * eighth;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                dx[((ch * d + 2 * z + a) * h + 2 * y + b) * w + 2 * xx + e] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, w] = g.dims;
        let [kd, kh, kw] = g.kernel;
        let mut out = vec![0.0; g.c_out * d * h * w];
        for co in 0..g.c_out {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for x_ in 0..w as isize {
                        let mut s = 0.0;
                        for ci in 0..g.c_in {
                            for a in 0..kd as isize {
                                for b in 0..kh as isize {
                                    for c in 0..kw as isize {
                                        let iz = z + a - (kd / 2) as isize;
                                        let iy = y + b - (kh / 2) as isize;
                                        let ix = x_ + c - (kw / 2) as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((ci * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let wi = (((co * g.c_in + ci) * kd + a as usize) * kh + b as usize) * kw + c as usize;
                                        s += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out[((co * d + z as usize) * h + y as usize) * w + x_ as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        // the second geometry has kernels wider than the map
        for (dims, kernel) in [([3, 4, 5], [3, 1, 5]), ([1, 2, 1], [1, 5, 5])] {
            let g = ConvGeom { c_in: 2, c_out: 3, dims, kernel };
            let vol: usize = dims.iter().product();
            let taps: usize = kernel.iter().product();
            let x: Vec<f64> = (0..2 * vol).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * taps).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let fast = conv_forward(&x, &w, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // the map is bilinear, so <G, conv(x, w)> = <dx, x> = <dw, w>
        for (dims, kernel) in [([3, 4, 5], [3, 3, 1]), ([1, 2, 3], [1, 5, 5]), ([4, 4, 4], [3, 3, 3])] {
            let g = ConvGeom { c_in: 2, c_out: 3, dims, kernel };
            let vol: usize = dims.iter().product();
            let taps: usize = kernel.iter().product();
            let x: Vec<f64> = (0..2 * vol).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * taps).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let grad: Vec<f64> = (0..3 * vol).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
            let y = naive_conv(&x, &w, &g);
            let lhs: f64 = grad.iter().zip(&y).map(|(a, b)| a * b).sum();
            let (dx, dw) = conv_backward(&x, &w, &grad, &g);
            let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} {via_x}");
            assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} {via_w}");
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| v as f64 - 4.0).collect(); // 3×4
        let ab = matmul(&a, &b, 2, 3, 4);
        // bᵀ stored as 4×3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), ab);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), ab);
    }
}
