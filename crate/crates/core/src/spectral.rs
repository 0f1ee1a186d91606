//! Multi-periodicity analysis of multichannel series.
//!
//! The amplitude of every non-DC frequency is averaged over channels; the
//! strongest `k_top` frequencies give the candidate periods
//! `p = ceil(T / f)`.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MIN_SERIES_LEN: usize = 4;

/// In-place forward DFT `X_k = Σ_t x_t e^{-2πi kt/n}` for any length.
/// Radix-2 for powers of two, Bluestein's chirp-z otherwise.
pub fn fft<T: Real>(buf: &mut [Complex<T>]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_pow2(buf, false);
    } else {
        bluestein(buf);
    }
}

fn fft_pow2<T: Real>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex<T>> = (0..n / 2)
        .map(|j| {
            let ang = sign * 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            Complex::new(T::lit(ang.cos()), T::lit(ang.sin()))
        })
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddles[j * stride];
                let u = buf[start + j];
                let v = buf[start + j + half] * w;
                buf[start + j] = u + v;
                buf[start + j + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn bluestein<T: Real>(buf: &mut [Complex<T>]) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    // chirp w_k = e^{-iπ k²/n}; k² reduced mod 2n keeps the angle small
    let chirp: Vec<Complex<T>> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            let ang = -std::f64::consts::PI * k2 / n as f64;
            Complex::new(T::lit(ang.cos()), T::lit(ang.sin()))
        })
        .collect();
    let zero = Complex::new(T::zero(), T::zero());
    let mut a = vec![zero; m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![zero; m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = *x * *y;
    }
    fft_pow2(&mut a, true);
    let inv_m = T::one() / T::lit(m as f64);
    for k in 0..n {
        buf[k] = a[k] * inv_m * chirp[k];
    }
}

/// Full-length DFT magnitudes `|X_k|`, `k = 0..T`, of one channel of a
/// `[T×C]` tensor.
pub fn channel_magnitudes<T: Real>(x: &Tensor<T>, channel: usize) -> Vec<T> {
    let (t_len, c) = (x.shape()[0], x.shape()[1]);
    let mut buf: Vec<Complex<T>> = (0..t_len).map(|t| Complex::new(x.data()[t * c + channel], T::zero())).collect();
    fft(&mut buf);
    buf.iter().map(|z| z.norm()).collect()
}

/// Channel-averaged amplitude per frequency `f = 1..=T/2` (DC excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeSpectrum<T> {
    amplitudes: Vec<T>,
    series_length: usize,
}

impl<T: Real> AmplitudeSpectrum<T> {
    /// `amplitudes[i]` is the amplitude of frequency `i + 1`.
    pub fn from_amplitudes(amplitudes: Vec<T>, series_length: usize) -> Result<Self> {
        if amplitudes.len() != series_length / 2 || amplitudes.iter().any(|a| !(*a >= T::zero())) {
            return Err(Error::format("amplitude spectrum", "need T/2 non-negative amplitudes"));
        }
        Ok(Self {
            amplitudes,
            series_length,
        })
    }

    pub fn amplitudes(&self) -> &[T] {
        &self.amplitudes
    }

    pub fn series_length(&self) -> usize {
        self.series_length
    }

    /// Amplitude of frequency `f ∈ 1..=T/2`.
    pub fn amplitude(&self, f: usize) -> T {
        self.amplitudes[f - 1]
    }
}

/// Amplitude spectrum of a `[T×C]` series: DFT magnitude per frequency,
/// averaged over channels, DC dropped. Magnitudes at the level of FFT
/// round-off are flushed to zero so flat inputs give exact ties.
pub fn amplitude_spectrum<T: Real>(x: &Tensor<T>) -> Result<AmplitudeSpectrum<T>> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: "amplitude_spectrum",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (t_len, c) = (x.shape()[0], x.shape()[1]);
    if t_len < MIN_SERIES_LEN {
        return Err(Error::SeriesTooShort {
            len: t_len,
            min: MIN_SERIES_LEN,
        });
    }
    let half = t_len / 2;
    let mut acc = vec![T::zero(); half];
    let mut l1 = T::zero();
    for ch in 0..c {
        let mags = channel_magnitudes(x, ch);
        for f in 1..=half {
            acc[f - 1] += mags[f];
        }
        l1 += (0..t_len).map(|t| x.data()[t * c + ch].abs()).sum::<T>();
    }
    let cf = T::lit(c as f64);
    let floor = T::lit(256.0) * T::epsilon() * l1 / cf;
    let amplitudes = acc
        .into_iter()
        .map(|a| {
            let a = a / cf;
            if a <= floor {
                T::zero()
            } else {
                a
            }
        })
        .collect();
    Ok(AmplitudeSpectrum {
        amplitudes,
        series_length: t_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Period<T> {
    pub frequency: usize,
    /// `ceil(T / frequency)`
    pub period: usize,
    pub amplitude: T,
}

/// The strongest frequencies, ordered by amplitude descending.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodSet<T> {
    pub entries: Vec<Period<T>>,
    pub series_length: usize,
}

impl<T: Real> PeriodSet<T> {
    pub fn k_top(&self) -> usize {
        self.entries.len()
    }

    pub fn amplitudes(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.amplitude).collect()
    }
}

/// Selects the `k_top` highest-amplitude frequencies; equal amplitudes
/// resolve toward the lower frequency (longer period).
pub fn top_k_periods<T: Real>(spectrum: &AmplitudeSpectrum<T>, k_top: usize) -> Result<PeriodSet<T>> {
    let half = spectrum.amplitudes.len();
    if k_top == 0 || k_top > half {
        return Err(Error::KTopOutOfRange { k: k_top, max: half });
    }
    let mut order: Vec<usize> = (0..half).collect();
    order.sort_by(|&a, &b| {
        spectrum.amplitudes[b]
            .partial_cmp(&spectrum.amplitudes[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let t_len = spectrum.series_length;
    let entries = order[..k_top]
        .iter()
        .map(|&i| {
            let f = i + 1;
            Period {
                frequency: f,
                period: t_len.div_ceil(f),
                amplitude: spectrum.amplitudes[i],
            }
        })
        .collect();
    Ok(PeriodSet {
        entries,
        series_length: t_len,
    })
}
