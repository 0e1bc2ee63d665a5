//! Pulse shaping, zero-insertion resampling, convolution and DFTs.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex baseband samples stored as split real/imaginary arrays together
/// with the number of samples per symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSignal {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub sps: usize,
}

impl ComplexSignal {
    pub fn new(re: Vec<f64>, im: Vec<f64>, sps: usize) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::config(format!(
                "signal: real part has {} samples, imaginary part {}",
                re.len(),
                im.len()
            )));
        }
        if sps == 0 {
            return Err(Error::config("signal: samples per symbol must be at least 1"));
        }
        Ok(ComplexSignal { re, im, sps })
    }

    pub fn zeros(len: usize, sps: usize) -> Self {
        ComplexSignal {
            re: vec![0.0; len],
            im: vec![0.0; len],
            sps,
        }
    }

    pub fn from_complex(samples: &[Complex64], sps: usize) -> Self {
        ComplexSignal {
            re: samples.iter().map(|c| c.re).collect(),
            im: samples.iter().map(|c| c.im).collect(),
            sps,
        }
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn at(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, v: Complex64) {
        self.re[i] = v.re;
        self.im[i] = v.im;
    }

    /// Σ |x|²
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }

    /// Mean |x|² per sample.
    pub fn mean_power(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.energy() / self.len() as f64
        }
    }

    /// Samples `[start, start + len)`; positions outside the signal read as zero.
    pub fn window(&self, start: isize, len: usize) -> ComplexSignal {
        let mut out = ComplexSignal::zeros(len, self.sps);
        for k in 0..len {
            let j = start + k as isize;
            if j >= 0 && (j as usize) < self.len() {
                out.re[k] = self.re[j as usize];
                out.im[k] = self.im[j as usize];
            }
        }
        out
    }

    pub fn slice(&self, start: usize, len: usize) -> ComplexSignal {
        ComplexSignal {
            re: self.re[start..start + len].to_vec(),
            im: self.im[start..start + len].to_vec(),
            sps: self.sps,
        }
    }

    pub fn scaled(&self, factor: f64) -> ComplexSignal {
        ComplexSignal {
            re: self.re.iter().map(|x| x * factor).collect(),
            im: self.im.iter().map(|x| x * factor).collect(),
            sps: self.sps,
        }
    }
}

/// Root-raised-cosine taps spanning `span` symbols at `sps` samples per
/// symbol (`span·sps + 1` taps), normalized to unit energy.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rolloff) {
        return Err(Error::config(format!("rrc: roll-off {rolloff} outside [0, 1]")));
    }
    if !span.is_multiple_of(2) || span == 0 || sps == 0 {
        return Err(Error::config(format!(
            "rrc: span must be even and positive, sps positive (got span {span}, sps {sps})"
        )));
    }
    let n = span * sps + 1;
    let mid = (span * sps / 2) as f64;
    let a = rolloff;
    let mut taps: Vec<f64> = (0..n)
        .map(|k| {
            let t = (k as f64 - mid) / sps as f64;
            if t == 0.0 {
                1.0 - a + 4.0 * a / PI
            } else if a > 0.0 && ((4.0 * a * t).abs() - 1.0).abs() < 1e-10 {
                let arg = PI / (4.0 * a);
                a / 2f64.sqrt() * ((1.0 + 2.0 / PI) * arg.sin() + (1.0 - 2.0 / PI) * arg.cos())
            } else {
                let num = (PI * t * (1.0 - a)).sin() + 4.0 * a * t * (PI * t * (1.0 + a)).cos();
                let den = PI * t * (1.0 - (4.0 * a * t).powi(2));
                num / den
            }
        })
        .collect();
    let norm = taps.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut taps {
        *x /= norm;
    }
    // Force exact symmetry; the closed form is symmetric up to rounding.
    for k in 0..n / 2 {
        let avg = 0.5 * (taps[k] + taps[n - 1 - k]);
        taps[k] = avg;
        taps[n - 1 - k] = avg;
    }
    Ok(taps)
}

/// Inserts `factor − 1` zeros between consecutive samples.
pub fn upsample_zero_insert(x: &ComplexSignal, factor: usize) -> Result<ComplexSignal> {
    if factor == 0 {
        return Err(Error::config("upsample: factor must be at least 1"));
    }
    let mut out = ComplexSignal::zeros(x.len() * factor, x.sps * factor);
    for i in 0..x.len() {
        out.re[i * factor] = x.re[i];
        out.im[i * factor] = x.im[i];
    }
    Ok(out)
}

/// Zero-inserts complex taps.
pub fn upsample_taps(h: &[Complex64], factor: usize) -> Vec<Complex64> {
    if h.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); (h.len() - 1) * factor + 1];
    for (i, &v) in h.iter().enumerate() {
        out[i * factor] = v;
    }
    out
}

/// Centered ("same") convolution of a complex signal with complex taps: the
/// output has the input length and tap `(len − 1)/2` is the zero-delay tap.
pub fn conv_same(x: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
    let c = (h.len().saturating_sub(1) / 2) as isize;
    let n = x.len() as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == Complex64::new(0.0, 0.0) {
            continue;
        }
        // out[i] += h[k]·x[i + c − k]
        let shift = c - k as isize;
        let lo = (-shift).max(0);
        let hi = (n - shift).min(n);
        for i in lo..hi {
            out[i as usize] += hk * x[(i + shift) as usize];
        }
    }
    out
}

/// Centered convolution of a complex signal with real taps.
pub fn conv_same_real(x: &ComplexSignal, h: &[f64]) -> ComplexSignal {
    let c = (h.len().saturating_sub(1) / 2) as isize;
    let n = x.len() as isize;
    let mut out = ComplexSignal::zeros(x.len(), x.sps);
    for (k, &hk) in h.iter().enumerate() {
        let shift = c - k as isize;
        let lo = (-shift).max(0);
        let hi = (n - shift).min(n);
        for i in lo..hi {
            let j = (i + shift) as usize;
            out.re[i as usize] += hk * x.re[j];
            out.im[i as usize] += hk * x.im[j];
        }
    }
    out
}

/// Pulse shaping: zero-insert 1-sps symbols to `sps` and filter with the RRC
/// taps, keeping the length at `N·sps` with the filter's group delay removed.
pub fn shape(symbols: &ComplexSignal, rrc: &[f64], sps: usize) -> Result<ComplexSignal> {
    if symbols.sps != 1 {
        return Err(Error::config(format!(
            "shape: symbols must be at 1 sample per symbol, got {}",
            symbols.sps
        )));
    }
    let up = upsample_zero_insert(symbols, sps)?;
    Ok(conv_same_real(&up, rrc))
}

/// Forward DFT, `X[k] = Σ_n x[n] e^{−j2πkn/N}` (no scaling).
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if buf.is_empty() {
        return buf;
    }
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Inverse DFT with `1/N` scaling, so `idft(dft(x)) = x`.
pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if buf.is_empty() {
        return buf;
    }
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    let n = buf.len() as f64;
    for v in &mut buf {
        *v /= n;
    }
    buf
}

/// Physical frequency of DFT bin `k` of an `n`-point transform at sample rate
/// `fs`, wrapped to `[−fs/2, fs/2)`.
pub fn bin_frequency(k: usize, n: usize, fs: f64) -> f64 {
    let kk = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
    kk * fs / n as f64
}
