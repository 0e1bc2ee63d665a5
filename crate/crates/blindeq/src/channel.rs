//! Simulated channels: AWGN with intersymbol interference, and a linear
//! dual-polarization optical fiber model (first-order PMD, residual CD,
//! IQ and HV phase shifts) with an optional frame-wise drifting HV shift.
//!
//! SNR convention: transmitted symbols have unit mean energy and pulses have
//! unit energy, so a matched filter sees `E_s = 1`. The per-sample complex
//! noise variance at any oversampling factor is then
//! `σ_w² = N_os · P_s · 10^(−SNR/10)` with the nominal per-sample signal
//! power `P_s = E_s / N_os`, i.e. simply `10^(−SNR/10)`. Each of I and Q gets
//! `σ_w² / 2`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigproc::{self, ComplexSignal};

/// The 5-tap complex test channel used for the AWGN experiments.
pub const H_SIM: [(f64, f64); 5] = [
    (0.055, 0.05),
    (0.283, -0.120),
    (-0.768, 0.279),
    (-0.064, -0.058),
    (0.047, -0.023),
];

/// The second, harsher 4-tap test channel.
pub const H_SIM_2: [(f64, f64); 4] = [(0.055, 0.017), (-1.345, -0.452), (1.007, 1.152), (0.348, 0.315)];

pub fn taps_from_pairs(pairs: &[(f64, f64)]) -> Vec<Complex64> {
    pairs.iter().map(|&(r, i)| Complex64::new(r, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    AwgnIsi,
    DpOptical,
}

impl ChannelKind {
    pub fn polarizations(self) -> usize {
        match self {
            ChannelKind::AwgnIsi => 1,
            ChannelKind::DpOptical => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub kind: ChannelKind,
    /// Symbol-spaced complex taps `[re, im]` of the AWGN-ISI channel.
    pub h_sim: Vec<[f64; 2]>,
    /// HV phase shift, rad.
    pub gamma_hv: f64,
    /// IQ phase shift, rad.
    pub phi_iq: f64,
    /// PMD parameter, ps/√km.
    pub d_pmd: f64,
    /// PMD fiber length, km.
    pub l_pmd: f64,
    /// Group velocity dispersion, ps²/km.
    pub beta_cd: f64,
    /// Uncompensated fiber length, km.
    pub l_cd: f64,
    /// Drift of the HV phase shift, rad/s.
    pub delta_gamma_hv: f64,
    /// Symbol rate, Bd.
    pub symbol_rate: f64,
    pub snr_db: f64,
    /// Samples per symbol at the receiver input.
    pub sps: usize,
    pub pulse_shaping: bool,
    pub rolloff: f64,
    /// RRC span in symbols.
    pub rrc_span: usize,
}

impl Default for ChannelParams {
    fn default() -> Self {
        default_params()
    }
}

/// Optical defaults: γ_hv = 0.1π, φ_IQ = 0.01π, D_pmd = 0.1 ps/√km,
/// L_pmd = 1000 km, β_cd = −26 ps²/km, L_cd = 1 km; 90 GBd, 2 sps, RRC α = 0.1.
pub fn default_params() -> ChannelParams {
    ChannelParams {
        kind: ChannelKind::DpOptical,
        h_sim: H_SIM.iter().map(|&(r, i)| [r, i]).collect(),
        gamma_hv: 0.1 * PI,
        phi_iq: 0.01 * PI,
        d_pmd: 0.1,
        l_pmd: 1000.0,
        beta_cd: -26.0,
        l_cd: 1.0,
        delta_gamma_hv: 0.0,
        symbol_rate: 90e9,
        snr_db: 20.0,
        sps: 2,
        pulse_shaping: true,
        rolloff: 0.1,
        rrc_span: 32,
    }
}

impl ChannelParams {
    /// Differential group delay `τ_pmd = D_pmd·√L_pmd`, ps.
    pub fn tau_pmd_ps(&self) -> f64 {
        self.d_pmd * self.l_pmd.sqrt()
    }

    /// Accumulated residual dispersion `β_cd·L_cd`, ps².
    pub fn accumulated_cd_ps2(&self) -> f64 {
        self.beta_cd * self.l_cd
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }

    pub fn h_sim_taps(&self) -> Vec<Complex64> {
        self.h_sim.iter().map(|&[r, i]| Complex64::new(r, i)).collect()
    }

    pub fn rrc(&self) -> Result<Option<Vec<f64>>> {
        if self.pulse_shaping {
            Ok(Some(sigproc::rrc_taps(self.rolloff, self.rrc_span, self.sps)?))
        } else {
            Ok(None)
        }
    }

    /// Effective HV shift during frame `k` of `frame_symbols` symbols.
    pub fn gamma_at_frame(&self, k: usize, frame_symbols: usize) -> f64 {
        let t_frame = frame_symbols as f64 / self.symbol_rate;
        self.gamma_hv + self.delta_gamma_hv * k as f64 * t_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pmd < 0.0 || self.l_pmd < 0.0 {
            return Err(Error::config("channel: PMD parameters must be nonnegative"));
        }
        if self.snr_db.is_nan() {
            return Err(Error::config("channel: snr_db is NaN"));
        }
        if self.sps == 0 || self.symbol_rate <= 0.0 {
            return Err(Error::config("channel: sps and symbol_rate must be positive"));
        }
        if self.kind == ChannelKind::AwgnIsi && self.h_sim.is_empty() {
            return Err(Error::config("channel: AWGN-ISI needs at least one h_sim tap"));
        }
        Ok(())
    }
}

/// Per-sample complex noise variance for a given SNR (see module docs).
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Adds circular complex Gaussian noise with variance `variance` (half per component).
pub fn add_noise<R: Rng + ?Sized>(x: &mut ComplexSignal, variance: f64, rng: &mut R) {
    if variance <= 0.0 {
        return;
    }
    let sd = (variance / 2.0).sqrt();
    for i in 0..x.len() {
        let nr: f64 = rng.sample(StandardNormal);
        let ni: f64 = rng.sample(StandardNormal);
        x.re[i] += sd * nr;
        x.im[i] += sd * ni;
    }
}

/// The AWGN-ISI impulse response at the receiver rate: `h_sim` zero-inserted
/// to `sps` and, with pulse shaping on, interpolated by the RRC pulse.
///
/// The interpolating pulse is scaled so that the transmit RRC followed by it
/// has unit energy; the received energy per symbol is then `‖h_sim‖²` as
/// without shaping, and the SNR keeps its meaning.
pub fn awgn_isi_response(p: &ChannelParams, rrc: Option<&[f64]>) -> Vec<Complex64> {
    let up = sigproc::upsample_taps(&p.h_sim_taps(), p.sps);
    match rrc {
        None => up,
        Some(r) => {
            let scale = 1.0 / full_conv_real(r, r).iter().map(|x| x * x).sum::<f64>().sqrt();
            // full convolution; both lengths odd keeps the center aligned
            let n = up.len() + r.len() - 1;
            let mut out = vec![Complex64::new(0.0, 0.0); n];
            for (i, &a) in up.iter().enumerate() {
                for (k, &b) in r.iter().enumerate() {
                    out[i + k] += a * b * scale;
                }
            }
            out
        }
    }
}

fn full_conv_real(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (k, &y) in b.iter().enumerate() {
            out[i + k] += x * y;
        }
    }
    out
}

/// `y = h ∗ x + n` on an already pulse-shaped transmit signal.
pub fn awgn_isi_apply<R: Rng + ?Sized>(tx: &ComplexSignal, p: &ChannelParams, rrc: Option<&[f64]>, rng: &mut R) -> ComplexSignal {
    let h = awgn_isi_response(p, rrc);
    let y = sigproc::conv_same(&tx.to_complex(), &h);
    let mut out = ComplexSignal::from_complex(&y, tx.sps);
    add_noise(&mut out, p.noise_variance(), rng);
    out
}

pub type Matrix2 = [[Complex64; 2]; 2];

fn matmul(a: &Matrix2, b: &Matrix2) -> Matrix2 {
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// `H(f) = Rᵀ·diag(e^{jπτf}, e^{−jπτf})·R·e^{−j2π²β_cd·L_cd·f²}` with
/// `R = e^{−jφ_IQ}·[[cos γ, sin γ], [−sin γ, cos γ]]`; `f` in Hz.
pub fn dp_channel_matrix(f: f64, p: &ChannelParams, gamma: f64) -> Matrix2 {
    let tau = p.tau_pmd_ps() * 1e-12;
    let bl = p.accumulated_cd_ps2() * 1e-24;
    let ph = Complex64::from_polar(1.0, -p.phi_iq);
    let (s, c) = gamma.sin_cos();
    let r = [[ph * c, ph * s], [-ph * s, ph * c]];
    let rt = [[r[0][0], r[1][0]], [r[0][1], r[1][1]]];
    let zero = Complex64::new(0.0, 0.0);
    let d = [
        [Complex64::from_polar(1.0, PI * tau * f), zero],
        [zero, Complex64::from_polar(1.0, -PI * tau * f)],
    ];
    let cd = Complex64::from_polar(1.0, -2.0 * PI * PI * bl * f * f);
    let mut h = matmul(&matmul(&rt, &d), &r);
    for row in &mut h {
        for v in row.iter_mut() {
            *v *= cd;
        }
    }
    h
}

/// Noise-free application of `H(f)` to one block of both polarizations at
/// HV shift `gamma`, through a DFT of the whole block.
pub fn dp_transform(te: &[Complex64], tm: &[Complex64], p: &ChannelParams, gamma: f64) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if te.len() != tm.len() {
        return Err(Error::config(format!(
            "dp channel: TE has {} samples, TM has {}",
            te.len(),
            tm.len()
        )));
    }
    let n = te.len();
    let fs = p.symbol_rate * p.sps as f64;
    let a = sigproc::dft(te);
    let b = sigproc::dft(tm);
    let mut ya = vec![Complex64::new(0.0, 0.0); n];
    let mut yb = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        let h = dp_channel_matrix(sigproc::bin_frequency(k, n, fs), p, gamma);
        ya[k] = h[0][0] * a[k] + h[0][1] * b[k];
        yb[k] = h[1][0] * a[k] + h[1][1] * b[k];
    }
    Ok((sigproc::idft(&ya), sigproc::idft(&yb)))
}

/// One block through the optical channel during frame `frame_index`
/// (HV shift held constant within the frame), plus noise on both polarizations.
pub fn dp_apply<R: Rng + ?Sized>(
    te: &ComplexSignal,
    tm: &ComplexSignal,
    p: &ChannelParams,
    frame_index: usize,
    frame_symbols: usize,
    rng: &mut R,
) -> Result<(ComplexSignal, ComplexSignal)> {
    if te.sps != tm.sps {
        return Err(Error::config("dp channel: polarizations have different sps"));
    }
    let gamma = p.gamma_at_frame(frame_index, frame_symbols);
    let (a, b) = dp_transform(&te.to_complex(), &tm.to_complex(), p, gamma)?;
    let mut ya = ComplexSignal::from_complex(&a, te.sps);
    let mut yb = ComplexSignal::from_complex(&b, te.sps);
    let var = p.noise_variance();
    add_noise(&mut ya, var, rng);
    add_noise(&mut yb, var, rng);
    Ok((ya, yb))
}

/// Whole-stream optical channel, frame by frame so the HV shift can drift.
/// Each frame is transformed together with `guard` samples of its
/// neighbours on both sides; the guards are discarded afterwards.
pub fn dp_apply_framed<R: Rng + ?Sized>(
    te: &ComplexSignal,
    tm: &ComplexSignal,
    p: &ChannelParams,
    frame_symbols: usize,
    guard: usize,
    rng: &mut R,
) -> Result<(ComplexSignal, ComplexSignal)> {
    if te.len() != tm.len() {
        return Err(Error::config(format!(
            "dp channel: TE has {} samples, TM has {}",
            te.len(),
            tm.len()
        )));
    }
    let frame_samples = frame_symbols * p.sps;
    let mut ya = ComplexSignal::zeros(te.len(), te.sps);
    let mut yb = ComplexSignal::zeros(tm.len(), tm.sps);
    let mut start = 0usize;
    let mut k = 0usize;
    while start < te.len() {
        let len = frame_samples.min(te.len() - start);
        let wstart = start as isize - guard as isize;
        let wlen = len + 2 * guard;
        let a = te.window(wstart, wlen).to_complex();
        let b = tm.window(wstart, wlen).to_complex();
        let (oa, ob) = dp_transform(&a, &b, p, p.gamma_at_frame(k, frame_symbols))?;
        for i in 0..len {
            ya.set(start + i, oa[guard + i]);
            yb.set(start + i, ob[guard + i]);
        }
        start += len;
        k += 1;
    }
    let var = p.noise_variance();
    add_noise(&mut ya, var, rng);
    add_noise(&mut yb, var, rng);
    Ok((ya, yb))
}
