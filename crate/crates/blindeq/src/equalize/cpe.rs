use std::f64::consts::FRAC_PI_2;

use rustfft::num_complex::Complex64;

use crate::sigproc::ComplexSignal;

/// Default Viterbi-Viterbi averaging window in symbols.
pub const CPE_WINDOW: usize = 501;

/// Fourth-power carrier phase estimate per symbol over a centered window,
/// `φ = arg(−Σ x⁴)/4`. The sign flip aligns square QAM, whose fourth moment
/// is negative real, with zero phase. Estimates are unwrapped in π/2 steps.
pub fn viterbi_viterbi_phase(x: &ComplexSignal, window: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut prefix = vec![Complex64::new(0.0, 0.0); n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x.at(i).powi(4);
    }
    let half = window.max(1) / 2;
    let mut out = Vec::with_capacity(n);
    let mut prev: Option<f64> = None;
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let s = prefix[hi] - prefix[lo];
        let mut phi = (-s).arg() / 4.0;
        if let Some(p) = prev {
            phi -= ((phi - p) / FRAC_PI_2).round() * FRAC_PI_2;
        }
        out.push(phi);
        prev = Some(phi);
    }
    out
}

/// Removes the estimated carrier phase.
pub fn viterbi_viterbi_cpe(x: &ComplexSignal, window: usize) -> ComplexSignal {
    let phi = viterbi_viterbi_phase(x, window);
    let y: Vec<Complex64> = (0..x.len()).map(|i| x.at(i) * Complex64::from_polar(1.0, -phi[i])).collect();
    ComplexSignal::from_complex(&y, x.sps)
}
