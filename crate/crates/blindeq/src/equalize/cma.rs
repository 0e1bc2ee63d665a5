use rustfft::num_complex::Complex64;

use crate::equalize::adam::lr_schedule;
use crate::equalize::butterfly::ButterflyFilter;
use crate::equalize::EqualizerOutput;
use crate::error::{Error, Result};
use crate::sigproc::ComplexSignal;

/// Constant-modulus equalizer settings. `batch = flex = 1` is the classic
/// symbol-by-symbol update.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaSettings {
    pub taps: usize,
    pub lr: f64,
    pub batch: usize,
    pub flex: usize,
    /// Godard radius `R₂`.
    pub radius: f64,
    pub scheduler: bool,
    pub frame_len: usize,
    pub sps: usize,
}

/// Output rows closer than this in normalized correlation are reported as a
/// collapsed (singular) solution.
pub const SINGULARITY_THRESHOLD: f64 = 0.9;

impl CmaSettings {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.taps.is_multiple_of(2) {
            return Err(Error::config("CMA needs an odd number of taps"));
        }
        if self.batch == 0 || self.flex == 0 || self.flex > self.batch {
            return Err(Error::config("CMA needs 0 < flex <= batch"));
        }
        if self.sps == 0 || self.frame_len == 0 || !(self.lr > 0.0) || !(self.radius > 0.0) {
            return Err(Error::config("CMA needs positive sps, frame length, learning rate and radius"));
        }
        Ok(())
    }
}

fn tap_window(rx: &ComplexSignal, center: isize, taps: usize) -> Vec<Complex64> {
    // w[k] = rx[center + c − k]
    let c = ((taps - 1) / 2) as isize;
    (0..taps)
        .map(|k| {
            let idx = center + c - k as isize;
            if idx >= 0 && (idx as usize) < rx.len() {
                rx.at(idx as usize)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Stochastic-gradient step for output symbol `j`:
/// `e_p = x̂_p (R₂ − |x̂_p|²)`, `h_pq += μ e_p conj(window_q)`.
/// Returns the outputs computed before the update.
pub fn cma_step(filter: &mut ButterflyFilter, rx: &[ComplexSignal], j: usize, sps: usize, radius: f64, lr: f64) -> Vec<Complex64> {
    let out = filter.output_at(rx, j, sps);
    let windows: Vec<Vec<Complex64>> = rx.iter().map(|s| tap_window(s, (j * sps) as isize, filter.taps())).collect();
    for (p, &x) in out.iter().enumerate() {
        let e = x * (radius - x.norm_sqr());
        for (q, w) in windows.iter().enumerate() {
            for (h, wk) in filter.filter_mut(p, q).iter_mut().zip(w) {
                *h += lr * e * wk.conj();
            }
        }
    }
    out
}

/// Batch-averaged update over symbols `s0 .. s0 + batch`, all evaluated
/// with the filters as they were before the update. Returns the outputs.
pub fn cma_batch_step(
    filter: &mut ButterflyFilter,
    rx: &[ComplexSignal],
    s0: usize,
    batch: usize,
    sps: usize,
    radius: f64,
    lr: f64,
) -> Vec<Vec<Complex64>> {
    let pols = filter.pols();
    let taps = filter.taps();
    let mut grad = vec![vec![Complex64::new(0.0, 0.0); taps]; pols * pols];
    let mut outs = vec![Vec::with_capacity(batch); pols];
    for j in s0..s0 + batch {
        let out = filter.output_at(rx, j, sps);
        let windows: Vec<Vec<Complex64>> = rx.iter().map(|s| tap_window(s, (j * sps) as isize, taps)).collect();
        for (p, &x) in out.iter().enumerate() {
            let e = x * (radius - x.norm_sqr());
            for (q, w) in windows.iter().enumerate() {
                for (g, wk) in grad[p * pols + q].iter_mut().zip(w) {
                    *g += e * wk.conj();
                }
            }
            outs[p].push(x);
        }
    }
    let scale = lr / batch as f64;
    for p in 0..pols {
        for q in 0..pols {
            for (h, g) in filter.filter_mut(p, q).iter_mut().zip(&grad[p * pols + q]) {
                *h += scale * g;
            }
        }
    }
    outs
}

/// Runs CMA over a stream. Outputs are not phase-corrected.
pub fn cma_run(rx: &[ComplexSignal], settings: &CmaSettings) -> Result<(EqualizerOutput, ButterflyFilter)> {
    settings.validate()?;
    let pols = rx.len();
    if pols == 0 || rx.iter().any(|s| s.len() != rx[0].len()) {
        return Err(Error::config("CMA needs equal-length received polarizations"));
    }
    let mut filter = ButterflyFilter::dirac(pols, settings.taps)?;
    let n_total = rx[0].len() / settings.sps;
    let mut out = vec![ComplexSignal::zeros(n_total, 1); pols];
    let mut report = EqualizerOutput::default();
    let mut s0 = 0;
    while s0 + settings.batch <= n_total {
        let lr = if settings.scheduler {
            lr_schedule(s0 / settings.frame_len, settings.lr)
        } else {
            settings.lr
        };
        let outs = if settings.batch == 1 {
            cma_step(&mut filter, rx, s0, settings.sps, settings.radius, lr)
                .into_iter()
                .map(|x| vec![x])
                .collect()
        } else {
            cma_batch_step(&mut filter, rx, s0, settings.batch, settings.sps, settings.radius, lr)
        };
        for (p, o) in outs.iter().enumerate() {
            for i in 0..settings.flex {
                out[p].set(s0 + i, o[i]);
            }
        }
        report.updates += 1;
        if filter.to_params().iter().any(|v| !v.is_finite()) {
            report.diverged = Some(format!("batch {}: non-finite filter taps", report.updates - 1));
            break;
        }
        s0 += settings.flex;
    }
    if report.diverged.is_none() {
        for j in s0..n_total {
            for (p, v) in filter.output_at(rx, j, settings.sps).into_iter().enumerate() {
                out[p].set(j, v);
            }
        }
    }
    report.singular = filter.output_correlation() > SINGULARITY_THRESHOLD;
    report.symbols = out;
    Ok((report, filter))
}
