//! Genie-aided SER evaluation: frame slicing, ambiguity resolution, moving
//! average and multi-run aggregation, plus SNR and channel estimate reports.

use std::f64::consts::FRAC_PI_4;
use std::ops::Range;
use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modem::{map_decide, nearest_level, Constellation};
use crate::sigproc::ComplexSignal;

/// Run classification threshold on the moving-averaged SER.
pub const SUCCESS_THRESHOLD: f64 = 0.3;
/// SER reported when no run converged.
pub const SENTINEL_SER: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub frame_len: usize,
    /// Symbols used for the ambiguity search in each frame.
    pub probe_len: usize,
    /// Largest time shift tried, in symbols.
    pub max_shift: usize,
    /// Symbols dropped at each frame edge before counting errors.
    pub trim: usize,
    pub ma_len: usize,
    pub threshold: f64,
}

impl EvalSettings {
    /// Shift range and trim both `equalizer taps + channel memory`.
    pub fn new(frame_len: usize, eq_taps: usize, channel_memory: usize) -> Self {
        let margin = eq_taps + channel_memory;
        EvalSettings {
            frame_len,
            probe_len: 1000,
            max_shift: margin,
            trim: margin,
            ma_len: 10,
            threshold: SUCCESS_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || 2 * self.trim >= self.frame_len {
            return Err(Error::config(format!(
                "frame length {} leaves nothing after trimming {} per edge",
                self.frame_len, self.trim
            )));
        }
        if self.probe_len == 0 || self.ma_len == 0 {
            return Err(Error::config("probe length and moving average length must be positive"));
        }
        Ok(())
    }
}

/// Consecutive non-overlapping frames; a trailing partial frame is dropped.
pub fn slice_frames(len: usize, frame_len: usize) -> Vec<Range<usize>> {
    if frame_len == 0 {
        return Vec::new();
    }
    (0..len / frame_len).map(|k| k * frame_len..(k + 1) * frame_len).collect()
}

/// Time shift, rotation by `rotation·π/4` and optional conjugation
/// (I/Q flip) that maps an equalizer output onto the transmit sequence:
/// `aligned[i] = e^{jπr/4} · conj?(x̂[i + shift])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Transform {
    pub shift: isize,
    pub rotation: u8,
    pub conjugate: bool,
}

impl Transform {
    pub fn identity() -> Self {
        Transform::default()
    }

    pub fn point(&self, x: Complex64) -> Complex64 {
        let y = if self.conjugate { x.conj() } else { x };
        y * Complex64::from_polar(1.0, self.rotation as f64 * FRAC_PI_4)
    }

    /// Aligned output for transmit indices `range`; zero where the shifted
    /// index falls outside `x`.
    pub fn apply(&self, x: &ComplexSignal, range: Range<usize>) -> ComplexSignal {
        let v: Vec<Complex64> = range
            .map(|i| {
                let j = i as isize + self.shift;
                if j >= 0 && (j as usize) < x.len() {
                    self.point(x.at(j as usize))
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        ComplexSignal::from_complex(&v, 1)
    }
}

/// Symbol indices of points that lie on the constellation grid.
pub fn symbol_indices(tx: &ComplexSignal, c: &Constellation) -> Vec<usize> {
    (0..tx.len())
        .map(|i| c.symbol_index(nearest_level(tx.re[i], c), nearest_level(tx.im[i], c)))
        .collect()
}

fn count_errors(x: &ComplexSignal, t: &Transform, tx_idx: &[usize], range: Range<usize>, c: &Constellation) -> usize {
    let mut errors = 0;
    for i in range {
        let j = i as isize + t.shift;
        let v = if j >= 0 && (j as usize) < x.len() {
            t.point(x.at(j as usize))
        } else {
            Complex64::new(0.0, 0.0)
        };
        if c.symbol_index(nearest_level(v.re, c), nearest_level(v.im, c)) != tx_idx[i] {
            errors += 1;
        }
    }
    errors
}

/// Best transform for one frame and its nearest-level error count on the
/// trimmed frame. The exhaustive search runs on a probe segment; the winner
/// replaces the identity only if it has fewer errors on the whole frame.
pub fn resolve_ambiguity(x: &ComplexSignal, tx_idx: &[usize], frame: Range<usize>, c: &Constellation, s: &EvalSettings) -> (Transform, usize) {
    let body = frame.start + s.trim..frame.end - s.trim;
    let probe = body.start..(body.start + s.probe_len).min(body.end);
    let mut best = (Transform::identity(), usize::MAX);
    let max = s.max_shift as isize;
    for shift in -max..=max {
        for conjugate in [false, true] {
            for rotation in 0..8u8 {
                let t = Transform {
                    shift,
                    rotation,
                    conjugate,
                };
                let e = count_errors(x, &t, tx_idx, probe.clone(), c);
                if e < best.1 {
                    best = (t, e);
                }
            }
        }
    }
    let id_errors = count_errors(x, &Transform::identity(), tx_idx, body.clone(), c);
    if best.0 == Transform::identity() {
        return (best.0, id_errors);
    }
    let best_errors = count_errors(x, &best.0, tx_idx, body, c);
    if best_errors < id_errors {
        (best.0, best_errors)
    } else {
        (Transform::identity(), id_errors)
    }
}

/// Fraction of MAP decisions (with the prior) that differ from the reference.
/// `sigma2` is the complex noise variance.
pub fn ser_estimate(aligned: &ComplexSignal, tx_idx: &[usize], c: &Constellation, sigma2: f64) -> f64 {
    if aligned.is_empty() {
        return 0.0;
    }
    let dec = map_decide(aligned, c, (sigma2 / 2.0).max(1e-12));
    let wrong = dec.iter().zip(tx_idx).filter(|(a, b)| a != b).count();
    wrong as f64 / aligned.len() as f64
}

/// Evaluation of one frame of one polarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub ser: f64,
    /// Genie noise variance `mean|aligned − tx|²` used by the MAP decision.
    pub sigma2: f64,
    pub transform: Transform,
    pub symbols: usize,
}

fn evaluate_frames(x: &ComplexSignal, tx: &ComplexSignal, tx_idx: &[usize], c: &Constellation, s: &EvalSettings) -> (Vec<FrameEval>, usize) {
    let mut total_errors = 0;
    let frames = slice_frames(tx.len().min(x.len()), s.frame_len)
        .into_iter()
        .enumerate()
        .map(|(k, frame)| {
            let (t, errors) = resolve_ambiguity(x, tx_idx, frame.clone(), c, s);
            total_errors += errors;
            let body = frame.start + s.trim..frame.end - s.trim;
            let aligned = t.apply(x, body.clone());
            let n = aligned.len();
            let sigma2 = (0..n).map(|i| (aligned.at(i) - tx.at(body.start + i)).norm_sqr()).sum::<f64>() / n as f64;
            FrameEval {
                frame: k,
                ser: ser_estimate(&aligned, &tx_idx[body], c, sigma2),
                sigma2,
                transform: t,
                symbols: n,
            }
        })
        .collect();
    (frames, total_errors)
}

/// Per-frame evaluation of every transmit polarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvaluation {
    /// Indexed by transmit polarization.
    pub frames: Vec<Vec<FrameEval>>,
    /// Equalizer outputs were matched to the transmit polarizations in
    /// reverse order.
    pub swapped: bool,
}

/// Evaluates equalizer outputs against the transmit streams. With two
/// polarizations both assignments are evaluated and the one with fewer
/// errors over the whole run is kept.
pub fn evaluate_stream(eq: &[ComplexSignal], tx: &[ComplexSignal], c: &Constellation, s: &EvalSettings) -> Result<StreamEvaluation> {
    s.validate()?;
    if eq.len() != tx.len() || eq.is_empty() || eq.len() > 2 {
        return Err(Error::config("evaluation needs one or two matching polarizations"));
    }
    let idx: Vec<Vec<usize>> = tx.iter().map(|t| symbol_indices(t, c)).collect();
    let assign = |order: &[usize]| -> (Vec<Vec<FrameEval>>, usize) {
        let mut total = 0;
        let frames = (0..tx.len())
            .map(|p| {
                let (f, e) = evaluate_frames(&eq[order[p]], &tx[p], &idx[p], c, s);
                total += e;
                f
            })
            .collect();
        (frames, total)
    };
    let (frames, errors) = assign(&[0, 1][..tx.len()]);
    if tx.len() == 2 {
        let (sw, sw_errors) = assign(&[1, 0]);
        if sw_errors < errors {
            return Ok(StreamEvaluation {
                frames: sw,
                swapped: true,
            });
        }
    }
    Ok(StreamEvaluation { frames, swapped: false })
}

/// Sliding arithmetic mean; output length `N − len + 1`.
pub fn moving_average(seq: &[f64], len: usize) -> Result<Vec<f64>> {
    if len == 0 || seq.len() < len {
        return Err(Error::config(format!(
            "moving average of length {len} needs at least that many values, got {}",
            seq.len()
        )));
    }
    Ok(seq.windows(len).map(|w| w.iter().sum::<f64>() / len as f64).collect())
}

/// Aggregate over all (run, polarization) moving-average sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerReport {
    pub successful: usize,
    pub unsuccessful: usize,
    /// Element-wise mean over successful sequences; empty if none.
    pub mean: Vec<f64>,
    pub final_ser: f64,
    /// Index into `mean` where `final_ser` is attained.
    pub final_index: Option<usize>,
}

/// Sequences whose minimum stays at or above `threshold` are unsuccessful.
/// The final SER is the minimum of the element-wise mean of the rest.
pub fn aggregate_runs(sequences: &[Vec<f64>], threshold: f64) -> Result<SerReport> {
    if sequences.is_empty() {
        return Err(Error::config("aggregation needs at least one run"));
    }
    let len = sequences[0].len();
    if sequences.iter().any(|s| s.len() != len) || len == 0 {
        return Err(Error::config("aggregated sequences must be nonempty and of equal length"));
    }
    let ok: Vec<&Vec<f64>> = sequences
        .iter()
        .filter(|s| s.iter().cloned().fold(f64::INFINITY, f64::min) < threshold)
        .collect();
    let unsuccessful = sequences.len() - ok.len();
    if ok.is_empty() {
        return Ok(SerReport {
            successful: 0,
            unsuccessful,
            mean: Vec::new(),
            final_ser: SENTINEL_SER,
            final_index: None,
        });
    }
    let mean: Vec<f64> = (0..len).map(|i| ok.iter().map(|s| s[i]).sum::<f64>() / ok.len() as f64).collect();
    let (idx, min) = mean
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    Ok(SerReport {
        successful: ok.len(),
        unsuccessful,
        mean,
        final_ser: min,
        final_index: Some(idx),
    })
}

/// `10·log10(E_s/σ̂²)` with unit symbol energy.
pub fn snr_report(sigma2: &[f64]) -> Vec<f64> {
    sigma2.iter().map(|s| 10.0 * (1.0 / s).log10()).collect()
}

/// Mean `σ̂²` of the updates whose batch starts inside each frame; `None`
/// for frames without updates.
pub fn sigma2_per_frame(trace: &[(usize, f64)], frame_len: usize, frames: usize) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0, 0usize); frames];
    for &(s0, v) in trace {
        let k = s0 / frame_len;
        if k < frames {
            sums[k].0 += v;
            sums[k].1 += 1;
        }
    }
    sums.into_iter().map(|(s, n)| if n > 0 { Some(s / n as f64) } else { None }).collect()
}

/// Channel estimate compared with the true impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct IpReport {
    /// `‖g·ĥ_d − h‖² / ‖h‖²` after alignment.
    pub nmse: f64,
    /// `ĥ[k + delay]` is compared with `h[k]`.
    pub delay: isize,
    pub gain: Complex64,
    /// `(index into h, aligned estimate, truth)` over the union support.
    pub taps: Vec<(isize, Complex64, Complex64)>,
}

impl IpReport {
    pub fn nmse_db(&self) -> f64 {
        10.0 * self.nmse.log10()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["tap", "est_re", "est_im", "true_re", "true_im"])?;
        for (k, e, t) in &self.taps {
            w.write_record([k.to_string(), e.re.to_string(), e.im.to_string(), t.re.to_string(), t.im.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aligns `est` with `truth` over integer delays and a complex gain and
/// reports the normalized squared error of the best alignment.
pub fn ip_report(est: &[Complex64], truth: &[Complex64]) -> Result<IpReport> {
    let h_energy: f64 = truth.iter().map(|v| v.norm_sqr()).sum();
    if est.is_empty() || h_energy == 0.0 {
        return Err(Error::config("ip_report needs a nonempty estimate and a nonzero true response"));
    }
    let ke = est.len() as isize;
    let kt = truth.len() as isize;
    let at = |v: &[Complex64], i: isize| -> Complex64 {
        if i >= 0 && (i as usize) < v.len() {
            v[i as usize]
        } else {
            Complex64::new(0.0, 0.0)
        }
    };
    let mut best: Option<IpReport> = None;
    for d in -kt..ke {
        let lo = 0.min(-d);
        let hi = kt.max(ke - d);
        let a: Vec<Complex64> = (lo..hi).map(|k| at(est, k + d)).collect();
        let b: Vec<Complex64> = (lo..hi).map(|k| at(truth, k)).collect();
        let a_energy: f64 = a.iter().map(|v| v.norm_sqr()).sum();
        if a_energy == 0.0 {
            continue;
        }
        let cross: Complex64 = b.iter().zip(&a).map(|(x, y)| x * y.conj()).sum();
        let g = cross / a_energy;
        let err: f64 = a.iter().zip(&b).map(|(x, y)| (g * x - y).norm_sqr()).sum();
        let nmse = err / h_energy;
        if best.as_ref().is_none_or(|r| nmse < r.nmse) {
            best = Some(IpReport {
                nmse,
                delay: d,
                gain: g,
                taps: (lo..hi).zip(a.iter().zip(&b)).map(|(k, (x, y))| (k, g * x, *y)).collect(),
            });
        }
    }
    best.ok_or_else(|| Error::config("ip_report: estimate is all zeros"))
}

/// Square-QAM symbol error probability with uniform priors over AWGN, SNR
/// linear as `E_s/σ²` with `σ²` the complex noise variance.
pub fn analytic_qam_ser(order: usize, snr_db: f64) -> f64 {
    let m = order as f64;
    let snr = 10f64.powf(snr_db / 10.0);
    let arg = (3.0 * snr / (m - 1.0)).sqrt();
    let p = 2.0 * (1.0 - 1.0 / m.sqrt()) * q_function(arg);
    1.0 - (1.0 - p).powi(2)
}

/// Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}
