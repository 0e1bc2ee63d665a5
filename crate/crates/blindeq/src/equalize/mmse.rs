use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sigproc::ComplexSignal;

/// Relative Tikhonov regularization of the normal equations.
pub const RIDGE: f64 = 1e-12;

/// Data-aided least-squares FIR equalizer at one sample per symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseSolution {
    /// Causal taps: `y[i] = Σ_k w[k]·rx[i − k]`.
    pub taps: Vec<Complex64>,
    /// Decision delay `d`; `y[i + d]` estimates `tx[i]`.
    pub delay: usize,
    /// Mean squared error over the fitted span.
    pub mse: f64,
}

impl MmseSolution {
    /// Filters `rx` and realigns the output with the transmit sequence.
    pub fn apply(&self, rx: &ComplexSignal) -> ComplexSignal {
        let n = rx.len();
        let out: Vec<Complex64> = (0..n)
            .map(|i| {
                let t = i + self.delay;
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, w) in self.taps.iter().enumerate() {
                    if t >= k && t - k < n {
                        acc += w * rx.at(t - k);
                    }
                }
                acc
            })
            .collect();
        ComplexSignal::from_complex(&out, 1)
    }
}

fn regressor(rx: &ComplexSignal, i: usize, taps: usize) -> Vec<Complex64> {
    (0..taps)
        .map(|k| if i >= k { rx.at(i - k) } else { Complex64::new(0.0, 0.0) })
        .collect()
}

/// Least-squares genie equalizer with the transmitted symbols known. Every
/// delay in `0..taps` is tried and the one with the smallest error kept.
pub fn mmse_baseline(rx: &ComplexSignal, tx: &ComplexSignal, taps: usize) -> Result<MmseSolution> {
    if rx.len() != tx.len() {
        return Err(Error::config(format!(
            "MMSE fit: {} received and {} transmitted symbols",
            rx.len(),
            tx.len()
        )));
    }
    if taps == 0 || rx.len() < 4 * taps {
        return Err(Error::config("MMSE fit: need at least four symbols per tap"));
    }
    let n = rx.len();
    let mut r = DMatrix::<Complex64>::zeros(taps, taps);
    let regs: Vec<Vec<Complex64>> = (0..n).map(|i| regressor(rx, i, taps)).collect();
    for v in &regs {
        for a in 0..taps {
            let ca = v[a].conj();
            for b in 0..taps {
                r[(a, b)] += ca * v[b];
            }
        }
    }
    let trace: f64 = (0..taps).map(|a| r[(a, a)].re).sum();
    let ridge = RIDGE * trace / taps as f64;
    for a in 0..taps {
        r[(a, a)] += Complex64::new(ridge, 0.0);
    }
    let lu = r.lu();
    let mut best: Option<MmseSolution> = None;
    for d in 0..taps {
        let mut p = DVector::<Complex64>::zeros(taps);
        let mut count = 0usize;
        for (i, v) in regs.iter().enumerate().skip(d) {
            let t = tx.at(i - d);
            for a in 0..taps {
                p[a] += v[a].conj() * t;
            }
            count += 1;
        }
        let w = lu
            .solve(&p)
            .ok_or_else(|| Error::Domain("MMSE fit: singular normal equations".into()))?;
        let mse = regs
            .iter()
            .enumerate()
            .skip(d)
            .map(|(i, v)| {
                let y: Complex64 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                (y - tx.at(i - d)).norm_sqr()
            })
            .sum::<f64>()
            / count as f64;
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(MmseSolution {
                taps: w.iter().copied().collect(),
                delay: d,
                mse,
            });
        }
    }
    Ok(best.expect("at least one delay"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::{sample_symbols, Constellation};
    use crate::sigproc::conv_same;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_channel_gives_dirac() {
        let c = Constellation::new(16, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tx = sample_symbols(&c, 2000, &mut rng).signal;
        let sol = mmse_baseline(&tx, &tx, 20).unwrap();
        // every delay reconstructs perfectly; the chosen one is a pure shift
        let d = sol.delay;
        assert!((sol.taps[d] - Complex64::new(1.0, 0.0)).norm() < 1e-9);
        assert!(sol.taps.iter().enumerate().all(|(k, w)| k == d || w.norm() < 1e-9));
        assert!(sol.mse < 1e-15);
        let y = sol.apply(&tx);
        assert!((y.at(100) - tx.at(100)).norm() < 1e-9);
    }

    #[test]
    fn inverts_minimum_phase_isi() {
        let c = Constellation::new(16, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tx = sample_symbols(&c, 4000, &mut rng).signal;
        let h = [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(0.4, 0.2)];
        let rx = ComplexSignal::from_complex(&conv_same(&tx.to_complex(), &h), 1);
        let sol = mmse_baseline(&rx, &tx, 20).unwrap();
        assert!(sol.mse < 1e-6, "{}", sol.mse);
        let y = sol.apply(&rx);
        for i in 100..3900 {
            assert!((y.at(i) - tx.at(i)).norm() < 1e-2);
        }
    }

    #[test]
    fn rejects_short_input() {
        let x = ComplexSignal::zeros(10, 1);
        assert!(mmse_baseline(&x, &x, 20).is_err());
    }
}
