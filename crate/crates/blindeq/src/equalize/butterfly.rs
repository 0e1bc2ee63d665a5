use rustfft::num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sigproc::ComplexSignal;

/// Bank of `P × P` complex FIR filters (`P = 2` is the classic 2×2
/// butterfly, `P = 1` a single filter). Filter `(p, q)` maps input `q` onto
/// output `p`; tap `(F − 1)/2` is the zero-delay tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyFilter {
    pols: usize,
    taps: usize,
    filters: Vec<Vec<Complex64>>,
}

impl ButterflyFilter {
    /// Real part of each `h_pp` is 1 at the center tap, everything else 0.
    pub fn dirac(pols: usize, taps: usize) -> Result<Self> {
        if pols == 0 || taps == 0 {
            return Err(Error::config("butterfly: need at least one polarization and one tap"));
        }
        let mut filters = vec![vec![Complex64::new(0.0, 0.0); taps]; pols * pols];
        for p in 0..pols {
            filters[p * pols + p][(taps - 1) / 2] = Complex64::new(1.0, 0.0);
        }
        Ok(ButterflyFilter { pols, taps, filters })
    }

    pub fn from_filters(pols: usize, filters: Vec<Vec<Complex64>>) -> Result<Self> {
        if filters.len() != pols * pols || filters.is_empty() {
            return Err(Error::config(format!(
                "butterfly: expected {} filters, got {}",
                pols * pols,
                filters.len()
            )));
        }
        let taps = filters[0].len();
        if taps == 0 || filters.iter().any(|f| f.len() != taps) {
            return Err(Error::config("butterfly: all filters must have the same nonzero length"));
        }
        Ok(ButterflyFilter { pols, taps, filters })
    }

    pub fn pols(&self) -> usize {
        self.pols
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn center(&self) -> usize {
        (self.taps - 1) / 2
    }

    pub fn filter(&self, p: usize, q: usize) -> &[Complex64] {
        &self.filters[p * self.pols + q]
    }

    pub fn filter_mut(&mut self, p: usize, q: usize) -> &mut [Complex64] {
        &mut self.filters[p * self.pols + q]
    }

    /// Flattened real parameters: for each filter in row-major `(p, q)`
    /// order, all real parts then all imaginary parts.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.taps * self.filters.len());
        for f in &self.filters {
            out.extend(f.iter().map(|c| c.re));
            out.extend(f.iter().map(|c| c.im));
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let t = self.taps;
        for (i, f) in self.filters.iter_mut().enumerate() {
            let base = 2 * t * i;
            for k in 0..t {
                f[k] = Complex64::new(params[base + k], params[base + t + k]);
            }
        }
    }

    pub fn param_len(&self) -> usize {
        2 * self.taps * self.filters.len()
    }

    /// Output symbol `j` of every polarization,
    /// `x̂_p[j] = Σ_q Σ_k h_pq[k]·rx_q[j·stride + c − k]` (zero outside the input).
    pub fn output_at(&self, rx: &[ComplexSignal], j: usize, stride: usize) -> Vec<Complex64> {
        let c = self.center() as isize;
        let base = (j * stride) as isize + c;
        (0..self.pols)
            .map(|p| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (q, sig) in rx.iter().enumerate() {
                    let h = self.filter(p, q);
                    for (k, hk) in h.iter().enumerate() {
                        let idx = base - k as isize;
                        if idx >= 0 && (idx as usize) < sig.len() {
                            acc += hk * sig.at(idx as usize);
                        }
                    }
                }
                acc
            })
            .collect()
    }

    /// Strided, centered application to whole signals; one output symbol per
    /// `stride` input samples.
    pub fn apply(&self, rx: &[ComplexSignal], stride: usize) -> Result<Vec<ComplexSignal>> {
        self.check_inputs(rx)?;
        let n = rx[0].len().div_ceil(stride);
        let mut out = vec![ComplexSignal::zeros(n, 1); self.pols];
        for j in 0..n {
            for (p, v) in self.output_at(rx, j, stride).into_iter().enumerate() {
                out[p].set(j, v);
            }
        }
        Ok(out)
    }

    fn check_inputs(&self, rx: &[ComplexSignal]) -> Result<()> {
        if rx.len() != self.pols {
            return Err(Error::config(format!(
                "butterfly: {} inputs for a {}-polarization filter",
                rx.len(),
                self.pols
            )));
        }
        if rx.iter().any(|s| s.len() != rx[0].len()) {
            return Err(Error::config("butterfly: inputs have different lengths"));
        }
        Ok(())
    }

    /// Records the filter taps as tape leaves.
    pub fn to_tape(&self, tape: &mut Tape) -> TapeFilter {
        let vars = self
            .filters
            .iter()
            .map(|f| {
                let re = tape.leaf(f.iter().map(|c| c.re).collect());
                let im = tape.leaf(f.iter().map(|c| c.im).collect());
                (re, im)
            })
            .collect();
        TapeFilter {
            pols: self.pols,
            taps: self.taps,
            vars,
        }
    }

    /// Normalized correlation between the rows feeding the two outputs; close
    /// to 1 when both outputs lock onto the same input polarization.
    pub fn output_correlation(&self) -> f64 {
        if self.pols < 2 {
            return 0.0;
        }
        let row = |p: usize| -> Vec<Complex64> { (0..self.pols).flat_map(|q| self.filter(p, q).to_vec()).collect() };
        let (a, b) = (row(0), row(1));
        let dot: Complex64 = a.iter().zip(&b).map(|(x, y)| x * y.conj()).sum();
        let na: f64 = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot.norm() / (na * nb)
        }
    }
}

/// Butterfly taps recorded on a tape as `(re, im)` leaf pairs.
#[derive(Debug, Clone)]
pub struct TapeFilter {
    pub pols: usize,
    pub taps: usize,
    vars: Vec<(Var, Var)>,
}

/// A complex sequence on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl TapeFilter {
    pub fn get(&self, p: usize, q: usize) -> (Var, Var) {
        self.vars[p * self.pols + q]
    }

    /// Leaves in the same order as [`ButterflyFilter::to_params`].
    pub fn leaves(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(r, i)| [r, i]).collect()
    }

    /// Valid (unpadded) strided complex convolution of each input window:
    /// `out_p = Σ_q h_pq ∗ in_q`.
    pub fn forward(&self, tape: &mut Tape, inputs: &[CVar], stride: usize, padding: usize) -> Result<Vec<CVar>> {
        let mut outs = Vec::with_capacity(self.pols);
        for p in 0..self.pols {
            let mut acc: Option<CVar> = None;
            for (q, x) in inputs.iter().enumerate() {
                let (hr, hi) = self.get(p, q);
                let y = complex_conv(tape, *x, hr, hi, stride, padding)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => CVar {
                        re: tape.add(a.re, y.re)?,
                        im: tape.add(a.im, y.im)?,
                    },
                });
            }
            outs.push(acc.expect("at least one input"));
        }
        Ok(outs)
    }
}

/// `(hr + j·hi) ∗ (x.re + j·x.im)` with four real convolutions.
pub fn complex_conv(tape: &mut Tape, x: CVar, hr: Var, hi: Var, stride: usize, padding: usize) -> Result<CVar> {
    let rr = tape.conv1d(x.re, hr, stride, padding)?;
    let ii = tape.conv1d(x.im, hi, stride, padding)?;
    let ri = tape.conv1d(x.im, hr, stride, padding)?;
    let ir = tape.conv1d(x.re, hi, stride, padding)?;
    Ok(CVar {
        re: tape.sub(rr, ii)?,
        im: tape.add(ri, ir)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_sig(rng: &mut ChaCha8Rng, n: usize) -> ComplexSignal {
        ComplexSignal::new(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            1,
        )
        .unwrap()
    }

    fn rand_taps(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn dirac_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rx = vec![rand_sig(&mut rng, 20), rand_sig(&mut rng, 20)];
        let f = ButterflyFilter::dirac(2, 7).unwrap();
        let out = f.apply(&rx, 1).unwrap();
        assert_eq!(out[0].re, rx[0].re);
        assert_eq!(out[1].im, rx[1].im);
    }

    #[test]
    fn no_cross_terms_decouple() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_sig(&mut rng, 16);
        let b = rand_sig(&mut rng, 16);
        let mut f = ButterflyFilter::dirac(2, 3).unwrap();
        f.filter_mut(0, 0).copy_from_slice(&rand_taps(&mut rng, 3));
        f.filter_mut(1, 1).copy_from_slice(&rand_taps(&mut rng, 3));
        let out1 = f.apply(&[a.clone(), b.clone()], 1).unwrap();
        let out2 = f.apply(&[a, ComplexSignal::zeros(16, 1)], 1).unwrap();
        assert_eq!(out1[0], out2[0]);
    }

    #[test]
    fn matches_hand_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x0 = ComplexSignal::zeros(10, 1);
        x0.re[4] = 1.0;
        let x1 = rand_sig(&mut rng, 10);
        let filters: Vec<Vec<Complex64>> = (0..4).map(|_| rand_taps(&mut rng, 3)).collect();
        let f = ButterflyFilter::from_filters(2, filters.clone()).unwrap();
        let out = f.apply(&[x0.clone(), x1.clone()], 1).unwrap();
        let xs = [x0.to_complex(), x1.to_complex()];
        for p in 0..2 {
            for i in 0..10 {
                let mut want = Complex64::new(0.0, 0.0);
                for q in 0..2 {
                    for k in 0..3 {
                        let j = i as isize + 1 - k as isize;
                        if (0..10).contains(&j) {
                            want += filters[p * 2 + q][k] * xs[q][j as usize];
                        }
                    }
                }
                assert!((out[p].at(i) - want).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn tape_forward_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sps = 2;
        let rx = vec![rand_sig(&mut rng, 40), rand_sig(&mut rng, 40)];
        let filters: Vec<Vec<Complex64>> = (0..4).map(|_| rand_taps(&mut rng, 5)).collect();
        let f = ButterflyFilter::from_filters(2, filters).unwrap();
        let direct = f.apply(&rx, sps).unwrap();
        let mut t = Tape::new();
        let tf = f.to_tape(&mut t);
        let c = f.center();
        // window covering all 20 output symbols, zero-filled at the edges
        let w = 19 * sps + 5;
        let inputs: Vec<CVar> = rx
            .iter()
            .map(|s| {
                let win = s.window(-(c as isize), w);
                CVar {
                    re: t.leaf(win.re),
                    im: t.leaf(win.im),
                }
            })
            .collect();
        let out = tf.forward(&mut t, &inputs, sps, 0).unwrap();
        for p in 0..2 {
            for j in 0..20 {
                assert!((t.value(out[p].re)[j] - direct[p].re[j]).abs() < 1e-13);
                assert!((t.value(out[p].im)[j] - direct[p].im[j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let filters: Vec<Vec<Complex64>> = (0..4).map(|_| rand_taps(&mut rng, 5)).collect();
        let f = ButterflyFilter::from_filters(2, filters).unwrap();
        let mut g = ButterflyFilter::dirac(2, 5).unwrap();
        g.set_params(&f.to_params());
        assert_eq!(f, g);
    }

    #[test]
    fn correlation_flags_collapse() {
        let f = ButterflyFilter::dirac(2, 5).unwrap();
        assert!(f.output_correlation() < 1e-12);
        let mut g = f.clone();
        let row0: Vec<Complex64> = g.filter(0, 0).to_vec();
        g.filter_mut(1, 0).copy_from_slice(&row0);
        g.filter_mut(1, 1).iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        assert!((g.output_correlation() - 1.0).abs() < 1e-12);
    }
}
