use crate::autodiff::{Tape, Var};
use crate::equalize::butterfly::{complex_conv, CVar, TapeFilter};
use crate::error::{Error, Result};
use crate::modem::Constellation;
use crate::sigproc::ComplexSignal;

/// Floor applied to the distortion term before its logarithm.
pub const C_FLOOR: f64 = 1e-30;

/// Layout of one loss evaluation. The posteriors cover `context` symbols
/// before the batch, the `batch` symbols themselves and any number after.
#[derive(Debug, Clone, Copy)]
pub struct LossLayout<'a> {
    pub constellation: &'a Constellation,
    pub sps: usize,
    pub context: usize,
    pub batch: usize,
}

/// Result of [`vae_loss`]: the differentiable total plus the per-polarization
/// KL term `A_p` and distortion `C_p` as plain values.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    /// Set when some `C_p` had to be raised to [`C_FLOOR`].
    pub clamped: bool,
}

impl LossTerms {
    /// Noise variance estimate `Σ_p C_p / (P · L)`.
    pub fn sigma2(&self, samples: usize) -> f64 {
        self.c.iter().sum::<f64>() / (self.c.len() * samples) as f64
    }
}

/// Negative evidence lower bound (up to constants) of a batch,
/// `Σ_p A_p + L·ln C_p`, with the linear channel model `ĥ` and factorized
/// posteriors `log_q[p] = [I, Q]`, each `N_sym × √M`.
///
/// The channel model output is the centered convolution over the whole
/// posterior span; only the `L = batch · sps` samples aligned with `observed`
/// enter `C_p`, and only the batch symbols enter `A_p`.
pub fn vae_loss(
    tape: &mut Tape,
    log_q: &[[Var; 2]],
    channel: &TapeFilter,
    observed: &[ComplexSignal],
    layout: LossLayout<'_>,
) -> Result<LossTerms> {
    let pols = channel.pols;
    if log_q.len() != pols || observed.len() != pols {
        return Err(Error::config(format!(
            "vae_loss: {} posteriors and {} observations for {pols} polarizations",
            log_q.len(),
            observed.len()
        )));
    }
    let c = layout.constellation;
    let k = c.side();
    let n_sym = tape.shape(log_q[0][0]).rows;
    let l = layout.batch * layout.sps;
    if layout.context + layout.batch > n_sym {
        return Err(Error::config(format!(
            "vae_loss: context {} plus batch {} exceeds {n_sym} posterior rows",
            layout.context, layout.batch
        )));
    }
    if observed.iter().any(|o| o.len() != l) {
        return Err(Error::config(format!("vae_loss: observations must have {l} samples")));
    }
    for lq in log_q.iter().flatten() {
        let s = tape.shape(*lq);
        if s.rows != n_sym || s.cols != k {
            return Err(Error::config(format!("vae_loss: posterior shape {s}, expected {n_sym}x{k}")));
        }
    }
    let levels = c.levels();
    let levels_sq: Vec<f64> = levels.iter().map(|a| a * a).collect();

    // upsampled first and second moments per transmit polarization
    let mut means = Vec::with_capacity(pols);
    let mut vars = Vec::with_capacity(pols);
    for lq in log_q {
        let mut ex = [lq[0]; 2];
        let mut var_sum: Option<Var> = None;
        for comp in 0..2 {
            let q = tape.exp(lq[comp]);
            let m1 = tape.row_dot_const(q, levels)?;
            let m2 = tape.row_dot_const(q, &levels_sq)?;
            let m1sq = tape.square(m1);
            let v = tape.sub(m2, m1sq)?;
            var_sum = Some(match var_sum {
                None => v,
                Some(acc) => tape.add(acc, v)?,
            });
            ex[comp] = tape.upsample(m1, layout.sps)?;
        }
        means.push(CVar { re: ex[0], im: ex[1] });
        vars.push(tape.upsample(var_sum.expect("two components"), layout.sps)?);
    }

    let log_prior = c.log_prior();
    let neg_lp: Vec<f64> = std::iter::repeat_n(log_prior.iter().map(|x| -x), layout.batch).flatten().collect();

    let taps = channel.taps;
    let start = (taps - 1) / 2 + layout.context * layout.sps;
    let mut total: Option<Var> = None;
    let mut a_vals = Vec::with_capacity(pols);
    let mut c_vals = Vec::with_capacity(pols);
    let mut clamped = false;
    for p in 0..pols {
        let mut mu: Option<CVar> = None;
        let mut var_term: Option<Var> = None;
        for q in 0..pols {
            let (hr, hi) = channel.get(p, q);
            let full = complex_conv(tape, means[q], hr, hi, 1, taps - 1)?;
            let part = CVar {
                re: tape.slice(full.re, start, l)?,
                im: tape.slice(full.im, start, l)?,
            };
            mu = Some(match mu {
                None => part,
                Some(m) => CVar {
                    re: tape.add(m.re, part.re)?,
                    im: tape.add(m.im, part.im)?,
                },
            });
            let hr2 = tape.square(hr);
            let hi2 = tape.square(hi);
            let h_pow = tape.add(hr2, hi2)?;
            let spread = tape.conv1d(vars[q], h_pow, 1, taps - 1)?;
            let spread = tape.slice(spread, start, l)?;
            let s = tape.sum(spread);
            var_term = Some(match var_term {
                None => s,
                Some(v) => tape.add(v, s)?,
            });
        }
        let mu = mu.expect("at least one polarization");
        let y = &observed[p];
        let y_energy = y.energy();
        let cross_re = tape.mul_const(mu.re, &y.re)?;
        let cross_im = tape.mul_const(mu.im, &y.im)?;
        let cross_re = tape.sum(cross_re);
        let cross_im = tape.sum(cross_im);
        let cross = tape.add(cross_re, cross_im)?;
        let mu_re2 = tape.square(mu.re);
        let mu_im2 = tape.square(mu.im);
        let mu_re2 = tape.sum(mu_re2);
        let mu_im2 = tape.sum(mu_im2);
        let mu_energy = tape.add(mu_re2, mu_im2)?;
        let cross2 = tape.scale(cross, -2.0);
        let mut cp = tape.add(mu_energy, cross2)?;
        cp = tape.add(cp, var_term.expect("at least one polarization"))?;
        cp = tape.add_const(cp, &[y_energy])?;
        let raw = tape.scalar(cp);
        if !(raw > C_FLOOR) && raw.is_finite() {
            cp = tape.add_const(cp, &[C_FLOOR - raw])?;
            clamped = true;
        }
        c_vals.push(tape.scalar(cp));
        let ln_c = tape.ln(cp)?;
        let dist = tape.scale(ln_c, l as f64);

        let mut ap: Option<Var> = None;
        for comp in 0..2 {
            let rows = tape.slice(log_q[p][comp], layout.context * k, layout.batch * k)?;
            let q = tape.exp(rows);
            let diff = tape.add_const(rows, &neg_lp)?;
            let kl = tape.mul(q, diff)?;
            let kl = tape.sum(kl);
            ap = Some(match ap {
                None => kl,
                Some(a) => tape.add(a, kl)?,
            });
        }
        let ap = ap.expect("two components");
        a_vals.push(tape.scalar(ap));
        let term = tape.add(ap, dist)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(LossTerms {
        total: total.expect("at least one polarization"),
        a: a_vals,
        c: c_vals,
        clamped,
    })
}
