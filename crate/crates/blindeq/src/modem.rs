//! Square QAM constellations with Maxwell-Boltzmann shaping, symbol sampling
//! and MAP / soft demapping.
//!
//! Scaling convention: the shaping parameter `ν` acts on the *unscaled* odd
//! integer levels `a_m ∈ {−(√M−1), …, −1, 1, …, √M−1}`, i.e.
//! `P(a_m) ∝ exp(−ν a_m²)` per I/Q component. The levels used everywhere
//! else are `A_m = s·a_m` with `s` chosen so that `E|x|² = 1` under the
//! prior. Demapper metrics add `ln P(A_m)` directly, which equals
//! `−(ν/s²)·A_m²` plus a constant, so the two forms agree.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sigproc::ComplexSignal;

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: usize,
    nu: f64,
    unscaled: Vec<f64>,
    levels: Vec<f64>,
    prior: Vec<f64>,
    scale: f64,
}

impl Constellation {
    /// Builds an `M`-QAM constellation with shaping parameter `nu`.
    pub fn new(order: usize, nu: f64) -> Result<Self> {
        let side = (order as f64).sqrt().round() as usize;
        if side < 2 || side * side != order || !side.is_power_of_two() {
            return Err(Error::config(format!(
                "constellation order {order} is not a square QAM with √M a power of two"
            )));
        }
        if !nu.is_finite() || nu < 0.0 {
            return Err(Error::config(format!("shaping parameter ν = {nu} must be finite and ≥ 0")));
        }
        let unscaled: Vec<f64> = (0..side).map(|m| 2.0 * m as f64 - (side as f64 - 1.0)).collect();
        let prior = mb_prior(&unscaled, nu);
        let per_component: f64 = prior.iter().zip(&unscaled).map(|(p, a)| p * a * a).sum();
        let scale = 1.0 / (2.0 * per_component).sqrt();
        let levels = unscaled.iter().map(|a| a * scale).collect();
        Ok(Constellation {
            order,
            nu,
            unscaled,
            levels,
            prior,
            scale,
        })
    }

    /// Constellation whose entropy is `entropy_bits` (see [`nu_for_entropy`]).
    pub fn with_entropy(order: usize, entropy_bits: f64) -> Result<Self> {
        let nu = nu_for_entropy(order, entropy_bits)?;
        Constellation::new(order, nu)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of amplitude levels per component, `√M`.
    pub fn side(&self) -> usize {
        self.levels.len()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Scaled amplitude levels `A_m`, strictly increasing.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn unscaled_levels(&self) -> &[f64] {
        &self.unscaled
    }

    /// Per-component prior `P(A_m)`.
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn log_prior(&self) -> Vec<f64> {
        self.prior.iter().map(|p| p.ln()).collect()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `E|x|²` under the prior (1 by construction).
    pub fn mean_energy(&self) -> f64 {
        2.0 * self.prior.iter().zip(&self.levels).map(|(p, a)| p * a * a).sum::<f64>()
    }

    /// Godard radius `E|a|⁴ / E|a|²` under the prior.
    pub fn godard_radius(&self) -> f64 {
        let m2: f64 = self.prior.iter().zip(&self.levels).map(|(p, a)| p * a * a).sum();
        let m4: f64 = self.prior.iter().zip(&self.levels).map(|(p, a)| p * a.powi(4)).sum();
        // |a|⁴ = (I² + Q²)² with independent components
        (2.0 * m4 + 2.0 * m2 * m2) / (2.0 * m2)
    }

    /// Complex point for level indices `(i, q)`.
    pub fn point(&self, i: usize, q: usize) -> (f64, f64) {
        (self.levels[i], self.levels[q])
    }

    /// Symbol index of a level pair, `i·√M + q`.
    pub fn symbol_index(&self, i: usize, q: usize) -> usize {
        i * self.side() + q
    }

    /// Same levels and scale, uniform prior in the demapper.
    pub fn with_uniform_demapper(&self) -> DemapperPrior {
        DemapperPrior {
            log_prior: vec![-(self.side() as f64).ln(); self.side()],
        }
    }

    pub fn matched_demapper(&self) -> DemapperPrior {
        DemapperPrior {
            log_prior: self.log_prior(),
        }
    }
}

impl fmt::Display for Constellation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}-QAM, nu = {:.6}, scale = {:.6}", self.order, self.nu, self.scale)?;
        writeln!(f, "{:>12} {:>12}", "level", "prior")?;
        for (a, p) in self.levels.iter().zip(&self.prior) {
            writeln!(f, "{a:>12.6} {p:>12.6}")?;
        }
        Ok(())
    }
}

/// Log-prior term used by the demapper metric. Either the true prior
/// (matched) or a uniform one over the same levels (mismatched).
#[derive(Debug, Clone, PartialEq)]
pub struct DemapperPrior {
    pub log_prior: Vec<f64>,
}

fn mb_prior(unscaled: &[f64], nu: f64) -> Vec<f64> {
    // subtract the smallest exponent so the largest weight is exactly 1
    let min_sq = unscaled.iter().map(|a| a * a).fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = unscaled.iter().map(|a| (-nu * (a * a - min_sq)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Entropy of the 2-D constellation in bits.
pub fn entropy(c: &Constellation) -> f64 {
    let h1: f64 = c.prior.iter().filter(|&&p| p > 0.0).map(|p| -p * p.log2()).sum();
    2.0 * h1
}

/// Shaping parameter giving the requested 2-D entropy, by bisection on the
/// monotonically decreasing map `ν ↦ H(ν)`.
pub fn nu_for_entropy(order: usize, target_bits: f64) -> Result<f64> {
    let base = Constellation::new(order, 0.0)?;
    let h_max = entropy(&base);
    if (target_bits - h_max).abs() < 1e-12 {
        return Ok(0.0);
    }
    if !(target_bits > 2.0 && target_bits < h_max) {
        return Err(Error::config(format!(
            "target entropy {target_bits} bits outside (2, {h_max}] for {order}-QAM"
        )));
    }
    let h = |nu: f64| entropy(&Constellation::new(order, nu).expect("valid order"));
    let (mut lo, mut hi) = (0.0, 1.0);
    while h(hi) > target_bits {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::config("entropy bisection failed to bracket the target"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > target_bits {
            lo = mid;
        } else {
            hi = mid;
        }
        if (h(mid) - target_bits).abs() < 1e-12 || hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Transmitted symbols together with their level indices.
#[derive(Debug, Clone)]
pub struct SymbolStream {
    pub signal: ComplexSignal,
    pub i_index: Vec<usize>,
    pub q_index: Vec<usize>,
}

/// I.i.d. symbols with independent I and Q levels drawn from the prior.
pub fn sample_symbols<R: Rng + ?Sized>(c: &Constellation, n: usize, rng: &mut R) -> SymbolStream {
    let dist = WeightedIndex::new(c.prior()).expect("prior is a valid pmf");
    let mut i_index = Vec::with_capacity(n);
    let mut q_index = Vec::with_capacity(n);
    for _ in 0..n {
        i_index.push(dist.sample(rng));
        q_index.push(dist.sample(rng));
    }
    let signal = ComplexSignal {
        re: i_index.iter().map(|&i| c.levels[i]).collect(),
        im: q_index.iter().map(|&q| c.levels[q]).collect(),
        sps: 1,
    };
    SymbolStream {
        signal,
        i_index,
        q_index,
    }
}

/// MAP level decision for one real component with noise variance `sigma2`
/// on that component. Ties go to the smaller |A_m|.
pub fn decide_component(y: f64, levels: &[f64], log_prior: &[f64], sigma2: f64) -> usize {
    let mut best = 0;
    let mut best_metric = f64::NEG_INFINITY;
    for (m, (&a, &lp)) in levels.iter().zip(log_prior).enumerate() {
        let metric = -(y - a).powi(2) / (2.0 * sigma2) + lp;
        let better = metric > best_metric || (metric == best_metric && a.abs() < levels[best].abs());
        if better {
            best = m;
            best_metric = metric;
        }
    }
    best
}

/// Nearest level for one component; equals the MAP decision for a uniform prior.
pub fn nearest_level(y: f64, c: &Constellation) -> usize {
    let side = c.side() as f64;
    let idx = ((y / c.scale() + side - 1.0) / 2.0).round();
    idx.clamp(0.0, side - 1.0) as usize
}

/// Per-component MAP decisions, returned as symbol indices `i·√M + q`.
/// `sigma2` is the noise variance of each real component.
pub fn map_decide(x: &ComplexSignal, c: &Constellation, sigma2: f64) -> Vec<usize> {
    let lp = c.log_prior();
    x.re
        .iter()
        .zip(&x.im)
        .map(|(&r, &i)| {
            let a = decide_component(r, c.levels(), &lp, sigma2);
            let b = decide_component(i, c.levels(), &lp, sigma2);
            c.symbol_index(a, b)
        })
        .collect()
}

/// Soft demapper output: for each symbol and component the √M level
/// probabilities, `q[i][c][m]`, `c = 0` for I and `c = 1` for Q.
/// `sigma2` is the noise variance of each real component.
pub fn soft_demap(x: &ComplexSignal, c: &Constellation, prior: &DemapperPrior, sigma2: f64) -> Vec<[Vec<f64>; 2]> {
    let row = |y: f64| {
        let logits: Vec<f64> = c
            .levels()
            .iter()
            .zip(&prior.log_prior)
            .map(|(a, lp)| -(y - a).powi(2) / (2.0 * sigma2) + lp)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    x.re.iter().zip(&x.im).map(|(&r, &i)| [row(r), row(i)]).collect()
}

/// Differentiable soft demapping of one real component sequence on a tape.
/// Returns the `N × √M` log-probabilities; `σ²` is a constant.
pub fn soft_demap_log_var(tape: &mut Tape, component: Var, c: &Constellation, prior: &DemapperPrior, sigma2: f64) -> Result<Var> {
    let n = tape.shape(component).len();
    let diff = tape.outer_sub_const(component, c.levels());
    let sq = tape.square(diff);
    let scaled = tape.scale(sq, -1.0 / (2.0 * sigma2));
    let lp: Vec<f64> = std::iter::repeat_n(prior.log_prior.iter().copied(), n).flatten().collect();
    let logits = tape.add_const(scaled, &lp)?;
    Ok(tape.log_softmax_rows(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qpsk_uniform() {
        let c = Constellation::new(4, 0.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c.levels()[0] + s).abs() < 1e-15 && (c.levels()[1] - s).abs() < 1e-15);
        assert_eq!(c.prior(), &[0.5, 0.5]);
        assert!((c.godard_radius() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invariants_hold() {
        for order in [4, 16, 64, 256] {
            for nu in [0.0, 0.01, 0.05, 0.3] {
                let c = Constellation::new(order, nu).unwrap();
                assert!((c.prior().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!((c.mean_energy() - 1.0).abs() < 1e-9);
                for w in c.levels().windows(2) {
                    assert!(w[1] > w[0]);
                }
                for k in 0..c.side() {
                    assert_eq!(c.levels()[k], -c.levels()[c.side() - 1 - k]);
                }
                if nu == 0.0 {
                    assert!(c.prior().iter().all(|&p| (p - 1.0 / c.side() as f64).abs() < 1e-15));
                }
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(Constellation::new(32, 0.0).is_err());
        assert!(Constellation::new(36, 0.0).is_err());
        assert!(Constellation::new(16, -1.0).is_err());
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&Constellation::new(16, 0.0).unwrap()) - 4.0).abs() < 1e-12);
        assert!((entropy(&Constellation::new(64, 0.0).unwrap()) - 6.0).abs() < 1e-12);
        // ν → ∞: the inner two levels per component dominate
        let h = entropy(&Constellation::new(64, 100.0).unwrap());
        assert!((h - 2.0).abs() < 1e-9, "{h}");
    }

    #[test]
    fn entropy_inversion() {
        assert_eq!(nu_for_entropy(64, 6.0).unwrap(), 0.0);
        assert_eq!(nu_for_entropy(16, 4.0).unwrap(), 0.0);
        for target in [5.72, 4.6, 4.125] {
            let nu = nu_for_entropy(64, target).unwrap();
            assert!(nu > 0.0);
            let c = Constellation::new(64, nu).unwrap();
            assert!((entropy(&c) - target).abs() < 1e-9);
        }
        let c = Constellation::with_entropy(64, 5.72).unwrap();
        let inner_half = &c.prior()[c.side() / 2..];
        for w in inner_half.windows(2) {
            assert!(w[0] > w[1], "priors must decrease with A²");
        }
        assert!(nu_for_entropy(64, 6.5).is_err());
        assert!(nu_for_entropy(64, 2.0).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = Constellation::new(16, 0.0).unwrap();
        let a = sample_symbols(&c, 1, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_symbols(&c, 1, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.signal, b.signal);
    }

    #[test]
    fn map_uniform_is_nearest_level() {
        let c = Constellation::new(64, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = c.log_prior();
        for _ in 0..1000 {
            let y: f64 = rng.random_range(-1.5..1.5);
            assert_eq!(decide_component(y, c.levels(), &lp, 0.37), nearest_level(y, &c));
        }
    }

    #[test]
    fn map_on_level_and_midpoint() {
        let c = Constellation::new(64, 0.2).unwrap();
        let lp = c.log_prior();
        for (m, &a) in c.levels().iter().enumerate() {
            assert_eq!(decide_component(a, c.levels(), &lp, 1e-4), m);
        }
        // midpoint between levels 4 and 5 (A = 1s and 3s): inner wins
        let mid = 0.5 * (c.levels()[4] + c.levels()[5]);
        let d = decide_component(mid, c.levels(), &lp, 0.01);
        assert_eq!(d, 4);
        let metric = |m: usize| -(mid - c.levels()[m]).powi(2) / 0.02 + lp[m];
        assert!(metric(4) > metric(5));
    }

    #[test]
    fn soft_demap_limits() {
        let c = Constellation::new(4, 0.0).unwrap();
        let x = ComplexSignal::new(vec![0.0], vec![0.0], 1).unwrap();
        let q = soft_demap(&x, &c, &c.matched_demapper(), 0.5);
        assert_eq!(q[0][0], vec![0.5, 0.5]);

        let c64 = Constellation::new(64, 0.0).unwrap();
        let x = ComplexSignal::new(vec![c64.levels()[3]], vec![c64.levels()[6]], 1).unwrap();
        let q = soft_demap(&x, &c64, &c64.matched_demapper(), 1e-6);
        for (m, &p) in q[0][0].iter().enumerate() {
            let want = if m == 3 { 1.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_demap_at_origin_matches_formula() {
        let c = Constellation::with_entropy(64, 4.6).unwrap();
        let sigma2 = 0.05;
        let x = ComplexSignal::new(vec![0.0], vec![0.0], 1).unwrap();
        let q = soft_demap(&x, &c, &c.matched_demapper(), sigma2);
        let nu_scaled = c.nu() / (c.scale() * c.scale());
        let w: Vec<f64> = c.levels().iter().map(|a| (-a * a * (1.0 / (2.0 * sigma2) + nu_scaled)).exp()).collect();
        let z: f64 = w.iter().sum();
        for (p, wi) in q[0][0].iter().zip(&w) {
            assert!((p - wi / z).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_demap_argmax_equals_map() {
        let c = Constellation::with_entropy(64, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ComplexSignal::new(
            (0..500).map(|_| rng.random_range(-1.4..1.4)).collect(),
            (0..500).map(|_| rng.random_range(-1.4..1.4)).collect(),
            1,
        )
        .unwrap();
        let q = soft_demap(&x, &c, &c.matched_demapper(), 0.02);
        let d = map_decide(&x, &c, 0.02);
        for (qi, &di) in q.iter().zip(&d) {
            let am = |v: &Vec<f64>| v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            assert_eq!(c.symbol_index(am(&qi[0]), am(&qi[1])), di);
            for comp in qi {
                let m1: f64 = comp.iter().zip(c.levels()).map(|(p, a)| p * a).sum();
                let m2: f64 = comp.iter().zip(c.levels()).map(|(p, a)| p * a * a).sum();
                assert!(m2 - m1 * m1 >= -1e-15);
            }
        }
    }

    #[test]
    fn tape_demapper_matches_plain() {
        let c = Constellation::with_entropy(16, 3.5).unwrap();
        let x = ComplexSignal::new(vec![0.1, -0.7, 1.2], vec![0.0; 3], 1).unwrap();
        let q = soft_demap(&x, &c, &c.matched_demapper(), 0.1);
        let mut t = Tape::new();
        let v = t.leaf(x.re.clone());
        let lq = soft_demap_log_var(&mut t, v, &c, &c.matched_demapper(), 0.1).unwrap();
        for (i, row) in t.value(lq).chunks(4).enumerate() {
            for (m, l) in row.iter().enumerate() {
                assert!((l.exp() - q[i][0][m]).abs() < 1e-14);
            }
        }
    }
}
