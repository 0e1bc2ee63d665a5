use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::autodiff::{Shape, Tape, Var};
use crate::equalize::adam::{adam_update, lr_schedule, AdamState};
use crate::equalize::butterfly::{ButterflyFilter, CVar};
use crate::equalize::loss::{vae_loss, LossLayout, LossTerms};
use crate::equalize::EqualizerOutput;
use crate::error::{Error, Result};
use crate::modem::{soft_demap_log_var, Constellation, DemapperPrior};
use crate::sigproc::ComplexSignal;

/// Training schedule shared by the linear and the network encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeSettings {
    /// Taps of the channel model `ĥ` at the input sample rate.
    pub channel_taps: usize,
    /// Symbols per batch `N_B`.
    pub batch: usize,
    /// Symbols the batch start advances per update. Equal to `batch` for
    /// plain block processing.
    pub flex: usize,
    pub lr: f64,
    /// Halve the learning rate every 20 frames.
    pub scheduler: bool,
    /// Symbols per frame, used by the scheduler.
    pub frame_len: usize,
    pub sps: usize,
}

impl VaeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.channel_taps == 0 || self.channel_taps.is_multiple_of(2) {
            return Err(Error::config("channel model needs an odd number of taps"));
        }
        if self.batch == 0 || self.flex == 0 || self.flex > self.batch {
            return Err(Error::config(format!(
                "need 0 < flex <= batch, got flex {} and batch {}",
                self.flex, self.batch
            )));
        }
        if self.sps == 0 || self.frame_len == 0 {
            return Err(Error::config("sps and frame length must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    /// Symbols of posterior context on either side of a batch so that every
    /// channel model output inside the batch sees all its inputs.
    pub fn context(&self) -> usize {
        ((self.channel_taps - 1) / 2).div_ceil(self.sps)
    }
}

/// Forward model from received samples to per-symbol posteriors.
pub trait Encoder {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    /// Records posteriors for symbols `first .. first + n` on `tape`.
    /// Input samples outside the stream are zero. `sigma2` is the complex
    /// noise variance estimate.
    fn encode(&self, tape: &mut Tape, rx: &[ComplexSignal], first: isize, n: usize, sps: usize, sigma2: f64) -> Result<Encoded>;
}

/// Output of [`Encoder::encode`].
pub struct Encoded {
    /// Trainable leaves in the order of [`Encoder::params`].
    pub leaves: Vec<Var>,
    /// `[I, Q]` log-posteriors per polarization, `n × √M`.
    pub log_q: Vec<[Var; 2]>,
    /// Equalized symbol estimates per polarization.
    pub symbols: Vec<Vec<Complex64>>,
}

/// The linear butterfly equalizer followed by the soft demapper.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    pub filter: ButterflyFilter,
    pub constellation: Constellation,
    pub prior: DemapperPrior,
}

fn input_windows(tape: &mut Tape, rx: &[ComplexSignal], start: isize, len: usize) -> Vec<CVar> {
    rx.iter()
        .map(|s| {
            let w = s.window(start, len);
            CVar {
                re: tape.leaf(w.re),
                im: tape.leaf(w.im),
            }
        })
        .collect()
}

impl Encoder for LinearEncoder {
    fn params(&self) -> Vec<f64> {
        self.filter.to_params()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.filter.set_params(params);
    }

    fn encode(&self, tape: &mut Tape, rx: &[ComplexSignal], first: isize, n: usize, sps: usize, sigma2: f64) -> Result<Encoded> {
        let f = self.filter.taps();
        let tf = self.filter.to_tape(tape);
        let start = first * sps as isize - self.filter.center() as isize;
        let inputs = input_windows(tape, rx, start, (n - 1) * sps + f);
        let out = tf.forward(tape, &inputs, sps, 0)?;
        let mut log_q = Vec::with_capacity(out.len());
        let mut symbols = Vec::with_capacity(out.len());
        // half of the complex variance per component
        let var = sigma2 / 2.0;
        for x in &out {
            let li = soft_demap_log_var(tape, x.re, &self.constellation, &self.prior, var)?;
            let lq = soft_demap_log_var(tape, x.im, &self.constellation, &self.prior, var)?;
            log_q.push([li, lq]);
            symbols.push(
                tape.value(x.re)
                    .iter()
                    .zip(tape.value(x.im))
                    .map(|(&r, &i)| Complex64::new(r, i))
                    .collect(),
            );
        }
        Ok(Encoded {
            leaves: tf.leaves(),
            log_q,
            symbols,
        })
    }
}

/// Two-layer convolutional encoder. Layer one maps the `2P` real input
/// channels to `hidden` channels with an ELU; layer two downsamples to the
/// symbol rate and emits `2P` groups of `√M` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NnEncoder {
    pub pols: usize,
    pub side: usize,
    pub hidden: usize,
    pub k1: usize,
    pub k2: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    levels: Vec<f64>,
}

impl NnEncoder {
    /// Uniform `±1/√fan_in` initialization of weights and biases.
    pub fn new(constellation: &Constellation, pols: usize, hidden: usize, k1: usize, k2: usize, seed: u64) -> Result<Self> {
        if k1.is_multiple_of(2) || k2.is_multiple_of(2) || hidden == 0 || pols == 0 {
            return Err(Error::config("network encoder needs odd kernels and a nonzero hidden width"));
        }
        let side = constellation.side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        let fan1 = 2 * pols * k1;
        let fan2 = hidden * k2;
        let out = 2 * pols * side;
        Ok(NnEncoder {
            pols,
            side,
            hidden,
            k1,
            k2,
            w1: init(hidden * fan1, fan1),
            b1: init(hidden, fan1),
            w2: init(out * fan2, fan2),
            b2: init(out, fan2),
            levels: constellation.levels().to_vec(),
        })
    }

    pub fn default_hidden(constellation: &Constellation) -> usize {
        2 * constellation.side()
    }

    fn half_span(&self) -> usize {
        (self.k1 - 1) / 2 + (self.k2 - 1) / 2
    }

    /// Posteriors for a whole stream with zero padding at both ends, as
    /// `q[p][c]`, each `n_symbols × √M` probabilities.
    pub fn forward_same(&self, rx: &[ComplexSignal], sps: usize) -> Result<Vec<[Vec<f64>; 2]>> {
        let n = rx.first().map_or(0, |s| s.len()) / sps;
        if n == 0 {
            return Err(Error::config("network encoder needs at least one symbol"));
        }
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, rx, 0, n, sps, 1.0)?;
        Ok(enc
            .log_q
            .iter()
            .map(|[i, q]| {
                [
                    tape.value(*i).iter().map(|v| v.exp()).collect(),
                    tape.value(*q).iter().map(|v| v.exp()).collect(),
                ]
            })
            .collect())
    }
}

impl Encoder for NnEncoder {
    fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let n = v.len();
            v.copy_from_slice(&params[off..off + n]);
            off += n;
        }
    }

    fn encode(&self, tape: &mut Tape, rx: &[ComplexSignal], first: isize, n: usize, sps: usize, _sigma2: f64) -> Result<Encoded> {
        if rx.len() != self.pols {
            return Err(Error::config(format!("network encoder expects {} inputs, got {}", self.pols, rx.len())));
        }
        let len = (n - 1) * sps + self.k1 + self.k2 - 1;
        let start = first * sps as isize - self.half_span() as isize;
        let mut input = Vec::with_capacity(2 * self.pols * len);
        for s in rx {
            let w = s.window(start, len);
            input.extend(w.re);
            input.extend(w.im);
        }
        let x = tape.leaf_shaped(input, Shape::matrix(2 * self.pols, len))?;
        let w1 = tape.leaf_shaped(self.w1.clone(), Shape::matrix(self.hidden, 2 * self.pols * self.k1))?;
        let b1 = tape.leaf(self.b1.clone());
        let out_ch = 2 * self.pols * self.side;
        let w2 = tape.leaf_shaped(self.w2.clone(), Shape::matrix(out_ch, self.hidden * self.k2))?;
        let b2 = tape.leaf(self.b2.clone());
        let h = tape.conv1d_channels(x, w1, self.k1, 1, 0)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.elu(h);
        let z = tape.conv1d_channels(h, w2, self.k2, sps, 0)?;
        let z = tape.add_row_bias(z, b2)?;
        let mut log_q = Vec::with_capacity(self.pols);
        let mut symbols = Vec::with_capacity(self.pols);
        for p in 0..self.pols {
            let mut comps = [z; 2];
            for (c, slot) in comps.iter_mut().enumerate() {
                let rows = tape.slice(z, (2 * p + c) * self.side * n, self.side * n)?;
                let rows = tape.reshape(rows, Shape::matrix(self.side, n))?;
                let cols = tape.transpose(rows);
                *slot = tape.log_softmax_rows(cols);
            }
            let argmax = |v: &[f64]| -> Vec<f64> {
                v.chunks(self.side)
                    .map(|row| {
                        let m = row
                            .iter()
                            .enumerate()
                            .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
                        self.levels[m]
                    })
                    .collect()
            };
            let re = argmax(tape.value(comps[0]));
            let im = argmax(tape.value(comps[1]));
            symbols.push(re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect());
            log_q.push(comps);
        }
        Ok(Encoded {
            leaves: vec![w1, b1, w2, b2],
            log_q,
            symbols,
        })
    }
}

/// Outcome of one [`VaeTrainer::step`].
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub sigma2: f64,
    pub terms_a: Vec<f64>,
    pub terms_c: Vec<f64>,
    pub clamped: bool,
    /// First `flex` equalized symbols of the batch, per polarization.
    pub emitted: Vec<Vec<Complex64>>,
}

/// Joint Adam training of an encoder and the butterfly channel model `ĥ`
/// over a received stream.
#[derive(Debug, Clone)]
pub struct VaeTrainer<E> {
    pub encoder: E,
    pub channel: ButterflyFilter,
    pub settings: VaeSettings,
    pub constellation: Constellation,
    /// Noise variance estimate of the previous batch, used by the demapper.
    pub sigma2: f64,
    adam: AdamState,
    batches: usize,
}

impl<E: Encoder> VaeTrainer<E> {
    pub fn new(encoder: E, pols: usize, constellation: Constellation, settings: VaeSettings) -> Result<Self> {
        settings.validate()?;
        let channel = ButterflyFilter::dirac(pols, settings.channel_taps)?;
        let n = encoder.params().len() + channel.param_len();
        Ok(VaeTrainer {
            encoder,
            channel,
            settings,
            constellation,
            sigma2: 1.0,
            adam: AdamState::new(n),
            batches: 0,
        })
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    fn record(&self, tape: &mut Tape, rx: &[ComplexSignal], s0: usize) -> Result<(Encoded, Vec<Var>, LossTerms)> {
        let st = &self.settings;
        let ctx = st.context();
        let n = st.batch + 2 * ctx;
        let enc = self.encoder.encode(tape, rx, s0 as isize - ctx as isize, n, st.sps, self.sigma2)?;
        let ch = self.channel.to_tape(tape);
        let l = st.batch * st.sps;
        let observed: Vec<ComplexSignal> = rx.iter().map(|s| s.window((s0 * st.sps) as isize, l)).collect();
        let layout = LossLayout {
            constellation: &self.constellation,
            sps: st.sps,
            context: ctx,
            batch: st.batch,
        };
        let terms = vae_loss(tape, &enc.log_q, &ch, &observed, layout)?;
        Ok((enc, ch.leaves(), terms))
    }

    /// Loss of the batch starting at symbol `s0` without updating anything.
    pub fn loss_at(&self, rx: &[ComplexSignal], s0: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, _, terms) = self.record(&mut tape, rx, s0)?;
        Ok(tape.scalar(terms.total))
    }

    /// Loss of the batch starting at `s0` and its gradient with respect to
    /// the encoder parameters followed by the channel model parameters.
    pub fn gradient_at(&self, rx: &[ComplexSignal], s0: usize) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (enc, ch_leaves, terms) = self.record(&mut tape, rx, s0)?;
        let grads = tape.backward(terms.total);
        let mut flat = Vec::with_capacity(self.adam_len());
        for v in enc.leaves.iter().chain(&ch_leaves) {
            flat.extend_from_slice(grads.wrt(*v));
        }
        Ok((tape.scalar(terms.total), flat))
    }

    /// One gradient update on the batch starting at symbol `s0`.
    pub fn step(&mut self, rx: &[ComplexSignal], s0: usize, lr: f64) -> Result<StepReport> {
        let mut tape = Tape::new();
        let (enc, ch_leaves, terms) = self.record(&mut tape, rx, s0)?;
        let loss = tape.scalar(terms.total);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                batch: self.batches,
                reason: format!("loss is {loss}"),
            });
        }
        let grads = tape.backward(terms.total);
        let mut flat = Vec::with_capacity(self.adam_len());
        for v in enc.leaves.iter().chain(&ch_leaves) {
            flat.extend_from_slice(grads.wrt(*v));
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                batch: self.batches,
                reason: "non-finite gradient".into(),
            });
        }
        let mut params = self.encoder.params();
        let n_enc = params.len();
        params.extend(self.channel.to_params());
        adam_update(&mut params, &flat, &mut self.adam, lr);
        self.encoder.set_params(&params[..n_enc]);
        self.channel.set_params(&params[n_enc..]);

        let l = self.settings.batch * self.settings.sps;
        let sigma2 = terms.sigma2(l);
        self.sigma2 = sigma2.max(1e-12);
        self.batches += 1;
        let ctx = self.settings.context();
        let emitted = enc
            .symbols
            .iter()
            .map(|s| s[ctx..ctx + self.settings.flex].to_vec())
            .collect();
        Ok(StepReport {
            loss,
            sigma2,
            terms_a: terms.a,
            terms_c: terms.c,
            clamped: terms.clamped,
            emitted,
        })
    }

    fn adam_len(&self) -> usize {
        self.encoder.params().len() + self.channel.param_len()
    }

    /// Equalizes a stream: batches advance by `flex` symbols, each emitting
    /// its first `flex` outputs before the update is applied. Symbols after
    /// the last full batch use the final parameters. A divergence stops
    /// training and leaves the remaining outputs at zero.
    pub fn run(&mut self, rx: &[ComplexSignal]) -> Result<EqualizerOutput> {
        let st = self.settings.clone();
        let pols = self.channel.pols();
        if rx.len() != pols || rx.iter().any(|s| s.len() != rx[0].len()) {
            return Err(Error::config("received polarizations must match the equalizer and have equal length"));
        }
        let n_total = rx[0].len() / st.sps;
        let ctx = st.context();
        let mut out = vec![ComplexSignal::zeros(n_total, 1); pols];
        let mut report = EqualizerOutput::default();
        let mut s0 = 0;
        while s0 + st.batch + ctx <= n_total {
            let lr = if st.scheduler {
                lr_schedule(s0 / st.frame_len, st.lr)
            } else {
                st.lr
            };
            match self.step(rx, s0, lr) {
                Ok(step) => {
                    for (p, sym) in step.emitted.iter().enumerate() {
                        for (i, v) in sym.iter().enumerate() {
                            out[p].set(s0 + i, *v);
                        }
                    }
                    report.sigma2.push((s0, step.sigma2));
                    report.clamped |= step.clamped;
                }
                Err(Error::Divergence { batch, reason }) => {
                    report.diverged = Some(format!("batch {batch}: {reason}"));
                    break;
                }
                Err(e) => return Err(e),
            }
            s0 += st.flex;
        }
        if report.diverged.is_none() && s0 < n_total {
            let mut tape = Tape::new();
            let enc = self.encoder.encode(&mut tape, rx, s0 as isize, n_total - s0, st.sps, self.sigma2)?;
            for (p, sym) in enc.symbols.iter().enumerate() {
                for (i, v) in sym.iter().enumerate() {
                    out[p].set(s0 + i, *v);
                }
            }
        }
        report.symbols = out;
        report.channel = Some(self.channel.clone());
        report.updates = self.batches;
        Ok(report)
    }
}

/// Linear VAE equalizer with Dirac-initialized filters.
pub fn vae_le(constellation: &Constellation, pols: usize, taps: usize, matched: bool, settings: VaeSettings) -> Result<VaeTrainer<LinearEncoder>> {
    if taps.is_multiple_of(2) {
        return Err(Error::config("equalizer needs an odd number of taps"));
    }
    let prior = if matched {
        constellation.matched_demapper()
    } else {
        constellation.with_uniform_demapper()
    };
    let enc = LinearEncoder {
        filter: ButterflyFilter::dirac(pols, taps)?,
        constellation: constellation.clone(),
        prior,
    };
    VaeTrainer::new(enc, pols, constellation.clone(), settings)
}
