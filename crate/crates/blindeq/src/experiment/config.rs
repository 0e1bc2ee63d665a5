use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelKind, ChannelParams};
use crate::equalize::CPE_WINDOW;
use crate::error::{Error, Result};
use crate::evaluate::{EvalSettings, SUCCESS_THRESHOLD};
use crate::modem::{nu_for_entropy, Constellation};

/// A complete, validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every run's seed is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub modulation: ModulationConfig,
    pub equalizer: Vec<EqualizerConfig>,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Free-form remarks, e.g. how a recipe departs from the published setup.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    pub order: usize,
    /// Maxwell-Boltzmann shaping parameter on the unscaled levels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Target entropy in bits per 2-D symbol; `nu` is derived from it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig {
            order: 64,
            nu: None,
            entropy: None,
        }
    }
}

impl ModulationConfig {
    pub fn constellation(&self) -> Result<Constellation> {
        let nu = match (self.nu, self.entropy) {
            (Some(_), Some(_)) => return Err(Error::config("modulation: give either nu or entropy, not both")),
            (Some(nu), None) => nu,
            (None, Some(h)) => nu_for_entropy(self.order, h)?,
            (None, None) => 0.0,
        };
        Constellation::new(self.order, nu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EqualizerKind {
    /// Symbol-by-symbol constant modulus algorithm.
    Cma,
    CmaBatch,
    CmaFlex,
    VaeLe,
    VaeNn,
    VaeFlex,
    /// Data-aided least-squares equalizer at 1 sps without pulse shaping.
    MmseGenie,
    /// Reference without intersymbol interference: symbols plus AWGN.
    NoIsi,
}

impl EqualizerKind {
    pub fn name(self) -> &'static str {
        match self {
            EqualizerKind::Cma => "cma",
            EqualizerKind::CmaBatch => "cma-batch",
            EqualizerKind::CmaFlex => "cma-flex",
            EqualizerKind::VaeLe => "vae-le",
            EqualizerKind::VaeNn => "vae-nn",
            EqualizerKind::VaeFlex => "vae-flex",
            EqualizerKind::MmseGenie => "mmse-genie",
            EqualizerKind::NoIsi => "no-isi",
        }
    }

    pub fn is_cma(self) -> bool {
        matches!(self, EqualizerKind::Cma | EqualizerKind::CmaBatch | EqualizerKind::CmaFlex)
    }

    pub fn is_vae(self) -> bool {
        matches!(self, EqualizerKind::VaeLe | EqualizerKind::VaeNn | EqualizerKind::VaeFlex)
    }

    pub fn is_reference(self) -> bool {
        matches!(self, EqualizerKind::MmseGenie | EqualizerKind::NoIsi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EqualizerConfig {
    pub kind: EqualizerKind,
    /// Name used in the outputs; defaults to the kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Equalizer filter length `F` at the input sample rate.
    pub taps: usize,
    /// Channel model length of the VAE; defaults to `taps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_taps: Option<usize>,
    /// Batch length `N_B` in symbols.
    pub batch: usize,
    /// Step `N_flex` of the flex variants.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flex: Option<usize>,
    pub lr: f64,
    pub scheduler: bool,
    /// Use the true prior in the soft demapper (otherwise uniform).
    pub matched_demapper: bool,
    /// Network kernel lengths and hidden width of the VAE-NN.
    pub k1: usize,
    pub k2: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub cpe_window: usize,
    pub mmse_taps: usize,
}

impl Default for EqualizerConfig {
    fn default() -> Self {
        EqualizerConfig {
            kind: EqualizerKind::VaeLe,
            label: None,
            taps: 25,
            channel_taps: None,
            batch: 200,
            flex: None,
            lr: 1e-3,
            scheduler: false,
            matched_demapper: true,
            k1: 25,
            k2: 5,
            hidden: None,
            cpe_window: CPE_WINDOW,
            mmse_taps: 20,
        }
    }
}

impl EqualizerConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn channel_taps(&self) -> usize {
        self.channel_taps.unwrap_or(self.taps)
    }

    /// `(batch, flex)` actually used by the update loop.
    pub fn schedule(&self) -> (usize, usize) {
        match self.kind {
            EqualizerKind::Cma => (1, 1),
            EqualizerKind::CmaFlex | EqualizerKind::VaeFlex => (self.batch, self.flex.unwrap_or(self.batch)),
            _ => (self.batch, self.batch),
        }
    }

    fn validate(&self, channel: &ChannelParams) -> Result<()> {
        let name = self.label();
        let fail = |msg: &str| Err(Error::config(format!("equalizer {name}: {msg}")));
        if self.kind.is_reference() {
            if self.kind == EqualizerKind::MmseGenie && channel.kind != ChannelKind::AwgnIsi {
                return fail("the MMSE genie is only defined for the AWGN-ISI channel");
            }
            return if self.mmse_taps == 0 { fail("mmse_taps must be positive") } else { Ok(()) };
        }
        if self.taps.is_multiple_of(2) {
            return fail("taps must be odd");
        }
        if self.channel_taps().is_multiple_of(2) {
            return fail("channel_taps must be odd");
        }
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if matches!(self.kind, EqualizerKind::CmaFlex | EqualizerKind::VaeFlex) {
            match self.flex {
                None => return fail("flex variants need `flex`"),
                Some(f) if f == 0 || f > self.batch => return fail("flex must be in 1..=batch"),
                _ => {}
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.kind == EqualizerKind::VaeNn && (self.k1.is_multiple_of(2) || self.k2.is_multiple_of(2)) {
            return fail("k1 and k2 must be odd");
        }
        if self.kind.is_cma() && self.cpe_window == 0 {
            return fail("cpe_window must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Symbols per frame `N_frame`.
    pub frame_len: usize,
    /// Frames per run `N_ind`.
    pub n_ind: usize,
    pub n_run: usize,
    pub threshold: f64,
    /// Moving average length `F_ma`.
    pub ma_len: usize,
    pub probe_len: usize,
    /// Channel memory in symbols used for the shift search and trimming;
    /// defaults to the h_sim length (AWGN-ISI) or 5 (optical).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_memory: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frame_len: 10_000,
            n_ind: 170,
            n_run: 10,
            threshold: SUCCESS_THRESHOLD,
            ma_len: 10,
            probe_len: 1000,
            channel_memory: None,
        }
    }
}

/// Sweep axes. A missing axis keeps the base value; a present axis must not
/// be empty. Channel axes define the sweep points, equalizer axes expand
/// every equalizer entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symbol_rate: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_gamma_hv: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taps: Option<Vec<usize>>,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        let axes = [
            ("snr_db", self.snr_db.as_ref().map(Vec::len)),
            ("symbol_rate", self.symbol_rate.as_ref().map(Vec::len)),
            ("delta_gamma_hv", self.delta_gamma_hv.as_ref().map(Vec::len)),
            ("lr", self.lr.as_ref().map(Vec::len)),
            ("batch", self.batch.as_ref().map(Vec::len)),
            ("taps", self.taps.as_ref().map(Vec::len)),
        ];
        for (name, len) in axes {
            if len == Some(0) {
                return Err(Error::config(format!("sweep axis {name} is empty")));
            }
        }
        Ok(())
    }
}

/// One point of the channel sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub channel: ChannelParams,
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the normalized TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.modulation.constellation()?;
        self.sweep.validate()?;
        if self.equalizer.is_empty() {
            return Err(Error::config("at least one [[equalizer]] is required"));
        }
        let r = &self.run;
        if r.frame_len == 0 || r.n_ind == 0 || r.n_run == 0 {
            return Err(Error::config("run: frame_len, n_ind and n_run must be positive"));
        }
        if r.n_ind < r.ma_len || r.ma_len == 0 {
            return Err(Error::config(format!(
                "run: n_ind ({}) must be at least the moving average length ({})",
                r.n_ind, r.ma_len
            )));
        }
        for p in self.points() {
            p.channel.validate()?;
        }
        for eq in self.variants() {
            eq.validate(&self.channel)?;
            self.eval_settings(&eq).validate()?;
        }
        Ok(())
    }

    pub fn channel_memory(&self) -> usize {
        self.run.channel_memory.unwrap_or(match self.channel.kind {
            ChannelKind::AwgnIsi => self.channel.h_sim.len(),
            ChannelKind::DpOptical => 5,
        })
    }

    /// Evaluation settings for one equalizer: shift range and trim are the
    /// filter length plus the channel memory.
    pub fn eval_settings(&self, eq: &EqualizerConfig) -> EvalSettings {
        let taps = if eq.kind.is_reference() { eq.mmse_taps } else { eq.taps };
        let mut s = EvalSettings::new(self.run.frame_len, taps, self.channel_memory());
        s.probe_len = self.run.probe_len;
        s.ma_len = self.run.ma_len;
        s.threshold = self.run.threshold;
        s
    }

    /// Channel sweep points in row-major order `snr × symbol_rate × Δγ`.
    pub fn points(&self) -> Vec<SweepPoint> {
        let snrs = self.sweep.snr_db.clone().unwrap_or_else(|| vec![self.channel.snr_db]);
        let rates = self.sweep.symbol_rate.clone().unwrap_or_else(|| vec![self.channel.symbol_rate]);
        let drifts = self.sweep.delta_gamma_hv.clone().unwrap_or_else(|| vec![self.channel.delta_gamma_hv]);
        let mut out = Vec::new();
        for &snr in &snrs {
            for &rate in &rates {
                for &dg in &drifts {
                    let mut ch = self.channel.clone();
                    ch.snr_db = snr;
                    ch.symbol_rate = rate;
                    ch.delta_gamma_hv = dg;
                    out.push(SweepPoint {
                        index: out.len(),
                        channel: ch,
                    });
                }
            }
        }
        out
    }

    /// Equalizer entries expanded over the `lr × batch × taps` axes.
    /// Reference kinds are not expanded.
    pub fn variants(&self) -> Vec<EqualizerConfig> {
        let mut out = Vec::new();
        for eq in &self.equalizer {
            if eq.kind.is_reference() {
                out.push(eq.clone());
                continue;
            }
            let lrs = self.sweep.lr.clone().unwrap_or_else(|| vec![eq.lr]);
            let batches = self.sweep.batch.clone().unwrap_or_else(|| vec![eq.batch]);
            let taps = self.sweep.taps.clone().unwrap_or_else(|| vec![eq.taps]);
            let expanded = lrs.len() * batches.len() * taps.len() > 1;
            for &lr in &lrs {
                for &b in &batches {
                    for &f in &taps {
                        let mut v = eq.clone();
                        v.lr = lr;
                        v.batch = b;
                        v.taps = f;
                        if expanded {
                            let mut parts = Vec::new();
                            if self.sweep.lr.is_some() {
                                parts.push(format!("lr={lr}"));
                            }
                            if self.sweep.batch.is_some() {
                                parts.push(format!("nb={b}"));
                            }
                            if self.sweep.taps.is_some() {
                                parts.push(format!("f={f}"));
                            }
                            v.label = Some(format!("{} {}", eq.label(), parts.join(" ")));
                        }
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    pub fn symbols_per_run(&self) -> usize {
        self.run.frame_len * self.run.n_ind
    }
}
