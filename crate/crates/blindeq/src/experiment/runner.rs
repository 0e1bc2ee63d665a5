use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{add_noise, awgn_isi_apply, awgn_isi_response, dp_apply_framed, ChannelKind, ChannelParams};
use crate::equalize::{
    cma_run, mmse_baseline, vae_le, viterbi_viterbi_cpe, CmaSettings, EqualizerOutput, NnEncoder, VaeSettings, VaeTrainer,
};
use crate::error::{Error, Result};
use crate::evaluate::{
    aggregate_runs, evaluate_stream, ip_report, moving_average, sigma2_per_frame, snr_report, FrameEval, IpReport,
};
use crate::experiment::config::{EqualizerConfig, EqualizerKind, ExperimentConfig, SweepPoint};
use crate::modem::{sample_symbols, Constellation};
use crate::sigproc::{conv_same, shape, upsample_zero_insert, ComplexSignal};

/// Symbols used to fit the MMSE genie.
pub const MMSE_FIT_SYMBOLS: usize = 50_000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run` at sweep point `point`. All equalizers of a point see
/// the same data for a given run.
pub fn run_seed(master: u64, point: usize, run: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ point as u64) ^ run as u64)
}

/// Seed for randomness owned by one equalizer variant within a run.
pub fn variant_seed(run_seed: u64, variant: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(variant as u64 + 1))
}

/// Transmitted symbols and received samples of one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub tx: Vec<ComplexSignal>,
    pub rx: Vec<ComplexSignal>,
}

/// Draws symbols and passes them through the channel. `guard` is the
/// number of neighbouring samples transformed with each optical frame.
pub fn simulate(
    channel: &ChannelParams,
    c: &Constellation,
    n_symbols: usize,
    frame_len: usize,
    guard: usize,
    seed: u64,
) -> Result<RunData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pols = channel.kind.polarizations();
    let tx: Vec<ComplexSignal> = (0..pols).map(|_| sample_symbols(c, n_symbols, &mut rng).signal).collect();
    let rrc = channel.rrc()?;
    let shaped = tx
        .iter()
        .map(|t| match &rrc {
            Some(r) => shape(t, r, channel.sps),
            None => upsample_zero_insert(t, channel.sps),
        })
        .collect::<Result<Vec<_>>>()?;
    let rx = match channel.kind {
        ChannelKind::AwgnIsi => vec![awgn_isi_apply(&shaped[0], channel, rrc.as_deref(), &mut rng)],
        ChannelKind::DpOptical => {
            let (a, b) = dp_apply_framed(&shaped[0], &shaped[1], channel, frame_len, guard, &mut rng)?;
            vec![a, b]
        }
    };
    Ok(RunData { tx, rx })
}

/// Result of one equalizer variant on one run.
#[derive(Debug, Clone)]
pub struct VariantRun {
    /// Per transmit polarization.
    pub frames: Vec<Vec<FrameEval>>,
    pub swapped: bool,
    pub sigma2_frames: Vec<Option<f64>>,
    pub diverged: Option<String>,
    pub singular: bool,
    pub ip: Option<IpReport>,
}

/// Runs one equalizer on one run's data and returns its symbol-rate output.
pub fn equalize(
    eq: &EqualizerConfig,
    channel: &ChannelParams,
    c: &Constellation,
    data: &RunData,
    frame_len: usize,
    seed: u64,
) -> Result<EqualizerOutput> {
    let pols = data.rx.len();
    let (batch, flex) = eq.schedule();
    match eq.kind {
        EqualizerKind::NoIsi => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let symbols = data
                .tx
                .iter()
                .map(|t| {
                    let mut y = t.clone();
                    add_noise(&mut y, channel.noise_variance(), &mut rng);
                    y
                })
                .collect();
            Ok(EqualizerOutput {
                symbols,
                ..Default::default()
            })
        }
        EqualizerKind::MmseGenie => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = channel.h_sim_taps();
            let tx = &data.tx[0];
            let mut rx = ComplexSignal::from_complex(&conv_same(&tx.to_complex(), &h), 1);
            add_noise(&mut rx, channel.noise_variance(), &mut rng);
            let n_fit = tx.len().min(MMSE_FIT_SYMBOLS);
            let sol = mmse_baseline(&rx.slice(0, n_fit), &tx.slice(0, n_fit), eq.mmse_taps)?;
            Ok(EqualizerOutput {
                symbols: vec![sol.apply(&rx)],
                ..Default::default()
            })
        }
        k if k.is_cma() => {
            let settings = CmaSettings {
                taps: eq.taps,
                lr: eq.lr,
                batch,
                flex,
                radius: c.godard_radius(),
                scheduler: eq.scheduler,
                frame_len,
                sps: channel.sps,
            };
            let (mut out, _) = cma_run(&data.rx, &settings)?;
            out.symbols = out.symbols.iter().map(|s| viterbi_viterbi_cpe(s, eq.cpe_window)).collect();
            Ok(out)
        }
        _ => {
            let settings = VaeSettings {
                channel_taps: eq.channel_taps(),
                batch,
                flex,
                lr: eq.lr,
                scheduler: eq.scheduler,
                frame_len,
                sps: channel.sps,
            };
            if eq.kind == EqualizerKind::VaeNn {
                let hidden = eq.hidden.unwrap_or_else(|| NnEncoder::default_hidden(c));
                let enc = NnEncoder::new(c, pols, hidden, eq.k1, eq.k2, seed)?;
                VaeTrainer::new(enc, pols, c.clone(), settings)?.run(&data.rx)
            } else {
                vae_le(c, pols, eq.taps, eq.matched_demapper, settings)?.run(&data.rx)
            }
        }
    }
}

fn run_variant(cfg: &ExperimentConfig, point: &SweepPoint, eq: &EqualizerConfig, c: &Constellation, data: &RunData, seed: u64) -> Result<VariantRun> {
    let out = equalize(eq, &point.channel, c, data, cfg.run.frame_len, seed)?;
    let eval = evaluate_stream(&out.symbols, &data.tx, c, &cfg.eval_settings(eq))?;
    let ip = match (&out.channel, point.channel.kind) {
        (Some(ch), ChannelKind::AwgnIsi) => {
            let rrc = point.channel.rrc()?;
            Some(ip_report(ch.filter(0, 0), &awgn_isi_response(&point.channel, rrc.as_deref()))?)
        }
        _ => None,
    };
    Ok(VariantRun {
        frames: eval.frames,
        swapped: eval.swapped,
        sigma2_frames: sigma2_per_frame(&out.sigma2, cfg.run.frame_len, cfg.run.n_ind),
        diverged: out.diverged,
        singular: out.singular,
        ip,
    })
}

/// One row of the raw CSV: a single frame of one polarization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRow {
    pub point: usize,
    pub equalizer: String,
    pub run: usize,
    pub seed: u64,
    pub pol: usize,
    pub frame: usize,
    pub ser: f64,
    pub sigma2_genie: f64,
    pub sigma2_est: Option<f64>,
    pub shift: isize,
    pub rotation: u8,
    pub conjugate: bool,
    pub swapped: bool,
}

/// One row of the summary CSV: one equalizer at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub point: usize,
    pub snr_db: f64,
    pub symbol_rate: f64,
    pub delta_gamma_hv: f64,
    pub equalizer: String,
    pub kind: String,
    pub taps: usize,
    pub batch: usize,
    pub flex: usize,
    pub lr: f64,
    pub runs: usize,
    pub successful: usize,
    pub unsuccessful: usize,
    pub diverged: usize,
    pub singular: usize,
    pub final_ser: f64,
    pub final_index: Option<usize>,
    pub snr_est_db: Option<f64>,
    pub ip_nmse_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    /// `(point, run, seed)` for every simulated run.
    pub run_seeds: Vec<(usize, usize, u64)>,
    pub workers: usize,
    pub wall_time_s: f64,
    pub crate_version: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub raw: Vec<RawRow>,
    pub summary: Vec<SummaryRow>,
    pub manifest: Manifest,
    /// `(point, equalizer, run 0 report)` of every channel estimate.
    pub ip_reports: Vec<(usize, String, IpReport)>,
}

/// Runs every sweep point and equalizer for `n_run` seeded runs on a pool
/// of `workers` threads. Results do not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let c = cfg.modulation.constellation()?;
    let points = cfg.points();
    let variants = cfg.variants();
    let guard = 4 * channel_guard_taps(&variants);
    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.run.n_run).map(move |r| (p, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<VariantRun>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, r)| {
                let seed = run_seed(cfg.seed, p, r);
                let data = simulate(&points[p].channel, &c, cfg.symbols_per_run(), cfg.run.frame_len, guard, seed)?;
                variants
                    .iter()
                    .enumerate()
                    .map(|(v, eq)| run_variant(cfg, &points[p], eq, &c, &data, variant_seed(seed, v)))
                    .collect()
            })
            .collect()
    });
    let mut per_task = Vec::with_capacity(results.len());
    for r in results {
        per_task.push(r?);
    }

    let mut raw = Vec::new();
    let mut summary = Vec::new();
    let mut ip_reports = Vec::new();
    let n_run = cfg.run.n_run;
    for (p, point) in points.iter().enumerate() {
        for (v, eq) in variants.iter().enumerate() {
            let runs: Vec<&VariantRun> = (0..n_run).map(|r| &per_task[p * n_run + r][v]).collect();
            for (r, vr) in runs.iter().enumerate() {
                let seed = run_seed(cfg.seed, p, r);
                for (pol, frames) in vr.frames.iter().enumerate() {
                    for f in frames {
                        raw.push(RawRow {
                            point: p,
                            equalizer: eq.label(),
                            run: r,
                            seed,
                            pol,
                            frame: f.frame,
                            ser: f.ser,
                            sigma2_genie: f.sigma2,
                            sigma2_est: vr.sigma2_frames.get(f.frame).copied().flatten(),
                            shift: f.transform.shift,
                            rotation: f.transform.rotation,
                            conjugate: f.transform.conjugate,
                            swapped: vr.swapped,
                        });
                    }
                }
            }
            summary.push(summarize(cfg, point, eq, &runs)?);
            if let Some(ip) = &runs[0].ip {
                ip_reports.push((p, eq.label(), ip.clone()));
            }
        }
    }
    let run_seeds = tasks.iter().map(|&(p, r)| (p, r, run_seed(cfg.seed, p, r))).collect();
    Ok(ExperimentResult {
        raw,
        summary,
        manifest: Manifest {
            config_hash: cfg.hash()?,
            master_seed: cfg.seed,
            run_seeds,
            workers: workers.max(1),
            wall_time_s: start.elapsed().as_secs_f64(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            notes: cfg.notes.clone(),
        },
        ip_reports,
    })
}

fn channel_guard_taps(variants: &[EqualizerConfig]) -> usize {
    variants.iter().map(|v| v.taps.max(v.channel_taps())).max().unwrap_or(1)
}

fn summarize(cfg: &ExperimentConfig, point: &SweepPoint, eq: &EqualizerConfig, runs: &[&VariantRun]) -> Result<SummaryRow> {
    let ma_len = cfg.run.ma_len;
    let mut sequences = Vec::new();
    for vr in runs {
        for frames in &vr.frames {
            let ser: Vec<f64> = frames.iter().map(|f| f.ser).collect();
            sequences.push(moving_average(&ser, ma_len)?);
        }
    }
    let report = aggregate_runs(&sequences, cfg.run.threshold)?;

    let snr_est_db = if eq.kind.is_vae() {
        let ma: Vec<Vec<f64>> = runs
            .iter()
            .map(|vr| {
                let s: Vec<f64> = vr.sigma2_frames.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
                moving_average(&s, ma_len)
            })
            .collect::<Result<_>>()?;
        let idx = report.final_index.unwrap_or(ma[0].len() - 1);
        let vals: Vec<f64> = ma.iter().map(|m| m[idx]).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            None
        } else {
            Some(snr_report(&[vals.iter().sum::<f64>() / vals.len() as f64])[0])
        }
    } else {
        None
    };
    let ips: Vec<f64> = runs.iter().filter_map(|vr| vr.ip.as_ref().map(|i| i.nmse)).collect();
    let ip_nmse_db = if ips.is_empty() {
        None
    } else {
        Some(10.0 * (ips.iter().sum::<f64>() / ips.len() as f64).log10())
    };
    let (batch, flex) = if eq.kind.is_reference() { (0, 0) } else { eq.schedule() };
    Ok(SummaryRow {
        point: point.index,
        snr_db: point.channel.snr_db,
        symbol_rate: point.channel.symbol_rate,
        delta_gamma_hv: point.channel.delta_gamma_hv,
        equalizer: eq.label(),
        kind: eq.kind.name().to_string(),
        taps: if eq.kind.is_reference() { eq.mmse_taps } else { eq.taps },
        batch,
        flex,
        lr: if eq.kind.is_reference() { 0.0 } else { eq.lr },
        runs: runs.len(),
        successful: report.successful,
        unsuccessful: report.unsuccessful,
        diverged: runs.iter().filter(|r| r.diverged.is_some()).count(),
        singular: runs.iter().filter(|r| r.singular).count(),
        final_ser: report.final_ser,
        final_index: report.final_index,
        snr_est_db,
        ip_nmse_db,
    })
}

/// Serializes rows with the fixed column order of the row type.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Writes `raw.csv`, `summary.csv`, `manifest.json`, the normalized
/// `config.toml` and one `ip_<point>_<label>.csv` per channel estimate.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("raw.csv"), csv_string(&result.raw)?)?;
    std::fs::write(dir.join("summary.csv"), csv_string(&result.summary)?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&result.manifest)?)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    for (p, label, ip) in &result.ip_reports {
        let name: String = label.chars().map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' }).collect();
        ip.write_csv(&dir.join(format!("ip_{p}_{name}.csv")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kinds: &[&str]) -> ExperimentConfig {
        let mut text = String::from(
            "seed = 3\n[channel]\nkind = \"awgn-isi\"\nsnr_db = 20.0\n[modulation]\norder = 16\n[run]\nframe_len = 1000\nn_ind = 4\nn_run = 2\nma_len = 2\nprobe_len = 300\n[sweep]\nsnr_db = [16.0, 20.0]\n",
        );
        for k in kinds {
            text.push_str(&format!("[[equalizer]]\nkind = \"{k}\"\ntaps = 11\nbatch = 100\nlr = 5e-3\n"));
        }
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = run_seed(1, 0, 0);
        assert_eq!(a, run_seed(1, 0, 0));
        assert_ne!(a, run_seed(1, 0, 1));
        assert_ne!(a, run_seed(1, 1, 0));
        assert_ne!(a, run_seed(2, 0, 0));
    }

    #[test]
    fn summary_has_one_row_per_point_and_equalizer() {
        let cfg = tiny(&["vae-le", "no-isi", "mmse-genie"]);
        let res = run_experiment(&cfg, 2).unwrap();
        assert_eq!(res.summary.len(), 6);
        assert_eq!(res.raw.len(), 2 * 3 * 2 * 4);
        let genie = &res.summary[2];
        assert_eq!(genie.equalizer, "mmse-genie");
        assert_eq!(genie.successful, 2);
        assert!(res.summary[0].snr_est_db.is_some());
        assert!(res.summary[0].ip_nmse_db.is_some());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = tiny(&["vae-le", "cma"]);
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 3).unwrap();
        assert_eq!(csv_string(&a.summary).unwrap(), csv_string(&b.summary).unwrap());
        assert_eq!(csv_string(&a.raw).unwrap(), csv_string(&b.raw).unwrap());
    }

    #[test]
    fn outputs_are_written() {
        let cfg = tiny(&["vae-le"]);
        let res = run_experiment(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&cfg, &res, dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("point,snr_db,symbol_rate,delta_gamma_hv,equalizer,kind,"));
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("ip_0_vae_le.csv").exists());
        let again = ExperimentConfig::parse(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }
}
