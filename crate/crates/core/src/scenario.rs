//! Named experiment protocols, calibration against reference observables
//! and artifact output.
//!
//! A scenario turns a configuration into traces, fits and aggregate
//! statistics. Every random draw comes from a stream keyed by the master
//! seed and the trial index, so results do not depend on thread count or
//! scheduling.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{emit_config, patch_config, ExperimentConfig, ValidatedConfig};
use crate::conveyor::SweepWaveform;
use crate::coupling::max_scattering_rate;
use crate::detection::{
    fit_transit, generate_trace, lateral_spread, repositioning_statistics, synthetic_transit_fits,
    transit_windows, Direction, PhotonTrace, RepositioningStats, SyntheticFits, TransitFit,
};
use crate::dynamics::{
    pair_in_different_lobes, prepare_attempt, prepare_pool, survival_experiment, EnergyModel,
    Event, EventKind, Preparation, SurvivalEstimate, WellAtom, WellTrajectory,
};
use crate::error::{Error, Result};
use crate::optics::{guide_oscillation_period, FieldModel, ModeId};
use crate::rng::{domain, stream_rng, trial_rng};

/// Scenario-level switches carried in the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    /// Inject atoms at well bottoms instead of simulating loading.
    pub fast_start: bool,
    /// Transverse spread of fast-start atoms, m.
    pub lateral_sigma: f64,
    /// Atoms per trace for the custom scenario.
    pub atoms: usize,
    pub mode: ModeId,
    pub event_log: bool,
    /// Waveform for the custom scenario.
    pub sweep: Option<SweepWaveform>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            fast_start: false,
            lateral_sigma: 7.7e-6,
            atoms: 1,
            mode: ModeId::Tem00,
            event_log: false,
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Fig2a,
    Fig2b,
    Fig3,
    Fig4,
    Fig5a,
    Fig5b,
    Custom,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 7] = [
        ScenarioName::Fig2a,
        ScenarioName::Fig2b,
        ScenarioName::Fig3,
        ScenarioName::Fig4,
        ScenarioName::Fig5a,
        ScenarioName::Fig5b,
        ScenarioName::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Fig2a => "fig2a",
            ScenarioName::Fig2b => "fig2b",
            ScenarioName::Fig3 => "fig3",
            ScenarioName::Fig4 => "fig4",
            ScenarioName::Fig5a => "fig5a",
            ScenarioName::Fig5b => "fig5b",
            ScenarioName::Custom => "custom",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ScenarioName::Fig2a => "one atom, TEM00, swept over 75 um peak-to-peak at 1 Hz for 5 s",
            ScenarioName::Fig2b => {
                "two atoms, TEM00, same sweep for 15 s; atom number per sweep cycle"
            }
            ScenarioName::Fig3 => {
                "71 surviving atoms, 19 transits at 20 Hz over +-25 um; repositioning analysis"
            }
            ScenarioName::Fig4 => {
                "survival after 0.5 s vs sweep frequency for 10/25/50 um, pump on and off"
            }
            ScenarioName::Fig5a => "one atom, TEM01, 20 Hz over 250 um peak-to-peak",
            ScenarioName::Fig5b => {
                "two atoms in opposite lobes, TEM01, same sweep; pair lobe statistics"
            }
            ScenarioName::Custom => "config-defined sweep, mode and atom number",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            ScenarioName::Fig3 => 71,
            ScenarioName::Fig4 => 1000,
            _ => 1,
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Frequencies of the survival grid, Hz.
pub const FIG4_FREQUENCIES: [f64; 12] = [
    0.0, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 100.0,
];
/// Sweep amplitudes of the survival grid, m.
pub const FIG4_AMPLITUDES: [f64; 3] = [10e-6, 25e-6, 50e-6];
/// Atoms prepared once and shared by all survival grid points.
pub const FIG4_POOL_SIZE: usize = 256;
/// Duration of the TEM01 sweeps, s.
pub const FIG5_DURATION: f64 = 0.25;
/// Distance from the sweep center counted as "between the lobes", m.
pub const FIG5_CENTER_HALF_WIDTH: f64 = 2e-6;

const MAX_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub config: ExperimentConfig,
    /// `None` uses the scenario's default trial count.
    pub n_trials: Option<usize>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl ScenarioSpec {
    pub fn new(name: ScenarioName, config: ExperimentConfig) -> Self {
        Self {
            name,
            config,
            n_trials: None,
            master_seed: 1,
            output_dir: PathBuf::from("out"),
        }
    }

    /// Apply `key = value` lines on top of the current configuration.
    pub fn with_overrides(mut self, patch: &str) -> Result<Self> {
        self.config = patch_config(&self.config, patch)?;
        Ok(self)
    }

    pub fn trials(&self) -> usize {
        self.n_trials.unwrap_or_else(|| self.name.default_trials())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub trials: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_err: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Panel {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// x/y series per figure panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotBundle {
    pub figure: String,
    pub panels: Vec<Panel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub name: ScenarioName,
    pub provenance: Provenance,
    pub summary: Value,
    pub plot: PlotBundle,
    /// `(file stem, trace)` per trial.
    pub traces: Vec<(String, PhotonTrace)>,
    /// `(atom, fit)` pairs.
    pub fits: Vec<(usize, TransitFit)>,
    pub events: Vec<Event>,
    pub trials: usize,
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioResult> {
    let n = spec.trials();
    if n == 0 {
        return Err(Error::EmptyInput("scenario needs at least one trial"));
    }
    let cfg = spec.config.clone().validate()?;
    let seed = spec.master_seed;
    let mut out = match spec.name {
        ScenarioName::Fig2a => run_trace_scenario(&cfg, &fig2_protocol(5.0, 1), n, seed)?,
        ScenarioName::Fig2b => run_trace_scenario(&cfg, &fig2_protocol(15.0, 2), n, seed)?,
        ScenarioName::Fig3 => run_fig3(&cfg, n, seed)?,
        ScenarioName::Fig4 => run_fig4(&cfg, n, seed)?,
        ScenarioName::Fig5a => run_trace_scenario(&cfg, &fig5_protocol(1), n, seed)?,
        ScenarioName::Fig5b => run_trace_scenario(&cfg, &fig5_protocol(2), n, seed)?,
        ScenarioName::Custom => {
            let sweep = cfg.scenario.sweep.clone().ok_or_else(|| {
                Error::InsufficientData("custom scenario needs a sweep block in the config".into())
            })?;
            let p = TraceProtocol {
                figure: ScenarioName::Custom,
                waveform: sweep,
                mode: cfg.scenario.mode,
                atoms: cfg.scenario.atoms,
                use_filter: cfg.scenario.mode == ModeId::Tem00,
                opposite_lobes: false,
            };
            run_trace_scenario(&cfg, &p, n, seed)?
        }
    };
    out.name = spec.name;
    out.provenance = Provenance {
        scenario: spec.name.to_string(),
        config_hash: cfg.hash(),
        seed,
        trials: out.trials,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(out)
}

fn empty_result(name: ScenarioName, trials: usize) -> ScenarioResult {
    ScenarioResult {
        name,
        provenance: Provenance {
            scenario: name.to_string(),
            config_hash: String::new(),
            seed: 0,
            trials,
            version: String::new(),
        },
        summary: Value::Null,
        plot: PlotBundle {
            figure: name.to_string(),
            panels: Vec::new(),
        },
        traces: Vec::new(),
        fits: Vec::new(),
        events: Vec::new(),
        trials,
    }
}

#[derive(Debug, Clone)]
struct TraceProtocol {
    figure: ScenarioName,
    waveform: SweepWaveform,
    mode: ModeId,
    atoms: usize,
    use_filter: bool,
    /// Keep only attempts whose atoms sit on both sides of the axis.
    opposite_lobes: bool,
}

fn fig2_protocol(duration: f64, atoms: usize) -> TraceProtocol {
    TraceProtocol {
        figure: if atoms == 1 {
            ScenarioName::Fig2a
        } else {
            ScenarioName::Fig2b
        },
        waveform: SweepWaveform::sinusoid(37.5e-6, 1.0, duration),
        mode: ModeId::Tem00,
        atoms,
        use_filter: true,
        opposite_lobes: false,
    }
}

fn fig5_protocol(atoms: usize) -> TraceProtocol {
    TraceProtocol {
        figure: if atoms == 1 {
            ScenarioName::Fig5a
        } else {
            ScenarioName::Fig5b
        },
        waveform: SweepWaveform::sinusoid(125e-6, 20.0, FIG5_DURATION),
        mode: ModeId::Tem01,
        atoms,
        use_filter: false,
        opposite_lobes: atoms == 2,
    }
}

/// Atoms for one trial plus the capture times (relative to the start of
/// the sweep) of the atoms that were kept.
#[derive(Debug, Clone)]
pub struct TrialAtoms {
    pub atoms: Vec<WellAtom>,
    pub capture_times: Vec<f64>,
    pub attempts: usize,
}

/// Prepare exactly `n` atoms for trial `trial`, repeating loading attempts
/// until one yields that many (and satisfies `accept`).
pub fn prepare_trial_atoms(
    cfg: &ExperimentConfig,
    mode: ModeId,
    n: usize,
    use_filter: bool,
    seed: u64,
    trial: usize,
    accept: &dyn Fn(&[WellAtom]) -> bool,
) -> Result<TrialAtoms> {
    if cfg.scenario.fast_start {
        for k in 0..MAX_ATTEMPTS {
            let mut rng = stream_rng(seed, domain::PREPARATION, ((trial as u64) << 20) | k as u64);
            let atoms: Vec<WellAtom> = (0..n)
                .map(|_| Preparation::FastStart.draw(cfg, &mut rng))
                .collect();
            if accept(&atoms) {
                return Ok(TrialAtoms {
                    capture_times: vec![0.0; n],
                    atoms,
                    attempts: k + 1,
                });
            }
        }
    } else {
        let lead = cfg.arrival.load_duration
            + if use_filter {
                cfg.arrival.filter_duration
            } else {
                0.0
            };
        for k in 0..MAX_ATTEMPTS {
            let mut rng = stream_rng(seed, domain::PREPARATION, ((trial as u64) << 20) | k as u64);
            let prep = prepare_attempt(cfg, mode, use_filter, &mut rng)?;
            if prep.atoms.len() == n && accept(&prep.atoms) {
                let capture_times = prep
                    .atoms
                    .iter()
                    .map(|a| {
                        prep.load
                            .captured
                            .iter()
                            .min_by(|p, q| {
                                (p.x_well - a.x_home)
                                    .abs()
                                    .total_cmp(&(q.x_well - a.x_home).abs())
                            })
                            .map_or(0.0, |c| c.capture_time - lead)
                    })
                    .collect();
                return Ok(TrialAtoms {
                    atoms: prep.atoms,
                    capture_times,
                    attempts: k + 1,
                });
            }
        }
    }
    Err(Error::InsufficientData(format!(
        "no loading attempt produced {n} suitable atoms in {MAX_ATTEMPTS} attempts"
    )))
}

/// Detected photon trace from a set of atom trajectories.
pub fn trace_from_trajectories<R: Rng + ?Sized>(
    trajectories: &[WellTrajectory],
    waveform: &SweepWaveform,
    cfg: &ExperimentConfig,
    mode: ModeId,
    keep_arrivals: bool,
    rng: &mut R,
) -> Result<PhotonTrace> {
    let field = FieldModel::new(cfg);
    let peak = if cfg.pump.pump_on {
        max_scattering_rate(cfg, mode)
    } else {
        0.0
    };
    let rate = |t: f64| -> f64 {
        trajectories
            .iter()
            .filter(|tr| tr.alive_at(t))
            .map(|tr| peak * field.axial_intensity(mode, tr.position(t, waveform)))
            .sum()
    };
    let det = &cfg.detection;
    let bound = det.detection_efficiency * peak * trajectories.len() as f64 + det.background_rate;
    generate_trace(rate, 0.0, waveform.duration, bound, det, keep_arrivals, rng)
}

struct TraceTrial {
    trajectories: Vec<WellTrajectory>,
    trace: PhotonTrace,
    events: Vec<Event>,
    attempts: usize,
}

fn run_trace_trial(
    cfg: &ExperimentConfig,
    p: &TraceProtocol,
    seed: u64,
    trial: usize,
    keep_arrivals: bool,
) -> Result<TraceTrial> {
    let accept = |atoms: &[WellAtom]| -> bool {
        !p.opposite_lobes
            || (atoms.iter().any(|a| a.x_home < 0.0) && atoms.iter().any(|a| a.x_home > 0.0))
    };
    let prepared = prepare_trial_atoms(cfg, p.mode, p.atoms, p.use_filter, seed, trial, &accept)?;
    let model = EnergyModel::new(cfg, p.mode)?;
    let mut rng = trial_rng(seed, trial);
    let mut events = Vec::new();
    let mut trajectories = Vec::with_capacity(p.atoms);
    for (id, (atom, &tc)) in prepared
        .atoms
        .iter()
        .zip(&prepared.capture_times)
        .enumerate()
    {
        events.push(Event {
            time: tc,
            kind: EventKind::Capture,
            atom_id: id,
            x_position: atom.x_home,
        });
        trajectories.push(model.run(
            *atom,
            &p.waveform,
            cfg.pump.pump_on,
            &mut rng,
            Some((&mut events, id)),
        )?);
    }
    let trace = trace_from_trajectories(
        &trajectories,
        &p.waveform,
        cfg,
        p.mode,
        keep_arrivals,
        &mut rng,
    )?;
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.atom_id.cmp(&b.atom_id)));
    Ok(TraceTrial {
        trajectories,
        trace,
        events,
        attempts: prepared.attempts,
    })
}

fn with_trial<T>(trial: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Trial {
        trial,
        source: Box::new(e),
    })
}

/// Peak detected rate above background per sweep cycle, in units of a
/// single centred atom, from a 5-bin moving average.
pub fn atoms_per_cycle(
    trace: &PhotonTrace,
    frequency: f64,
    single_rate: f64,
    background: f64,
) -> Vec<f64> {
    let tau = trace.bin_width;
    let w = 5usize.min(trace.counts.len().max(1));
    let smooth: Vec<f64> = trace
        .counts
        .windows(w)
        .map(|s| s.iter().sum::<u64>() as f64 / (w as f64 * tau))
        .collect();
    let period = 1.0 / frequency;
    let n_cycles = (trace.duration() / period).floor() as usize;
    (0..n_cycles)
        .map(|c| {
            let lo = c as f64 * period;
            let hi = lo + period;
            let peak = smooth
                .iter()
                .enumerate()
                .filter(|(i, _)| {
                    let t = trace.bin_start(*i) + 0.5 * w as f64 * tau;
                    t >= lo && t < hi
                })
                .map(|(_, &r)| r)
                .fold(0.0, f64::max);
            (peak - background) / single_rate
        })
        .collect()
}

/// Upper-tail Poisson probability P(X ≥ k) for mean `mu`.
pub fn poisson_upper_tail(k: u64, mu: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if mu <= 0.0 {
        return 0.0;
    }
    let mut term = (-mu).exp();
    let mut cdf = term;
    for i in 1..k {
        term *= mu / i as f64;
        cdf += term;
    }
    (1.0 - cdf).max(0.0)
}

fn run_trace_scenario(
    cfg: &ValidatedConfig,
    p: &TraceProtocol,
    n: usize,
    seed: u64,
) -> Result<ScenarioResult> {
    let keep_arrivals = p.mode == ModeId::Tem01;
    let trials: Vec<Result<TraceTrial>> = (0..n)
        .into_par_iter()
        .map(|i| with_trial(i, run_trace_trial(cfg, p, seed, i, keep_arrivals)))
        .collect();
    let trials: Vec<TraceTrial> = trials.into_iter().collect::<Result<_>>()?;

    let det = &cfg.detection;
    let single = det.detection_efficiency * max_scattering_rate(cfg, p.mode);
    let mut result = empty_result(p.figure, n);
    let mut trial_summaries = Vec::new();
    let mut trace_series = Vec::new();
    let mut cycle_series = Vec::new();
    for (i, t) in trials.iter().enumerate() {
        let stem = if n == 1 {
            "trace".to_string()
        } else {
            format!("trace_{i:03}")
        };
        let losses: Vec<Option<f64>> = t.trajectories.iter().map(|tr| tr.loss_time).collect();
        let mut s = json!({
            "trial": i,
            "preparation_attempts": t.attempts,
            "loss_times_s": losses,
            "hops": t.trajectories.iter().map(|tr| tr.hops).collect::<Vec<_>>(),
            "x_home_m": t.trajectories.iter().map(|tr| tr.x_home).collect::<Vec<_>>(),
            "total_counts": t.trace.counts.iter().sum::<u64>(),
        });
        if let crate::conveyor::SweepKind::Sinusoid { frequency, .. } = p.waveform.kind {
            if p.mode == ModeId::Tem00 && frequency > 0.0 {
                let per_cycle = atoms_per_cycle(&t.trace, frequency, single, det.background_rate);
                s["atoms_per_cycle"] = json!(per_cycle
                    .iter()
                    .map(|a| a.round().max(0.0) as u64)
                    .collect::<Vec<_>>());
                s["peak_ratio_per_cycle"] = json!(per_cycle);
                let ones: Vec<f64> = per_cycle
                    .iter()
                    .copied()
                    .filter(|a| a.round() == 1.0)
                    .collect();
                let twos: Vec<f64> = per_cycle
                    .iter()
                    .copied()
                    .filter(|a| a.round() == 2.0)
                    .collect();
                if !ones.is_empty() && !twos.is_empty() {
                    let m1 = ones.iter().sum::<f64>() / ones.len() as f64;
                    let m2 = twos.iter().sum::<f64>() / twos.len() as f64;
                    s["two_to_one_peak_ratio"] = json!(m2 / m1);
                }
                cycle_series.push(Series {
                    label: format!("trial {i}"),
                    x: (0..per_cycle.len()).map(|c| c as f64 / frequency).collect(),
                    y: per_cycle,
                    y_err: None,
                });
            }
        }
        if p.mode == ModeId::Tem01 {
            s["center_test"] = center_consistency(t, &p.waveform, cfg);
            let (centers, rates) = rate_profile(t, &p.waveform, 2e-6);
            s["lobe_separation_m"] = json!(lobe_separation(&centers, &rates));
            trace_series.push(Series {
                label: format!("trial {i} rate vs offset"),
                x: centers,
                y: rates,
                y_err: None,
            });
        }
        trace_series.push(Series {
            label: format!("trial {i} counts"),
            x: (0..t.trace.counts.len())
                .map(|b| t.trace.bin_start(b))
                .collect(),
            y: t.trace.counts.iter().map(|&c| c as f64).collect(),
            y_err: None,
        });
        trial_summaries.push(s);
        result.traces.push((stem, t.trace.clone()));
        if cfg.scenario.event_log {
            result.events.extend(t.events.iter().cloned());
        }
    }
    let mut summary = json!({
        "scenario": p.figure.as_str(),
        "mode": p.mode.to_string(),
        "atoms_per_trial": p.atoms,
        "sweep": p.waveform,
        "single_atom_peak_detected_rate": single,
        "background_rate": det.background_rate,
        "trials": trial_summaries,
    });
    if p.figure == ScenarioName::Fig5b {
        let pairs = 1000;
        summary["pair_statistics"] = lobe_pair_statistics(cfg, p.mode, pairs, seed)?;
    }
    result.summary = summary;
    let mut panels = vec![Panel {
        name: "trace".into(),
        x_label: "time_s".into(),
        y_label: format!("counts_per_{}s_bin", det.bin_width),
        series: trace_series,
    }];
    if !cycle_series.is_empty() {
        panels.push(Panel {
            name: "atoms_per_cycle".into(),
            x_label: "time_s".into(),
            y_label: "peak_rate_over_single_atom".into(),
            series: cycle_series,
        });
    }
    result.plot.panels = panels;
    Ok(result)
}

/// Counts recorded while the atom sits within the central dark region of
/// the TEM01 mode, compared with the background expectation.
fn center_consistency(t: &TraceTrial, waveform: &SweepWaveform, cfg: &ExperimentConfig) -> Value {
    let Some(arrivals) = &t.trace.arrivals else {
        return Value::Null;
    };
    if t.trajectories.len() != 1 {
        return Value::Null;
    }
    let tr = &t.trajectories[0];
    let in_center =
        |time: f64| tr.alive_at(time) && tr.position(time, waveform).abs() < FIG5_CENTER_HALF_WIDTH;
    let dt = 1e-6;
    let steps = (waveform.duration / dt) as usize;
    let exposure = (0..steps)
        .filter(|&k| in_center((k as f64 + 0.5) * dt))
        .count() as f64
        * dt;
    let counts = arrivals.iter().filter(|&&a| in_center(a)).count() as u64;
    let expected = cfg.detection.background_rate * exposure;
    let p = poisson_upper_tail(counts, expected);
    json!({
        "exposure_s": exposure,
        "counts": counts,
        "expected_background": expected,
        "p_value_upper": p,
        "consistent_with_background": p > 0.01,
    })
}

/// Detected rate as a function of commanded offset.
fn rate_profile(t: &TraceTrial, waveform: &SweepWaveform, width: f64) -> (Vec<f64>, Vec<f64>) {
    let Some(arrivals) = &t.trace.arrivals else {
        return (Vec::new(), Vec::new());
    };
    let reach = waveform.max_excursion() + width;
    let n = (2.0 * reach / width).ceil() as usize;
    let idx = |x: f64| (((x - waveform.center + reach) / width) as usize).min(n - 1);
    let mut dwell = vec![0.0; n];
    let dt = 1e-5;
    let steps = (waveform.duration / dt) as usize;
    for k in 0..steps {
        dwell[idx(waveform.offset_unchecked((k as f64 + 0.5) * dt))] += dt;
    }
    let mut counts = vec![0.0; n];
    for &a in arrivals {
        counts[idx(waveform.offset_unchecked(a.min(waveform.duration)))] += 1.0;
    }
    let centers = (0..n)
        .map(|i| waveform.center - reach + (i as f64 + 0.5) * width)
        .collect();
    let rates = counts
        .iter()
        .zip(&dwell)
        .map(|(c, d)| if *d > 0.0 { c / d } else { 0.0 })
        .collect();
    (centers, rates)
}

/// Distance between the rate maxima on either side of the profile's
/// dark center, smoothed over 5 bins.
fn lobe_separation(centers: &[f64], rates: &[f64]) -> Option<f64> {
    if rates.len() < 10 {
        return None;
    }
    let smooth: Vec<f64> = (0..rates.len())
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(rates.len());
            rates[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let argmax = |range: std::ops::Range<usize>| -> Option<usize> {
        range.max_by(|&a, &b| smooth[a].total_cmp(&smooth[b]))
    };
    let first = argmax(0..smooth.len())?;
    let other = if centers[first] < 0.0 {
        argmax(first + 1..smooth.len())
    } else {
        argmax(0..first)
    }?;
    // the second lobe must be separated from the first by a dip
    let (a, b) = (first.min(other), first.max(other));
    let dip = smooth[a..=b].iter().copied().fold(f64::INFINITY, f64::min);
    if dip >= 0.8 * smooth[other] {
        return None;
    }
    Some((centers[b] - centers[a]).abs())
}

/// Fraction of two-atom loadings with the atoms in different lobes.
pub fn lobe_pair_statistics(
    cfg: &ExperimentConfig,
    mode: ModeId,
    pairs: usize,
    seed: u64,
) -> Result<Value> {
    let outcomes: Vec<Result<Option<bool>>> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, domain::CALIBRATION, (1 << 30) | i as u64);
            with_trial(i, pair_in_different_lobes(cfg, mode, 1000, &mut rng))
        })
        .collect();
    let mut different = 0;
    let mut total = 0;
    for o in outcomes {
        if let Some(d) = o? {
            total += 1;
            if d {
                different += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no two-atom loadings".into()));
    }
    let est = SurvivalEstimate::from_counts(different, total);
    Ok(json!({
        "pairs": total,
        "different_lobes": different,
        "fraction": est.fraction,
        "ci_low": est.ci_low,
        "ci_high": est.ci_high,
    }))
}

/// The 20 Hz, ±25 µm sweep with 19 transits.
pub fn fig3_waveform() -> SweepWaveform {
    SweepWaveform::sinusoid(25e-6, 20.0, 0.5)
}

struct Fig3Atom {
    trace: PhotonTrace,
    fits: Vec<TransitFit>,
    failed_fits: usize,
    truth: Vec<TransitFit>,
    events: Vec<Event>,
    attempts: usize,
}

fn run_fig3_atom(
    cfg: &ExperimentConfig,
    waveform: &SweepWaveform,
    seed: u64,
    atom: usize,
) -> Result<Fig3Atom> {
    let protocol = TraceProtocol {
        figure: ScenarioName::Fig3,
        waveform: waveform.clone(),
        mode: ModeId::Tem00,
        atoms: 1,
        use_filter: true,
        opposite_lobes: false,
    };
    let mut attempts = 0;
    // atoms lost during the sweep are discarded, as only survivors are analysed
    for k in 0..MAX_ATTEMPTS {
        let slot = (atom << 12) | k;
        let t = run_trace_trial(cfg, &protocol, seed, slot, false)?;
        attempts += t.attempts;
        let traj = &t.trajectories[0];
        if !traj.survived() {
            continue;
        }
        let windows = transit_windows(waveform);
        let mut fits = Vec::new();
        let mut failed = 0;
        let mut truth = Vec::new();
        for (k, &(ta, tb)) in windows.iter().enumerate() {
            match fit_transit(&t.trace, waveform, k, &cfg.detection, cfg.cavity.waist_w0) {
                Ok(f) => fits.push(f),
                Err(_) => failed += 1,
            }
            truth.push(TransitFit {
                transit_index: k,
                sweep_direction: if waveform.velocity(0.5 * (ta + tb)) >= 0.0 {
                    Direction::Plus
                } else {
                    Direction::Minus
                },
                best_offset: -(traj.x_home + traj.shift_at(0.5 * (ta + tb))),
                peak_rate: 0.0,
                fit_uncertainty: 0.0,
            });
        }
        return Ok(Fig3Atom {
            trace: t.trace,
            fits,
            failed_fits: failed,
            truth,
            events: t.events,
            attempts,
        });
    }
    Err(Error::InsufficientData("no atom survived the sweep".into()))
}

fn repositioning_json(stats: &RepositioningStats) -> Value {
    json!({
        "rms_by_transit": stats.rms_by_transit,
        "rms_plus": stats.rms_plus,
        "rms_minus": stats.rms_minus,
        "msd_by_lag": stats.msd_by_lag,
        "growth_per_transit_m": stats.growth.growth_per_transit,
        "growth_variance_m2": stats.growth.growth_variance,
        "growth_variance_err_m2": stats.growth.growth_variance_err,
        "sigma0_m": stats.growth.sigma0,
        "growth_exponent": stats.growth.growth_exponent,
    })
}

fn run_fig3(cfg: &ValidatedConfig, n: usize, seed: u64) -> Result<ScenarioResult> {
    let waveform = fig3_waveform();
    let atoms: Vec<Result<Fig3Atom>> = (0..n)
        .into_par_iter()
        .map(|i| with_trial(i, run_fig3_atom(cfg, &waveform, seed, i)))
        .collect();
    let atoms: Vec<Fig3Atom> = atoms.into_iter().collect::<Result<_>>()?;

    let fits: Vec<Vec<TransitFit>> = atoms.iter().map(|a| a.fits.clone()).collect();
    let truth: Vec<Vec<TransitFit>> = atoms.iter().map(|a| a.truth.clone()).collect();
    let measured = repositioning_statistics(&fits)?;
    let exact = repositioning_statistics(&truth)?;
    let first: Vec<TransitFit> = fits
        .iter()
        .filter_map(|f| f.iter().find(|t| t.transit_index == 0).copied())
        .collect();
    let spread = lateral_spread(&first, cfg)?;
    let mean_unc = {
        let all: Vec<f64> = fits.iter().flatten().map(|f| f.fit_uncertainty).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    };

    let mut result = empty_result(ScenarioName::Fig3, n);
    result.summary = json!({
        "scenario": "fig3",
        "atoms": n,
        "transits": transit_windows(&waveform).len(),
        "sweep": waveform,
        "rms_by_transit": measured.rms_by_transit,
        "growth_per_transit_m": measured.growth.growth_per_transit,
        "growth_exponent": measured.growth.growth_exponent,
        "measured": repositioning_json(&measured),
        "truth": repositioning_json(&exact),
        "mean_fit_uncertainty_m": mean_unc,
        "failed_fits": atoms.iter().map(|a| a.failed_fits).sum::<usize>(),
        "preparation_attempts": atoms.iter().map(|a| a.attempts).sum::<usize>(),
        "sigma_lateral_m": spread.sigma_x,
        "sigma_lateral_raw_m": spread.raw_sigma,
        "lateral_degenerate": spread.degenerate,
        "coupling_reduction": spread.coupling_reduction,
        "implied_temperature_K": spread.implied_temperature,
    });
    let lag_series = |s: &RepositioningStats, label: &str| Series {
        label: label.into(),
        x: s.msd_by_lag.iter().map(|l| l.0 as f64).collect(),
        y: s.msd_by_lag.iter().map(|l| l.1.sqrt()).collect(),
        y_err: None,
    };
    let dir_series = |v: &[(usize, f64)], label: &str| Series {
        label: label.into(),
        x: v.iter().map(|p| p.0 as f64).collect(),
        y: v.iter().map(|p| p.1).collect(),
        y_err: None,
    };
    result.plot.panels = vec![
        Panel {
            name: "A_transit_positions".into(),
            x_label: "transit".into(),
            y_label: "best_offset_m".into(),
            series: fits
                .iter()
                .enumerate()
                .map(|(i, f)| Series {
                    label: format!("atom {i}"),
                    x: f.iter().map(|t| t.transit_index as f64).collect(),
                    y: f.iter().map(|t| t.best_offset).collect(),
                    y_err: Some(f.iter().map(|t| t.fit_uncertainty).collect()),
                })
                .collect(),
        },
        Panel {
            name: "B_rms_deviation".into(),
            x_label: "transit".into(),
            y_label: "rms_deviation_m".into(),
            series: vec![
                Series {
                    label: "measured".into(),
                    x: (0..measured.rms_by_transit.len())
                        .map(|k| k as f64)
                        .collect(),
                    y: measured.rms_by_transit.clone(),
                    y_err: None,
                },
                dir_series(&measured.rms_plus, "measured +"),
                dir_series(&measured.rms_minus, "measured -"),
                Series {
                    label: "truth".into(),
                    x: (0..exact.rms_by_transit.len()).map(|k| k as f64).collect(),
                    y: exact.rms_by_transit.clone(),
                    y_err: None,
                },
                lag_series(&exact, "truth by lag"),
            ],
        },
    ];
    for (i, a) in atoms.into_iter().enumerate() {
        result.traces.push((format!("trace_{i:03}"), a.trace));
        result.fits.extend(a.fits.into_iter().map(|f| (i, f)));
        if cfg.scenario.event_log {
            result.events.extend(a.events.into_iter().map(|mut e| {
                e.atom_id = i;
                e
            }));
        }
    }
    Ok(result)
}

/// Linear interpolation of the first downward crossing of `level`.
pub fn crossing_point(points: &[(f64, f64)], level: f64) -> Option<f64> {
    points.windows(2).find_map(|w| {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if y0 >= level && y1 < level {
            Some(x0 + (y0 - level) * (x1 - x0) / (y0 - y1))
        } else {
            None
        }
    })
}

/// True if no point exceeds an earlier one by more than `k` combined
/// standard errors.
pub fn is_monotone_non_increasing(points: &[SurvivalEstimate], k: f64) -> bool {
    points.iter().enumerate().all(|(i, a)| {
        points[i + 1..].iter().all(|b| {
            let se = (a.std_error().powi(2) + b.std_error().powi(2))
                .sqrt()
                .max(1e-3);
            b.fraction <= a.fraction + k * se
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub amplitude: f64,
    pub frequency: f64,
    pub pump_on: bool,
    pub survival: SurvivalEstimate,
}

fn fig4_waveform(amplitude: f64, frequency: f64) -> SweepWaveform {
    if frequency > 0.0 {
        SweepWaveform::sinusoid(amplitude, frequency, 0.5)
    } else {
        SweepWaveform::constant(0.0, 0.5)
    }
}

/// Survival over the frequency grid for each amplitude and pump setting.
pub fn survival_grid(
    cfg: &ExperimentConfig,
    amplitudes: &[f64],
    frequencies: &[f64],
    trials: usize,
    seed: u64,
    preparation: &Preparation,
) -> Result<Vec<GridPoint>> {
    let mut out = Vec::new();
    for pump_on in [false, true] {
        let mut c = cfg.clone();
        c.pump.pump_on = pump_on;
        for &a in amplitudes {
            for &f in frequencies {
                let s = survival_experiment(
                    &fig4_waveform(a, f),
                    pump_on,
                    trials,
                    &c,
                    seed,
                    preparation,
                )?;
                out.push(GridPoint {
                    amplitude: a,
                    frequency: f,
                    pump_on,
                    survival: s,
                });
            }
        }
    }
    Ok(out)
}

fn run_fig4(cfg: &ValidatedConfig, n: usize, seed: u64) -> Result<ScenarioResult> {
    let preparation = survival_preparation(cfg, seed)?;
    let grid = survival_grid(
        cfg,
        &FIG4_AMPLITUDES,
        &FIG4_FREQUENCIES,
        n,
        seed,
        &preparation,
    )?;
    let curve = |a: f64, pump: bool| -> Vec<&GridPoint> {
        grid.iter()
            .filter(|g| g.amplitude == a && g.pump_on == pump)
            .collect()
    };

    let mut crossings = Vec::new();
    let mut per_amp = Vec::new();
    for &a in &FIG4_AMPLITUDES {
        let off = curve(a, false);
        let on = curve(a, true);
        let pts: Vec<(f64, f64)> = off
            .iter()
            .map(|g| (g.frequency * a, g.survival.fraction))
            .collect();
        let cross = crossing_point(&pts, 0.5);
        if let Some(c) = cross {
            crossings.push(c);
        }
        let ests: Vec<SurvivalEstimate> = off.iter().map(|g| g.survival).collect();
        let dip = on.iter().zip(&off).find(|(p, q)| {
            let se = (p.survival.std_error().powi(2) + q.survival.std_error().powi(2)).sqrt();
            p.frequency > 0.0
                && p.frequency * a < cfg.dynamics.knee_product
                && p.survival.fraction < q.survival.fraction - 2.0 * se
        });
        per_amp.push(json!({
            "amplitude_m": a,
            "knee_product_m_hz": cross,
            "pump_off_monotone": is_monotone_non_increasing(&ests, 2.0),
            "pump_on_dip_frequency_hz": dip.map(|d| d.0.frequency),
            "pump_on_at_max_frequency": on.last().map(|g| g.survival.fraction),
            "pump_off_at_max_frequency": off.last().map(|g| g.survival.fraction),
        }));
    }
    crossings.sort_by(f64::total_cmp);
    let knee = if crossings.is_empty() {
        None
    } else {
        Some(crossings[crossings.len() / 2])
    };

    let mut result = empty_result(ScenarioName::Fig4, n);
    result.summary = json!({
        "scenario": "fig4",
        "trials_per_point": n,
        "preparation": if cfg.scenario.fast_start { "fast_start" } else { "pool" },
        "frequencies_hz": FIG4_FREQUENCIES,
        "amplitudes_m": FIG4_AMPLITUDES,
        "knee_product_m_hz": knee,
        "per_amplitude": per_amp,
        "grid": grid,
    });
    let mut panels = Vec::new();
    for pump in [false, true] {
        panels.push(Panel {
            name: if pump {
                "pump_on".into()
            } else {
                "pump_off".into()
            },
            x_label: "sweep_frequency_hz".into(),
            y_label: "survival_probability".into(),
            series: FIG4_AMPLITUDES
                .iter()
                .map(|&a| {
                    let c = curve(a, pump);
                    Series {
                        label: format!(
                            "{:.0} um, pump {}",
                            a * 1e6,
                            if pump { "on" } else { "off" }
                        ),
                        x: c.iter().map(|g| g.frequency).collect(),
                        y: c.iter().map(|g| g.survival.fraction).collect(),
                        y_err: Some(c.iter().map(|g| g.survival.std_error()).collect()),
                    }
                })
                .collect(),
        });
    }
    result.plot.panels = panels;
    Ok(result)
}

/// Write all artifacts of a scenario to `dir`. Returns the written paths.
pub fn emit_summary(result: &ScenarioResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.trials == 0 {
        return Err(Error::EmptyInput("result has no trials"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, body: &str| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    let summary = json!({
        "provenance": result.provenance,
        "summary": result.summary,
    });
    write("summary.json", &to_pretty(&summary))?;
    write(
        "plot.json",
        &to_pretty(&serde_json::to_value(&result.plot).unwrap_or(Value::Null)),
    )?;
    for (stem, trace) in &result.traces {
        write(&format!("{stem}.csv"), &trace.to_csv())?;
    }
    if !result.fits.is_empty() {
        let mut s = String::from(
            "atom,transit_index,sweep_direction,best_offset_m,peak_rate,fit_uncertainty_m\n",
        );
        for (atom, f) in &result.fits {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e}\n",
                atom,
                f.transit_index,
                f.sweep_direction.symbol(),
                f.best_offset,
                f.peak_rate,
                f.fit_uncertainty
            ));
        }
        write("fits.csv", &s)?;
    }
    if !result.events.is_empty() {
        let mut s = String::from("time_s,event,atom_id,x_position_m\n");
        for e in &result.events {
            s.push_str(&format!(
                "{:.9},{},{},{:e}\n",
                e.time,
                e.kind.as_str(),
                e.atom_id,
                e.x_position
            ));
        }
        write("events.csv", &s)?;
    }
    Ok(written)
}

fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap_or_default();
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    /// Guide oscillation period, s.
    pub guide_period: f64,
    pub lifetime_pump_on: f64,
    pub lifetime_pump_off: f64,
    /// Per-transit RMS repositioning growth, m.
    pub hop_growth: f64,
    /// Onset of transport loss, m·Hz.
    pub knee_product: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            guide_period: 0.2,
            lifetime_pump_on: 15.0,
            lifetime_pump_off: 3.0,
            hop_growth: 135e-9,
            knee_product: 500e-6,
        }
    }
}

impl CalibrationTargets {
    /// Set one target from `key=value`, SI units.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match key {
            "guide_period" => &mut self.guide_period,
            "lifetime_pump_on" => &mut self.lifetime_pump_on,
            "lifetime_pump_off" => &mut self.lifetime_pump_off,
            "hop_growth" => &mut self.hop_growth,
            "knee_product" => &mut self.knee_product,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("unknown calibration target '{other}'"),
                })
            }
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationOptions {
    /// Monte Carlo trials per survival estimate.
    pub trials: usize,
    /// Sweep duration used to measure the cooling-limited lifetime, s.
    pub lifetime_window: f64,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            trials: 400,
            lifetime_window: 5.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationEntry {
    pub parameter: String,
    pub target_name: String,
    pub target: f64,
    pub achieved: f64,
    pub residual: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub entries: Vec<CalibrationEntry>,
    pub converged: bool,
    /// Config lines that apply the calibrated values.
    pub patch: String,
    #[serde(skip)]
    pub config: ExperimentConfig,
}

/// Guide depth that produces the target oscillation period (secant on
/// log depth, at most 20 iterations).
pub fn calibrate_guide_depth(cfg: &ExperimentConfig, target_period: f64) -> CalibrationEntry {
    let period_at = |ln_d: f64| -> Option<f64> {
        let mut c = cfg.clone();
        c.trap.guide_depth = ln_d.exp();
        guide_oscillation_period(&c).ok()
    };
    let resid = |p: f64| (p / target_period).ln();
    let mut x0 = cfg.trap.guide_depth.max(1e-9).ln();
    let mut x1 = x0 + 0.1;
    let mut best = (x0, f64::INFINITY, f64::NAN);
    let mut iterations = 0;
    let mut converged = false;
    let mut f0 = period_at(x0).map(resid);
    for _ in 0..20 {
        iterations += 1;
        let Some(p1) = period_at(x1) else {
            x1 = 0.5 * (x0 + x1);
            continue;
        };
        let f1 = resid(p1);
        if f1.abs() < best.1 {
            best = (x1, f1.abs(), p1);
        }
        if f1.abs() < 1e-6 {
            converged = true;
            break;
        }
        let next = match f0 {
            Some(f0v) if (f1 - f0v).abs() > 1e-15 => x1 - f1 * (x1 - x0) / (f1 - f0v),
            // period ∝ depth^(-1/2) near the solution
            _ => x1 + 2.0 * f1,
        };
        x0 = x1;
        f0 = Some(f1);
        x1 = next;
    }
    if let Some(p0) = period_at(best.0) {
        best.2 = p0;
    }
    CalibrationEntry {
        parameter: "trap.guide_depth".into(),
        target_name: "guide_period".into(),
        target: target_period,
        achieved: best.2,
        residual: best.2 - target_period,
        value: best.0.exp(),
        iterations,
        converged,
    }
}

/// Cooling-limited lifetime of atoms held in the lattice with the pump on,
/// without the background hazard. Returns the point estimate and a
/// conservative lower bound, exposure/(losses + 3).
pub fn cooling_limited_lifetime(
    cfg: &ExperimentConfig,
    opts: &CalibrationOptions,
) -> Result<(f64, f64)> {
    let mut c = cfg.clone();
    c.pump.pump_on = true;
    let model = EnergyModel::new(&c, ModeId::Tem00)?.without_background_loss();
    let waveform = SweepWaveform::constant(0.0, opts.lifetime_window);
    let outcomes: Vec<Result<f64>> = (0..opts.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, domain::CALIBRATION, i as u64);
            let atom = Preparation::FastStart.draw(&c, &mut rng);
            model
                .run(atom, &waveform, true, &mut rng, None)
                .map(|t| t.loss_time.unwrap_or(f64::INFINITY))
        })
        .collect();
    let mut exposure = 0.0;
    let mut losses = 0usize;
    for o in outcomes {
        let t = o?;
        if t.is_finite() {
            losses += 1;
            exposure += t;
        } else {
            exposure += opts.lifetime_window;
        }
    }
    let point = if losses == 0 {
        f64::INFINITY
    } else {
        exposure / losses as f64
    };
    Ok((point, exposure / (losses as f64 + 3.0)))
}

/// Cooling coefficient for which the pump-on lifetime, combining the
/// background hazard with the lower bound on the cooling-limited lifetime,
/// is at least 0.95 × the target. The constraint is one-sided: the
/// configured coefficient is kept if it qualifies, otherwise it is doubled
/// until it does (at most 12 times) and the bracket is narrowed by
/// bisection in log space.
pub fn calibrate_cooling(
    cfg: &ExperimentConfig,
    targets: &CalibrationTargets,
    opts: &CalibrationOptions,
) -> Result<CalibrationEntry> {
    let mut c = cfg.clone();
    c.dynamics.lifetime_pump_on = targets.lifetime_pump_on;
    c.dynamics.lifetime_pump_off = targets.lifetime_pump_off;
    // 1/(1/T + 1/τ) ≥ 0.95·T  ⇔  τ ≥ 19·T
    let need = 19.0 * targets.lifetime_pump_on;
    let mut eval = |beta: f64| -> Result<(f64, f64)> {
        c.dynamics.cooling_coefficient = beta;
        cooling_limited_lifetime(&c, opts)
    };
    let start = cfg.dynamics.cooling_coefficient;
    let mut best = (start, 0.0, 0.0);
    let mut iterations = 0;
    let mut lo = None;
    let mut hi = None;
    let mut beta = start;
    for _ in 0..13 {
        iterations += 1;
        let (point, lower) = eval(beta)?;
        if lower > best.2 {
            best = (beta, point, lower);
        }
        if lower >= need {
            hi = Some((beta, point, lower));
            break;
        }
        lo = Some(beta);
        beta *= 2.0;
    }
    let converged = hi.is_some();
    if let (Some(mut a), Some(mut b)) = (lo, hi) {
        for _ in 0..6 {
            iterations += 1;
            let mid = (a * b.0).sqrt();
            let (point, lower) = eval(mid)?;
            if lower >= need {
                b = (mid, point, lower);
            } else {
                a = mid;
            }
        }
        hi = Some(b);
    }
    if let Some(b) = hi {
        best = b;
    }
    let combined = 1.0 / (1.0 / targets.lifetime_pump_on + 1.0 / best.2);
    Ok(CalibrationEntry {
        parameter: "dynamics.cooling_coefficient".into(),
        target_name: "lifetime_pump_on".into(),
        target: targets.lifetime_pump_on,
        achieved: combined,
        residual: combined - targets.lifetime_pump_on,
        value: best.0,
        iterations,
        converged,
    })
}

/// Hop probability from the per-transit growth, p = (s / spacing)²,
/// checked against a synthetic 71 × 19 data set.
pub fn calibrate_hop(
    cfg: &ExperimentConfig,
    target_growth: f64,
    seed: u64,
) -> Result<CalibrationEntry> {
    let spacing = cfg.trap.well_spacing();
    let p = (target_growth / spacing).powi(2);
    let spec = SyntheticFits {
        atoms: 71,
        hop_probability: p,
        well_spacing: spacing,
        reversal_sigma: cfg.galvo.repeatability_sigma,
        fit_sigma: 0.0,
        lateral_sigma: cfg.scenario.lateral_sigma,
    };
    let mut rng = stream_rng(seed, domain::SYNTHETIC, 0);
    let fits = synthetic_transit_fits(&spec, &fig3_waveform(), &mut rng)?;
    let achieved = repositioning_statistics(&fits)?.growth.growth_per_transit;
    Ok(CalibrationEntry {
        parameter: "dynamics.hop_probability".into(),
        target_name: "hop_growth".into(),
        target: target_growth,
        achieved,
        residual: achieved - target_growth,
        value: p,
        iterations: 1,
        converged: p <= 1.0,
    })
}

/// Pump-off survival after 0.5 s at 25 µm amplitude and the given
/// velocity product.
pub fn pump_off_survival(
    cfg: &ExperimentConfig,
    product: f64,
    trials: usize,
    seed: u64,
    preparation: &Preparation,
) -> Result<SurvivalEstimate> {
    let mut c = cfg.clone();
    c.pump.pump_on = false;
    let a = 25e-6;
    survival_experiment(
        &fig4_waveform(a, product / a),
        false,
        trials,
        &c,
        seed,
        preparation,
    )
}

/// Atom source used by the survival grid: the fast-start injector, or a
/// pool from the full loading and filter sequence.
pub fn survival_preparation(cfg: &ExperimentConfig, seed: u64) -> Result<Preparation> {
    if cfg.scenario.fast_start {
        Ok(Preparation::FastStart)
    } else {
        Ok(Preparation::Pool(prepare_pool(
            cfg,
            ModeId::Tem00,
            FIG4_POOL_SIZE,
            true,
            seed,
        )?))
    }
}

/// Parametric threshold at the knee velocity, and the heating rate for
/// which pump-off survival crosses 50% at 1.15 × the knee product.
pub fn calibrate_parametric(
    cfg: &ExperimentConfig,
    knee_product: f64,
    opts: &CalibrationOptions,
    preparation: &Preparation,
) -> Result<(CalibrationEntry, CalibrationEntry)> {
    let spacing = cfg.trap.well_spacing();
    let f_min = 2.0 * PI * knee_product / spacing;
    let mut c = cfg.clone();
    c.dynamics.knee_product = knee_product;
    c.dynamics.parametric_threshold = Some(f_min);
    let threshold = CalibrationEntry {
        parameter: "dynamics.parametric_threshold".into(),
        target_name: "knee_product".into(),
        target: knee_product,
        achieved: f_min * spacing / (2.0 * PI),
        residual: 0.0,
        value: f_min,
        iterations: 1,
        converged: true,
    };
    let probe = 1.15 * knee_product;
    let survival = |g: f64| -> Result<SurvivalEstimate> {
        let mut cc = c.clone();
        cc.dynamics.parametric_heating_rate = g;
        pump_off_survival(&cc, probe, opts.trials, opts.seed, preparation)
    };
    let (mut lo, mut hi) = (1f64.ln(), 1e4f64.ln());
    let mut best = (c.dynamics.parametric_heating_rate, f64::INFINITY, f64::NAN);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..30 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let s = survival(mid.exp())?;
        let miss = (s.fraction - 0.5).abs();
        if miss < best.1 {
            best = (mid.exp(), miss, s.fraction);
        }
        if miss <= s.std_error().max(0.01) || hi - lo < 1e-3 {
            converged = miss <= 2.0 * s.std_error().max(0.01);
            break;
        }
        if s.fraction > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rate = CalibrationEntry {
        parameter: "dynamics.parametric_heating_rate".into(),
        target_name: "survival_at_1.15_knee".into(),
        target: 0.5,
        achieved: best.2,
        residual: best.2 - 0.5,
        value: best.0,
        iterations,
        converged,
    };
    Ok((threshold, rate))
}

/// Fit the model parameters to the reference observables.
pub fn calibrate(
    targets: &CalibrationTargets,
    cfg: &ExperimentConfig,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    let mut c = cfg.clone();
    let mut entries = Vec::new();

    let guide = calibrate_guide_depth(&c, targets.guide_period);
    c.trap.guide_depth = guide.value;
    entries.push(guide);

    c.dynamics.lifetime_pump_on = targets.lifetime_pump_on;
    c.dynamics.lifetime_pump_off = targets.lifetime_pump_off;
    let cooling = calibrate_cooling(&c, targets, opts)?;
    c.dynamics.cooling_coefficient = cooling.value;
    entries.push(cooling);

    let hop = calibrate_hop(&c, targets.hop_growth, opts.seed)?;
    c.dynamics.hop_probability = hop.value.min(1.0);
    entries.push(hop);

    let preparation = survival_preparation(&c, opts.seed)?;
    let (threshold, rate) = calibrate_parametric(&c, targets.knee_product, opts, &preparation)?;
    c.dynamics.knee_product = targets.knee_product;
    c.dynamics.parametric_threshold = Some(threshold.value);
    c.dynamics.parametric_heating_rate = rate.value;
    entries.push(threshold);
    entries.push(rate);

    let keys = [
        "trap.guide_depth",
        "dynamics.lifetime_pump_on",
        "dynamics.lifetime_pump_off",
        "dynamics.cooling_coefficient",
        "dynamics.hop_probability",
        "dynamics.knee_product",
        "dynamics.parametric_threshold",
        "dynamics.parametric_heating_rate",
    ];
    let patch: String = emit_config(&c)
        .lines()
        .filter(|l| {
            keys.iter()
                .any(|k| l.split('=').next().map(str::trim) == Some(*k))
        })
        .map(|l| format!("{l}\n"))
        .collect();
    Ok(CalibrationReport {
        converged: entries.iter().all(|e| e.converged),
        entries,
        patch,
        config: c,
    })
}
