//! Photon-count traces and their analysis: atom-number steps, transit
//! peak fits, repositioning statistics and lateral spread.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DetectionParams, ExperimentConfig};
use crate::conveyor::{GalvoDrive, GalvoModel, SweepWaveform};
use crate::coupling::{mean_coupling_reduction, temperature_from_spread};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonTrace {
    pub bin_width: f64,
    pub start_time: f64,
    pub counts: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrivals: Option<Vec<f64>>,
}

impl PhotonTrace {
    pub fn duration(&self) -> f64 {
        self.bin_width * self.counts.len() as f64
    }

    pub fn bin_start(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.bin_width
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start_s,counts\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.6},{}\n", self.bin_start(i), c));
        }
        s
    }
}

/// Inhomogeneous Poisson photon arrivals with detected rate
/// `η·rate_fn(t) + background`, generated by thinning against
/// `rate_bound`, which must bound the total detected rate.
pub fn generate_trace<F, R>(
    rate_fn: F,
    start_time: f64,
    duration: f64,
    rate_bound: f64,
    det: &DetectionParams,
    keep_arrivals: bool,
    rng: &mut R,
) -> Result<PhotonTrace>
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let n_bins = (duration / det.bin_width - 1e-9).ceil().max(0.0) as usize;
    let mut counts = vec![0u64; n_bins];
    let mut arrivals = keep_arrivals.then(Vec::new);
    let end = start_time + duration;
    if rate_bound <= 0.0 {
        let r = det.detection_efficiency * rate_fn(start_time) + det.background_rate;
        if r > 0.0 {
            return Err(Error::RateBoundExceeded {
                t: start_time,
                rate: r,
                bound: rate_bound,
            });
        }
        return Ok(PhotonTrace {
            bin_width: det.bin_width,
            start_time,
            counts,
            arrivals,
        });
    }
    let gap = Exp::new(rate_bound).expect("positive bound");
    let mut t = start_time;
    loop {
        t += gap.sample(rng);
        if t >= end {
            break;
        }
        let r = det.detection_efficiency * rate_fn(t) + det.background_rate;
        if r > rate_bound * (1.0 + 1e-12) {
            return Err(Error::RateBoundExceeded {
                t,
                rate: r,
                bound: rate_bound,
            });
        }
        if rng.random::<f64>() * rate_bound < r {
            let bin = (((t - start_time) / det.bin_width) as usize).min(n_bins.saturating_sub(1));
            counts[bin] += 1;
            if let Some(a) = arrivals.as_mut() {
                a.push(t);
            }
        }
    }
    Ok(PhotonTrace {
        bin_width: det.bin_width,
        start_time,
        counts,
        arrivals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChangePoint {
    pub time: f64,
    /// Atom number from this time onward.
    pub n_atoms: u32,
    /// Delay between the change and the end of the window that revealed it.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomNumberTrack {
    pub change_points: Vec<ChangePoint>,
    /// Sliding-window length used for the decision, s.
    pub window: f64,
}

impl AtomNumberTrack {
    /// Atom number at time `t` (0 before the first change point).
    pub fn level_at(&self, t: f64) -> u32 {
        let idx = self.change_points.partition_point(|c| c.time <= t);
        if idx == 0 {
            0
        } else {
            self.change_points[idx - 1].n_atoms
        }
    }
}

const DETECT_Z: f64 = 5.0;
const SWITCH_LEVEL: f64 = 0.75;

/// Segment a trace into intervals of constant atom number.
///
/// A sliding window of bins estimates the level
/// `(rate − background) / single_rate`; the track switches when the
/// estimate leaves the band ±0.75 around the current level. Each switch is
/// then placed at the bin boundary that maximizes the Poisson likelihood of
/// the two neighbouring levels. Jumps of more than one atom are reported as
/// consecutive ±1 change points at the same time.
pub fn detect_atom_number(
    trace: &PhotonTrace,
    det: &DetectionParams,
    single_rate: f64,
) -> Result<AtomNumberTrack> {
    let bg = det.background_rate;
    if single_rate <= 2.0 * bg {
        return Err(Error::InsufficientContrast {
            single: single_rate,
            background: bg,
        });
    }
    let tau = trace.bin_width;
    let b = bg * tau;
    let s = single_rate * tau;
    // window long enough that a two-atom level sits 5σ from the switch band
    let w = ((DETECT_Z / SWITCH_LEVEL).powi(2) * (bg + 2.0 * single_rate)
        / (single_rate * single_rate * tau))
        .ceil()
        .max(1.0) as usize;
    let c = &trace.counts;
    let n = c.len();
    let mut prefix = vec![0u64; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + c[i];
    }
    let sum = |a: usize, e: usize| (prefix[e] - prefix[a]) as f64;

    let mut points = Vec::new();
    let mut level: u32 = 0;
    let mut seg_start = 0usize;
    let mut i = 0usize;
    while i + w <= n {
        let est = (sum(i, i + w) / w as f64 - b) / s;
        if (est - level as f64).abs() > SWITCH_LEVEL {
            let new_level = est.round().max(0.0) as u32;
            if new_level == level {
                i += 1;
                continue;
            }
            let lo = seg_start.max(i.saturating_sub(w));
            let hi = (i + 2 * w).min(n);
            let mu_old = b + level as f64 * s;
            let mu_new = b + new_level as f64 * s;
            let ll = |k: usize| -> f64 {
                let before = sum(lo, k) * mu_old.ln() - (k - lo) as f64 * mu_old;
                let after = sum(k, hi) * mu_new.ln() - (hi - k) as f64 * mu_new;
                before + after
            };
            let mut best = i;
            let mut best_ll = f64::NEG_INFINITY;
            for k in lo..=hi.min(i + w) {
                let v = ll(k);
                if v > best_ll {
                    best_ll = v;
                    best = k;
                }
            }
            let time = trace.bin_start(best);
            let latency = trace.bin_start(i + w) - time;
            let step: i64 = if new_level > level { 1 } else { -1 };
            let mut l = level as i64;
            while l != new_level as i64 {
                l += step;
                points.push(ChangePoint {
                    time,
                    n_atoms: l as u32,
                    latency,
                });
            }
            level = new_level;
            seg_start = best;
            i = best.max(i + 1);
            continue;
        }
        i += 1;
    }
    Ok(AtomNumberTrack {
        change_points: points,
        window: w as f64 * tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Direction {
    pub fn symbol(self) -> &'static str {
        match self {
            Direction::Plus => "+",
            Direction::Minus => "-",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitFit {
    pub transit_index: usize,
    pub sweep_direction: Direction,
    /// Commanded conveyor offset at which the fitted rate peaks, m.
    pub best_offset: f64,
    /// Fitted peak detected rate above background, counts/s.
    pub peak_rate: f64,
    pub fit_uncertainty: f64,
}

/// Time windows `(start, end)` of the transits of a waveform: the stretches
/// between consecutive direction reversals.
pub fn transit_windows(waveform: &SweepWaveform) -> Vec<(f64, f64)> {
    waveform
        .reversal_times()
        .windows(2)
        .map(|w| (w[0], w[1]))
        .collect()
}

const FIT_SUBSTEPS: usize = 8;

/// Poisson maximum-likelihood fit of a Gaussian peak (fixed width
/// `mode_waist`, fixed background) to the counts of one transit, as a
/// function of commanded offset.
pub fn fit_transit(
    trace: &PhotonTrace,
    waveform: &SweepWaveform,
    transit_index: usize,
    det: &DetectionParams,
    mode_waist: f64,
) -> Result<TransitFit> {
    let windows = transit_windows(waveform);
    let &(ta, tb) = windows.get(transit_index).ok_or_else(|| {
        Error::InsufficientData(format!(
            "transit {transit_index} not in waveform ({} transits)",
            windows.len()
        ))
    })?;
    let counts: Vec<f64> = trace.counts.iter().map(|&c| c as f64).collect();
    let direction = if waveform.velocity(0.5 * (ta + tb)) >= 0.0 {
        Direction::Plus
    } else {
        Direction::Minus
    };
    fit_window(&counts, trace, waveform, (ta, tb), det, mode_waist).map(|(u0, h, unc)| TransitFit {
        transit_index,
        sweep_direction: direction,
        best_offset: u0,
        peak_rate: h,
        fit_uncertainty: unc,
    })
}

fn fit_window(
    counts: &[f64],
    trace: &PhotonTrace,
    waveform: &SweepWaveform,
    (ta, tb): (f64, f64),
    det: &DetectionParams,
    w0: f64,
) -> Result<(f64, f64, f64)> {
    let tau = trace.bin_width;
    let bins: Vec<usize> = (0..counts.len())
        .filter(|&i| {
            let mid = trace.bin_start(i) + 0.5 * tau;
            mid >= ta && mid < tb
        })
        .collect();
    if bins.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "{} informative bins in transit window, need at least 5",
            bins.len()
        )));
    }
    let b = det.background_rate * tau;
    let sub_dt = tau / FIT_SUBSTEPS as f64;
    let offsets: Vec<[f64; FIT_SUBSTEPS]> = bins
        .iter()
        .map(|&i| {
            let t0 = trace.bin_start(i);
            std::array::from_fn(|k| {
                let t = (t0 + (k as f64 + 0.5) * sub_dt).clamp(0.0, waveform.duration);
                waveform.offset_unchecked(t)
            })
        })
        .collect();
    let y: Vec<f64> = bins.iter().map(|&i| counts[i]).collect();
    let inv_w2 = 1.0 / (w0 * w0);
    let lo = offsets
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = offsets
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);

    // returns per-bin (mu, d mu/dH, d mu/du0)
    let model = |h: f64, u0: f64| -> Vec<(f64, f64, f64)> {
        offsets
            .iter()
            .map(|us| {
                let mut g = 0.0;
                let mut dg = 0.0;
                for &u in us {
                    let d = u - u0;
                    let e = (-2.0 * d * d * inv_w2).exp();
                    g += e;
                    dg += e * 4.0 * d * inv_w2;
                }
                g *= sub_dt;
                dg *= sub_dt;
                (b + h * g, g, h * dg)
            })
            .collect()
    };
    let loglik = |m: &[(f64, f64, f64)]| -> f64 {
        m.iter()
            .zip(&y)
            .map(|(&(mu, _, _), &c)| {
                if mu > 0.0 {
                    c * mu.ln() - mu
                } else {
                    f64::NEG_INFINITY
                }
            })
            .sum()
    };

    let peak = (0..y.len())
        .max_by(|&a, &c| y[a].total_cmp(&y[c]))
        .unwrap_or(0);
    let mut u0 = offsets[peak][FIT_SUBSTEPS / 2];
    let excess: f64 = y.iter().map(|c| c - b).sum::<f64>().max(1.0);
    // area of a Gaussian in time is roughly w0·√(π/2)/|v|
    let v_mid = (hi - lo) / (tb - ta).max(1e-12);
    let mut h = (excess * v_mid / (w0 * (std::f64::consts::PI / 2.0).sqrt())).max(1.0);
    let mut m = model(h, u0);
    let mut ll = loglik(&m);
    for _ in 0..100 {
        let (mut s0, mut s1, mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&(mu, dh, du), &c) in m.iter().zip(&y) {
            let r = c / mu - 1.0;
            s0 += r * dh;
            s1 += r * du;
            i00 += dh * dh / mu;
            i01 += dh * du / mu;
            i11 += du * du / mu;
        }
        let det_i = i00 * i11 - i01 * i01;
        if !(det_i > 0.0) {
            break;
        }
        let dh = (i11 * s0 - i01 * s1) / det_i;
        let du = (i00 * s1 - i01 * s0) / det_i;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let nh = (h + step * dh).max(1e-3 * h.max(1.0));
            let nu = (u0 + step * du).clamp(lo, hi);
            let nm = model(nh, nu);
            let nll = loglik(&nm);
            if nll >= ll {
                let done = (nu - u0).abs() < 1e-6 * w0 && (nh - h).abs() < 1e-9 * h;
                h = nh;
                u0 = nu;
                m = nm;
                ll = nll;
                improved = !done;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let (mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0);
    for &(mu, dh, du) in &m {
        i00 += dh * dh / mu;
        i01 += dh * du / mu;
        i11 += du * du / mu;
    }
    let det_i = i00 * i11 - i01 * i01;
    let var_u = if det_i > 0.0 {
        i00 / det_i
    } else {
        f64::INFINITY
    };
    let unc = if var_u.is_finite() && var_u > 0.0 {
        var_u.sqrt()
    } else {
        hi - lo
    };
    Ok((u0, h, unc.max(f64::MIN_POSITIVE)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthFit {
    /// Per-transit RMS growth s in σ²(m) = σ0² + m·s², m.
    pub growth_per_transit: f64,
    /// Fitted s² and its standard error, m².
    pub growth_variance: f64,
    pub growth_variance_err: f64,
    pub sigma0: f64,
    /// Exponent α of RMS(m) ∝ m^α.
    pub growth_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepositioningStats {
    /// RMS deviation from the first same-direction transit, by transit index.
    pub rms_by_transit: Vec<f64>,
    /// `(transit lag, mean squared deviation, samples)` pooled over directions.
    pub msd_by_lag: Vec<(usize, f64, usize)>,
    pub rms_plus: Vec<(usize, f64)>,
    pub rms_minus: Vec<(usize, f64)>,
    pub growth: GrowthFit,
}

/// Deviation statistics of repeated transit fits.
///
/// For every atom and sweep direction, each transit's best offset is
/// compared with that atom's first transit in the same direction; the lag
/// is the difference in transit index.
pub fn repositioning_statistics(fits: &[Vec<TransitFit>]) -> Result<RepositioningStats> {
    if fits.is_empty() || fits.iter().all(|f| f.is_empty()) {
        return Err(Error::EmptyInput("no transit fits"));
    }
    let n_transits = fits
        .iter()
        .map(|f| f.iter().map(|t| t.transit_index + 1).max().unwrap_or(0))
        .max()
        .unwrap_or(0);
    let mut sq_by_index = vec![(0.0, 0usize); n_transits];
    let mut sq_by_dir = [
        vec![(0.0, 0usize); n_transits],
        vec![(0.0, 0usize); n_transits],
    ];
    let mut sq_by_lag = vec![(0.0, 0usize); n_transits];
    for atom in fits {
        for dir in [Direction::Plus, Direction::Minus] {
            let mut same: Vec<&TransitFit> =
                atom.iter().filter(|t| t.sweep_direction == dir).collect();
            same.sort_by_key(|t| t.transit_index);
            let Some(reference) = same.first() else {
                continue;
            };
            for t in &same {
                let d = t.best_offset - reference.best_offset;
                let lag = t.transit_index - reference.transit_index;
                sq_by_index[t.transit_index].0 += d * d;
                sq_by_index[t.transit_index].1 += 1;
                let di = usize::from(dir == Direction::Minus);
                sq_by_dir[di][t.transit_index].0 += d * d;
                sq_by_dir[di][t.transit_index].1 += 1;
                sq_by_lag[lag].0 += d * d;
                sq_by_lag[lag].1 += 1;
            }
        }
    }
    let rms = |v: &(f64, usize)| {
        if v.1 > 0 {
            (v.0 / v.1 as f64).sqrt()
        } else {
            0.0
        }
    };
    let rms_by_transit = sq_by_index.iter().map(rms).collect();
    let series = |v: &[(f64, usize)]| -> Vec<(usize, f64)> {
        v.iter()
            .enumerate()
            .filter(|(_, x)| x.1 > 0)
            .map(|(i, x)| (i, rms(x)))
            .collect()
    };
    let msd_by_lag: Vec<(usize, f64, usize)> = sq_by_lag
        .iter()
        .enumerate()
        .filter(|(lag, v)| *lag > 0 && v.1 > 0)
        .map(|(lag, v)| (lag, v.0 / v.1 as f64, v.1))
        .collect();
    let growth = fit_growth(&msd_by_lag)?;
    Ok(RepositioningStats {
        rms_by_transit,
        rms_plus: series(&sq_by_dir[0]),
        rms_minus: series(&sq_by_dir[1]),
        msd_by_lag,
        growth,
    })
}

/// Weighted least squares of msd(m) = a + m·s² with weights from the
/// variance of a mean of squared normal deviates, iterated to
/// self-consistency; plus a log-log slope of RMS against lag.
fn fit_growth(msd: &[(usize, f64, usize)]) -> Result<GrowthFit> {
    if msd.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two lags for the growth fit".into(),
        ));
    }
    let mut a = msd[0].1;
    let mut s2 = 0.0;
    let mut cov = [[0.0; 2]; 2];
    for _ in 0..20 {
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(m, y, n) in msd {
            let model = (a + m as f64 * s2).max(1e-30).max(0.1 * y);
            let w = n as f64 / (2.0 * model * model);
            let x = m as f64;
            sw += w;
            sx += w * x;
            sy += w * y;
            sxx += w * x * x;
            sxy += w * x * y;
        }
        let d = sw * sxx - sx * sx;
        if !(d > 0.0) {
            break;
        }
        let na = (sxx * sy - sx * sxy) / d;
        let ns = (sw * sxy - sx * sy) / d;
        cov = [[sxx / d, -sx / d], [-sx / d, sw / d]];
        let done = (ns - s2).abs() <= 1e-9 * ns.abs().max(1e-30);
        a = na;
        s2 = ns;
        if done {
            break;
        }
    }
    let xs: Vec<(f64, f64)> = msd
        .iter()
        .filter(|x| x.1 > 0.0)
        .map(|&(m, y, _)| ((m as f64).ln(), 0.5 * y.ln()))
        .collect();
    let exponent = if xs.len() >= 2 {
        let n = xs.len() as f64;
        let mx = xs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = xs.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = xs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = xs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    } else {
        0.0
    };
    Ok(GrowthFit {
        growth_per_transit: s2.max(0.0).sqrt(),
        growth_variance: s2,
        growth_variance_err: cov[1][1].max(0.0).sqrt(),
        sigma0: a.max(0.0).sqrt(),
        growth_exponent: exponent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LateralSpread {
    pub sigma_x: f64,
    pub raw_sigma: f64,
    pub mean_fit_variance: f64,
    /// Set when the fit noise exceeds the raw spread and σ is reported as 0.
    pub degenerate: bool,
    pub coupling_reduction: f64,
    /// `None` when σ lies outside the harmonic regime of the trap.
    pub implied_temperature: Option<f64>,
    pub atoms: usize,
}

/// Spread of first-transit positions across atoms, with the mean squared
/// fit uncertainty subtracted.
pub fn lateral_spread(
    first_transits: &[TransitFit],
    cfg: &ExperimentConfig,
) -> Result<LateralSpread> {
    let n = first_transits.len();
    if n < 20 {
        return Err(Error::InsufficientData(format!(
            "lateral spread needs at least 20 atoms, got {n}"
        )));
    }
    let xs: Vec<f64> = first_transits.iter().map(|f| f.best_offset).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let fit_var = first_transits
        .iter()
        .map(|f| f.fit_uncertainty.powi(2))
        .sum::<f64>()
        / n as f64;
    let (sigma, degenerate) = if fit_var > var {
        (0.0, true)
    } else {
        ((var - fit_var).sqrt(), false)
    };
    Ok(LateralSpread {
        sigma_x: sigma,
        raw_sigma: var.sqrt(),
        mean_fit_variance: fit_var,
        degenerate,
        coupling_reduction: mean_coupling_reduction(sigma, cfg.cavity.waist_w0),
        implied_temperature: temperature_from_spread(sigma, cfg.trap.ic_depth, cfg.trap.ic_waist)
            .ok(),
        atoms: n,
    })
}

/// Parameters of a synthetic repositioning data set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticFits {
    pub atoms: usize,
    pub hop_probability: f64,
    pub well_spacing: f64,
    pub reversal_sigma: f64,
    /// Gaussian noise added to each fitted offset, m.
    pub fit_sigma: f64,
    pub lateral_sigma: f64,
}

/// Transit fits for an ensemble of atoms whose true positions follow the
/// hop and galvo models through `waveform`: best offsets are the exact
/// commanded offsets that center each atom, plus optional fit noise.
pub fn synthetic_transit_fits<R: Rng + ?Sized>(
    spec: &SyntheticFits,
    waveform: &SweepWaveform,
    rng: &mut R,
) -> Result<Vec<Vec<TransitFit>>> {
    let windows = transit_windows(waveform);
    let reversals = waveform.reversal_times();
    let galvo_model = GalvoModel {
        repeatability_sigma: spec.reversal_sigma,
        ..GalvoModel::default()
    };
    let lateral = Normal::new(0.0, spec.lateral_sigma.max(0.0)).expect("finite");
    let fit_noise = Normal::new(0.0, spec.fit_sigma.max(0.0)).expect("finite");
    let mut out = Vec::with_capacity(spec.atoms);
    for _ in 0..spec.atoms {
        let x_home = lateral.sample(rng);
        let mut galvo = GalvoDrive::new(galvo_model.clone());
        let mut hop_sum = 0.0;
        let mut shift_after = Vec::with_capacity(reversals.len());
        for &tr in &reversals {
            galvo.realized_offset(waveform.offset_unchecked(tr), true, rng)?;
            if spec.hop_probability > 0.0 && rng.random::<f64>() < spec.hop_probability {
                hop_sum += if rng.random::<bool>() {
                    spec.well_spacing
                } else {
                    -spec.well_spacing
                };
            }
            shift_after.push(hop_sum + galvo.error());
        }
        let fits = windows
            .iter()
            .enumerate()
            .map(|(k, &(ta, tb))| {
                let noise = if spec.fit_sigma > 0.0 {
                    fit_noise.sample(rng)
                } else {
                    0.0
                };
                TransitFit {
                    transit_index: k,
                    sweep_direction: if waveform.velocity(0.5 * (ta + tb)) >= 0.0 {
                        Direction::Plus
                    } else {
                        Direction::Minus
                    },
                    best_offset: -(x_home + shift_after[k]) + noise,
                    peak_rate: 0.0,
                    fit_uncertainty: spec.fit_sigma.max(1e-12),
                }
            })
            .collect();
        out.push(fits);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn det() -> DetectionParams {
        DetectionParams {
            detection_efficiency: 0.03,
            background_rate: 5000.0,
            bin_width: 1e-3,
        }
    }

    #[test]
    fn background_only_mean() {
        let mut rng = stream_rng(1, 0, 0);
        let tr = generate_trace(|_| 0.0, 0.0, 1.0, 5000.0, &det(), false, &mut rng).unwrap();
        assert_eq!(tr.counts.len(), 1000);
        let mean = tr.counts.iter().sum::<u64>() as f64 / 1000.0;
        assert!((mean - 5.0).abs() < 0.3);
    }

    #[test]
    fn index_of_dispersion_is_one() {
        let mut rng = stream_rng(2, 0, 0);
        let tr = generate_trace(
            |_| 5e5,
            0.0,
            10.0,
            0.03 * 5e5 + 5000.0,
            &det(),
            false,
            &mut rng,
        )
        .unwrap();
        let n = tr.counts.len() as f64;
        let mean = tr.counts.iter().sum::<u64>() as f64 / n;
        let var = tr
            .counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((var / mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn bound_violation_is_error() {
        let mut rng = stream_rng(3, 0, 0);
        let r = generate_trace(|_| 1e6, 0.0, 0.1, 1e4, &det(), false, &mut rng);
        assert!(matches!(r, Err(Error::RateBoundExceeded { .. })));
    }

    #[test]
    fn total_counts_match_integral() {
        // oracle: ∫(η·rate + bg) dt with a linear ramp
        let d = det();
        let mut rng = stream_rng(4, 0, 0);
        let expect: f64 = 0.03 * 0.5 * 4e5 * 0.2 + 5000.0 * 0.2;
        let mut sum = 0.0;
        for _ in 0..100 {
            let tr = generate_trace(
                |t| 4e5 * t / 0.2,
                0.0,
                0.2,
                0.03 * 4e5 + 5000.0,
                &d,
                true,
                &mut rng,
            )
            .unwrap();
            let c = tr.counts.iter().sum::<u64>();
            assert_eq!(c as usize, tr.arrivals.as_ref().unwrap().len());
            sum += c as f64;
        }
        let sd = (expect * 100.0).sqrt();
        assert!((sum - 100.0 * expect).abs() < 3.0 * sd);
    }

    fn step_trace(
        levels: &[(f64, u32)],
        duration: f64,
        d: &DetectionParams,
        seed: u64,
    ) -> PhotonTrace {
        let single = 0.03 * 6.54e5;
        let lv = levels.to_vec();
        let rate = move |t: f64| {
            let n = lv.iter().rfind(|l| l.0 <= t).map(|l| l.1).unwrap_or(0);
            n as f64 * single / 0.03
        };
        let mut rng = stream_rng(seed, 0, 0);
        generate_trace(
            rate,
            0.0,
            duration,
            3.0 * single + 5000.0,
            d,
            false,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn single_step_is_found() {
        let d = det();
        let tr = step_trace(&[(0.1, 1)], 0.3, &d, 5);
        let track = detect_atom_number(&tr, &d, 0.03 * 6.54e5).unwrap();
        assert_eq!(track.change_points.len(), 1);
        let cp = track.change_points[0];
        assert_eq!(cp.n_atoms, 1);
        assert!((cp.time - 0.1).abs() < 5e-3);
    }

    #[test]
    fn two_atoms_read_as_two() {
        let d = det();
        let tr = step_trace(&[(0.0, 2), (0.2, 1), (0.35, 0)], 0.5, &d, 6);
        let track = detect_atom_number(&tr, &d, 0.03 * 6.54e5).unwrap();
        assert_eq!(track.level_at(0.1), 2);
        assert_eq!(track.level_at(0.3), 1);
        assert_eq!(track.level_at(0.45), 0);
        for w in track.change_points.windows(2) {
            assert_eq!((w[0].n_atoms as i64 - w[1].n_atoms as i64).abs(), 1);
        }
    }

    #[test]
    fn flat_background_has_no_change() {
        let d = det();
        let tr = step_trace(&[], 1.0, &d, 7);
        let track = detect_atom_number(&tr, &d, 0.03 * 6.54e5).unwrap();
        assert!(track.change_points.is_empty());
        assert_eq!(track.level_at(0.5), 0);
    }

    #[test]
    fn low_contrast_is_rejected() {
        let d = det();
        let tr = step_trace(&[], 0.1, &d, 8);
        assert!(matches!(
            detect_atom_number(&tr, &d, 9000.0),
            Err(Error::InsufficientContrast { .. })
        ));
    }

    fn transit_trace(
        x_atom: f64,
        height: f64,
        d: &DetectionParams,
        w: &SweepWaveform,
        seed: u64,
    ) -> PhotonTrace {
        let w0 = 29.5e-6;
        let wc = w.clone();
        let rate = move |t: f64| {
            let x = x_atom + wc.offset_unchecked(t.min(wc.duration));
            height / d.detection_efficiency * (-2.0 * x * x / (w0 * w0)).exp()
        };
        let mut rng = stream_rng(seed, 0, 0);
        let dd = d.clone();
        generate_trace(
            rate,
            0.0,
            w.duration,
            height + dd.background_rate,
            &dd,
            false,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_recovery_of_displaced_atom() {
        let mut d = det();
        d.bin_width = 1e-3;
        d.background_rate = 0.0;
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        // very bright peak: shot noise negligible
        let tr = transit_trace(-10e-6, 5e8, &d, &w, 9);
        let f = fit_transit(&tr, &w, 2, &d, 29.5e-6).unwrap();
        assert!((f.best_offset - 10e-6).abs() < 0.1e-6, "{}", f.best_offset);
        let tr = transit_trace(0.0, 5e8, &d, &w, 10);
        let f = fit_transit(&tr, &w, 3, &d, 29.5e-6).unwrap();
        assert!(f.best_offset.abs() < 0.05e-6);
    }

    #[test]
    fn fit_is_unbiased() {
        let mut d = det();
        d.bin_width = 2e-3;
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        let x0 = 3e-6;
        let mut sum = 0.0;
        let mut unc = 0.0;
        let mut n = 0;
        for seed in 0..60 {
            let tr = transit_trace(-x0, 0.03 * 6.54e5, &d, &w, 100 + seed);
            for k in 0..19 {
                let f = fit_transit(&tr, &w, k, &d, 29.5e-6).unwrap();
                sum += f.best_offset - x0;
                unc += f.fit_uncertainty;
                n += 1;
            }
        }
        let bias = sum / n as f64;
        let unc = unc / n as f64;
        assert!(bias.abs() < unc / 3.0, "bias {bias} unc {unc}");
        assert!(unc > 0.5e-6 && unc < 4e-6);
    }

    #[test]
    fn too_few_bins_is_error() {
        let mut d = det();
        d.bin_width = 10e-3;
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        let tr = transit_trace(0.0, 2e4, &d, &w, 11);
        assert!(matches!(
            fit_transit(&tr, &w, 0, &d, 29.5e-6),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn fig3_waveform_has_19_transits() {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        let t = transit_windows(&w);
        assert_eq!(t.len(), 19);
    }

    fn synth(p: f64, rev: f64, fit: f64, atoms: usize, seed: u64) -> Vec<Vec<TransitFit>> {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        let mut rng = stream_rng(seed, 0, 0);
        synthetic_transit_fits(
            &SyntheticFits {
                atoms,
                hop_probability: p,
                well_spacing: 515e-9,
                reversal_sigma: rev,
                fit_sigma: fit,
                lateral_sigma: 7.7e-6,
            },
            &w,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_rms() {
        let fits = synth(0.0, 0.0, 0.0, 10, 12);
        let s = repositioning_statistics(&fits).unwrap();
        assert_eq!(s.rms_by_transit.len(), 19);
        assert!(s.rms_by_transit.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn null_model_growth_is_consistent_with_zero() {
        let fits = synth(0.0, 0.0, 2e-6, 71, 13);
        let g = repositioning_statistics(&fits).unwrap().growth;
        assert!(
            g.growth_variance.abs() < 2.0 * g.growth_variance_err,
            "{g:?}"
        );
        assert!((g.sigma0 - 2f64.sqrt() * 2e-6).abs() < 0.5e-6);
    }

    #[test]
    fn permutation_invariance() {
        let mut fits = synth(0.069, 15e-9, 0.0, 30, 14);
        let a = repositioning_statistics(&fits).unwrap();
        fits.reverse();
        fits.swap(3, 17);
        let b = repositioning_statistics(&fits).unwrap();
        for (x, y) in a.rms_by_transit.iter().zip(&b.rms_by_transit) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-30));
        }
        assert!((a.growth.growth_per_transit - b.growth.growth_per_transit).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(
            repositioning_statistics(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn lateral_spread_recovery() {
        let c = ExperimentConfig::default();
        let fits = synth(0.0, 0.0, 0.0, 68, 15);
        let first: Vec<_> = fits.iter().map(|f| f[0]).collect();
        let l = lateral_spread(&first, &c).unwrap();
        assert!((l.sigma_x - 7.7e-6).abs() < 0.15 * 7.7e-6, "{}", l.sigma_x);
        let zero: Vec<_> = first
            .iter()
            .map(|f| TransitFit {
                best_offset: 0.0,
                ..*f
            })
            .collect();
        assert_eq!(lateral_spread(&zero, &c).unwrap().sigma_x, 0.0);
        assert!(lateral_spread(&first[..10], &c).is_err());
        let r = mean_coupling_reduction(7.7e-6, 29.5e-6);
        assert!((r - 0.062).abs() < 0.001);
    }

    #[test]
    fn degenerate_deconvolution_is_flagged() {
        let c = ExperimentConfig::default();
        let first: Vec<_> = synth(0.0, 0.0, 0.0, 30, 16)
            .iter()
            .map(|f| TransitFit {
                fit_uncertainty: 50e-6,
                ..f[0]
            })
            .collect();
        let l = lateral_spread(&first, &c).unwrap();
        assert!(l.degenerate);
        assert_eq!(l.sigma_x, 0.0);
    }
}
