//! Line-oriented `key = value unit` config format.
//!
//! ```text
//! # reference cavity
//! cavity.length = 490 um
//! cavity.kappa_tem00 = 5 MHz*2pi
//! pump.pump_on = true
//! sweep { kind = sinusoid, amplitude = 25 um, frequency = 20 Hz, duration = 0.5 s, return = true }
//! ```
//!
//! Values are converted to SI at parse time. Dimensional fields require a
//! unit; dimensionless ones accept a bare number.

use std::f64::consts::PI;
use std::fmt::Write as _;

use super::ExperimentConfig;
use crate::conveyor::{SweepKind, SweepWaveform};
use crate::dynamics::HeatingModel;
use crate::error::{Error, Result};
use crate::optics::ModeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Dimensionless,
    Length,
    Time,
    Temperature,
    AngularRate,
    Rate,
    Power,
    Mass,
    Energy,
    Action,
    HeatCapacity,
    Velocity,
    Friction,
    Angle,
    LengthPerAngle,
    LengthRate,
}

const UNITS: &[(&str, Dimension, f64)] = &[
    ("m", Dimension::Length, 1.0),
    ("cm", Dimension::Length, 1e-2),
    ("mm", Dimension::Length, 1e-3),
    ("um", Dimension::Length, 1e-6),
    ("µm", Dimension::Length, 1e-6),
    ("nm", Dimension::Length, 1e-9),
    ("s", Dimension::Time, 1.0),
    ("ms", Dimension::Time, 1e-3),
    ("us", Dimension::Time, 1e-6),
    ("µs", Dimension::Time, 1e-6),
    ("ns", Dimension::Time, 1e-9),
    ("K", Dimension::Temperature, 1.0),
    ("mK", Dimension::Temperature, 1e-3),
    ("uK", Dimension::Temperature, 1e-6),
    ("µK", Dimension::Temperature, 1e-6),
    ("nK", Dimension::Temperature, 1e-9),
    ("rad/s", Dimension::AngularRate, 1.0),
    ("Hz*2pi", Dimension::AngularRate, 2.0 * PI),
    ("kHz*2pi", Dimension::AngularRate, 2.0 * PI * 1e3),
    ("MHz*2pi", Dimension::AngularRate, 2.0 * PI * 1e6),
    ("2pi*Hz", Dimension::AngularRate, 2.0 * PI),
    ("2pi*kHz", Dimension::AngularRate, 2.0 * PI * 1e3),
    ("2pi*MHz", Dimension::AngularRate, 2.0 * PI * 1e6),
    ("Hz", Dimension::Rate, 1.0),
    ("kHz", Dimension::Rate, 1e3),
    ("MHz", Dimension::Rate, 1e6),
    ("1/s", Dimension::Rate, 1.0),
    ("/s", Dimension::Rate, 1.0),
    ("counts/s", Dimension::Rate, 1.0),
    ("W", Dimension::Power, 1.0),
    ("mW", Dimension::Power, 1e-3),
    ("kg", Dimension::Mass, 1.0),
    ("J", Dimension::Energy, 1.0),
    ("J*s", Dimension::Action, 1.0),
    ("J/K", Dimension::HeatCapacity, 1.0),
    ("m/s", Dimension::Velocity, 1.0),
    ("mm/s", Dimension::Velocity, 1e-3),
    ("kg/s", Dimension::Friction, 1.0),
    ("rad", Dimension::Angle, 1.0),
    ("mrad", Dimension::Angle, 1e-3),
    ("deg", Dimension::Angle, PI / 180.0),
    ("m/rad", Dimension::LengthPerAngle, 1.0),
    ("mm/rad", Dimension::LengthPerAngle, 1e-3),
    ("um/rad", Dimension::LengthPerAngle, 1e-6),
    ("m*Hz", Dimension::LengthRate, 1.0),
    ("um*Hz", Dimension::LengthRate, 1e-6),
    ("ppm", Dimension::Dimensionless, 1e-6),
    ("%", Dimension::Dimensionless, 1e-2),
];

fn unit_factor(unit: &str, dim: Dimension) -> Option<f64> {
    UNITS
        .iter()
        .find(|(u, d, _)| *u == unit && *d == dim)
        .map(|(_, _, f)| *f)
}

/// Parses `"<number> [unit]"` into an SI value of the requested dimension.
pub fn parse_quantity(text: &str, dim: Dimension) -> std::result::Result<f64, String> {
    let text = text.trim();
    let (num, unit) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let value: f64 = num
        .parse()
        .map_err(|_| format!("'{num}' is not a number"))?;
    if unit.is_empty() {
        return if dim == Dimension::Dimensionless {
            Ok(value)
        } else {
            Err(format!("missing unit (expected {dim:?})"))
        };
    }
    unit_factor(unit, dim)
        .map(|f| value * f)
        .ok_or_else(|| format!("unit '{unit}' is not a {dim:?} unit"))
}

fn parse_bool(text: &str) -> std::result::Result<bool, String> {
    match text.trim() {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        other => Err(format!("'{other}' is not a boolean")),
    }
}

fn fmt_quantity(value: f64, unit: &str) -> String {
    let factor = UNITS
        .iter()
        .find(|(u, _, _)| *u == unit)
        .map(|(_, _, f)| *f)
        .unwrap_or(1.0);
    if unit.is_empty() {
        format!("{value}")
    } else {
        format!("{} {unit}", value / factor)
    }
}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>;

struct Field {
    key: &'static str,
    get: Getter,
    set: Setter,
}

macro_rules! num {
    ($key:literal, $dim:ident, $unit:literal, $($path:ident).+) => {
        Field {
            key: $key,
            get: |c| fmt_quantity(c.$($path).+, $unit),
            set: |c, s| {
                c.$($path).+ = parse_quantity(s, Dimension::$dim)?;
                Ok(())
            },
        }
    };
}

macro_rules! flag {
    ($key:literal, $($path:ident).+) => {
        Field {
            key: $key,
            get: |c| c.$($path).+.to_string(),
            set: |c, s| {
                c.$($path).+ = parse_bool(s)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        num!(
            "constants.boltzmann_constant",
            HeatCapacity,
            "J/K",
            constants.boltzmann_constant
        ),
        num!(
            "constants.speed_of_light",
            Velocity,
            "m/s",
            constants.speed_of_light
        ),
        num!(
            "constants.reduced_planck",
            Action,
            "J*s",
            constants.reduced_planck
        ),
        num!("constants.atom_mass", Mass, "kg", constants.atom_mass),
        num!(
            "constants.d2_wavelength",
            Length,
            "nm",
            constants.d2_wavelength
        ),
        num!("cavity.length", Length, "um", cavity.length),
        num!("cavity.mirror_roc", Length, "mm", cavity.mirror_roc),
        num!(
            "cavity.transmission_t0",
            Dimensionless,
            "ppm",
            cavity.transmission_t0
        ),
        num!(
            "cavity.transmission_t1",
            Dimensionless,
            "ppm",
            cavity.transmission_t1
        ),
        num!("cavity.waist_w0", Length, "um", cavity.waist_w0),
        num!(
            "cavity.kappa_tem00",
            AngularRate,
            "MHz*2pi",
            cavity.kappa_tem00
        ),
        num!(
            "cavity.kappa_tem01",
            AngularRate,
            "MHz*2pi",
            cavity.kappa_tem01
        ),
        num!("cavity.g0_tem00", AngularRate, "MHz*2pi", cavity.g0_tem00),
        num!("cavity.g0_tem01", AngularRate, "MHz*2pi", cavity.g0_tem01),
        num!(
            "cavity.gamma_atom",
            AngularRate,
            "MHz*2pi",
            cavity.gamma_atom
        ),
        num!("trap.sw_wavelength", Length, "nm", trap.sw_wavelength),
        num!("trap.sw_power", Power, "W", trap.sw_power),
        num!("trap.sw_waist", Length, "um", trap.sw_waist),
        num!("trap.sw_depth", Temperature, "mK", trap.sw_depth),
        num!("trap.ic_depth", Temperature, "uK", trap.ic_depth),
        num!("trap.ic_waist", Length, "um", trap.ic_waist),
        Field {
            key: "trap.ic_fsr_offset",
            get: |c| c.trap.ic_fsr_offset.to_string(),
            set: |c, s| {
                c.trap.ic_fsr_offset = s
                    .trim()
                    .parse()
                    .map_err(|_| format!("'{s}' is not a non-negative integer"))?;
                Ok(())
            },
        },
        num!(
            "trap.guide_transport_distance",
            Length,
            "mm",
            trap.guide_transport_distance
        ),
        num!(
            "trap.guide_oscillation_period",
            Time,
            "ms",
            trap.guide_oscillation_period
        ),
        num!("trap.guide_depth", Temperature, "mK", trap.guide_depth),
        num!("trap.guide_waist", Length, "um", trap.guide_waist),
        num!(
            "pump.rabi_frequency",
            AngularRate,
            "MHz*2pi",
            pump.rabi_frequency
        ),
        num!("pump.stark_shift", AngularRate, "MHz*2pi", pump.stark_shift),
        flag!("pump.pump_on", pump.pump_on),
        num!(
            "detection.detection_efficiency",
            Dimensionless,
            "",
            detection.detection_efficiency
        ),
        num!(
            "detection.background_rate",
            Rate,
            "Hz",
            detection.background_rate
        ),
        num!("detection.bin_width", Time, "ms", detection.bin_width),
        num!(
            "galvo.path_to_displacement_gain",
            Dimensionless,
            "",
            galvo.path_to_displacement_gain
        ),
        num!(
            "galvo.angle_to_path",
            LengthPerAngle,
            "mm/rad",
            galvo.angle_to_path
        ),
        num!(
            "galvo.repeatability_sigma",
            Length,
            "nm",
            galvo.repeatability_sigma
        ),
        num!("galvo.angle_limit", Angle, "rad", galvo.angle_limit),
        num!("dynamics.timestep", Time, "ns", dynamics.timestep),
        num!(
            "dynamics.energy_timestep",
            Time,
            "us",
            dynamics.energy_timestep
        ),
        num!(
            "dynamics.cooling_coefficient",
            Friction,
            "kg/s",
            dynamics.cooling_coefficient
        ),
        num!(
            "dynamics.hop_probability",
            Dimensionless,
            "",
            dynamics.hop_probability
        ),
        num!(
            "dynamics.parametric_heating_rate",
            Rate,
            "1/s",
            dynamics.parametric_heating_rate
        ),
        Field {
            key: "dynamics.parametric_threshold",
            get: |c| match c.dynamics.parametric_threshold {
                Some(f) => fmt_quantity(f, "Hz"),
                None => "auto".to_string(),
            },
            set: |c, s| {
                c.dynamics.parametric_threshold = if s.trim() == "auto" {
                    None
                } else {
                    Some(parse_quantity(s, Dimension::Rate)?)
                };
                Ok(())
            },
        },
        num!(
            "dynamics.modulation_depth",
            Dimensionless,
            "",
            dynamics.modulation_depth
        ),
        Field {
            key: "dynamics.heating_model",
            get: |c| match c.dynamics.heating_model {
                HeatingModel::Threshold => "threshold".into(),
                HeatingModel::ResonanceBand => "resonance_band".into(),
            },
            set: |c, s| {
                c.dynamics.heating_model = match s.trim() {
                    "threshold" => HeatingModel::Threshold,
                    "resonance_band" => HeatingModel::ResonanceBand,
                    other => return Err(format!("unknown heating model '{other}'")),
                };
                Ok(())
            },
        },
        num!(
            "dynamics.resonance_bandwidth",
            Rate,
            "Hz",
            dynamics.resonance_bandwidth
        ),
        num!(
            "dynamics.knee_product",
            LengthRate,
            "um*Hz",
            dynamics.knee_product
        ),
        num!(
            "dynamics.loss_energy_margin",
            Dimensionless,
            "",
            dynamics.loss_energy_margin
        ),
        num!(
            "dynamics.lifetime_pump_off",
            Time,
            "s",
            dynamics.lifetime_pump_off
        ),
        num!(
            "dynamics.lifetime_pump_on",
            Time,
            "s",
            dynamics.lifetime_pump_on
        ),
        num!(
            "dynamics.injection_temperature",
            Temperature,
            "uK",
            dynamics.injection_temperature
        ),
        flag!(
            "dynamics.free_space_scattering",
            dynamics.free_space_scattering
        ),
        num!("arrival.mean_atoms", Dimensionless, "", arrival.mean_atoms),
        num!("arrival.cloud_sigma_x", Length, "um", arrival.cloud_sigma_x),
        num!(
            "arrival.velocity_sigma_x",
            Velocity,
            "m/s",
            arrival.velocity_sigma_x
        ),
        num!(
            "arrival.transverse_temperature",
            Temperature,
            "uK",
            arrival.transverse_temperature
        ),
        num!("arrival.load_duration", Time, "ms", arrival.load_duration),
        num!(
            "arrival.filter_duration",
            Time,
            "ms",
            arrival.filter_duration
        ),
        num!(
            "arrival.capture_radius",
            Length,
            "um",
            arrival.capture_radius
        ),
        flag!("scenario.fast_start", scenario.fast_start),
        num!(
            "scenario.lateral_sigma",
            Length,
            "um",
            scenario.lateral_sigma
        ),
        Field {
            key: "scenario.atoms",
            get: |c| c.scenario.atoms.to_string(),
            set: |c, s| {
                c.scenario.atoms = s
                    .trim()
                    .parse()
                    .map_err(|_| format!("'{s}' is not a non-negative integer"))?;
                Ok(())
            },
        },
        Field {
            key: "scenario.mode",
            get: |c| c.scenario.mode.to_string(),
            set: |c, s| {
                c.scenario.mode = s.trim().parse()?;
                Ok(())
            },
        },
        flag!("scenario.event_log", scenario.event_log),
    ]
}

/// Parses a config document on top of the reference defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    patch_config(&ExperimentConfig::default(), text)
}

/// Applies a config document on top of `base`.
pub fn patch_config(base: &ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let table = fields();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("sweep") {
            let body = rest
                .trim()
                .strip_prefix('{')
                .and_then(|b| b.strip_suffix('}'))
                .ok_or_else(|| err("sweep block must be 'sweep { ... }' on one line".into()))?;
            cfg.scenario.sweep = Some(parse_sweep(body).map_err(err)?);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let field = table
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| err(format!("unknown key '{key}'")))?;
        (field.set)(&mut cfg, value.trim()).map_err(|m| err(format!("{key}: {m}")))?;
    }
    Ok(cfg)
}

fn parse_sweep(body: &str) -> std::result::Result<SweepWaveform, String> {
    let mut kind = None;
    let mut amplitude = 0.0;
    let mut frequency = 0.0;
    let mut center = 0.0;
    let mut duration = None;
    let mut ret = false;
    let mut points = Vec::new();
    for item in body.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("expected 'key = value' in sweep block, got '{item}'"))?;
        let v = v.trim();
        match k.trim() {
            "kind" => kind = Some(v.to_string()),
            "amplitude" => amplitude = parse_quantity(v, Dimension::Length)?,
            "frequency" => frequency = parse_quantity(v, Dimension::Rate)?,
            "center" => center = parse_quantity(v, Dimension::Length)?,
            "duration" => duration = Some(parse_quantity(v, Dimension::Time)?),
            "return" | "return_to_start" => ret = parse_bool(v)?,
            "points" => {
                for p in v.split(';') {
                    let toks: Vec<_> = p.split_whitespace().collect();
                    if toks.len() != 4 {
                        return Err(format!("point '{p}' must read '<t> <unit> <x> <unit>'"));
                    }
                    let t = parse_quantity(&format!("{} {}", toks[0], toks[1]), Dimension::Time)?;
                    let x = parse_quantity(&format!("{} {}", toks[2], toks[3]), Dimension::Length)?;
                    points.push((t, x));
                }
            }
            other => return Err(format!("unknown sweep key '{other}'")),
        }
    }
    let duration = duration.ok_or("sweep block needs a duration")?;
    let kind = match kind.as_deref() {
        Some("constant") => SweepKind::Constant,
        Some("sinusoid") => SweepKind::Sinusoid {
            amplitude,
            frequency,
        },
        Some("piecewise") | Some("piecewise_linear") => SweepKind::PiecewiseLinear { points },
        Some(other) => return Err(format!("unknown sweep kind '{other}'")),
        None => return Err("sweep block needs a kind".into()),
    };
    Ok(SweepWaveform {
        kind,
        center,
        duration,
        return_to_start: ret,
    })
}

fn emit_sweep(w: &SweepWaveform) -> String {
    let mut s = String::from("sweep { ");
    match &w.kind {
        SweepKind::Constant => s.push_str("kind = constant, "),
        SweepKind::Sinusoid {
            amplitude,
            frequency,
        } => {
            let _ = write!(
                s,
                "kind = sinusoid, amplitude = {}, frequency = {}, ",
                fmt_quantity(*amplitude, "um"),
                fmt_quantity(*frequency, "Hz")
            );
        }
        SweepKind::PiecewiseLinear { points } => {
            let pts: Vec<_> = points
                .iter()
                .map(|(t, x)| format!("{} {}", fmt_quantity(*t, "s"), fmt_quantity(*x, "um")))
                .collect();
            let _ = write!(s, "kind = piecewise, points = {}, ", pts.join("; "));
        }
    }
    let _ = write!(
        s,
        "center = {}, duration = {}, return = {} }}",
        fmt_quantity(w.center, "um"),
        fmt_quantity(w.duration, "s"),
        w.return_to_start
    );
    s
}

/// Renders every field in its convenience unit; parsing the output yields
/// the same configuration up to unit-conversion rounding.
pub fn emit_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for f in fields() {
        let sec = f.key.split('.').next().unwrap_or("");
        if sec != section {
            if !section.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "# {sec}");
            section = sec;
        }
        let _ = writeln!(out, "{} = {}", f.key, (f.get)(cfg));
    }
    if let Some(w) = &cfg.scenario.sweep {
        let _ = writeln!(out, "{}", emit_sweep(w));
    }
    out
}

impl std::str::FromStr for ModeId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "TEM00" => Ok(ModeId::Tem00),
            "TEM01" => Ok(ModeId::Tem01),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}
