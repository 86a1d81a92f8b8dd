//! Physical constants, experiment parameters, validation and derived quantities.
//!
//! Everything is stored in SI units. Rates that the literature quotes as
//! `2π × f` are stored as angular frequencies in rad/s; trap depths are
//! stored as temperatures in kelvin and converted with the Boltzmann constant
//! where an energy is needed.

mod text;

use std::f64::consts::PI;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conveyor::GalvoModel;
use crate::coupling;
use crate::dynamics::{ArrivalParams, DynamicsParams};
use crate::error::{Error, Result, Violation};
use crate::optics::ModeId;
use crate::scenario::ScenarioOptions;

pub use text::{emit_config, parse_config, parse_quantity, patch_config, Dimension};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// J/K
    pub boltzmann_constant: f64,
    /// m/s
    pub speed_of_light: f64,
    /// J·s
    pub reduced_planck: f64,
    /// kg, ⁸⁵Rb
    pub atom_mass: f64,
    /// m
    pub d2_wavelength: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            boltzmann_constant: 1.380_649e-23,
            speed_of_light: 299_792_458.0,
            reduced_planck: 1.054_571_817e-34,
            atom_mass: 1.4100e-25,
            d2_wavelength: 780.24e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    pub length: f64,
    pub mirror_roc: f64,
    pub transmission_t0: f64,
    pub transmission_t1: f64,
    pub waist_w0: f64,
    pub kappa_tem00: f64,
    pub kappa_tem01: f64,
    pub g0_tem00: f64,
    pub g0_tem01: f64,
    pub gamma_atom: f64,
}

impl Default for CavityParams {
    fn default() -> Self {
        Self {
            length: 490e-6,
            mirror_roc: 0.05,
            transmission_t0: 2e-6,
            transmission_t1: 95e-6,
            waist_w0: 29.5e-6,
            kappa_tem00: 2.0 * PI * 5e6,
            kappa_tem01: 2.0 * PI * 2.5e6,
            g0_tem00: 2.0 * PI * 5e6,
            g0_tem01: 2.0 * PI * 4.3e6,
            gamma_atom: 2.0 * PI * 3e6,
        }
    }
}

impl CavityParams {
    pub fn kappa(&self, mode: ModeId) -> f64 {
        match mode {
            ModeId::Tem00 => self.kappa_tem00,
            ModeId::Tem01 => self.kappa_tem01,
        }
    }

    pub fn g0(&self, mode: ModeId) -> f64 {
        match mode {
            ModeId::Tem00 => self.g0_tem00,
            ModeId::Tem01 => self.g0_tem01,
        }
    }

    /// Free spectral range c/2L in Hz.
    pub fn fsr(&self, c: f64) -> f64 {
        c / (2.0 * self.length)
    }

    /// Waist of the fundamental mode of a symmetric two-mirror resonator.
    pub fn resonator_waist(&self, wavelength: f64) -> f64 {
        let l = self.length;
        let r = self.mirror_roc;
        let w2 = wavelength / PI * 0.5 * (l * (2.0 * r - l)).sqrt();
        w2.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapParams {
    pub sw_wavelength: f64,
    pub sw_power: f64,
    pub sw_waist: f64,
    /// K
    pub sw_depth: f64,
    /// K
    pub ic_depth: f64,
    pub ic_waist: f64,
    /// Red detuning of the lock/intracavity-trap light from the D2 line, in
    /// free spectral ranges. The trap wavelength is derived from it.
    pub ic_fsr_offset: u32,
    pub guide_transport_distance: f64,
    pub guide_oscillation_period: f64,
    /// K, calibrated against the oscillation period.
    pub guide_depth: f64,
    pub guide_waist: f64,
}

impl Default for TrapParams {
    fn default() -> Self {
        Self {
            sw_wavelength: 1030e-9,
            sw_power: 2.0,
            sw_waist: 16e-6,
            sw_depth: 2.5e-3,
            ic_depth: 44e-6,
            ic_waist: 29.5e-6,
            ic_fsr_offset: 8,
            guide_transport_distance: 14e-3,
            guide_oscillation_period: 0.200,
            guide_depth: 7.589e-4,
            guide_waist: 50e-6,
        }
    }
}

impl TrapParams {
    pub fn well_spacing(&self) -> f64 {
        self.sw_wavelength / 2.0
    }

    /// Rayleigh range of the guide beam.
    pub fn guide_rayleigh_range(&self) -> f64 {
        PI * self.guide_waist * self.guide_waist / self.sw_wavelength
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpParams {
    pub rabi_frequency: f64,
    pub stark_shift: f64,
    pub pump_on: bool,
}

impl Default for PumpParams {
    fn default() -> Self {
        Self {
            rabi_frequency: 2.0 * PI * 30e6,
            stark_shift: 2.0 * PI * 100e6,
            pump_on: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub detection_efficiency: f64,
    /// counts/s
    pub background_rate: f64,
    pub bin_width: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            detection_efficiency: 0.03,
            background_rate: 5000.0,
            bin_width: 2e-3,
        }
    }
}

/// Complete parameter set. Construct with `Default` for the reference
/// apparatus, patch fields or parse a config file, then [`validate`].
///
/// [`validate`]: ExperimentConfig::validate
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub constants: PhysicalConstants,
    pub cavity: CavityParams,
    pub trap: TrapParams,
    pub pump: PumpParams,
    pub detection: DetectionParams,
    pub galvo: GalvoModel,
    pub dynamics: DynamicsParams,
    pub arrival: ArrivalParams,
    pub scenario: ScenarioOptions,
}

/// A configuration whose invariants have all been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig(ExperimentConfig);

impl Deref for ValidatedConfig {
    type Target = ExperimentConfig;

    fn deref(&self) -> &ExperimentConfig {
        &self.0
    }
}

impl ValidatedConfig {
    pub fn into_inner(self) -> ExperimentConfig {
        self.0
    }

    pub fn derive(&self) -> DerivedParams {
        derive(self)
    }
}

impl ExperimentConfig {
    pub fn validate(self) -> Result<ValidatedConfig> {
        validate_config(self)
    }

    /// Boltzmann constant times a temperature.
    pub fn kelvin_to_joule(&self, t: f64) -> f64 {
        self.constants.boltzmann_constant * t
    }

    /// Highest harmonic frequency of the lattice (axial standing-wave
    /// frequency at the bottom of a well), Hz.
    pub fn max_trap_frequency(&self) -> f64 {
        let k = 2.0 * PI / self.trap.sw_wavelength;
        let depth = self.kelvin_to_joule(self.trap.sw_depth);
        k * (2.0 * depth / self.constants.atom_mass).sqrt() / (2.0 * PI)
    }

    /// Hex SHA-256 of the canonical text form; used in provenance blocks.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(emit_config(self).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn positive(v: &mut Vec<Violation>, field: &str, value: f64) {
    if !(value > 0.0 && value.is_finite()) {
        v.push(Violation::new(field, format!("{field} must be positive")));
    }
}

fn non_negative(v: &mut Vec<Violation>, field: &str, value: f64) {
    if !(value >= 0.0 && value.is_finite()) {
        v.push(Violation::new(
            field,
            format!("{field} must be non-negative"),
        ));
    }
}

fn probability(v: &mut Vec<Violation>, field: &str, value: f64) {
    if !(0.0..=1.0).contains(&value) {
        v.push(Violation::new(field, format!("{field} must lie in [0, 1]")));
    }
}

/// Checks every invariant and reports all violations at once.
pub fn validate_config(cfg: ExperimentConfig) -> Result<ValidatedConfig> {
    let mut v = Vec::new();

    let k = &cfg.constants;
    positive(&mut v, "boltzmann_constant", k.boltzmann_constant);
    positive(&mut v, "speed_of_light", k.speed_of_light);
    positive(&mut v, "reduced_planck", k.reduced_planck);
    positive(&mut v, "atom_mass", k.atom_mass);
    positive(&mut v, "d2_wavelength", k.d2_wavelength);

    let c = &cfg.cavity;
    positive(&mut v, "length", c.length);
    positive(&mut v, "mirror_roc", c.mirror_roc);
    positive(&mut v, "waist_w0", c.waist_w0);
    positive(&mut v, "kappa_tem00", c.kappa_tem00);
    positive(&mut v, "kappa_tem01", c.kappa_tem01);
    positive(&mut v, "g0_tem00", c.g0_tem00);
    positive(&mut v, "g0_tem01", c.g0_tem01);
    positive(&mut v, "gamma_atom", c.gamma_atom);
    if !(c.transmission_t0 > 0.0 && c.transmission_t1 < 1.0) {
        v.push(Violation::new(
            "transmission_t0",
            "transmissions must lie in (0, 1)",
        ));
    }
    if c.transmission_t0 >= c.transmission_t1 {
        v.push(Violation::new("transmission_t0", "t0 < t1 required"));
    }
    if c.length > 0.0
        && c.mirror_roc > 0.0
        && 2.0 * c.mirror_roc > c.length
        && k.d2_wavelength > 0.0
    {
        let expected = c.resonator_waist(k.d2_wavelength);
        if ((c.waist_w0 - expected) / expected).abs() > 0.10 {
            v.push(Violation::new(
                "waist_w0",
                format!(
                    "waist {:.2} um inconsistent with resonator geometry ({:.2} um)",
                    c.waist_w0 * 1e6,
                    expected * 1e6
                ),
            ));
        }
    }
    if c.length > 0.0 && k.speed_of_light > 0.0 {
        let fsr = c.fsr(k.speed_of_light);
        for (name, kappa) in [
            ("kappa_tem00", c.kappa_tem00),
            ("kappa_tem01", c.kappa_tem01),
        ] {
            if 2.0 * kappa / fsr < c.transmission_t0 + c.transmission_t1 {
                v.push(Violation::new(
                    name,
                    "round-trip loss 2*kappa/fsr must be at least t0 + t1",
                ));
            }
        }
    }

    let t = &cfg.trap;
    positive(&mut v, "sw_wavelength", t.sw_wavelength);
    positive(&mut v, "sw_power", t.sw_power);
    positive(&mut v, "sw_waist", t.sw_waist);
    positive(&mut v, "sw_depth", t.sw_depth);
    positive(&mut v, "ic_depth", t.ic_depth);
    positive(&mut v, "ic_waist", t.ic_waist);
    positive(
        &mut v,
        "guide_transport_distance",
        t.guide_transport_distance,
    );
    positive(
        &mut v,
        "guide_oscillation_period",
        t.guide_oscillation_period,
    );
    positive(&mut v, "guide_depth", t.guide_depth);
    positive(&mut v, "guide_waist", t.guide_waist);
    if t.ic_fsr_offset == 0 {
        v.push(Violation::new(
            "ic_fsr_offset",
            "ic_fsr_offset must be positive",
        ));
    }
    if (t.well_spacing() - 515e-9).abs() > 1e-9 {
        v.push(Violation::new(
            "sw_wavelength",
            "well spacing must be 515 nm within 1 nm",
        ));
    }
    if t.ic_depth >= t.sw_depth {
        v.push(Violation::new("ic_depth", "ic_depth < sw_depth required"));
    }

    let p = &cfg.pump;
    non_negative(&mut v, "rabi_frequency", p.rabi_frequency);
    positive(&mut v, "stark_shift", p.stark_shift);
    if p.stark_shift <= p.rabi_frequency / 2.0 {
        v.push(Violation::new(
            "stark_shift",
            "stark_shift > rabi_frequency/2 required (perturbative Raman regime)",
        ));
    }

    let d = &cfg.detection;
    if !(d.detection_efficiency > 0.0 && d.detection_efficiency <= 1.0) {
        v.push(Violation::new(
            "detection_efficiency",
            "detection_efficiency must lie in (0, 1]",
        ));
    }
    non_negative(&mut v, "background_rate", d.background_rate);
    positive(&mut v, "bin_width", d.bin_width);

    let g = &cfg.galvo;
    if !(g.path_to_displacement_gain > 0.0 && g.path_to_displacement_gain <= 1.0) {
        v.push(Violation::new(
            "path_to_displacement_gain",
            "path_to_displacement_gain must lie in (0, 1]",
        ));
    }
    positive(&mut v, "angle_to_path", g.angle_to_path);
    positive(&mut v, "angle_limit", g.angle_limit);
    non_negative(&mut v, "repeatability_sigma", g.repeatability_sigma);

    let dy = &cfg.dynamics;
    positive(&mut v, "timestep", dy.timestep);
    positive(&mut v, "energy_timestep", dy.energy_timestep);
    if t.sw_depth > 0.0 && t.sw_wavelength > 0.0 && k.atom_mass > 0.0 {
        let f_max = cfg.max_trap_frequency();
        if dy.timestep > 1.0 / (20.0 * f_max) {
            v.push(Violation::new(
                "timestep",
                format!(
                    "timestep must resolve the highest trap frequency ({:.0} Hz): <= {:.3e} s",
                    f_max,
                    1.0 / (20.0 * f_max)
                ),
            ));
        }
    }
    non_negative(&mut v, "cooling_coefficient", dy.cooling_coefficient);
    probability(&mut v, "hop_probability", dy.hop_probability);
    non_negative(
        &mut v,
        "parametric_heating_rate",
        dy.parametric_heating_rate,
    );
    if let Some(f) = dy.parametric_threshold {
        positive(&mut v, "parametric_threshold", f);
    }
    non_negative(&mut v, "modulation_depth", dy.modulation_depth);
    positive(&mut v, "resonance_bandwidth", dy.resonance_bandwidth);
    positive(&mut v, "loss_energy_margin", dy.loss_energy_margin);
    positive(&mut v, "lifetime_pump_off", dy.lifetime_pump_off);
    positive(&mut v, "lifetime_pump_on", dy.lifetime_pump_on);
    non_negative(&mut v, "injection_temperature", dy.injection_temperature);

    let a = &cfg.arrival;
    non_negative(&mut v, "mean_atoms", a.mean_atoms);
    positive(&mut v, "cloud_sigma_x", a.cloud_sigma_x);
    non_negative(&mut v, "velocity_sigma_x", a.velocity_sigma_x);
    non_negative(&mut v, "transverse_temperature", a.transverse_temperature);
    positive(&mut v, "load_duration", a.load_duration);
    positive(&mut v, "filter_duration", a.filter_duration);
    positive(&mut v, "capture_radius", a.capture_radius);

    let s = &cfg.scenario;
    non_negative(&mut v, "lateral_sigma", s.lateral_sigma);
    if s.atoms == 0 {
        v.push(Violation::new("atoms", "atoms must be at least 1"));
    }
    if let Some(w) = &s.sweep {
        if let Err(msg) = w.check() {
            v.push(Violation::new("sweep", msg));
        }
    }

    if v.is_empty() {
        Ok(ValidatedConfig(cfg))
    } else {
        Err(Error::InvalidConfig(v))
    }
}

/// Quantities computed once from a validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    /// Hz
    pub fsr: f64,
    pub well_spacing: f64,
    pub round_trip_loss: f64,
    pub intrinsic_loss: f64,
    pub emission_branching: f64,
    /// rad/s
    pub effective_coupling_tem00: f64,
    /// rad/s
    pub effective_coupling_tem01: f64,
    pub max_scattering_rate_tem00: f64,
    pub max_scattering_rate_tem01: f64,
    /// Free-space (non-cavity) Raman scattering rate driven by the pump.
    pub free_space_scattering_rate: f64,
    /// Well passages per second at the transport-loss knee.
    pub wells_per_second_threshold: f64,
    /// Detuning of the intracavity-trap light from the D2 line expressed
    /// as a wavelength difference.
    pub ic_detuning_wavelength: f64,
    pub ic_wavelength: f64,
    /// J
    pub recoil_energy: f64,
}

pub fn derive(cfg: &ExperimentConfig) -> DerivedParams {
    let c = cfg.constants.speed_of_light;
    let fsr = cfg.cavity.fsr(c);
    let well_spacing = cfg.trap.well_spacing();
    let round_trip_loss = 2.0 * cfg.cavity.kappa_tem00 / fsr;
    let t0 = cfg.cavity.transmission_t0;
    let t1 = cfg.cavity.transmission_t1;
    let ic_detuning_wavelength = ic_detuning_wavelength(cfg);
    DerivedParams {
        fsr,
        well_spacing,
        round_trip_loss,
        intrinsic_loss: round_trip_loss - t0 - t1,
        emission_branching: t1 / round_trip_loss,
        effective_coupling_tem00: coupling::effective_coupling_or_zero(cfg, ModeId::Tem00),
        effective_coupling_tem01: coupling::effective_coupling_or_zero(cfg, ModeId::Tem01),
        max_scattering_rate_tem00: coupling::max_scattering_rate(cfg, ModeId::Tem00),
        max_scattering_rate_tem01: coupling::max_scattering_rate(cfg, ModeId::Tem01),
        free_space_scattering_rate: coupling::free_space_scattering_rate(cfg),
        wells_per_second_threshold: 2.0 * PI * cfg.dynamics.knee_product / well_spacing,
        ic_detuning_wavelength,
        ic_wavelength: ic_wavelength(cfg),
        recoil_energy: recoil_energy(cfg),
    }
}

/// λ² · N·FSR / c for the configured FSR multiple, evaluated at the D2 line.
pub fn ic_detuning_wavelength(cfg: &ExperimentConfig) -> f64 {
    let c = cfg.constants.speed_of_light;
    let lambda = cfg.constants.d2_wavelength;
    lambda * lambda * f64::from(cfg.trap.ic_fsr_offset) * cfg.cavity.fsr(c) / c
}

/// Intracavity-trap wavelength, red-detuned from D2 by N free spectral ranges.
pub fn ic_wavelength(cfg: &ExperimentConfig) -> f64 {
    let c = cfg.constants.speed_of_light;
    let nu =
        c / cfg.constants.d2_wavelength - f64::from(cfg.trap.ic_fsr_offset) * cfg.cavity.fsr(c);
    c / nu
}

/// ħ²k²/2m at the D2 line.
pub fn recoil_energy(cfg: &ExperimentConfig) -> f64 {
    let p = cfg.constants.reduced_planck * 2.0 * PI / cfg.constants.d2_wavelength;
    p * p / (2.0 * cfg.constants.atom_mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violations(cfg: ExperimentConfig) -> Vec<Violation> {
        match cfg.validate() {
            Err(Error::InvalidConfig(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_sw_depth_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.trap.sw_depth = 0.0;
        let v = violations(cfg);
        assert!(v.iter().any(|x| x.message == "sw_depth must be positive"));
    }

    #[test]
    fn swapped_transmissions_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.cavity.transmission_t0 = 95e-6;
        cfg.cavity.transmission_t1 = 2e-6;
        let v = violations(cfg);
        assert!(v.iter().any(|x| x.message == "t0 < t1 required"));
    }

    #[test]
    fn all_violations_are_reported() {
        let mut cfg = ExperimentConfig::default();
        cfg.trap.sw_depth = 0.0;
        cfg.detection.bin_width = -1.0;
        cfg.dynamics.hop_probability = 1.5;
        let v = violations(cfg);
        let fields: Vec<_> = v.iter().map(|x| x.field.as_str()).collect();
        assert!(fields.contains(&"sw_depth"));
        assert!(fields.contains(&"bin_width"));
        assert!(fields.contains(&"hop_probability"));
    }

    #[test]
    fn coarse_timestep_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.dynamics.timestep = 2e-7;
        let v = violations(cfg);
        assert!(v.iter().any(|x| x.field == "timestep"));
    }

    #[test]
    fn waist_matches_resonator_geometry() {
        let cfg = ExperimentConfig::default();
        let w = cfg.cavity.resonator_waist(cfg.constants.d2_wavelength);
        assert!((w - 29.5e-6).abs() / 29.5e-6 < 0.01, "w = {w}");
    }

    #[test]
    fn fsr_and_losses() {
        let d = derive(&ExperimentConfig::default());
        assert!((d.fsr - 3.059e11).abs() / 3.059e11 < 1e-3);
        assert!((d.round_trip_loss - 205e-6).abs() < 1e-6);
        assert!((d.intrinsic_loss - 108e-6).abs() < 1e-6);
        assert!(d.emission_branching > 0.0 && d.emission_branching < 1.0);
    }

    #[test]
    fn eight_fsr_is_five_nanometres() {
        let cfg = ExperimentConfig::default();
        let d = derive(&cfg);
        // oracle: λ²·8·fsr/c with c/2L written out
        let c = 299_792_458.0;
        let oracle = 780.24e-9_f64.powi(2) * 8.0 * (c / (2.0 * 490e-6)) / c;
        assert!((d.ic_detuning_wavelength - oracle).abs() < 1e-15);
        assert!((d.ic_detuning_wavelength - 4.97e-9).abs() < 0.01e-9);
        assert!((d.ic_wavelength - d.ic_detuning_wavelength - 780.24e-9).abs() < 0.05e-9);
    }

    #[test]
    fn branching_identity_is_exact() {
        let d = derive(&ExperimentConfig::default());
        let t1 = ExperimentConfig::default().cavity.transmission_t1;
        assert!((d.emission_branching * d.round_trip_loss - t1).abs() <= f64::EPSILON * t1);
        assert_eq!(d.well_spacing, 1030e-9 / 2.0);
    }

    #[test]
    fn derive_is_deterministic() {
        let cfg = ExperimentConfig::default();
        assert_eq!(derive(&cfg), derive(&cfg));
    }

    #[test]
    fn wells_per_second_at_knee() {
        let d = derive(&ExperimentConfig::default());
        assert!((d.wells_per_second_threshold - 6100.0).abs() < 61.0);
    }
}
