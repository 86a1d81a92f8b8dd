//! Cavity mode functions and optical trapping potentials.
//!
//! Coordinates: `x` runs along the standing-wave (transport) beams, `y`
//! along the cavity axis and `z` vertically. The cavity center is the
//! origin; `y = 0` is a cavity antinode.

use std::f64::consts::{E, PI};
use std::fmt;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::{ic_wavelength, ExperimentConfig};
use crate::error::{Error, Result};

pub type Position = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeId {
    #[serde(rename = "TEM00")]
    Tem00,
    /// Lobes oriented along the transport axis.
    #[serde(rename = "TEM01")]
    Tem01,
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeId::Tem00 => "TEM00",
            ModeId::Tem01 => "TEM01",
        })
    }
}

/// Which optical potentials are switched on, and where the conveyor has
/// moved the standing-wave antinodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfiguration {
    pub conveyor_offset: f64,
    pub sw_on: bool,
    pub ic_on: bool,
    pub guide_on: bool,
}

impl LatticeConfiguration {
    /// Standing-wave trap plus intracavity trap (the 2D lattice).
    pub fn lattice(conveyor_offset: f64) -> Self {
        Self {
            conveyor_offset,
            sw_on: true,
            ic_on: true,
            guide_on: false,
        }
    }

    pub fn sw_only(conveyor_offset: f64) -> Self {
        Self {
            conveyor_offset,
            sw_on: true,
            ic_on: false,
            guide_on: false,
        }
    }

    pub fn ic_only() -> Self {
        Self {
            conveyor_offset: 0.0,
            sw_on: false,
            ic_on: true,
            guide_on: false,
        }
    }

    pub fn guide_only() -> Self {
        Self {
            conveyor_offset: 0.0,
            sw_on: false,
            ic_on: false,
            guide_on: true,
        }
    }
}

/// Precomputed field constants for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct FieldModel {
    k_cavity: f64,
    mode_waist: f64,
    sw_k: f64,
    sw_depth: f64,
    sw_waist2: f64,
    ic_k: f64,
    ic_depth: f64,
    ic_waist2: f64,
    guide_depth: f64,
    guide_focus: f64,
    guide_waist2: f64,
    guide_zr: f64,
}

impl FieldModel {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let kb = cfg.constants.boltzmann_constant;
        let t = &cfg.trap;
        Self {
            k_cavity: 2.0 * PI / cfg.constants.d2_wavelength,
            mode_waist: cfg.cavity.waist_w0,
            sw_k: 2.0 * PI / t.sw_wavelength,
            sw_depth: kb * t.sw_depth,
            sw_waist2: t.sw_waist * t.sw_waist,
            ic_k: 2.0 * PI / ic_wavelength(cfg),
            ic_depth: kb * t.ic_depth,
            ic_waist2: t.ic_waist * t.ic_waist,
            guide_depth: kb * t.guide_depth,
            guide_focus: -0.5 * t.guide_transport_distance,
            guide_waist2: t.guide_waist * t.guide_waist,
            guide_zr: t.guide_rayleigh_range(),
        }
    }

    pub fn mode_waist(&self) -> f64 {
        self.mode_waist
    }

    pub fn sw_depth(&self) -> f64 {
        self.sw_depth
    }

    pub fn ic_depth(&self) -> f64 {
        self.ic_depth
    }

    pub fn mode_amplitude(&self, mode: ModeId, pos: &Position) -> f64 {
        let w = self.mode_waist;
        let envelope = (-(pos.x * pos.x + pos.z * pos.z) / (w * w)).exp();
        let standing = (self.k_cavity * pos.y).cos();
        match mode {
            ModeId::Tem00 => standing * envelope,
            ModeId::Tem01 => standing * (2.0 * E).sqrt() * (pos.x / w) * envelope,
        }
    }

    /// Squared mode amplitude on the cavity axis (`y = z = 0`).
    #[inline]
    pub fn axial_intensity(&self, mode: ModeId, x: f64) -> f64 {
        let u2 = x * x / (self.mode_waist * self.mode_waist);
        let g = (-2.0 * u2).exp();
        match mode {
            ModeId::Tem00 => g,
            ModeId::Tem01 => 2.0 * E * u2 * g,
        }
    }

    /// Potential energy in joules.
    pub fn potential(&self, pos: &Position, lattice: &LatticeConfiguration) -> f64 {
        self.potential_and_force(pos, lattice).0
    }

    pub fn force(&self, pos: &Position, lattice: &LatticeConfiguration) -> Vector3<f64> {
        self.potential_and_force(pos, lattice).1
    }

    /// Standing-wave contribution only.
    pub fn sw_potential(&self, pos: &Position, offset: f64) -> f64 {
        let c = (self.sw_k * (pos.x - offset)).cos();
        let rho2 = pos.y * pos.y + pos.z * pos.z;
        -self.sw_depth * c * c * (-2.0 * rho2 / self.sw_waist2).exp()
    }

    /// Intracavity-trap contribution only.
    pub fn ic_potential(&self, pos: &Position) -> f64 {
        let c = (self.ic_k * pos.y).cos();
        let r2 = pos.x * pos.x + pos.z * pos.z;
        -self.ic_depth * c * c * (-2.0 * r2 / self.ic_waist2).exp()
    }

    pub fn potential_and_force(
        &self,
        pos: &Position,
        lattice: &LatticeConfiguration,
    ) -> (f64, Vector3<f64>) {
        let mut u = 0.0;
        let mut f = Vector3::zeros();
        if lattice.sw_on {
            let phase = self.sw_k * (pos.x - lattice.conveyor_offset);
            let (s, c) = phase.sin_cos();
            let rho2 = pos.y * pos.y + pos.z * pos.z;
            let g = (-2.0 * rho2 / self.sw_waist2).exp();
            let us = -self.sw_depth * c * c * g;
            u += us;
            // dU/dx = D k sin(2φ) g ;  dU/dy = -4 y U / w²
            f.x -= self.sw_depth * self.sw_k * 2.0 * s * c * g;
            f.y += 4.0 * pos.y * us / self.sw_waist2;
            f.z += 4.0 * pos.z * us / self.sw_waist2;
        }
        if lattice.ic_on {
            let phase = self.ic_k * pos.y;
            let (s, c) = phase.sin_cos();
            let r2 = pos.x * pos.x + pos.z * pos.z;
            let g = (-2.0 * r2 / self.ic_waist2).exp();
            let ui = -self.ic_depth * c * c * g;
            u += ui;
            f.y -= self.ic_depth * self.ic_k * 2.0 * s * c * g;
            f.x += 4.0 * pos.x * ui / self.ic_waist2;
            f.z += 4.0 * pos.z * ui / self.ic_waist2;
        }
        if lattice.guide_on {
            let xi = (pos.x - self.guide_focus) / self.guide_zr;
            let s = 1.0 + xi * xi;
            let r2 = pos.y * pos.y + pos.z * pos.z;
            let g = (-2.0 * r2 / (self.guide_waist2 * s)).exp();
            let ug = -self.guide_depth / s * g;
            u += ug;
            let du_ds = self.guide_depth / (s * s) * g * (1.0 - 2.0 * r2 / (self.guide_waist2 * s));
            f.x -= du_ds * 2.0 * xi / self.guide_zr;
            f.y += 4.0 * pos.y * ug / (self.guide_waist2 * s);
            f.z += 4.0 * pos.z * ug / (self.guide_waist2 * s);
        }
        (u, f)
    }

    /// Guide potential and force along the beam axis.
    fn guide_axial(&self, x: f64) -> (f64, f64) {
        let xi = (x - self.guide_focus) / self.guide_zr;
        let s = 1.0 + xi * xi;
        let u = -self.guide_depth / s;
        let f = -self.guide_depth / (s * s) * 2.0 * xi / self.guide_zr;
        (u, f)
    }
}

pub fn mode_amplitude(mode: ModeId, pos: &Position, cfg: &ExperimentConfig) -> f64 {
    FieldModel::new(cfg).mode_amplitude(mode, pos)
}

/// Transverse positions (along x) of the intensity maxima of a mode.
pub fn mode_maxima(mode: ModeId, cfg: &ExperimentConfig) -> Vec<f64> {
    let w = cfg.cavity.waist_w0;
    match mode {
        ModeId::Tem00 => vec![0.0],
        ModeId::Tem01 => vec![-w / 2f64.sqrt(), w / 2f64.sqrt()],
    }
}

pub fn potential(pos: &Position, lattice: &LatticeConfiguration, cfg: &ExperimentConfig) -> f64 {
    FieldModel::new(cfg).potential(pos, lattice)
}

pub fn force(
    pos: &Position,
    lattice: &LatticeConfiguration,
    cfg: &ExperimentConfig,
) -> Vector3<f64> {
    FieldModel::new(cfg).force(pos, lattice)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrapFrequency {
    /// Unit eigenvector of the Hessian.
    pub axis: [f64; 3],
    /// Hz
    pub frequency: f64,
}

/// Harmonic eigenfrequencies of the total potential around a minimum,
/// sorted from lowest to highest.
pub fn trap_frequencies(
    well_center: &Position,
    lattice: &LatticeConfiguration,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrapFrequency>> {
    let field = FieldModel::new(cfg);
    let h = 1e-9;
    let mut hess = Matrix3::zeros();
    for j in 0..3 {
        let mut step = Vector3::zeros();
        step[j] = h;
        let fp = field.force(&(well_center + step), lattice);
        let fm = field.force(&(well_center - step), lattice);
        let col = -(fp - fm) / (2.0 * h);
        hess.set_column(j, &col);
    }
    let hess = 0.5 * (hess + hess.transpose());
    let eig = SymmetricEigen::new(hess);
    let scale = eig.eigenvalues.amax();
    if !(scale > 0.0) || eig.eigenvalues.iter().any(|&l| l <= 1e-9 * scale) {
        return Err(Error::NotAMinimum);
    }
    let m = cfg.constants.atom_mass;
    let mut out: Vec<TrapFrequency> = (0..3)
        .map(|i| {
            let v = eig.eigenvectors.column(i);
            TrapFrequency {
                axis: [v[0], v[1], v[2]],
                frequency: (eig.eigenvalues[i] / m).sqrt() / (2.0 * PI),
            }
        })
        .collect();
    out.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    Ok(out)
}

/// Oscillation period in the guide beam for an atom released at rest at
/// the MOT, half the transport distance from the guide focus.
pub fn guide_oscillation_period(cfg: &ExperimentConfig) -> Result<f64> {
    guide_period_for_release(cfg, 0.5 * cfg.trap.guide_transport_distance)
}

/// Oscillation period for release at rest `release_distance` from the
/// guide focus, found by integrating the on-axis motion.
pub fn guide_period_for_release(cfg: &ExperimentConfig, release_distance: f64) -> Result<f64> {
    let field = FieldModel::new(cfg);
    let m = cfg.constants.atom_mass;
    if !(field.guide_depth > 0.0) {
        return Err(Error::Unbound("guide depth is not positive".into()));
    }
    if release_distance.abs() < 1e-12 {
        return Err(Error::Unbound(
            "released at the focus with zero velocity; atom stays put".into(),
        ));
    }
    let small = 2.0 * PI * field.guide_zr * (m / (2.0 * field.guide_depth)).sqrt();
    let dt = small / 20_000.0;
    let t_max = 50.0 * small;

    let mut x = field.guide_focus - release_distance;
    let mut v: f64 = 0.0;
    let mut a = field.guide_axial(x).1 / m;
    let mut t = 0.0;
    let mut prev_v: f64 = 0.0;
    let mut sign_changes = Vec::new();
    while t < t_max {
        v += 0.5 * dt * a;
        x += dt * v;
        a = field.guide_axial(x).1 / m;
        v += 0.5 * dt * a;
        t += dt;
        if t > dt && prev_v != 0.0 && v.signum() != prev_v.signum() {
            // linear interpolation of the zero crossing
            let frac = prev_v / (prev_v - v);
            sign_changes.push(t - dt + frac * dt);
            if sign_changes.len() == 2 {
                return Ok(sign_changes[1]);
            }
        }
        prev_v = v;
    }
    Err(Error::Unbound(format!(
        "no return to the release point within {t_max:.3} s"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn mode_amplitude_examples() {
        let c = cfg();
        let w0 = c.cavity.waist_w0;
        let origin = Position::zeros();
        assert_eq!(mode_amplitude(ModeId::Tem00, &origin, &c), 1.0);
        assert_eq!(mode_amplitude(ModeId::Tem01, &origin, &c), 0.0);
        let lobe = Position::new(w0 / 2f64.sqrt(), 0.0, 0.0);
        assert!((mode_amplitude(ModeId::Tem01, &lobe, &c) - 1.0).abs() < 1e-12);
        assert!((lobe.x - 20.86e-6).abs() < 0.01e-6);
    }

    #[test]
    fn tem01_maximum_by_grid_search() {
        // oracle: brute-force scan of x·exp(-x²/w²)
        let c = cfg();
        let field = FieldModel::new(&c);
        let (best, _) = (0..300_000)
            .map(|i| i as f64 * 1e-10)
            .map(|x| {
                (
                    x,
                    field.mode_amplitude(ModeId::Tem01, &Position::new(x, 0.0, 0.0)),
                )
            })
            .fold((0.0, f64::MIN), |acc, p| if p.1 > acc.1 { p } else { acc });
        assert!((best - c.cavity.waist_w0 / 2f64.sqrt()).abs() < 2e-10);
    }

    #[test]
    fn mode_maxima_examples() {
        let mut c = cfg();
        assert_eq!(mode_maxima(ModeId::Tem00, &c), vec![0.0]);
        let m = mode_maxima(ModeId::Tem01, &c);
        let sep = m[1] - m[0];
        assert!((sep - 41.7e-6).abs() < 0.05e-6);
        assert!((sep - 42e-6).abs() < 1e-6);
        c.cavity.waist_w0 = 10e-6;
        let m = mode_maxima(ModeId::Tem01, &c);
        assert!((m[1] - m[0] - 14.142e-6).abs() < 1e-9);
    }

    #[test]
    fn mode_symmetry_and_bound() {
        let c = cfg();
        let field = FieldModel::new(&c);
        let mut rng = stream_rng(11, 0, 0);
        for _ in 0..1000 {
            let p = Position::new(
                rng.random_range(-100e-6..100e-6),
                rng.random_range(-2e-6..2e-6),
                rng.random_range(-50e-6..50e-6),
            );
            let q = Position::new(-p.x, p.y, p.z);
            let a00 = field.mode_amplitude(ModeId::Tem00, &p);
            let a01 = field.mode_amplitude(ModeId::Tem01, &p);
            assert!(a00.abs() <= 1.0 && a01.abs() <= 1.0);
            assert_eq!(a00, field.mode_amplitude(ModeId::Tem00, &q));
            assert_eq!(a01, -field.mode_amplitude(ModeId::Tem01, &q));
        }
    }

    #[test]
    fn sw_well_depth_and_node() {
        let c = cfg();
        let lat = LatticeConfiguration::sw_only(0.0);
        let kb = c.constants.boltzmann_constant;
        let bottom = potential(&Position::zeros(), &lat, &c);
        assert!((bottom + kb * 2.5e-3).abs() < 1e-12 * kb * 2.5e-3);
        let node = Position::new(515e-9 / 2.0, 0.0, 0.0);
        assert!(potential(&node, &lat, &c).abs() < 1e-30);
    }

    #[test]
    fn lattice_translation_by_one_well() {
        // oracle: direct evaluation on a grid
        let c = cfg();
        let field = FieldModel::new(&c);
        let a = LatticeConfiguration::lattice(0.0);
        let b = LatticeConfiguration::lattice(515e-9);
        for i in 0..50 {
            for j in 0..10 {
                let p = Position::new(i as f64 * 37e-9 - 1e-6, j as f64 * 0.2e-6, 0.3e-6);
                let ua = field.potential(&p, &a);
                let ub = field.potential(&p, &b);
                assert!((ua - ub).abs() <= 1e-12 * ua.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn force_matches_finite_differences() {
        let c = cfg();
        let field = FieldModel::new(&c);
        let mut rng = stream_rng(12, 0, 0);
        let h = 0.1e-9;
        for lattice in [
            LatticeConfiguration::lattice(0.1e-6),
            LatticeConfiguration::guide_only(),
        ] {
            for _ in 0..100 {
                let p = if lattice.guide_on {
                    Position::new(
                        rng.random_range(-12e-3..2e-3),
                        rng.random_range(-40e-6..40e-6),
                        rng.random_range(-40e-6..40e-6),
                    )
                } else {
                    Position::new(
                        rng.random_range(-40e-6..40e-6),
                        rng.random_range(-10e-6..10e-6),
                        rng.random_range(-10e-6..10e-6),
                    )
                };
                let step = if lattice.guide_on { 1e-8 } else { h };
                let f = field.force(&p, &lattice);
                let mut fd = Vector3::zeros();
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = step;
                    fd[k] = -(field.potential(&(p + e), &lattice)
                        - field.potential(&(p - e), &lattice))
                        / (2.0 * step);
                }
                let rel = (f - fd).norm() / f.norm();
                assert!(rel < 1e-6, "rel = {rel} at {p:?}");
            }
        }
    }

    #[test]
    fn force_vanishes_at_minimum_and_restores() {
        let c = cfg();
        let lat = LatticeConfiguration::lattice(0.0);
        assert!(force(&Position::zeros(), &lat, &c).norm() < 1e-30);
        let f = force(&Position::new(50e-9, 0.0, 0.0), &lat, &c);
        assert!(f.x < 0.0);
        let f = force(&Position::new(-50e-9, 0.0, 0.0), &lat, &c);
        assert!(f.x > 0.0);
    }

    #[test]
    fn sw_only_trap_frequencies_match_harmonic_oracle() {
        let c = cfg();
        let kb = c.constants.boltzmann_constant;
        let m = c.constants.atom_mass;
        let d = kb * c.trap.sw_depth;
        let k = 2.0 * PI / c.trap.sw_wavelength;
        let axial = k * (2.0 * d / m).sqrt() / (2.0 * PI);
        let radial = (4.0 * d / (m * c.trap.sw_waist.powi(2))).sqrt() / (2.0 * PI);
        let f =
            trap_frequencies(&Position::zeros(), &LatticeConfiguration::sw_only(0.0), &c).unwrap();
        assert!((f[2].frequency - axial).abs() / axial < 1e-4);
        assert!((f[0].frequency - radial).abs() / radial < 1e-4);
        assert!((f[1].frequency - radial).abs() / radial < 1e-4);
        assert!((axial - 680e3).abs() < 5e3);
        assert!((radial - 9.9e3).abs() < 0.1e3);
        assert!(f[2].axis[0].abs() > 0.999);
    }

    #[test]
    fn ic_only_transverse_frequency() {
        let c = cfg();
        let kb = c.constants.boltzmann_constant;
        let m = c.constants.atom_mass;
        let oracle = (4.0 * kb * 44e-6 / (m * 29.5e-6f64.powi(2))).sqrt() / (2.0 * PI);
        let f = trap_frequencies(&Position::zeros(), &LatticeConfiguration::ic_only(), &c).unwrap();
        assert!((f[0].frequency - oracle).abs() / oracle < 1e-4);
        assert!((oracle - 710.0).abs() < 10.0);
    }

    #[test]
    fn non_minimum_is_rejected() {
        let c = cfg();
        let node = Position::new(515e-9 / 2.0, 0.0, 0.0);
        assert!(matches!(
            trap_frequencies(&node, &LatticeConfiguration::sw_only(0.0), &c),
            Err(Error::NotAMinimum)
        ));
    }

    #[test]
    fn guide_period_is_calibrated() {
        let c = cfg();
        let t = guide_oscillation_period(&c).unwrap();
        assert!((t - 0.200).abs() < 0.01, "period = {t}");
    }

    #[test]
    fn guide_period_scales_with_depth() {
        let mut c = cfg();
        let t1 = guide_oscillation_period(&c).unwrap();
        c.trap.guide_depth *= 2.0;
        let t2 = guide_oscillation_period(&c).unwrap();
        assert!((t2 / t1 - 1.0 / 2f64.sqrt()).abs() < 0.02);
        // small-amplitude harmonic limit
        let small = guide_period_for_release(&c, 1e-5).unwrap();
        let field = FieldModel::new(&c);
        let oracle =
            2.0 * PI * field.guide_zr * (c.constants.atom_mass / (2.0 * field.guide_depth)).sqrt();
        assert!((small - oracle).abs() / oracle < 1e-3);
    }

    #[test]
    fn release_at_focus_is_an_error() {
        assert!(matches!(
            guide_period_for_release(&cfg(), 0.0),
            Err(Error::Unbound(_))
        ));
    }
}
