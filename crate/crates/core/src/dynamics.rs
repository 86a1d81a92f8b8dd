//! Semiclassical atom dynamics.
//!
//! Two levels of description are used. [`Integrator`] advances full 3D
//! point-particle trajectories (velocity Verlet with friction, recoil kicks
//! and parametric noise); it drives loading and the filter phase, where
//! atoms move between wells. Once an atom sits in a single lattice well,
//! [`EnergyModel`] follows its orbit-averaged energy above the well bottom,
//! which allows seconds of evolution at millisecond cost.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Poisson, StandardNormal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{recoil_energy, ExperimentConfig};
use crate::conveyor::{modulation_frequency, GalvoDrive, GalvoModel, SweepWaveform};
use crate::coupling::{free_space_scattering_rate, max_scattering_rate};
use crate::error::{Error, Result};
use crate::optics::{
    trap_frequencies, FieldModel, LatticeConfiguration, ModeId, Position, TrapFrequency,
};
use crate::rng::{domain, stream_rng, trial_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatingModel {
    /// Heating whenever the modulation frequency reaches the threshold.
    Threshold,
    /// Heating only near 2·f_i/n for the trap eigenfrequencies f_i.
    ResonanceBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Trajectory timestep, s.
    pub timestep: f64,
    /// Step of the well-frame energy model, s.
    pub energy_timestep: f64,
    /// Friction scale β, kg/s; the force is −β·|mode amplitude|²·v.
    pub cooling_coefficient: f64,
    pub hop_probability: f64,
    /// Energy growth rate, 1/s, per unit modulation depth.
    pub parametric_heating_rate: f64,
    /// Modulation frequency at which parametric heating sets in. `None`
    /// uses the lowest harmonic frequency of the lattice.
    pub parametric_threshold: Option<f64>,
    pub modulation_depth: f64,
    pub heating_model: HeatingModel,
    /// Half-width of each resonance band, Hz.
    pub resonance_bandwidth: f64,
    /// Sweep-velocity product f·A at the transport-loss knee, m·Hz.
    pub knee_product: f64,
    pub loss_energy_margin: f64,
    pub lifetime_pump_off: f64,
    pub lifetime_pump_on: f64,
    /// Temperature of atoms injected directly into a well, K.
    pub injection_temperature: f64,
    /// Include pump-driven scattering into free space as a heating source.
    pub free_space_scattering: bool,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            timestep: 7e-8,
            energy_timestep: 5e-5,
            cooling_coefficient: 5.64e-21,
            hop_probability: 0.069,
            parametric_heating_rate: 48.7,
            parametric_threshold: Some(6100.0),
            modulation_depth: 1.0,
            heating_model: HeatingModel::Threshold,
            resonance_bandwidth: 500.0,
            knee_product: 500e-6,
            loss_energy_margin: 1.0,
            lifetime_pump_off: 3.0,
            lifetime_pump_on: 15.0,
            injection_temperature: 20e-6,
            free_space_scattering: true,
        }
    }
}

impl DynamicsParams {
    pub fn lifetime(&self, pump_on: bool) -> f64 {
        if pump_on {
            self.lifetime_pump_on
        } else {
            self.lifetime_pump_off
        }
    }
}

/// Properties of the atom cloud delivered by the guide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalParams {
    /// Mean number of atoms per loading attempt (Poisson).
    pub mean_atoms: f64,
    pub cloud_sigma_x: f64,
    /// m/s
    pub velocity_sigma_x: f64,
    /// K
    pub transverse_temperature: f64,
    pub load_duration: f64,
    pub filter_duration: f64,
    /// Captures farther than this from the cavity axis are not coupled.
    pub capture_radius: f64,
}

impl Default for ArrivalParams {
    fn default() -> Self {
        Self {
            mean_atoms: 3.0,
            cloud_sigma_x: 60e-6,
            velocity_sigma_x: 0.08,
            transverse_temperature: 50e-6,
            load_duration: 10e-3,
            filter_duration: 10e-3,
            capture_radius: 40e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomState {
    pub position: Position,
    pub velocity: [f64; 3],
    pub alive: bool,
    pub time_of_loss: Option<f64>,
    pub cumulative_scattered: u64,
}

impl AtomState {
    pub fn new(position: Position, velocity: [f64; 3]) -> Self {
        Self {
            position,
            velocity,
            alive: true,
            time_of_loss: None,
            cumulative_scattered: 0,
        }
    }

    pub fn at_rest(position: Position) -> Self {
        Self::new(position, [0.0; 3])
    }

    fn v(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::from(self.velocity)
    }

    fn kill(&mut self, t: f64) {
        self.alive = false;
        self.time_of_loss = Some(t);
    }
}

/// Kind of a logged trial event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Capture,
    Hop,
    Loss,
    Reversal,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Capture => "capture",
            EventKind::Hop => "hop",
            EventKind::Loss => "loss",
            EventKind::Reversal => "reversal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub atom_id: usize,
    pub x_position: f64,
}

/// Energy growth rate for a given modulation frequency, 1/s.
pub fn parametric_growth_rate(
    mod_freq: f64,
    trap_freqs: &[TrapFrequency],
    params: &DynamicsParams,
) -> f64 {
    if mod_freq <= 0.0 {
        return 0.0;
    }
    let rate = params.parametric_heating_rate * params.modulation_depth;
    match params.heating_model {
        HeatingModel::Threshold => {
            let f_min = params
                .parametric_threshold
                .or_else(|| trap_freqs.first().map(|f| f.frequency))
                .unwrap_or(f64::INFINITY);
            if mod_freq >= f_min {
                rate
            } else {
                0.0
            }
        }
        HeatingModel::ResonanceBand => {
            let hit = trap_freqs.iter().any(|f| {
                (1..=4).any(|n| {
                    (mod_freq - 2.0 * f.frequency / n as f64).abs() <= params.resonance_bandwidth
                })
            });
            if hit {
                rate
            } else {
                0.0
            }
        }
    }
}

/// Multiplicative velocity noise that grows the mean energy at `rate`
/// over `dt`.
pub fn parametric_heating_step<R: Rng + ?Sized>(
    atom: &mut AtomState,
    mod_freq: f64,
    trap_freqs: &[TrapFrequency],
    params: &DynamicsParams,
    dt: f64,
    rng: &mut R,
) {
    let g = parametric_growth_rate(mod_freq, trap_freqs, params);
    apply_parametric(atom, g, dt, rng);
}

fn apply_parametric<R: Rng + ?Sized>(atom: &mut AtomState, g: f64, dt: f64, rng: &mut R) {
    if !atom.alive || g <= 0.0 {
        return;
    }
    let s = (2.0 * g * dt).sqrt();
    for v in atom.velocity.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v *= 1.0 + s * n;
    }
}

/// Hop displacement for one reversal: 0 or ±one well.
fn draw_hop<R: Rng + ?Sized>(p: f64, spacing: f64, rng: &mut R) -> f64 {
    if p > 0.0 && rng.random::<f64>() < p {
        if rng.random::<bool>() {
            spacing
        } else {
            -spacing
        }
    } else {
        0.0
    }
}

/// At a sweep reversal, move the atom by ±one well with the configured
/// probability. Returns the displacement applied.
pub fn turning_point_hop<R: Rng + ?Sized>(
    atom: &mut AtomState,
    reversal_event: bool,
    params: &DynamicsParams,
    well_spacing: f64,
    rng: &mut R,
) -> f64 {
    if !atom.alive || !reversal_event {
        return 0.0;
    }
    let d = draw_hop(params.hop_probability, well_spacing, rng);
    atom.position.x += d;
    d
}

fn poisson_small<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda > 20.0 {
        return Poisson::new(lambda)
            .map(|p| p.sample(rng) as u64)
            .unwrap_or(0);
    }
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut s = p;
    while u > s && k < 1000 {
        k += 1;
        p *= lambda / k as f64;
        s += p;
    }
    k
}

/// 3D trajectory integrator.
#[derive(Debug, Clone)]
pub struct Integrator {
    field: FieldModel,
    mode: ModeId,
    mass: f64,
    friction: f64,
    recoil_velocity: f64,
    cavity_rate: f64,
    free_space_rate: f64,
    hazard_off: f64,
    hazard_on: f64,
    noise: bool,
}

impl Integrator {
    pub fn new(cfg: &ExperimentConfig, mode: ModeId) -> Self {
        let m = cfg.constants.atom_mass;
        let hbar_k = cfg.constants.reduced_planck * 2.0 * PI / cfg.constants.d2_wavelength;
        Self {
            field: FieldModel::new(cfg),
            mode,
            mass: m,
            friction: cfg.dynamics.cooling_coefficient,
            recoil_velocity: hbar_k / m,
            cavity_rate: max_scattering_rate(cfg, mode),
            free_space_rate: if cfg.dynamics.free_space_scattering {
                free_space_scattering_rate(cfg)
            } else {
                0.0
            },
            hazard_off: 1.0 / cfg.dynamics.lifetime_pump_off,
            hazard_on: 1.0 / cfg.dynamics.lifetime_pump_on,
            noise: true,
        }
    }

    /// Same integrator with recoil kicks and background loss disabled.
    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn field(&self) -> &FieldModel {
        &self.field
    }

    pub fn kinetic_energy(&self, atom: &AtomState) -> f64 {
        0.5 * self.mass * atom.v().norm_squared()
    }

    /// Kinetic plus potential energy, J.
    pub fn energy(&self, atom: &AtomState, lattice: &LatticeConfiguration) -> f64 {
        self.kinetic_energy(atom) + self.field.potential(&atom.position, lattice)
    }

    /// Advance one step of length `dt` starting at time `t`.
    /// `heating_rate` is the parametric energy growth rate in 1/s.
    #[allow(clippy::too_many_arguments)]
    pub fn step<R: Rng + ?Sized>(
        &self,
        atom: &mut AtomState,
        t: f64,
        dt: f64,
        lattice: &LatticeConfiguration,
        pump_on: bool,
        heating_rate: f64,
        rng: &mut R,
    ) -> Result<()> {
        if !atom.alive {
            return Ok(());
        }
        let inv_m = 1.0 / self.mass;
        let mut v = atom.v();
        let f0 = self.field.force(&atom.position, lattice);
        v += 0.5 * dt * inv_m * f0;
        atom.position += dt * v;
        let f1 = self.field.force(&atom.position, lattice);
        v += 0.5 * dt * inv_m * f1;

        if pump_on {
            let a = self.field.mode_amplitude(self.mode, &atom.position);
            let a2 = a * a;
            v *= (-self.friction * a2 * dt * inv_m).exp();
            if self.noise {
                let n = poisson_small((self.cavity_rate * a2 + self.free_space_rate) * dt, rng);
                for _ in 0..2 * n {
                    let d: [f64; 3] = UnitSphere.sample(rng);
                    v += self.recoil_velocity * nalgebra::Vector3::from(d);
                }
                atom.cumulative_scattered += n;
            }
        }
        atom.velocity = [v.x, v.y, v.z];
        apply_parametric(atom, heating_rate, dt, rng);

        if !(atom.position.iter().all(|c| c.is_finite())
            && atom.velocity.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Diverged(format!(
                "non-finite state at t = {t:.6e} s: {:?}",
                atom.position
            )));
        }
        if self.noise {
            let hazard = if pump_on {
                self.hazard_on
            } else {
                self.hazard_off
            };
            if rng.random::<f64>() < hazard * dt {
                atom.kill(t + dt);
            }
        }
        Ok(())
    }

    /// Energy along x relative to the barrier between neighbouring wells
    /// at the atom's transverse position. Negative means bound in a well.
    fn axial_energy(&self, atom: &AtomState, lattice: &LatticeConfiguration, spacing: f64) -> f64 {
        let node = self.nearest_node(atom.position.x, lattice.conveyor_offset, spacing);
        let barrier = self.field.potential(
            &Position::new(node, atom.position.y, atom.position.z),
            lattice,
        );
        0.5 * self.mass * atom.velocity[0] * atom.velocity[0]
            + self.field.potential(&atom.position, lattice)
            - barrier
    }

    fn nearest_node(&self, x: f64, offset: f64, spacing: f64) -> f64 {
        let rel = x - offset - 0.5 * spacing;
        offset + 0.5 * spacing + (rel / spacing).round() * spacing
    }
}

fn nearest_well(x: f64, offset: f64, spacing: f64) -> f64 {
    offset + ((x - offset) / spacing).round() * spacing
}

/// An atom captured near the cavity during loading.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapturedAtom {
    pub capture_time: f64,
    /// Well position along the transport axis.
    pub x_well: f64,
    /// Energy above the well bottom at capture, J.
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadOutcome {
    pub arrivals: usize,
    pub captured: Vec<CapturedAtom>,
}

impl LoadOutcome {
    pub fn capture_times(&self) -> Vec<f64> {
        self.captured.iter().map(|a| a.capture_time).collect()
    }
}

/// Outcome of propagating one arriving atom through the lattice.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalFate {
    Captured(CapturedAtom),
    /// Bound in a well too far from the cavity to couple.
    TrappedAway,
    Escaped,
}

/// Propagate an atom that has just entered the standing-wave lattice
/// until it is bound in a well, leaves the region, or `deadline` passes.
pub fn propagate_arrival<R: Rng + ?Sized>(
    mut atom: AtomState,
    t_arrival: f64,
    deadline: f64,
    cfg: &ExperimentConfig,
    integrator: &Integrator,
    pump_on: bool,
    rng: &mut R,
) -> Result<ArrivalFate> {
    let lattice = LatticeConfiguration::lattice(0.0);
    let spacing = cfg.trap.well_spacing();
    let r_cap = cfg.arrival.capture_radius;
    let escape = (4.0 * cfg.arrival.cloud_sigma_x).max(3.0 * r_cap);
    let dt = cfg.dynamics.timestep;
    let mut t = t_arrival;
    let mut n = 0u64;
    loop {
        if n.is_multiple_of(8) {
            let e = integrator.axial_energy(&atom, &lattice, spacing);
            if e < 0.0 {
                let x_well = nearest_well(atom.position.x, 0.0, spacing);
                if x_well.abs() > r_cap {
                    return Ok(ArrivalFate::TrappedAway);
                }
                let bottom = integrator
                    .field()
                    .potential(&Position::new(x_well, 0.0, 0.0), &lattice);
                let energy = (integrator.energy(&atom, &lattice) - bottom).max(0.0);
                return Ok(ArrivalFate::Captured(CapturedAtom {
                    capture_time: t,
                    x_well,
                    energy,
                }));
            }
            if atom.position.x.abs() > escape && atom.position.x * atom.velocity[0] > 0.0 {
                return Ok(ArrivalFate::Escaped);
            }
            let r_perp = atom.position.y.hypot(atom.position.z);
            if r_perp > 2.0 * cfg.trap.sw_waist.max(cfg.trap.ic_waist) {
                return Ok(ArrivalFate::Escaped);
            }
        }
        if t >= deadline {
            return Ok(ArrivalFate::Escaped);
        }
        integrator.step(&mut atom, t, dt, &lattice, pump_on, 0.0, rng)?;
        if !atom.alive {
            return Ok(ArrivalFate::Escaped);
        }
        t += dt;
        n += 1;
    }
}

/// Draw an arriving atom from the guided cloud.
pub fn sample_arrival<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> AtomState {
    let a = &cfg.arrival;
    let m = cfg.constants.atom_mass;
    let kt = cfg.kelvin_to_joule(a.transverse_temperature);
    let kb_depth = cfg.kelvin_to_joule(cfg.trap.sw_depth);
    let omega_r = (4.0 * kb_depth / (m * cfg.trap.sw_waist.powi(2))).sqrt();
    let sig_r = (kt / (m * omega_r * omega_r)).sqrt();
    let sig_v = (kt / m).sqrt();
    let n = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    let pos = Position::new(a.cloud_sigma_x * n(rng), sig_r * n(rng), sig_r * n(rng));
    let vel = [a.velocity_sigma_x * n(rng), sig_v * n(rng), sig_v * n(rng)];
    AtomState::new(pos, vel)
}

/// Load atoms from one guided cloud. Arrival count is Poisson with mean
/// `arrival.mean_atoms`; arrival times are uniform over the loading window.
/// Stops early once `max_captures` atoms are held, if given.
pub fn load_atoms<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    mode: ModeId,
    max_captures: Option<usize>,
    rng: &mut R,
) -> Result<LoadOutcome> {
    let a = &cfg.arrival;
    let arrivals = poisson_small(a.mean_atoms, rng) as usize;
    let mut times: Vec<f64> = (0..arrivals)
        .map(|_| rng.random::<f64>() * a.load_duration)
        .collect();
    times.sort_by(f64::total_cmp);
    let integrator = Integrator::new(cfg, mode);
    let mut captured = Vec::new();
    for &t0 in &times {
        let atom = sample_arrival(cfg, rng);
        if let ArrivalFate::Captured(c) = propagate_arrival(
            atom,
            t0,
            a.load_duration,
            cfg,
            &integrator,
            cfg.pump.pump_on,
            rng,
        )? {
            captured.push(c);
            if max_captures.is_some_and(|m| captured.len() >= m) {
                break;
            }
        }
    }
    captured.sort_by(|x, y| x.capture_time.total_cmp(&y.capture_time));
    Ok(LoadOutcome { arrivals, captured })
}

/// Atom held in a lattice well, described by its well position and its
/// energy above the well bottom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellAtom {
    pub x_home: f64,
    pub energy: f64,
}

/// Sample a point on the constant-energy shell of a 3D harmonic well.
fn sample_harmonic_state<R: Rng + ?Sized>(
    energy: f64,
    center: Position,
    omegas: [f64; 3],
    mass: f64,
    rng: &mut R,
) -> AtomState {
    let mut g = [0.0f64; 6];
    for x in g.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut pos = center;
    let mut vel = [0.0; 3];
    for i in 0..3 {
        let eq = energy * (g[i] / norm).powi(2);
        let ep = energy * (g[i + 3] / norm).powi(2);
        pos[i] += g[i].signum() * (2.0 * eq / (mass * omegas[i] * omegas[i])).sqrt();
        vel[i] = g[i + 3].signum() * (2.0 * ep / mass).sqrt();
    }
    AtomState::new(pos, vel)
}

/// Interrupt the standing-wave trap: atoms evolve in the intracavity trap
/// alone with the pump off. Returns the survivors as they are recaptured
/// when the lattice returns; `None` marks a lost atom.
pub fn filter_phase<R: Rng + ?Sized>(
    atoms: &[WellAtom],
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<Vec<Option<WellAtom>>> {
    let m = cfg.constants.atom_mass;
    let lattice_full = LatticeConfiguration::lattice(0.0);
    let ic = LatticeConfiguration::ic_only();
    let integrator = Integrator::new(cfg, cfg.scenario.mode).without_noise();
    let field = integrator.field();
    let ic_depth = field.ic_depth();
    let margin = cfg.dynamics.loss_energy_margin;
    let ic_freqs = trap_frequencies(&Position::zeros(), &ic, cfg)?;
    let f_ic_max = ic_freqs.last().map(|f| f.frequency).unwrap_or(1.0);
    let steps_wanted = (cfg.arrival.filter_duration * 20.0 * f_ic_max)
        .ceil()
        .max(1.0);
    let dt = (cfg.arrival.filter_duration / steps_wanted).min(cfg.arrival.filter_duration);
    let n_steps = (cfg.arrival.filter_duration / dt).round() as u64;
    let hazard = 1.0 / cfg.dynamics.lifetime_pump_off;
    let region = 2.0 * cfg.trap.ic_waist;

    let mut out = Vec::with_capacity(atoms.len());
    for wa in atoms {
        let center = Position::new(wa.x_home, 0.0, 0.0);
        let omegas = match trap_frequencies(&center, &lattice_full, cfg) {
            Ok(f) => axis_omegas(&f),
            Err(_) => {
                out.push(None);
                continue;
            }
        };
        let mut atom = sample_harmonic_state(wa.energy, center, omegas, m, rng);
        // the standing wave is switched off abruptly: only the intracavity
        // potential remains
        let e_ic = integrator.energy(&atom, &ic);
        if e_ic > (margin - 1.0) * ic_depth {
            out.push(None);
            continue;
        }
        if rng.random::<f64>() < hazard * cfg.arrival.filter_duration {
            out.push(None);
            continue;
        }
        let mut lost = false;
        for k in 0..n_steps {
            integrator.step(&mut atom, k as f64 * dt, dt, &ic, false, 0.0, rng)?;
            if k % 64 == 0 && atom.position.x.hypot(atom.position.z) > region {
                lost = true;
                break;
            }
        }
        if lost || integrator.energy(&atom, &ic) > (margin - 1.0) * ic_depth {
            out.push(None);
            continue;
        }
        let spacing = cfg.trap.well_spacing();
        let x_home = nearest_well(atom.position.x, 0.0, spacing);
        let ke = integrator.kinetic_energy(&atom);
        let u_here = field.ic_potential(&atom.position);
        let u_axis = field.ic_potential(&Position::new(atom.position.x, 0.0, atom.position.z));
        out.push(Some(WellAtom {
            x_home,
            energy: (ke + u_here - u_axis).max(0.0),
        }));
    }
    Ok(out)
}

fn axis_omegas(freqs: &[TrapFrequency]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for f in freqs {
        let idx = f
            .axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out[idx] = 2.0 * PI * f.frequency;
    }
    for o in out.iter_mut() {
        if *o == 0.0 {
            *o = freqs.first().map(|f| 2.0 * PI * f.frequency).unwrap_or(1.0);
        }
    }
    out
}

/// Record of one atom's motion in the well frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WellTrajectory {
    pub x_home: f64,
    /// `(time, displacement)` of the atom relative to the commanded
    /// conveyor offset, piecewise constant from each entry onward. The
    /// displacement collects hops and the galvo repeatability error.
    pub shifts: Vec<(f64, f64)>,
    pub loss_time: Option<f64>,
    pub hops: usize,
    pub final_energy: f64,
}

impl WellTrajectory {
    pub fn survived(&self) -> bool {
        self.loss_time.is_none()
    }

    pub fn alive_at(&self, t: f64) -> bool {
        self.loss_time.is_none_or(|tl| t < tl)
    }

    /// Displacement (hops plus galvo error) in force at `t`.
    pub fn shift_at(&self, t: f64) -> f64 {
        let idx = self.shifts.partition_point(|s| s.0 <= t);
        if idx == 0 {
            0.0
        } else {
            self.shifts[idx - 1].1
        }
    }

    /// Atom position along the transport axis.
    pub fn position(&self, t: f64, waveform: &SweepWaveform) -> f64 {
        let tt = t.clamp(0.0, waveform.duration);
        self.x_home + waveform.offset_unchecked(tt) + self.shift_at(t)
    }
}

/// Orbit-averaged energy model for an atom in a single, possibly moving,
/// lattice well.
///
/// The energy above the well bottom follows
/// `dE = (h − c·E) dt + √(2hE/3) dW` from cavity cooling and recoil heating
/// (sampled exactly as a square-root diffusion whose stationary law is the
/// 3D thermal Gamma(3, E/3)), followed by multiplicative
/// parametric growth `dE = g·E dt + √g·E dW`. The atom is lost when `E`
/// exceeds the standing-wave depth times the loss margin, or at the
/// background-loss time.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    field: FieldModel,
    mode: ModeId,
    params: DynamicsParams,
    galvo: GalvoModel,
    well_spacing: f64,
    friction_rate: f64,
    cavity_rate: f64,
    free_space_rate: f64,
    kick_energy: f64,
    loss_energy: f64,
    trap_freqs: Vec<TrapFrequency>,
    hazards: bool,
}

impl EnergyModel {
    pub fn new(cfg: &ExperimentConfig, mode: ModeId) -> Result<Self> {
        let trap_freqs =
            trap_frequencies(&Position::zeros(), &LatticeConfiguration::lattice(0.0), cfg)?;
        Ok(Self {
            field: FieldModel::new(cfg),
            mode,
            params: cfg.dynamics.clone(),
            galvo: cfg.galvo.clone(),
            well_spacing: cfg.trap.well_spacing(),
            friction_rate: cfg.dynamics.cooling_coefficient / cfg.constants.atom_mass,
            cavity_rate: max_scattering_rate(cfg, mode),
            free_space_rate: if cfg.dynamics.free_space_scattering {
                free_space_scattering_rate(cfg)
            } else {
                0.0
            },
            kick_energy: 2.0 * recoil_energy(cfg),
            loss_energy: cfg.dynamics.loss_energy_margin * cfg.kelvin_to_joule(cfg.trap.sw_depth),
            trap_freqs,
            hazards: true,
        })
    }

    /// Disable the background-loss hazard.
    pub fn without_background_loss(mut self) -> Self {
        self.hazards = false;
        self
    }

    pub fn trap_frequencies(&self) -> &[TrapFrequency] {
        &self.trap_freqs
    }

    pub fn loss_energy(&self) -> f64 {
        self.loss_energy
    }

    /// Steady-state energy with the pump on at transverse offset `x`.
    pub fn steady_state_energy(&self, x: f64) -> f64 {
        let (c, h) = self.cooling_heating(x, true);
        if c > 0.0 {
            h / c
        } else {
            f64::INFINITY
        }
    }

    #[inline]
    fn cooling_heating(&self, x: f64, pump_on: bool) -> (f64, f64) {
        if !pump_on {
            return (0.0, 0.0);
        }
        let a2 = self.field.axial_intensity(self.mode, x);
        (
            self.friction_rate * a2,
            self.kick_energy * (self.cavity_rate * a2 + self.free_space_rate),
        )
    }

    /// One step of the cooling/heating diffusion, sampled from its exact
    /// noncentral chi-square transition with six degrees of freedom.
    fn diffusion_step<R: Rng + ?Sized>(e: f64, c: f64, h: f64, dt: f64, rng: &mut R) -> f64 {
        if h <= 0.0 {
            return e * (-c * dt).exp();
        }
        let cdt = c * dt;
        let decay = (-cdt).exp();
        let one_minus = if cdt < 1e-10 { cdt } else { -(-cdt).exp_m1() };
        let k = if c > 0.0 {
            h * one_minus / (6.0 * c)
        } else {
            h * dt / 6.0
        };
        let lambda = decay * e / k;
        let n = poisson_small(0.5 * lambda, rng);
        let g = Gamma::new(3.0 + n as f64, 1.0).expect("positive shape");
        2.0 * k * g.sample(rng)
    }

    /// Evolve an atom held at rest at transverse position `x` for
    /// `duration`. Returns the final energy, or `None` if lost.
    pub fn evolve_static<R: Rng + ?Sized>(
        &self,
        energy: f64,
        x: f64,
        duration: f64,
        pump_on: bool,
        rng: &mut R,
    ) -> Option<f64> {
        let dt = self.params.energy_timestep;
        let n = (duration / dt).ceil() as usize;
        let (c, h) = self.cooling_heating(x, pump_on);
        let t_bg = self.background_loss_time(pump_on, rng);
        let mut e = energy;
        for k in 0..n {
            let step = dt.min(duration - k as f64 * dt);
            e = Self::diffusion_step(e, c, h, step, rng);
            if e > self.loss_energy || (k as f64 + 1.0) * dt > t_bg {
                return None;
            }
        }
        Some(e)
    }

    fn background_loss_time<R: Rng + ?Sized>(&self, pump_on: bool, rng: &mut R) -> f64 {
        if !self.hazards {
            return f64::INFINITY;
        }
        Exp::new(1.0 / self.params.lifetime(pump_on))
            .map(|d| d.sample(rng))
            .unwrap_or(f64::INFINITY)
    }

    /// Follow an atom through a sweep waveform.
    pub fn run<R: Rng + ?Sized>(
        &self,
        atom: WellAtom,
        waveform: &SweepWaveform,
        pump_on: bool,
        rng: &mut R,
        mut log: Option<(&mut Vec<Event>, usize)>,
    ) -> Result<WellTrajectory> {
        let limit = self.galvo.range();
        let reach = waveform.center.abs() + waveform.max_excursion();
        if reach > limit {
            return Err(Error::GalvoRange {
                commanded: reach,
                limit,
            });
        }
        let mut galvo = GalvoDrive::new(self.galvo.clone());
        let reversals = waveform.reversal_times();
        let dt = self.params.energy_timestep;
        let duration = waveform.duration;
        let n = (duration / dt).ceil() as usize;
        let t_bg = self.background_loss_time(pump_on, rng);
        let sqrt_dt = dt.sqrt();

        let mut traj = WellTrajectory {
            x_home: atom.x_home,
            shifts: Vec::new(),
            loss_time: None,
            hops: 0,
            final_energy: atom.energy,
        };
        let mut e = atom.energy;
        let mut hop_sum = 0.0;
        let mut next_rev = 0;
        let mut shift = 0.0;
        for k in 0..n {
            let t0 = k as f64 * dt;
            let t1 = ((k + 1) as f64 * dt).min(duration);
            let h_dt = t1 - t0;
            while next_rev < reversals.len() && reversals[next_rev] < t1 {
                let tr = reversals[next_rev];
                next_rev += 1;
                let commanded = waveform.offset_unchecked(tr);
                galvo.realized_offset(commanded, true, rng)?;
                let d = draw_hop(self.params.hop_probability, self.well_spacing, rng);
                let x_now = atom.x_home + commanded + shift;
                if let Some((events, id)) = log.as_mut() {
                    events.push(Event {
                        time: tr,
                        kind: EventKind::Reversal,
                        atom_id: *id,
                        x_position: x_now,
                    });
                }
                if d != 0.0 {
                    hop_sum += d;
                    traj.hops += 1;
                    if let Some((events, id)) = log.as_mut() {
                        events.push(Event {
                            time: tr,
                            kind: EventKind::Hop,
                            atom_id: *id,
                            x_position: x_now + d,
                        });
                    }
                }
                shift = hop_sum + galvo.error();
                traj.shifts.push((tr, shift));
            }
            let tm = 0.5 * (t0 + t1);
            let x = atom.x_home + waveform.offset_unchecked(tm) + shift;
            let (c, h) = self.cooling_heating(x, pump_on);
            e = Self::diffusion_step(e, c, h, h_dt, rng);
            let f_mod = modulation_frequency(tm, waveform, self.well_spacing);
            let g = parametric_growth_rate(f_mod, &self.trap_freqs, &self.params);
            if g > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                let sg = g.sqrt() * sqrt_dt * (h_dt / dt).sqrt();
                e *= (0.5 * g * h_dt + sg * z).exp();
            }
            let lost_at = if t1 >= t_bg {
                Some(t_bg)
            } else if e > self.loss_energy {
                Some(t1)
            } else {
                None
            };
            if let Some(tl) = lost_at {
                traj.loss_time = Some(tl);
                if let Some((events, id)) = log.as_mut() {
                    events.push(Event {
                        time: tl,
                        kind: EventKind::Loss,
                        atom_id: *id,
                        x_position: atom.x_home
                            + waveform.offset_unchecked(tl.min(duration))
                            + shift,
                    });
                }
                break;
            }
        }
        traj.final_energy = e;
        Ok(traj)
    }
}

/// Initial energy of an atom injected at a well bottom: 3D thermal at
/// the injection temperature.
pub fn injected_energy<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> f64 {
    let kt = cfg.kelvin_to_joule(cfg.dynamics.injection_temperature);
    if kt <= 0.0 {
        return 0.0;
    }
    Gamma::new(3.0, kt).expect("positive scale").sample(rng)
}

/// Result of one loading attempt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreparedAttempt {
    pub load: LoadOutcome,
    /// Atoms still coupled to the cavity at the end of preparation.
    pub atoms: Vec<WellAtom>,
}

/// Full preparation sequence for one loading attempt: load, cool in place
/// with the pump until the end of the loading window, then optionally
/// run the filter.
pub fn prepare_attempt<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    mode: ModeId,
    use_filter: bool,
    rng: &mut R,
) -> Result<PreparedAttempt> {
    let load = load_atoms(cfg, mode, None, rng)?;
    let model = EnergyModel::new(cfg, mode)?;
    let mut held = Vec::new();
    for c in &load.captured {
        let remaining = (cfg.arrival.load_duration - c.capture_time).max(0.0);
        if let Some(e) = model.evolve_static(c.energy, c.x_well, remaining, cfg.pump.pump_on, rng) {
            held.push(WellAtom {
                x_home: c.x_well,
                energy: e,
            });
        }
    }
    let atoms = if use_filter {
        filter_phase(&held, cfg, rng)?
            .into_iter()
            .flatten()
            .collect()
    } else {
        held
    };
    Ok(PreparedAttempt { load, atoms })
}

/// Load until one attempt captures at least two atoms and report whether
/// the first two sit on opposite sides of the cavity axis.
pub fn pair_in_different_lobes<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    mode: ModeId,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Option<bool>> {
    for _ in 0..max_attempts {
        let load = load_atoms(cfg, mode, Some(2), rng)?;
        if load.captured.len() >= 2 {
            let a = load.captured[0].x_well;
            let b = load.captured[1].x_well;
            return Ok(Some(a * b < 0.0));
        }
    }
    Ok(None)
}

/// Source of single atoms for survival runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Preparation {
    /// Inject at a well bottom with a thermal energy; the well position is
    /// drawn from a normal distribution of the configured lateral width.
    FastStart,
    /// Draw uniformly from a pool of prepared atoms.
    Pool(Vec<WellAtom>),
}

impl Preparation {
    pub fn draw<R: Rng + ?Sized>(&self, cfg: &ExperimentConfig, rng: &mut R) -> WellAtom {
        match self {
            Preparation::FastStart => {
                let sigma = cfg.scenario.lateral_sigma;
                let x = if sigma > 0.0 {
                    Normal::new(0.0, sigma).expect("finite").sample(rng)
                } else {
                    0.0
                };
                WellAtom {
                    x_home: nearest_well(x, 0.0, cfg.trap.well_spacing()),
                    energy: injected_energy(cfg, rng),
                }
            }
            Preparation::Pool(atoms) => atoms[rng.random_range(0..atoms.len())],
        }
    }
}

/// Build a pool of up to `size` filtered single atoms from independent
/// loading attempts.
pub fn prepare_pool(
    cfg: &ExperimentConfig,
    mode: ModeId,
    size: usize,
    use_filter: bool,
    seed: u64,
) -> Result<Vec<WellAtom>> {
    let mut pool = Vec::new();
    let batch = 64;
    let max_attempts = 200 * size.max(1);
    let mut start = 0;
    while pool.len() < size && start < max_attempts {
        let results: Vec<Result<PreparedAttempt>> = (start..start + batch)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, domain::PREPARATION, i as u64);
                prepare_attempt(cfg, mode, use_filter, &mut rng)
            })
            .collect();
        for r in results {
            pool.extend(r?.atoms);
        }
        start += batch;
    }
    pool.truncate(size);
    if pool.is_empty() {
        return Err(Error::InsufficientData(
            "no atoms survived preparation".into(),
        ));
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalEstimate {
    pub survived: usize,
    pub trials: usize,
    pub fraction: f64,
    /// 95% Wilson score interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SurvivalEstimate {
    pub fn from_counts(survived: usize, trials: usize) -> Self {
        let n = trials as f64;
        let p = survived as f64 / n;
        let z = 1.959_963_984_540_054f64;
        let denom = 1.0 + z * z / n;
        let center = (p + z * z / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
        Self {
            survived,
            trials,
            fraction: p,
            ci_low: (center - half).max(0.0),
            ci_high: (center + half).min(1.0),
        }
    }

    /// Binomial standard error of the fraction.
    pub fn std_error(&self) -> f64 {
        let n = self.trials as f64;
        (self.fraction * (1.0 - self.fraction) / n).sqrt()
    }
}

/// Fraction of atoms still trapped after the full waveform.
pub fn survival_experiment(
    waveform: &SweepWaveform,
    pump_on: bool,
    n_trials: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    preparation: &Preparation,
) -> Result<SurvivalEstimate> {
    if n_trials == 0 {
        return Err(Error::EmptyInput(
            "survival experiment needs at least one trial",
        ));
    }
    let model = EnergyModel::new(cfg, cfg.scenario.mode)?;
    let outcomes: Vec<Result<bool>> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let atom = preparation.draw(cfg, &mut rng);
            model
                .run(atom, waveform, pump_on, &mut rng, None)
                .map(|t| t.survived())
                .map_err(|e| Error::Trial {
                    trial: i,
                    source: Box::new(e),
                })
        })
        .collect();
    let mut survived = 0;
    for o in outcomes {
        if o? {
            survived += 1;
        }
    }
    Ok(SurvivalEstimate::from_counts(survived, n_trials))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn symplectic_energy_conservation() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00).without_noise();
        let lat = LatticeConfiguration::lattice(0.0);
        let mut atom = AtomState::new(Position::new(5e-9, 0.2e-6, 0.3e-6), [0.0, 0.0, 0.0]);
        let e0 = int.energy(&atom, &lat);
        let mut rng = stream_rng(1, 0, 0);
        let mut worst = 0.0f64;
        for k in 0..200_000 {
            int.step(
                &mut atom,
                0.0,
                c.dynamics.timestep,
                &lat,
                false,
                0.0,
                &mut rng,
            )
            .unwrap();
            if k % 100 == 0 {
                worst = worst.max(((int.energy(&atom, &lat) - e0) / e0).abs());
            }
        }
        assert!(worst < 1e-4, "relative drift {worst}");
    }

    #[test]
    fn time_reversible_without_noise() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00).without_noise();
        let lat = LatticeConfiguration::lattice(0.0);
        let start = AtomState::new(Position::new(40e-9, 0.5e-6, -0.4e-6), [0.05, -0.01, 0.02]);
        let mut atom = start.clone();
        let mut rng = stream_rng(2, 0, 0);
        for _ in 0..20_000 {
            int.step(&mut atom, 0.0, 7e-8, &lat, false, 0.0, &mut rng)
                .unwrap();
        }
        atom.velocity = atom.velocity.map(|v| -v);
        for _ in 0..20_000 {
            int.step(&mut atom, 0.0, 7e-8, &lat, false, 0.0, &mut rng)
                .unwrap();
        }
        assert!((atom.position - start.position).norm() < 1e-15);
    }

    #[test]
    fn pump_friction_damps_oscillation() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00).without_noise();
        let lat = LatticeConfiguration::lattice(0.0);
        let mut atom = AtomState::new(Position::new(30e-9, 0.0, 0.0), [0.0; 3]);
        let mut rng = stream_rng(3, 0, 0);
        let bottom = int.energy(&AtomState::at_rest(Position::zeros()), &lat);
        let mut prev = int.energy(&atom, &lat) - bottom;
        for _ in 0..20 {
            for _ in 0..100 {
                int.step(&mut atom, 0.0, 7e-8, &lat, true, 0.0, &mut rng)
                    .unwrap();
            }
            let e = int.energy(&atom, &lat) - bottom;
            assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn dead_atoms_are_frozen() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00);
        let mut atom = AtomState::new(Position::new(1e-7, 0.0, 0.0), [0.1, 0.0, 0.0]);
        atom.kill(0.0);
        let before = atom.clone();
        let mut rng = stream_rng(4, 0, 0);
        let lat = LatticeConfiguration::lattice(0.0);
        int.step(&mut atom, 0.0, 7e-8, &lat, true, 100.0, &mut rng)
            .unwrap();
        assert_eq!(atom, before);
        let mut p = c.dynamics.clone();
        p.hop_probability = 1.0;
        assert_eq!(
            turning_point_hop(&mut atom, true, &p, 515e-9, &mut rng),
            0.0
        );
        assert_eq!(atom, before);
    }

    #[test]
    fn divergence_is_reported() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00).without_noise();
        let mut atom = AtomState::new(Position::new(f64::NAN, 0.0, 0.0), [0.0; 3]);
        let mut rng = stream_rng(5, 0, 0);
        let r = int.step(
            &mut atom,
            0.0,
            7e-8,
            &LatticeConfiguration::lattice(0.0),
            false,
            0.0,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Diverged(_))));
    }

    #[test]
    fn hop_statistics() {
        let mut rng = stream_rng(6, 0, 0);
        let p = cfg().dynamics;
        let mut atom = AtomState::at_rest(Position::zeros());
        let n = 10_000;
        let mut hops = 0;
        for _ in 0..n {
            if turning_point_hop(&mut atom, true, &p, 515e-9, &mut rng) != 0.0 {
                hops += 1;
            }
        }
        let mean = n as f64 * 0.069;
        let sd = (n as f64 * 0.069 * 0.931).sqrt();
        assert!((hops as f64 - mean).abs() < 3.0 * sd);
        let mut q = p.clone();
        q.hop_probability = 0.0;
        let x = atom.position;
        assert_eq!(
            turning_point_hop(&mut atom, true, &q, 515e-9, &mut rng),
            0.0
        );
        assert_eq!(atom.position, x);
        // calibration identity
        assert!(((0.069f64).sqrt() * 515.0 - 135.0).abs() < 1.0);
    }

    #[test]
    fn parametric_rate_threshold() {
        let p = cfg().dynamics;
        assert_eq!(parametric_growth_rate(0.0, &[], &p), 0.0);
        assert_eq!(parametric_growth_rate(6000.0, &[], &p), 0.0);
        assert!(parametric_growth_rate(6200.0, &[], &p) > 0.0);
        let mut q = p.clone();
        q.parametric_threshold = None;
        let f = [TrapFrequency {
            axis: [0.0, 0.0, 1.0],
            frequency: 9000.0,
        }];
        assert_eq!(parametric_growth_rate(8000.0, &f, &q), 0.0);
        assert!(parametric_growth_rate(9500.0, &f, &q) > 0.0);
        q.heating_model = HeatingModel::ResonanceBand;
        assert!(parametric_growth_rate(18000.0, &f, &q) > 0.0);
        assert_eq!(parametric_growth_rate(12000.0, &f, &q), 0.0);
    }

    #[test]
    fn diffusion_step_matches_moments() {
        // oracle: mean h/c·(1−e^{−c t}) + E0 e^{−c t}
        let mut rng = stream_rng(7, 0, 0);
        let (c, h, dt, e0) = (2000.0, 3e-24, 2e-4, 1e-27);
        let n = 100_000;
        let mut s = 0.0;
        for _ in 0..n {
            s += EnergyModel::diffusion_step(e0, c, h, dt, &mut rng);
        }
        let mean = s / n as f64;
        let decay = (-c * dt).exp();
        let oracle = e0 * decay + h / c * (1.0 - decay);
        assert!((mean - oracle).abs() / oracle < 0.01, "{mean} vs {oracle}");
    }

    #[test]
    fn diffusion_relaxes_to_thermal_gamma3() {
        // oracle: Gamma(3, θ) has mean 3θ and variance 3θ²
        let mut rng = stream_rng(9, 0, 0);
        let (c, h, dt) = (2000.0, 3e-24, 1e-2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| EnergyModel::diffusion_step(0.0, c, h, dt, &mut rng))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ess = h / c;
        assert!((mean - ess).abs() / ess < 0.01);
        assert!(
            (var / (mean * mean) - 1.0 / 3.0).abs() < 0.02,
            "{}",
            var / (mean * mean)
        );
    }

    #[test]
    fn pump_on_steady_state_is_cold() {
        let c = cfg();
        let m = EnergyModel::new(&c, ModeId::Tem00).unwrap();
        let e = m.steady_state_energy(0.0);
        assert!(e < 0.2 * c.kelvin_to_joule(c.trap.sw_depth));
        // steady state reached from a hot start
        let mut rng = stream_rng(8, 0, 0);
        let mut acc = 0.0;
        let n = 2000;
        for _ in 0..n {
            let start = 0.1 * m.loss_energy();
            acc += m
                .clone()
                .without_background_loss()
                .evolve_static(start, 0.0, 5e-3, true, &mut rng)
                .unwrap();
        }
        assert!((acc / n as f64 - e).abs() / e < 0.05);
    }

    #[test]
    fn sustained_modulation_loses_atom_quickly() {
        // oracle: mean first passage of ln E with drift g·duty/2, starting
        // from E[ln E0] = ln kT + ψ(3) for the injected Gamma(3, kT)
        let c = cfg();
        let m = EnergyModel::new(&c, ModeId::Tem00)
            .unwrap()
            .without_background_loss();
        let (amp, f) = (100e-6, 50.0);
        let w = SweepWaveform::sinusoid(amp, f, 0.5);
        let f_min = c.dynamics.parametric_threshold.unwrap();
        let duty = (2.0 / PI) * (f_min * 515e-9 / (2.0 * PI * f * amp)).acos();
        let kt = c.kelvin_to_joule(c.dynamics.injection_temperature);
        let digamma3 = 1.5 - 0.577_215_664_901_532_9;
        let mean = ((m.loss_energy() / kt).ln() - digamma3)
            / (0.5 * c.dynamics.parametric_heating_rate * duty);
        let mut rng = stream_rng(9, 0, 0);
        let n = 400;
        let mut times = Vec::new();
        for _ in 0..n {
            let atom = WellAtom {
                x_home: 0.0,
                energy: injected_energy(&c, &mut rng),
            };
            if let Some(tl) = m.run(atom, &w, false, &mut rng, None).unwrap().loss_time {
                times.push(tl);
            }
        }
        assert!(times.len() as f64 > 0.9 * n as f64, "lost {}", times.len());
        let avg = times.iter().sum::<f64>() / times.len() as f64;
        assert!((avg - mean).abs() < 0.15 * mean, "mean {avg} vs {mean}");
    }

    #[test]
    fn slow_sweep_survives_without_hazard() {
        let c = cfg();
        let w = SweepWaveform::sinusoid(25e-6, 10.0, 0.5);
        let mut rng = stream_rng(10, 0, 0);
        let m = EnergyModel::new(&c, ModeId::Tem00).unwrap();
        let free = m.clone().without_background_loss();
        let n = 1000;
        let (mut a, mut b) = (0, 0);
        for _ in 0..n {
            let atom = Preparation::FastStart.draw(&c, &mut rng);
            a += free
                .run(atom, &w, false, &mut rng, None)
                .unwrap()
                .survived() as usize;
            b += m.run(atom, &w, false, &mut rng, None).unwrap().survived() as usize;
        }
        assert!(a as f64 / n as f64 > 0.9);
        // the 3 s background lifetime alone allows exp(-1/6)
        let expect = (-0.5f64 / 3.0).exp();
        let sd = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((b as f64 / n as f64 - expect).abs() < 4.0 * sd);
    }

    #[test]
    fn trajectory_positions_follow_waveform() {
        let c = cfg();
        let mut c2 = c.clone();
        c2.galvo.repeatability_sigma = 0.0;
        c2.dynamics.hop_probability = 0.0;
        let m = EnergyModel::new(&c2, ModeId::Tem00)
            .unwrap()
            .without_background_loss();
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        let mut rng = stream_rng(11, 0, 0);
        let t = m
            .run(
                WellAtom {
                    x_home: 1e-6,
                    energy: 0.0,
                },
                &w,
                false,
                &mut rng,
                None,
            )
            .unwrap();
        assert!((t.position(1.0 / 80.0, &w) - 26e-6).abs() < 1e-12);
        assert_eq!(t.position(0.5, &w), 1e-6);
    }

    #[test]
    fn galvo_range_checked() {
        let c = cfg();
        let m = EnergyModel::new(&c, ModeId::Tem00).unwrap();
        let w = SweepWaveform::sinusoid(1e-3, 1.0, 0.5);
        let mut rng = stream_rng(12, 0, 0);
        assert!(matches!(
            m.run(
                WellAtom {
                    x_home: 0.0,
                    energy: 0.0
                },
                &w,
                false,
                &mut rng,
                None
            ),
            Err(Error::GalvoRange { .. })
        ));
    }

    #[test]
    fn hot_atom_without_pump_is_not_captured() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00);
        let v = (2.0 * 20.0 * c.kelvin_to_joule(2.5e-3) / c.constants.atom_mass).sqrt();
        let atom = AtomState::new(Position::new(-150e-6, 0.0, 0.0), [v, 0.0, 0.0]);
        let mut rng = stream_rng(13, 0, 0);
        let fate = propagate_arrival(atom, 0.0, 0.01, &c, &int, false, &mut rng).unwrap();
        assert_eq!(fate, ArrivalFate::Escaped);
    }

    #[test]
    fn slow_rippler_is_captured_by_cavity_cooling() {
        let c = cfg();
        let int = Integrator::new(&c, ModeId::Tem00);
        // just above the barrier, heading for the mode
        let v = (2.0 * c.kelvin_to_joule(2.6e-3) / c.constants.atom_mass).sqrt();
        let atom = AtomState::new(Position::new(-80e-6, 0.0, 0.0), [v, 0.0, 0.0]);
        let mut rng = stream_rng(14, 0, 0);
        let fate = propagate_arrival(atom, 0.0, 0.01, &c, &int, true, &mut rng).unwrap();
        match fate {
            ArrivalFate::Captured(a) => assert!(a.x_well.abs() < c.arrival.capture_radius),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filter_keeps_cold_and_drops_hot() {
        let c = cfg();
        let mut rng = stream_rng(15, 0, 0);
        let kb = c.constants.boltzmann_constant;
        let out = filter_phase(
            &[
                WellAtom {
                    x_home: 0.0,
                    energy: 0.0,
                },
                WellAtom {
                    x_home: 0.0,
                    energy: 2.0 * kb * 44e-6 * 2.0,
                },
            ],
            &c,
            &mut rng,
        )
        .unwrap();
        assert!(out[0].is_some());
        assert!(out[1].is_none());
    }

    #[test]
    fn filter_passes_cold_thermal_ensemble() {
        // oracle: Boltzmann sampling, 5 µK against a 44 µK barrier
        let mut c = cfg();
        c.dynamics.injection_temperature = 5e-6;
        let mut rng = stream_rng(16, 0, 0);
        let atoms: Vec<_> = (0..200)
            .map(|_| WellAtom {
                x_home: 0.0,
                energy: injected_energy(&c, &mut rng),
            })
            .collect();
        let out = filter_phase(&atoms, &c, &mut rng).unwrap();
        let kept = out.iter().filter(|a| a.is_some()).count();
        assert!(kept as f64 / 200.0 > 0.9, "kept {kept}");
    }

    #[test]
    fn wilson_interval() {
        let s = SurvivalEstimate::from_counts(50, 100);
        assert!((s.fraction - 0.5).abs() < 1e-12);
        assert!(s.ci_low < 0.5 && s.ci_high > 0.5);
        assert!((s.ci_high - s.ci_low - 0.192).abs() < 0.005);
    }

    #[test]
    fn zero_trials_is_error() {
        let c = cfg();
        let w = SweepWaveform::constant(0.0, 0.5);
        assert!(survival_experiment(&w, true, 0, &c, 1, &Preparation::FastStart).is_err());
    }
}
