//! Atom–cavity coupling and photon scattering rates.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optics::{FieldModel, ModeId, Position};

/// Local coupling of an atom at a given position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingState {
    pub mode: ModeId,
    /// rad/s
    pub g_local: f64,
    /// rad/s
    pub g_eff_local: f64,
    /// 1/s
    pub scattering_rate: f64,
}

/// Raman-reduced coupling Ω·g0/(2Δ).
pub fn effective_coupling(rabi: f64, g0: f64, stark_shift: f64) -> Result<f64> {
    if stark_shift == 0.0 {
        return Err(Error::DegenerateRaman);
    }
    Ok(rabi * g0 / (2.0 * stark_shift))
}

pub(crate) fn effective_coupling_or_zero(cfg: &ExperimentConfig, mode: ModeId) -> f64 {
    effective_coupling(
        cfg.pump.rabi_frequency,
        cfg.cavity.g0(mode),
        cfg.pump.stark_shift,
    )
    .unwrap_or(0.0)
}

/// Peak emission rate out of the output coupler, T1·FSR·(g_eff/κ)².
pub fn max_scattering_rate(cfg: &ExperimentConfig, mode: ModeId) -> f64 {
    let g_eff = effective_coupling_or_zero(cfg, mode);
    let kappa = cfg.cavity.kappa(mode);
    let fsr = cfg.cavity.fsr(cfg.constants.speed_of_light);
    cfg.cavity.transmission_t1 * fsr * (g_eff / kappa).powi(2)
}

/// Spontaneous Raman scattering into free space driven by the pump,
/// 2γ·(Ω/2Δ)². Acts wherever the pump illuminates the atom.
pub fn free_space_scattering_rate(cfg: &ExperimentConfig) -> f64 {
    let p = &cfg.pump;
    if p.stark_shift == 0.0 {
        return 0.0;
    }
    let s = p.rabi_frequency / (2.0 * p.stark_shift);
    2.0 * cfg.cavity.gamma_atom * s * s
}

pub fn local_scattering_rate(pos: &Position, mode: ModeId, cfg: &ExperimentConfig) -> f64 {
    if !cfg.pump.pump_on {
        return 0.0;
    }
    let a = FieldModel::new(cfg).mode_amplitude(mode, pos);
    max_scattering_rate(cfg, mode) * a * a
}

pub fn coupling_state(pos: &Position, mode: ModeId, cfg: &ExperimentConfig) -> CouplingState {
    let a = FieldModel::new(cfg).mode_amplitude(mode, pos).abs();
    CouplingState {
        mode,
        g_local: cfg.cavity.g0(mode) * a,
        g_eff_local: effective_coupling_or_zero(cfg, mode) * a,
        scattering_rate: local_scattering_rate(pos, mode, cfg),
    }
}

/// 1 − ⟨exp(−x²/w0²)⟩ for x ~ N(0, σ²).
pub fn mean_coupling_reduction(sigma_x: f64, w0: f64) -> f64 {
    1.0 - (1.0 + 2.0 * sigma_x * sigma_x / (w0 * w0)).powf(-0.5)
}

/// Equipartition temperature for a transverse spread in the harmonic part
/// of a Gaussian trap, T = 4·depth·σ²/w².
pub fn temperature_from_spread(sigma_x: f64, ic_depth: f64, ic_waist: f64) -> Result<f64> {
    if sigma_x >= ic_waist / 2.0 {
        return Err(Error::OutsideHarmonicRegime {
            sigma: sigma_x,
            half_waist: ic_waist / 2.0,
        });
    }
    Ok(4.0 * ic_depth * sigma_x * sigma_x / (ic_waist * ic_waist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn effective_coupling_examples() {
        let g = effective_coupling(2.0 * PI * 30e6, 2.0 * PI * 5e6, 2.0 * PI * 100e6).unwrap();
        assert!((g - 2.0 * PI * 0.75e6).abs() < 1e-6);
        assert_eq!(effective_coupling(0.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(effective_coupling(1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(
            effective_coupling(1.0, 1.0, 0.0),
            Err(Error::DegenerateRaman)
        ));
    }

    #[test]
    fn max_rates() {
        let mut c = cfg();
        let r00 = max_scattering_rate(&c, ModeId::Tem00);
        assert!((r00 - 6.54e5).abs() / 6.54e5 < 2e-3, "{r00}");
        assert!((r00 - 6.4e5).abs() / 6.4e5 < 0.05);
        // oracle: hand arithmetic with the TEM01 coupling
        let fsr = 299_792_458.0 / (2.0 * 490e-6);
        let oracle = 95e-6 * fsr * (30.0 * 4.3 / 200.0 / 2.5f64).powi(2);
        let r01 = max_scattering_rate(&c, ModeId::Tem01);
        assert!((r01 - oracle).abs() / oracle < 1e-12);
        assert!((r01 - 1.94e6).abs() / 1.94e6 < 0.01);
        c.cavity.transmission_t1 = 0.0;
        assert_eq!(max_scattering_rate(&c, ModeId::Tem00), 0.0);
    }

    #[test]
    fn local_rate_examples() {
        let mut c = cfg();
        let max = max_scattering_rate(&c, ModeId::Tem00);
        let w0 = c.cavity.waist_w0;
        assert_eq!(
            local_scattering_rate(&Position::zeros(), ModeId::Tem00, &c),
            max
        );
        assert_eq!(
            local_scattering_rate(&Position::zeros(), ModeId::Tem01, &c),
            0.0
        );
        let r = local_scattering_rate(&Position::new(w0, 0.0, 0.0), ModeId::Tem00, &c);
        assert!((r / max - (-2f64).exp()).abs() < 1e-12);
        c.pump.pump_on = false;
        assert_eq!(
            local_scattering_rate(&Position::zeros(), ModeId::Tem00, &c),
            0.0
        );
    }

    #[test]
    fn coupling_state_bounds() {
        let c = cfg();
        let s = coupling_state(&Position::new(10e-6, 0.1e-6, 0.0), ModeId::Tem01, &c);
        assert!(s.g_local >= 0.0 && s.g_local <= c.cavity.g0_tem01);
        assert!(s.scattering_rate >= 0.0);
    }

    #[test]
    fn free_space_rate() {
        let r = free_space_scattering_rate(&cfg());
        let oracle = 2.0 * 2.0 * PI * 3e6 * 0.15f64.powi(2);
        assert!((r - oracle).abs() < 1e-6 * oracle);
    }

    #[test]
    fn coupling_reduction_examples() {
        let r = mean_coupling_reduction(7.7e-6, 29.5e-6);
        assert!((r - 0.062).abs() < 0.001, "{r}");
        assert!(r <= 0.07);
        assert_eq!(mean_coupling_reduction(0.0, 29.5e-6), 0.0);
        assert!((mean_coupling_reduction(1.0, 1.0) - (1.0 - 3f64.powf(-0.5))).abs() < 1e-15);
    }

    #[test]
    fn coupling_reduction_matches_numeric_integration() {
        // oracle: trapezoidal quadrature of exp(-x²/w²) against the normal density
        for &(s, w) in &[(7.7e-6, 29.5e-6), (3e-6, 29.5e-6), (20e-6, 10e-6)] {
            let n = 200_000;
            let lim = 12.0 * s;
            let h = 2.0 * lim / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let x = -lim + i as f64 * h;
                let pdf = (-x * x / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt());
                let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc += wgt * pdf * (-x * x / (w * w)).exp() * h;
            }
            assert!((1.0 - acc - mean_coupling_reduction(s, w)).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_examples() {
        let t = temperature_from_spread(5e-6, 44e-6, 29.5e-6).unwrap();
        assert!((t - 5.06e-6).abs() < 0.01e-6, "{t}");
        assert_eq!(temperature_from_spread(0.0, 44e-6, 29.5e-6).unwrap(), 0.0);
        let t = temperature_from_spread(7.7e-6, 44e-6, 29.5e-6).unwrap();
        assert!((t - 12.0e-6).abs() < 0.05e-6, "{t}");
        assert!(matches!(
            temperature_from_spread(15e-6, 44e-6, 29.5e-6),
            Err(Error::OutsideHarmonicRegime { .. })
        ));
    }

    #[test]
    fn two_atoms_scatter_twice_as_much() {
        let c = cfg();
        let r = local_scattering_rate(&Position::new(3e-6, 0.0, 0.0), ModeId::Tem00, &c);
        let pair: f64 = [r, r].iter().sum();
        assert_eq!(pair, 2.0 * r);
    }

    proptest! {
        #[test]
        fn local_rate_bounded(x in -100e-6f64..100e-6, y in -1e-6f64..1e-6, z in -60e-6f64..60e-6) {
            let c = cfg();
            for mode in [ModeId::Tem00, ModeId::Tem01] {
                let r = local_scattering_rate(&Position::new(x, y, z), mode, &c);
                prop_assert!(r >= 0.0);
                prop_assert!(r <= max_scattering_rate(&c, mode) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn reduction_monotone(a in 0.0f64..50e-6, b in 0.0f64..50e-6) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(mean_coupling_reduction(lo, 29.5e-6) <= mean_coupling_reduction(hi, 29.5e-6));
        }

        #[test]
        fn rate_invariant_under_pump_scaling(k in 0.1f64..10.0) {
            let mut c = cfg();
            let r0 = max_scattering_rate(&c, ModeId::Tem00);
            c.pump.rabi_frequency *= k;
            c.pump.stark_shift *= k;
            let r1 = max_scattering_rate(&c, ModeId::Tem00);
            prop_assert!((r1 - r0).abs() <= 1e-12 * r0);
        }
    }
}
