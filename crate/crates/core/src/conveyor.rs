//! Glass-plate/galvo positioning of the standing-wave antinodes.
//!
//! A [`SweepWaveform`] gives the commanded antinode displacement as a
//! function of time. [`GalvoDrive`] turns commanded displacements into
//! realized ones, adding a repeatability error that is redrawn at every
//! sweep-direction reversal and held in between.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalvoModel {
    /// Fraction of the optical path change that shifts the antinode pattern.
    pub path_to_displacement_gain: f64,
    /// Interferometric calibration, m of optical path per rad of plate tilt.
    pub angle_to_path: f64,
    /// One standard deviation of the pattern repeatability.
    pub repeatability_sigma: f64,
    pub angle_limit: f64,
}

impl Default for GalvoModel {
    fn default() -> Self {
        Self {
            path_to_displacement_gain: 0.5,
            angle_to_path: 4e-3,
            repeatability_sigma: 15e-9,
            angle_limit: 0.175,
        }
    }
}

impl GalvoModel {
    /// Largest reachable antinode displacement, m.
    pub fn range(&self) -> f64 {
        self.angle_limit * self.angle_to_path * self.path_to_displacement_gain
    }

    /// Plate angle that produces a given antinode displacement.
    pub fn angle_for(&self, displacement: f64) -> f64 {
        displacement / (self.angle_to_path * self.path_to_displacement_gain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepKind {
    Constant,
    /// `amplitude` is half the peak-to-peak excursion.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
    },
    /// `(time, displacement)` vertices relative to the waveform center.
    PiecewiseLinear {
        points: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepWaveform {
    pub kind: SweepKind,
    pub center: f64,
    pub duration: f64,
    pub return_to_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepVelocity {
    /// m/s
    pub v_max: f64,
    /// Potential wells passed per second at `v_max`.
    pub wells_per_second: f64,
}

impl SweepWaveform {
    pub fn constant(center: f64, duration: f64) -> Self {
        Self {
            kind: SweepKind::Constant,
            center,
            duration,
            return_to_start: false,
        }
    }

    pub fn sinusoid(amplitude: f64, frequency: f64, duration: f64) -> Self {
        Self {
            kind: SweepKind::Sinusoid {
                amplitude,
                frequency,
            },
            center: 0.0,
            duration,
            return_to_start: true,
        }
    }

    pub fn piecewise(points: Vec<(f64, f64)>, duration: f64) -> Self {
        Self {
            kind: SweepKind::PiecewiseLinear { points },
            center: 0.0,
            duration,
            return_to_start: false,
        }
    }

    pub fn with_center(mut self, center: f64) -> Self {
        self.center = center;
        self
    }

    pub fn returning(mut self, return_to_start: bool) -> Self {
        self.return_to_start = return_to_start;
        self
    }

    pub(crate) fn check(&self) -> std::result::Result<(), String> {
        if !(self.duration > 0.0) {
            return Err("duration must be positive".into());
        }
        match &self.kind {
            SweepKind::Constant => {}
            SweepKind::Sinusoid {
                amplitude,
                frequency,
            } => {
                if !(*amplitude >= 0.0) {
                    return Err("amplitude must be non-negative".into());
                }
                if !(*frequency >= 0.0) {
                    return Err("frequency must be non-negative".into());
                }
            }
            SweepKind::PiecewiseLinear { points } => {
                if points.is_empty() {
                    return Err("piecewise waveform needs at least one point".into());
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err("piecewise times must be strictly increasing".into());
                }
            }
        }
        Ok(())
    }

    /// End of the sinusoidal motion. With `return_to_start` the sweep stops
    /// at the last zero crossing that fits in the duration.
    fn active_end(&self) -> f64 {
        match self.kind {
            SweepKind::Sinusoid { frequency, .. } if self.return_to_start && frequency > 0.0 => {
                let half_periods = (2.0 * frequency * self.duration * (1.0 + 1e-12)).floor();
                half_periods / (2.0 * frequency)
            }
            _ => self.duration,
        }
    }

    fn effective_points(&self) -> Vec<(f64, f64)> {
        let SweepKind::PiecewiseLinear { points } = &self.kind else {
            return Vec::new();
        };
        let mut pts = points.clone();
        if self.return_to_start {
            let first = pts[0].1;
            let last = pts.len() - 1;
            if pts[last].0 < self.duration {
                pts.push((self.duration, first));
            } else {
                pts[last].1 = first;
            }
        }
        pts
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * self.duration.max(1.0);
        if t < -slack || t > self.duration + slack || t.is_nan() {
            return Err(Error::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(())
    }

    /// Commanded antinode displacement at time `t`.
    pub fn commanded_offset(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.offset_unchecked(t))
    }

    pub(crate) fn offset_unchecked(&self, t: f64) -> f64 {
        match &self.kind {
            SweepKind::Constant => self.center,
            SweepKind::Sinusoid {
                amplitude,
                frequency,
            } => {
                if t >= self.active_end() && self.return_to_start {
                    self.center
                } else {
                    self.center + amplitude * (2.0 * PI * frequency * t).sin()
                }
            }
            SweepKind::PiecewiseLinear { .. } => {
                let pts = self.effective_points();
                self.center + interpolate(&pts, t)
            }
        }
    }

    /// Commanded velocity of the antinode pattern.
    pub fn velocity(&self, t: f64) -> f64 {
        match &self.kind {
            SweepKind::Constant => 0.0,
            SweepKind::Sinusoid {
                amplitude,
                frequency,
            } => {
                if t >= self.active_end() && self.return_to_start {
                    0.0
                } else {
                    2.0 * PI * frequency * amplitude * (2.0 * PI * frequency * t).cos()
                }
            }
            SweepKind::PiecewiseLinear { .. } => {
                let pts = self.effective_points();
                match pts.windows(2).find(|w| t >= w[0].0 && t < w[1].0) {
                    Some(w) => (w[1].1 - w[0].1) / (w[1].0 - w[0].0),
                    None => 0.0,
                }
            }
        }
    }

    /// Times at which the sweep direction reverses, in increasing order.
    pub fn reversal_times(&self) -> Vec<f64> {
        match &self.kind {
            SweepKind::Constant => Vec::new(),
            SweepKind::Sinusoid {
                amplitude,
                frequency,
            } => {
                if *frequency <= 0.0 || *amplitude <= 0.0 {
                    return Vec::new();
                }
                let end = self.active_end();
                (0..)
                    .map(|k| (2 * k + 1) as f64 / (4.0 * frequency))
                    .take_while(|&t| t < end)
                    .collect()
            }
            SweepKind::PiecewiseLinear { .. } => {
                let pts = self.effective_points();
                let mut out = Vec::new();
                let mut last_sign = 0.0;
                for w in pts.windows(2) {
                    let slope = w[1].1 - w[0].1;
                    if slope == 0.0 {
                        continue;
                    }
                    let sign = slope.signum();
                    if last_sign != 0.0 && sign != last_sign {
                        out.push(w[0].0);
                    }
                    last_sign = sign;
                }
                out
            }
        }
    }

    /// Largest commanded excursion from the center.
    pub fn max_excursion(&self) -> f64 {
        match &self.kind {
            SweepKind::Constant => 0.0,
            SweepKind::Sinusoid { amplitude, .. } => *amplitude,
            SweepKind::PiecewiseLinear { .. } => self
                .effective_points()
                .iter()
                .map(|p| p.1.abs())
                .fold(0.0, f64::max),
        }
    }
}

fn interpolate(pts: &[(f64, f64)], t: f64) -> f64 {
    if t <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        if t <= w[1].0 {
            let f = (t - w[0].0) / (w[1].0 - w[0].0);
            return w[0].1 + f * (w[1].1 - w[0].1);
        }
    }
    pts[pts.len() - 1].1
}

/// Peak conveyor velocity and the corresponding well-passage rate.
pub fn max_sweep_velocity(w: &SweepWaveform, well_spacing: f64) -> SweepVelocity {
    let v_max = match &w.kind {
        SweepKind::Constant => 0.0,
        SweepKind::Sinusoid {
            amplitude,
            frequency,
        } => 2.0 * PI * frequency * amplitude,
        SweepKind::PiecewiseLinear { .. } => w
            .effective_points()
            .windows(2)
            .map(|p| ((p[1].1 - p[0].1) / (p[1].0 - p[0].0)).abs())
            .fold(0.0, f64::max),
    };
    SweepVelocity {
        v_max,
        wells_per_second: v_max / well_spacing,
    }
}

/// Rate at which wells sweep past a trapped atom, which is also the
/// frequency of the intensity modulation caused by residual back-reflections.
pub fn modulation_frequency(t: f64, w: &SweepWaveform, well_spacing: f64) -> f64 {
    w.velocity(t).abs() / well_spacing
}

/// Stateful galvo: holds the repeatability error between reversals.
#[derive(Debug, Clone)]
pub struct GalvoDrive {
    model: GalvoModel,
    error: f64,
    noise: Option<Normal<f64>>,
}

impl GalvoDrive {
    pub fn new(model: GalvoModel) -> Self {
        let noise = (model.repeatability_sigma > 0.0)
            .then(|| Normal::new(0.0, model.repeatability_sigma).expect("finite sigma"));
        Self {
            model,
            error: 0.0,
            noise,
        }
    }

    pub fn model(&self) -> &GalvoModel {
        &self.model
    }

    /// Current repeatability error.
    pub fn error(&self) -> f64 {
        self.error
    }

    /// Realized antinode displacement for a commanded one. The error term
    /// is redrawn only when `reversal_event` is set.
    pub fn realized_offset<R: Rng + ?Sized>(
        &mut self,
        commanded: f64,
        reversal_event: bool,
        rng: &mut R,
    ) -> Result<f64> {
        let limit = self.model.range();
        if commanded.abs() > limit {
            return Err(Error::GalvoRange { commanded, limit });
        }
        if reversal_event {
            self.error = match &self.noise {
                Some(n) => n.sample(rng),
                None => 0.0,
            };
        }
        Ok(commanded + self.error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    const WELL: f64 = 515e-9;

    #[test]
    fn sinusoid_examples() {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        assert_eq!(w.commanded_offset(0.0).unwrap(), 0.0);
        assert!((w.commanded_offset(1.0 / 80.0).unwrap() - 25e-6).abs() < 1e-18);
        let c = SweepWaveform::constant(3e-6, 1.0);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(c.commanded_offset(t).unwrap(), 3e-6);
        }
    }

    #[test]
    fn time_outside_span_is_an_error() {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        assert!(matches!(
            w.commanded_offset(0.6),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(w.commanded_offset(-0.1).is_err());
    }

    #[test]
    fn return_to_start_truncates_at_zero_crossing() {
        let w = SweepWaveform::sinusoid(25e-6, 3.3, 0.5).with_center(1e-6);
        assert_eq!(
            w.commanded_offset(0.5).unwrap(),
            w.commanded_offset(0.0).unwrap()
        );
        let pw = SweepWaveform::piecewise(vec![(0.0, 0.0), (0.2, 10e-6)], 0.5).returning(true);
        assert_eq!(
            pw.commanded_offset(0.5).unwrap(),
            pw.commanded_offset(0.0).unwrap()
        );
        assert!((pw.commanded_offset(0.1).unwrap() - 5e-6).abs() < 1e-15);
    }

    #[test]
    fn fig3_sweep_has_nineteen_full_passes() {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        assert_eq!(w.reversal_times().len(), 20);
    }

    #[test]
    fn piecewise_reversals() {
        let w = SweepWaveform::piecewise(
            vec![(0.0, 0.0), (0.1, 10e-6), (0.2, -10e-6), (0.3, 0.0)],
            0.3,
        );
        assert_eq!(w.reversal_times(), vec![0.1, 0.2]);
        assert!((max_sweep_velocity(&w, WELL).v_max - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn velocity_threshold_examples() {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        let v = max_sweep_velocity(&w, WELL);
        assert!((v.v_max - 3.1416e-3).abs() < 1e-6);
        assert!((v.wells_per_second - 6100.0).abs() < 61.0);
        let still = SweepWaveform::sinusoid(25e-6, 0.0, 0.5);
        assert_eq!(max_sweep_velocity(&still, WELL).wells_per_second, 0.0);
    }

    #[test]
    fn modulation_frequency_examples() {
        let w = SweepWaveform::sinusoid(25e-6, 20.0, 0.5);
        assert!(modulation_frequency(1.0 / 80.0, &w, WELL) < 1e-9);
        assert!((modulation_frequency(0.0, &w, WELL) - 6100.0).abs() < 61.0);
        let c = SweepWaveform::constant(0.0, 1.0);
        assert_eq!(modulation_frequency(0.4, &c, WELL), 0.0);
    }

    #[test]
    fn noiseless_galvo_is_exact() {
        let mut g = GalvoDrive::new(GalvoModel {
            repeatability_sigma: 0.0,
            ..GalvoModel::default()
        });
        let mut rng = stream_rng(1, 0, 0);
        for (i, x) in [0.0, 1e-6, -20e-6].into_iter().enumerate() {
            assert_eq!(g.realized_offset(x, i % 2 == 0, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn galvo_range_is_enforced() {
        let mut g = GalvoDrive::new(GalvoModel::default());
        let mut rng = stream_rng(1, 0, 0);
        let too_far = 2.0 * g.model().range();
        assert!(matches!(
            g.realized_offset(too_far, false, &mut rng),
            Err(Error::GalvoRange { .. })
        ));
    }

    #[test]
    fn galvo_noise_statistics() {
        let mut g = GalvoDrive::new(GalvoModel::default());
        let mut rng = stream_rng(7, 0, 0);
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| g.realized_offset(0.0, true, &mut rng).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!((std - 15e-9).abs() < 0.05 * 15e-9, "std = {std}");
    }

    #[test]
    fn galvo_error_held_between_reversals() {
        let mut g = GalvoDrive::new(GalvoModel::default());
        let mut rng = stream_rng(3, 0, 0);
        g.realized_offset(0.0, true, &mut rng).unwrap();
        let a = g.realized_offset(5e-6, false, &mut rng).unwrap();
        let b = g.realized_offset(5e-6, false, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn velocity_scales_linearly(f in 0.1f64..200.0, a in 1e-7f64..1e-4, s in 0.1f64..10.0) {
            let base = max_sweep_velocity(&SweepWaveform::sinusoid(a, f, 1.0), WELL).v_max;
            let fs = max_sweep_velocity(&SweepWaveform::sinusoid(a, s * f, 1.0), WELL).v_max;
            let as_ = max_sweep_velocity(&SweepWaveform::sinusoid(s * a, f, 1.0), WELL).v_max;
            prop_assert!((fs - s * base).abs() <= 1e-12 * fs);
            prop_assert!((as_ - s * base).abs() <= 1e-12 * as_);
        }

        #[test]
        fn returning_sinusoid_ends_at_start(f in 0.0f64..100.0, d in 0.01f64..2.0, c in -1e-5f64..1e-5) {
            let w = SweepWaveform::sinusoid(25e-6, f, d).with_center(c);
            prop_assert_eq!(w.commanded_offset(d).unwrap(), w.commanded_offset(0.0).unwrap());
        }
    }
}
