//! Motion, sensor, clutter and birth-prior models.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfs_core::{wrap_angle, KinematicState, Measurement, ParticleSet};

/// Nearly-constant-velocity dynamics with independent white acceleration
/// noise per axis. Per axis the transition is `F = [[1, dt], [0, 1]]` and the
/// noise gain `G = [dt^2/2, dt]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcvModel {
    pub dt: f64,
    pub accel_noise_std: [f64; 2],
}

impl Default for NcvModel {
    fn default() -> Self {
        NcvModel {
            dt: 1.0,
            accel_noise_std: [5.0, 5.0],
        }
    }
}

impl NcvModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.accel_noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("NCV model needs dt > 0 and nonnegative noise"));
        }
        Ok(())
    }

    /// Per-axis transition matrix.
    pub fn transition(&self) -> [[f64; 2]; 2] {
        [[1.0, self.dt], [0.0, 1.0]]
    }

    /// Per-axis noise gain.
    pub fn gain(&self) -> [f64; 2] {
        [0.5 * self.dt * self.dt, self.dt]
    }

    /// Applies `F` without noise.
    pub fn propagate_mean(&self, x: &KinematicState) -> KinematicState {
        KinematicState {
            px: x.px + self.dt * x.vx,
            vx: x.vx,
            py: x.py + self.dt * x.vy,
            vy: x.vy,
        }
    }
}

/// One noisy NCV transition.
pub fn ncv_step<R: Rng + ?Sized>(model: &NcvModel, x: &KinematicState, rng: &mut R) -> KinematicState {
    let [gp, gv] = model.gain();
    let wx: f64 = rng.sample::<f64, _>(StandardNormal) * model.accel_noise_std[0];
    let wy: f64 = rng.sample::<f64, _>(StandardNormal) * model.accel_noise_std[1];
    let m = model.propagate_mean(x);
    KinematicState {
        px: m.px + gp * wx,
        vx: m.vx + gv * wx,
        py: m.py + gp * wy,
        vy: m.vy + gv * wy,
    }
}

/// A static bearing-range sensor. Bearing is measured from the +y axis
/// toward +x, looking from the target back to the sensor, so that
/// `px = px_s - r sin(bearing)` and `py = py_s - r cos(bearing)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BearingRangeSensor {
    pub id: usize,
    pub position: [f64; 2],
    pub bearing_std: f64,
    pub range_std: f64,
    pub detect_prob: f64,
    pub clutter_rate: f64,
    pub range_max: f64,
}

impl BearingRangeSensor {
    pub fn new(id: usize, position: [f64; 2]) -> Self {
        BearingRangeSensor {
            id,
            position,
            bearing_std: 0.25,
            range_std: 10.0,
            detect_prob: 0.95,
            clutter_rate: 10.0,
            range_max: 20_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bearing_std > 0.0 && self.range_std > 0.0) {
            return Err(Error::config(format!("sensor {}: noise stds must be positive", self.id)));
        }
        if !(0.0..=1.0).contains(&self.detect_prob) {
            return Err(Error::config(format!("sensor {}: detect_prob outside [0, 1]", self.id)));
        }
        if !(self.clutter_rate >= 0.0) || !(self.range_max > 0.0) {
            return Err(Error::config(format!(
                "sensor {}: clutter_rate must be >= 0 and range_max > 0",
                self.id
            )));
        }
        Ok(())
    }

    /// Detection probability at `x`. Constant for this sensor type.
    #[inline]
    pub fn detect_prob_at(&self, _x: &KinematicState) -> f64 {
        self.detect_prob
    }

    /// Noiseless bearing and range of a planar position.
    #[inline]
    pub fn observe_position(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let dx = self.position[0] - px;
        let dy = self.position[1] - py;
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        Some((dx.atan2(dy), dx.hypot(dy)))
    }

    /// Position whose noiseless observation is `z`.
    pub fn invert(&self, z: &Measurement) -> [f64; 2] {
        let (s, c) = z.bearing.sin_cos();
        [self.position[0] - z.range * s, self.position[1] - z.range * c]
    }

    /// `ln(2 pi sigma_bearing sigma_range)`.
    #[inline]
    pub fn log_norm(&self) -> f64 {
        (2.0 * PI * self.bearing_std * self.range_std).ln()
    }

    /// Squared Mahalanobis distance between `z` and a predicted
    /// `(bearing, range)`, with the bearing residual wrapped.
    #[inline]
    pub fn mahalanobis_sq(&self, z: &Measurement, bearing: f64, range: f64) -> f64 {
        let db = wrap_angle(z.bearing - bearing) / self.bearing_std;
        let dr = (z.range - range) / self.range_std;
        db * db + dr * dr
    }

    /// Log of the Gaussian measurement density at predicted `(bearing, range)`.
    #[inline]
    pub fn log_likelihood_at(&self, z: &Measurement, bearing: f64, range: f64) -> f64 {
        -0.5 * self.mahalanobis_sq(z, bearing, range) - self.log_norm()
    }

    /// Clutter density of the uniform-over-volume Poisson process.
    pub fn clutter_intensity(&self, z: &Measurement) -> f64 {
        if z.range < 0.0 || z.range > self.range_max {
            return 0.0;
        }
        self.clutter_rate / (2.0 * PI * self.range_max)
    }
}

/// Noiseless measurement of `x` by `sensor`.
pub fn observe(sensor: &BearingRangeSensor, x: &KinematicState) -> Result<Measurement> {
    let (bearing, range) = sensor
        .observe_position(x.px, x.py)
        .ok_or(Error::DegenerateGeometry { sensor: sensor.id })?;
    Ok(Measurement { bearing, range })
}

/// Gaussian likelihood `g(z | x)` with covariance `diag(sigma_b^2, sigma_r^2)`.
/// A target at the sensor position has zero likelihood.
pub fn likelihood(sensor: &BearingRangeSensor, z: &Measurement, x: &KinematicState) -> f64 {
    match sensor.observe_position(x.px, x.py) {
        Some((b, r)) => sensor.log_likelihood_at(z, b, r).exp(),
        None => 0.0,
    }
}

/// Clutter intensity `kappa(z)`; zero outside the observation volume.
pub fn clutter_intensity(sensor: &BearingRangeSensor, z: &Measurement) -> f64 {
    sensor.clutter_intensity(z)
}

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Region {
    pub fn square(lo: f64, hi: f64) -> Self {
        Region { x: [lo, hi], y: [lo, hi] }
    }

    pub fn area(&self) -> f64 {
        (self.x[1] - self.x[0]) * (self.y[1] - self.y[0])
    }

    #[inline]
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x[0] && px <= self.x[1] && py >= self.y[0] && py <= self.y[1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x[1] > self.x[0] && self.y[1] > self.y[0]) {
            return Err(Error::config("region is degenerate"));
        }
        Ok(())
    }
}

/// Newborn-state prior: uniform position over `region`, zero-mean Gaussian
/// velocity with `velocity_std` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BirthPrior {
    pub region: Region,
    pub velocity_std: f64,
    pub num_particles: usize,
}

impl Default for BirthPrior {
    fn default() -> Self {
        BirthPrior {
            region: Region::square(0.0, 10_000.0),
            velocity_std: 35.0,
            num_particles: 1000,
        }
    }
}

impl BirthPrior {
    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        if self.num_particles == 0 || !(self.velocity_std >= 0.0) {
            return Err(Error::config("birth prior needs particles and a nonnegative velocity std"));
        }
        Ok(())
    }

    #[inline]
    pub fn sample_velocity<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let vx: f64 = rng.sample(StandardNormal);
        let vy: f64 = rng.sample(StandardNormal);
        (vx * self.velocity_std, vy * self.velocity_std)
    }
}

/// Draws `n` equally weighted particles from the birth prior.
pub fn sample_birth_prior<R: Rng + ?Sized>(prior: &BirthPrior, n: usize, rng: &mut R) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::config("sample_birth_prior needs n >= 1"));
    }
    let region = prior.region;
    let px = rand_distr::Uniform::new_inclusive(region.x[0], region.x[1])
        .map_err(|e| Error::config(e.to_string()))?;
    let py = rand_distr::Uniform::new_inclusive(region.y[0], region.y[1])
        .map_err(|e| Error::config(e.to_string()))?;
    let states: Vec<KinematicState> = (0..n)
        .map(|_| {
            let x = px.sample(rng);
            let y = py.sample(rng);
            let (vx, vy) = prior.sample_velocity(rng);
            KinematicState::new(x, vx, y, vy)
        })
        .collect();
    Ok(ParticleSet::uniform(states))
}
