//! Value types shared by the filter, the birth sampler and the metrics:
//! kinematic states, bearing-range measurements, multi-sensor measurement
//! tuples, labels, particle sets and labeled multi-Bernoulli densities.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar position and velocity, `[px, vx, py, vy]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicState {
    pub px: f64,
    pub vx: f64,
    pub py: f64,
    pub vy: f64,
}

impl KinematicState {
    pub const fn new(px: f64, vx: f64, py: f64, vy: f64) -> Self {
        KinematicState { px, vx, py, vy }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.px, self.py]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.vx.is_finite() && self.py.is_finite() && self.vy.is_finite()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// A bearing-range measurement. Bearing is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub bearing: f64,
    pub range: f64,
}

impl Measurement {
    pub fn new(bearing: f64, range: f64) -> Result<Self> {
        if !bearing.is_finite() || !range.is_finite() || range < 0.0 {
            return Err(Error::config(format!(
                "measurement ({bearing}, {range}) is not a finite bearing with nonnegative range"
            )));
        }
        Ok(Measurement {
            bearing: wrap_angle(bearing),
            range,
        })
    }
}

/// Index into one sensor's measurement set. `0` is the miss-detection
/// sentinel; detections are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeasurementIndex(pub u32);

impl MeasurementIndex {
    pub const MISS: MeasurementIndex = MeasurementIndex(0);

    pub fn is_miss(self) -> bool {
        self.0 == 0
    }

    /// Zero-based position in the measurement set, `None` for a miss.
    pub fn slot(self) -> Option<usize> {
        (self.0 > 0).then(|| self.0 as usize - 1)
    }
}

/// One measurement index per sensor.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeasurementTuple(Vec<MeasurementIndex>);

impl MeasurementTuple {
    pub fn new(indices: Vec<MeasurementIndex>) -> Self {
        MeasurementTuple(indices)
    }

    pub fn from_raw(indices: &[u32]) -> Self {
        MeasurementTuple(indices.iter().copied().map(MeasurementIndex).collect())
    }

    /// The all-miss tuple for `sensors` sensors.
    pub fn all_miss(sensors: usize) -> Result<Self> {
        if sensors == 0 {
            return Err(Error::InvalidTuple("a tuple needs at least one sensor".into()));
        }
        Ok(MeasurementTuple(vec![MeasurementIndex::MISS; sensors]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, sensor: usize) -> MeasurementIndex {
        self.0[sensor]
    }

    pub fn indices(&self) -> &[MeasurementIndex] {
        &self.0
    }

    /// Copy of `self` with slot `sensor` replaced.
    pub fn with(&self, sensor: usize, index: MeasurementIndex) -> Self {
        let mut out = self.clone();
        out.0[sensor] = index;
        out
    }

    pub fn set(&mut self, sensor: usize, index: MeasurementIndex) {
        self.0[sensor] = index;
    }

    pub fn missed_count(&self) -> usize {
        self.0.iter().filter(|j| j.is_miss()).count()
    }

    pub fn detected_count(&self) -> usize {
        self.0.len() - self.missed_count()
    }

    /// `(sensor, zero-based measurement slot)` for every detecting sensor.
    pub fn detections(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(s, j)| j.slot().map(|k| (s, k)))
    }

    /// Checks the tuple against per-sensor measurement counts.
    pub fn validate(&self, counts: &[usize]) -> Result<()> {
        if self.0.len() != counts.len() {
            return Err(Error::InvalidTuple(format!(
                "tuple has {} entries for {} sensors",
                self.0.len(),
                counts.len()
            )));
        }
        for (s, (j, &m)) in self.0.iter().zip(counts).enumerate() {
            if j.0 as usize > m {
                return Err(Error::InvalidTuple(format!(
                    "index {} exceeds the {m} measurements of sensor {s}",
                    j.0
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for MeasurementTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for MeasurementTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, j) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", j.0)?;
        }
        f.write_str(")")
    }
}

/// Number of miss-detection entries in `tuple`.
pub fn tuple_missed_count(tuple: &MeasurementTuple) -> usize {
    tuple.missed_count()
}

/// The all-miss tuple; `sensors == 0` is rejected.
pub fn tuple_all_miss(sensors: usize) -> Result<MeasurementTuple> {
    MeasurementTuple::all_miss(sensors)
}

/// Track label `(birth_time, tuple)`. Ordering is birth time first, then the
/// tuple lexicographically.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub birth_time: u32,
    pub tuple: MeasurementTuple,
}

impl Label {
    pub fn new(birth_time: u32, tuple: MeasurementTuple) -> Self {
        Label { birth_time, tuple }
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.birth_time, self.tuple)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub state: KinematicState,
    pub weight: f64,
}

/// Weighted state samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
}

impl ParticleSet {
    pub fn new(particles: Vec<Particle>) -> Self {
        ParticleSet { particles }
    }

    /// Equally weighted set over `states`.
    pub fn uniform(states: impl IntoIterator<Item = KinematicState>) -> Self {
        let mut particles: Vec<Particle> = states
            .into_iter()
            .map(|state| Particle { state, weight: 1.0 })
            .collect();
        let w = 1.0 / particles.len().max(1) as f64;
        particles.iter_mut().for_each(|p| p.weight = w);
        ParticleSet { particles }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    pub fn is_normalized(&self) -> bool {
        !self.is_empty() && (self.total_weight() - 1.0).abs() <= 1e-9
    }

    /// Rescales weights to sum to one.
    pub fn normalize(&mut self) -> Result<()> {
        let total = self.total_weight();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::CannotNormalize);
        }
        self.particles.iter_mut().for_each(|p| p.weight /= total);
        Ok(())
    }

    /// Weighted mean state; weights need not be normalized.
    pub fn mean(&self) -> Option<KinematicState> {
        let total = self.total_weight();
        if !(total > 0.0) {
            return None;
        }
        let mut m = KinematicState::default();
        for p in &self.particles {
            let w = p.weight / total;
            m.px += w * p.state.px;
            m.vx += w * p.state.vx;
            m.py += w * p.state.py;
            m.vy += w * p.state.vy;
        }
        Some(m)
    }

    /// Systematic resampling to `n` equally weighted particles.
    pub fn resample_systematic<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        let total = self.total_weight();
        if !(total > 0.0) || !total.is_finite() || n == 0 {
            return Err(Error::CannotNormalize);
        }
        let parts = &self.particles;
        let last = parts
            .iter()
            .rposition(|p| p.weight > 0.0)
            .expect("positive total implies a positive weight");
        let step = total / n as f64;
        let u0 = rng.random::<f64>();
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        let mut cumulative = parts[0].weight;
        for k in 0..n {
            let u = (u0 + k as f64) * step;
            while u > cumulative && i < last {
                i += 1;
                cumulative += parts[i].weight;
            }
            out.push(parts[i].state);
        }
        Ok(ParticleSet::uniform(out))
    }
}

/// Labeled Bernoulli component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliComponent {
    pub label: Label,
    pub existence: f64,
    pub spatial: ParticleSet,
}

/// Labeled multi-Bernoulli density.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LmbDensity {
    pub components: Vec<BernoulliComponent>,
}

impl LmbDensity {
    pub fn new(components: Vec<BernoulliComponent>) -> Self {
        LmbDensity { components }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.components.iter().map(|c| &c.label)
    }

    /// Expected number of objects.
    pub fn cardinality_mean(&self) -> f64 {
        self.components.iter().map(|c| c.existence).sum()
    }
}

/// True iff no two components share a label.
pub fn labels_distinct(lmb: &LmbDensity) -> bool {
    let mut seen = HashSet::with_capacity(lmb.len());
    lmb.labels().all(|l| seen.insert(l))
}
