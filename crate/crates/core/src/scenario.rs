//! Ground truth and measurement simulation, plus a plain-text scenario dump
//! so several runs can consume byte-identical inputs.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ncv_step, observe, BearingRangeSensor, NcvModel, Region};
use crate::rfs_core::{wrap_angle, KinematicState, Measurement};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub duration: usize,
    pub dt: f64,
    pub region: Region,
    pub birth_period: usize,
    /// Births per epoch are uniform on `0..=births_max`.
    pub births_max: usize,
    pub speed: f64,
    pub accel_noise: [f64; 2],
    pub sensors: Vec<BearingRangeSensor>,
    pub seed: u64,
}

/// Corners and edge midpoints of `region`, counter-clockwise from the
/// lower-left corner.
pub fn boundary_sensors(region: &Region) -> Vec<BearingRangeSensor> {
    let [x0, x1] = region.x;
    let [y0, y1] = region.y;
    let (xm, ym) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    [[x0, y0], [xm, y0], [x1, y0], [x1, ym], [x1, y1], [xm, y1], [x0, y1], [x0, ym]]
        .into_iter()
        .enumerate()
        .map(|(i, p)| BearingRangeSensor::new(i, p))
        .collect()
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let region = Region::square(0.0, 10_000.0);
        ScenarioConfig {
            duration: 100,
            dt: 1.0,
            region,
            birth_period: 5,
            births_max: 3,
            speed: 50.0,
            accel_noise: [5.0, 5.0],
            sensors: boundary_sensors(&region),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.duration == 0 || self.birth_period == 0 || !(self.dt > 0.0) || !(self.speed >= 0.0) {
            return Err(Error::config("duration, birth period and dt must be positive"));
        }
        if self.sensors.is_empty() {
            return Err(Error::config("at least one sensor required"));
        }
        self.region.validate()?;
        self.motion().validate()?;
        self.sensors.iter().try_for_each(BearingRangeSensor::validate)
    }

    pub fn motion(&self) -> NcvModel {
        NcvModel {
            dt: self.dt,
            accel_noise_std: self.accel_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTrajectory {
    pub id: usize,
    pub birth_step: usize,
    /// States for steps `birth_step..duration`.
    pub states: Vec<KinematicState>,
}

impl TruthTrajectory {
    pub fn state_at(&self, step: usize) -> Option<&KinematicState> {
        step.checked_sub(self.birth_step).and_then(|k| self.states.get(k))
    }
}

/// Births at steps `0, period, 2 period, ...`; each target starts uniformly
/// in the region with a uniform heading at the configured speed and persists
/// to the end.
pub fn generate_truth<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<TruthTrajectory> {
    let model = cfg.motion();
    let mut out = Vec::new();
    for birth_step in (0..cfg.duration).step_by(cfg.birth_period) {
        let count = rng.random_range(0..=cfg.births_max);
        for _ in 0..count {
            let px = rng.random_range(cfg.region.x[0]..=cfg.region.x[1]);
            let py = rng.random_range(cfg.region.y[0]..=cfg.region.y[1]);
            let heading = wrap_angle(rng.random_range(-PI..PI));
            let (s, c) = heading.sin_cos();
            let mut x = KinematicState::new(px, cfg.speed * c, py, cfg.speed * s);
            let mut states = Vec::with_capacity(cfg.duration - birth_step);
            states.push(x);
            for _ in birth_step + 1..cfg.duration {
                x = ncv_step(&model, &x, rng);
                states.push(x);
            }
            out.push(TruthTrajectory {
                id: out.len(),
                birth_step,
                states,
            });
        }
    }
    out
}

/// Origin of a simulated measurement; diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Target(usize),
    Clutter,
}

/// Per-sensor measurement sets with their origins. Noisy detections whose
/// range falls outside `[0, range_max]` are dropped.
pub fn generate_measurements_with_origin<R: Rng + ?Sized>(
    truth_at_t: &[KinematicState],
    sensors: &[BearingRangeSensor],
    rng: &mut R,
) -> Vec<Vec<(Measurement, Origin)>> {
    sensors
        .iter()
        .map(|s| {
            let mut zs = Vec::new();
            let nb = Normal::new(0.0, s.bearing_std).expect("validated std");
            let nr = Normal::new(0.0, s.range_std).expect("validated std");
            for (k, x) in truth_at_t.iter().enumerate() {
                if rng.random::<f64>() >= s.detect_prob {
                    continue;
                }
                let Ok(z) = observe(s, x) else { continue };
                let bearing = wrap_angle(z.bearing + nb.sample(rng));
                let range = z.range + nr.sample(rng);
                if (0.0..=s.range_max).contains(&range) {
                    zs.push((Measurement { bearing, range }, Origin::Target(k)));
                }
            }
            let n_clutter = if s.clutter_rate > 0.0 {
                Poisson::new(s.clutter_rate).expect("positive rate").sample(rng) as usize
            } else {
                0
            };
            for _ in 0..n_clutter {
                let bearing = wrap_angle(rng.random_range(-PI..PI));
                let range = rng.random_range(0.0..=s.range_max);
                zs.push((Measurement { bearing, range }, Origin::Clutter));
            }
            zs.shuffle(rng);
            zs
        })
        .collect()
}

pub fn generate_measurements<R: Rng + ?Sized>(
    truth_at_t: &[KinematicState],
    sensors: &[BearingRangeSensor],
    rng: &mut R,
) -> Vec<Vec<Measurement>> {
    generate_measurements_with_origin(truth_at_t, sensors, rng)
        .into_iter()
        .map(|zs| zs.into_iter().map(|(z, _)| z).collect())
        .collect()
}

/// Complete simulated inputs: truth and measurements for every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub truth: Vec<TruthTrajectory>,
    /// `measurements[step][sensor]`.
    pub measurements: Vec<Vec<Vec<Measurement>>>,
}

impl Scenario {
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let truth = generate_truth(cfg, &mut substream(cfg.seed, "scenario/truth"));
        let mut rng = substream(cfg.seed, "scenario/measurements");
        let measurements = (0..cfg.duration)
            .map(|t| generate_measurements(&truth_at(&truth, t), &cfg.sensors, &mut rng))
            .collect();
        Ok(Scenario {
            seed: cfg.seed,
            truth,
            measurements,
        })
    }

    pub fn duration(&self) -> usize {
        self.measurements.len()
    }

    pub fn num_sensors(&self) -> usize {
        self.measurements.first().map_or(0, Vec::len)
    }

    pub fn truth_at(&self, step: usize) -> Vec<KinematicState> {
        truth_at(&self.truth, step)
    }

    /// Text dump. Layout:
    ///
    /// ```text
    /// lmbtrack-scenario 1
    /// # truth <id> <birth_step> <px> <vx> <py> <vy> per step, one line per step
    /// # meas <step> <sensor> <bearing> <range>
    /// seed <u64>
    /// steps <n>
    /// sensors <v>
    /// truth ...
    /// meas ...
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(DUMP_MAGIC);
        s.push('\n');
        s.push_str("# truth <id> <birth_step> <step> <px> <vx> <py> <vy>\n");
        s.push_str("# meas <step> <sensor> <bearing> <range>\n");
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "steps {}", self.duration()).unwrap();
        writeln!(s, "sensors {}", self.num_sensors()).unwrap();
        for tr in &self.truth {
            for (k, x) in tr.states.iter().enumerate() {
                writeln!(
                    s,
                    "truth {} {} {} {:?} {:?} {:?} {:?}",
                    tr.id,
                    tr.birth_step,
                    tr.birth_step + k,
                    x.px,
                    x.vx,
                    x.py,
                    x.vy
                )
                .unwrap();
            }
        }
        for (t, per_sensor) in self.measurements.iter().enumerate() {
            for (sensor, zs) in per_sensor.iter().enumerate() {
                for z in zs {
                    writeln!(s, "meas {t} {sensor} {:?} {:?}", z.bearing, z.range).unwrap();
                }
            }
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {msg}", line + 1),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == DUMP_MAGIC => {}
            _ => return Err(bad(0, "missing or unsupported header")),
        }
        let mut header = |key: &str| -> Result<u64> {
            let (i, l) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err(bad(i, &format!("expected `{key}`")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(i, &format!("bad `{key}` value")))
        };
        let seed = header("seed")?;
        let steps = header("steps")? as usize;
        let sensors = header("sensors")? as usize;
        let mut truth: Vec<TruthTrajectory> = Vec::new();
        let mut measurements = vec![vec![Vec::new(); sensors]; steps];
        for (i, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            let num = |k: usize| -> Result<f64> { f.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(i, "bad number")) };
            let int = |k: usize| -> Result<usize> { f.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(i, "bad integer")) };
            match f.first().copied() {
                Some("truth") if f.len() == 8 => {
                    let (id, birth_step, step) = (int(1)?, int(2)?, int(3)?);
                    let x = KinematicState::new(num(4)?, num(5)?, num(6)?, num(7)?);
                    if truth.last().is_none_or(|t| t.id != id) {
                        truth.push(TruthTrajectory { id, birth_step, states: Vec::new() });
                    }
                    let tr = truth.last_mut().expect("just pushed");
                    if step != tr.birth_step + tr.states.len() {
                        return Err(bad(i, "truth steps not contiguous"));
                    }
                    tr.states.push(x);
                }
                Some("meas") if f.len() == 5 => {
                    let (t, s) = (int(1)?, int(2)?);
                    if t >= steps || s >= sensors {
                        return Err(bad(i, "measurement outside declared steps or sensors"));
                    }
                    measurements[t][s].push(Measurement { bearing: num(3)?, range: num(4)? });
                }
                _ => return Err(bad(i, "unrecognized record")),
            }
        }
        Ok(Scenario { seed, truth, measurements })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

const DUMP_MAGIC: &str = "lmbtrack-scenario 1";

fn truth_at(truth: &[TruthTrajectory], step: usize) -> Vec<KinematicState> {
    truth.iter().filter_map(|t| t.state_at(step).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn birth_epochs_and_counts() {
        let cfg = ScenarioConfig::default();
        let truth = generate_truth(&cfg, &mut substream(1, "t"));
        assert!(truth.len() <= 60);
        assert!(truth.iter().all(|t| t.birth_step % 5 == 0));
        assert_eq!((0..100).step_by(5).count(), 20);
        for t in &truth {
            assert!((t.states[0].speed() - 50.0).abs() < 1e-9);
            assert_eq!(t.birth_step + t.states.len(), 100);
            assert!(cfg.region.contains(t.states[0].px, t.states[0].py));
        }
    }

    #[test]
    fn truth_is_deterministic() {
        let cfg = ScenarioConfig::default();
        assert_eq!(generate_truth(&cfg, &mut substream(3, "t")), generate_truth(&cfg, &mut substream(3, "t")));
        assert_eq!(Scenario::generate(&cfg).unwrap(), Scenario::generate(&cfg).unwrap());
    }

    #[test]
    fn perfect_detection_without_clutter() {
        let sensors: Vec<_> = boundary_sensors(&Region::square(0.0, 10_000.0))
            .into_iter()
            .map(|s| BearingRangeSensor { detect_prob: 1.0, clutter_rate: 0.0, ..s })
            .collect();
        let xs = vec![KinematicState::new(4000.0, 0.0, 5000.0, 0.0), KinematicState::new(100.0, 0.0, 9000.0, 0.0)];
        let z = generate_measurements(&xs, &sensors, &mut substream(0, "m"));
        assert!(z.iter().all(|zs| zs.len() == 2));
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let s = BearingRangeSensor {
            detect_prob: 1.0,
            clutter_rate: 0.0,
            bearing_std: f64::MIN_POSITIVE,
            range_std: f64::MIN_POSITIVE,
            ..BearingRangeSensor::new(0, [0.0, 0.0])
        };
        let x = KinematicState::new(3000.0, 0.0, 4000.0, 0.0);
        let z = generate_measurements(&[x], std::slice::from_ref(&s), &mut substream(0, "m"));
        let exact = observe(&s, &x).unwrap();
        assert!((z[0][0].bearing - exact.bearing).abs() < 1e-12);
        assert!((z[0][0].range - exact.range).abs() < 1e-12);
    }

    #[test]
    fn clutter_count_is_poisson() {
        let s = BearingRangeSensor { detect_prob: 0.0, ..BearingRangeSensor::new(0, [0.0, 0.0]) };
        let mut rng = substream(0, "c");
        let draws = 4000;
        let total: usize = (0..draws)
            .map(|_| generate_measurements(&[KinematicState::new(1.0, 0.0, 1.0, 0.0)], std::slice::from_ref(&s), &mut rng)[0].len())
            .sum();
        let mean = total as f64 / draws as f64;
        // Poisson(10): standard error of the mean is sqrt(10 / draws)
        assert!((mean - 10.0).abs() < 3.0 * (10.0 / draws as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn origins_are_tracked() {
        let s = BearingRangeSensor { detect_prob: 1.0, clutter_rate: 5.0, ..BearingRangeSensor::new(0, [0.0, 0.0]) };
        let z = generate_measurements_with_origin(&[KinematicState::new(3000.0, 0.0, 4000.0, 0.0)], &[s], &mut substream(0, "o"));
        assert_eq!(z[0].iter().filter(|(_, o)| *o == Origin::Target(0)).count(), 1);
    }

    #[test]
    fn dump_round_trip() {
        let cfg = ScenarioConfig { duration: 12, ..ScenarioConfig::default() };
        let sc = Scenario::generate(&cfg).unwrap();
        let text = sc.to_text();
        let back = Scenario::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, sc);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn dump_rejects_garbage() {
        assert!(Scenario::from_text("hello", Path::new("x")).is_err());
        let text = format!("{DUMP_MAGIC}\nseed 1\nsteps 1\nsensors 1\nmeas 3 0 0.1 5.0\n");
        assert!(Scenario::from_text(&text, Path::new("x")).is_err());
    }
}
