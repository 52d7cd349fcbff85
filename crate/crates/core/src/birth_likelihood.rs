//! Average pseudolikelihood of a measurement tuple, estimated by importance
//! sampling, together with the per-timestep memo cache and the evaluation
//! counters every benchmark number is built from.
//!
//! The estimator is a pure function of `(base_seed, timestep, tuple)`: each
//! tuple gets its own random stream, so a cached result and a recomputed one
//! are bitwise identical and memoization can never change the filter output.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ncv_step, BearingRangeSensor, BirthPrior, NcvModel};
use crate::rfs_core::{KinematicState, Measurement, MeasurementIndex, MeasurementTuple, Particle, ParticleSet};
use crate::rng::SeedMixer;

/// `exp(x)` is exactly zero in f64 below this.
const LOG_UNDERFLOW: f64 = -746.0;

/// Sensors, the current measurement sets and the birth prior for one step.
#[derive(Debug, Clone)]
pub struct PsiContext {
    sensors: Vec<BearingRangeSensor>,
    measurements: Vec<Vec<Measurement>>,
    prior: BirthPrior,
    timestep: u32,
    base_seed: u64,
    log_kappa: Vec<Vec<f64>>,
}

impl PsiContext {
    /// Validates that clutter intensity is positive at every measurement.
    pub fn new(
        sensors: Vec<BearingRangeSensor>,
        measurements: Vec<Vec<Measurement>>,
        prior: BirthPrior,
        timestep: u32,
        base_seed: u64,
    ) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::config("at least one sensor is required"));
        }
        if sensors.len() != measurements.len() {
            return Err(Error::config(format!(
                "{} sensors but {} measurement sets",
                sensors.len(),
                measurements.len()
            )));
        }
        prior.validate()?;
        let mut log_kappa = Vec::with_capacity(sensors.len());
        for (s, (sensor, zs)) in sensors.iter().zip(&measurements).enumerate() {
            sensor.validate()?;
            let mut row = Vec::with_capacity(zs.len());
            for (k, z) in zs.iter().enumerate() {
                let kappa = sensor.clutter_intensity(z);
                if !(kappa > 0.0) {
                    return Err(Error::ZeroClutter { sensor: s, index: k + 1 });
                }
                row.push(kappa.ln());
            }
            log_kappa.push(row);
        }
        Ok(PsiContext {
            sensors,
            measurements,
            prior,
            timestep,
            base_seed,
            log_kappa,
        })
    }

    pub fn sensors(&self) -> &[BearingRangeSensor] {
        &self.sensors
    }

    pub fn measurements(&self) -> &[Vec<Measurement>] {
        &self.measurements
    }

    pub fn prior(&self) -> &BirthPrior {
        &self.prior
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.measurements.iter().map(Vec::len).collect()
    }

    pub fn measurement(&self, sensor: usize, index: MeasurementIndex) -> Option<&Measurement> {
        index.slot().and_then(|k| self.measurements[sensor].get(k))
    }

    fn tuple_seed(&self, tuple: &MeasurementTuple) -> SeedMixer {
        tuple.indices().iter().fold(
            SeedMixer::new(self.base_seed)
                .push(self.timestep as u64)
                .push(tuple.len() as u64),
            |m, j| m.push(j.0 as u64),
        )
    }
}

/// Per-sensor pseudolikelihood: `p_D g(z|x) / kappa(z)` for a detection and
/// `1 - p_D` for a miss.
pub fn per_sensor_psi(ctx: &PsiContext, sensor: usize, index: MeasurementIndex, x: &KinematicState) -> Result<f64> {
    let s = &ctx.sensors[sensor];
    let pd = s.detect_prob_at(x);
    let Some(k) = index.slot() else {
        return Ok(1.0 - pd);
    };
    let z = ctx
        .measurements[sensor]
        .get(k)
        .ok_or_else(|| Error::InvalidTuple(format!("sensor {sensor} has no measurement {}", index.0)))?;
    let kappa = s.clutter_intensity(z);
    if !(kappa > 0.0) {
        return Err(Error::ZeroClutter { sensor, index: index.0 as usize });
    }
    Ok(pd * crate::models::likelihood(s, z, x) / kappa)
}

/// Joint pseudolikelihood: product of per-sensor factors, accumulated in the
/// log domain.
pub fn joint_psi(ctx: &PsiContext, tuple: &MeasurementTuple, x: &KinematicState) -> Result<f64> {
    tuple.validate(&ctx.counts())?;
    let mut log_sum = 0.0;
    for (s, &j) in tuple.indices().iter().enumerate() {
        let f = per_sensor_psi(ctx, s, j, x)?;
        if f <= 0.0 {
            return Ok(0.0);
        }
        log_sum += f.ln();
    }
    Ok(log_sum.exp())
}

/// Average pseudolikelihood and the importance-weighted particles it was
/// estimated from.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiResult {
    pub psi_bar: f64,
    /// Unnormalized importance weights `p_B psi / q`.
    pub weighted_particles: ParticleSet,
    /// Set when every importance weight is zero.
    pub degenerate: bool,
}

struct Detection<'a> {
    sensor: &'a BearingRangeSensor,
    z: Measurement,
    log_pd: f64,
    log_kappa: f64,
}

/// Importance-sampling estimate over a subset of sensors: `detections` are
/// `(sensor, zero-based slot)` pairs, `misses` the sensors contributing a
/// miss factor. The first detection drives the proposal.
fn estimate_terms(
    ctx: &PsiContext,
    detections: &[(usize, usize)],
    misses: &[usize],
    seed: SeedMixer,
) -> PsiResult {
    let prior = &ctx.prior;
    let n = prior.num_particles;
    let mut rng = seed.rng();
    let region = prior.region;
    let log_area = region.area().ln();

    // Detection probability is state-independent for the sensor type used
    // here, so the miss product is a constant.
    let probe = KinematicState::default();
    let log_miss: f64 = misses
        .iter()
        .map(|&s| (1.0 - ctx.sensors[s].detect_prob_at(&probe)).ln())
        .sum();

    let dets: Vec<Detection<'_>> = detections
        .iter()
        .map(|&(s, k)| Detection {
            sensor: &ctx.sensors[s],
            z: ctx.measurements[s][k],
            log_pd: ctx.sensors[s].detect_prob_at(&probe).ln(),
            log_kappa: ctx.log_kappa[s][k],
        })
        .collect();

    let mut particles = Vec::with_capacity(n);
    let mut total = 0.0;

    if dets.is_empty() {
        // proposal = prior, weight = psi(x)
        let w = log_miss.exp();
        for _ in 0..n {
            let px = region.x[0] + (region.x[1] - region.x[0]) * rng.random::<f64>();
            let py = region.y[0] + (region.y[1] - region.y[0]) * rng.random::<f64>();
            let (vx, vy) = prior.sample_velocity(&mut rng);
            particles.push(Particle {
                state: KinematicState::new(px, vx, py, vy),
                weight: w,
            });
            total += w;
        }
    } else {
        let lead = &dets[0];
        let rest = &dets[1..];
        // upper bound on the log contribution still to come, per position in `rest`
        let mut headroom = vec![0.0; rest.len() + 1];
        for i in (0..rest.len()).rev() {
            let d = &rest[i];
            headroom[i] = headroom[i + 1] + d.log_pd - d.sensor.log_norm() - d.log_kappa;
        }
        let base = -log_area + lead.log_pd - lead.log_kappa + log_miss;
        let [sx, sy] = lead.sensor.position;
        for _ in 0..n {
            let nb: f64 = rng.sample(StandardNormal);
            let nr: f64 = rng.sample(StandardNormal);
            let (vx, vy) = prior.sample_velocity(&mut rng);
            let alpha = lead.z.bearing + lead.sensor.bearing_std * nb;
            let r = lead.z.range + lead.sensor.range_std * nr;
            let (sa, ca) = alpha.sin_cos();
            let px = sx - r * sa;
            let py = sy - r * ca;
            let state = KinematicState::new(px, vx, py, vy);

            // The proposal density in position space is g_lead(z | x) / r, so
            // the lead sensor's likelihood cancels and leaves the polar
            // Jacobian r.
            let mut weight = 0.0;
            if r > 0.0 && region.contains(px, py) {
                let mut logw = base + r.ln();
                let mut alive = true;
                for (i, d) in rest.iter().enumerate() {
                    let [tx, ty] = d.sensor.position;
                    let dx = tx - px;
                    let dy = ty - py;
                    let range = dx.hypot(dy);
                    let dr = (d.z.range - range) / d.sensor.range_std;
                    let partial = logw - 0.5 * dr * dr + headroom[i];
                    if partial < LOG_UNDERFLOW || range == 0.0 {
                        alive = false;
                        break;
                    }
                    logw += d.log_pd - d.log_kappa
                        + d.sensor.log_likelihood_at(&d.z, dx.atan2(dy), range);
                }
                if alive {
                    weight = logw.exp();
                }
            }
            total += weight;
            particles.push(Particle { state, weight });
        }
    }

    let psi_bar = total / n as f64;
    PsiResult {
        psi_bar,
        weighted_particles: ParticleSet::new(particles),
        degenerate: !(total > 0.0),
    }
}

/// Estimates the average pseudolikelihood of `tuple` with `prior.num_particles`
/// importance samples. Deterministic in `(base_seed, timestep, tuple)`.
pub fn estimate_psi(ctx: &PsiContext, tuple: &MeasurementTuple) -> Result<PsiResult> {
    tuple.validate(&ctx.counts())?;
    let detections: Vec<(usize, usize)> = tuple.detections().collect();
    let misses: Vec<usize> = (0..tuple.len()).filter(|&s| tuple.get(s).is_miss()).collect();
    Ok(estimate_terms(ctx, &detections, &misses, ctx.tuple_seed(tuple)))
}

/// Average pseudolikelihood of the two-sensor tuple `(ja, jb)` over sensors
/// `a` and `b` only; the remaining sensors contribute no factor.
pub fn estimate_pair_psi(ctx: &PsiContext, a: usize, ja: usize, b: usize, jb: usize) -> PsiResult {
    let seed = SeedMixer::new(ctx.base_seed)
        .push(ctx.timestep as u64)
        .push_str("pair")
        .push(a as u64)
        .push(ja as u64)
        .push(b as u64)
        .push(jb as u64);
    estimate_terms(ctx, &[(a, ja), (b, jb)], &[], seed)
}

/// Source of average pseudolikelihoods for the sampler and the component
/// construction. Implemented by the single-threaded [`PsiCache`] and by
/// `&SharedPsiCache`.
pub trait PsiStore {
    fn lookup(&mut self, ctx: &PsiContext, tuple: &MeasurementTuple) -> Arc<PsiResult>;
    fn hits(&self) -> u64;
    fn misses(&self) -> u64;
}

/// Memo table for one timestep. A disabled cache stores nothing and
/// recomputes on every lookup.
#[derive(Debug)]
pub struct PsiCache {
    entries: HashMap<MeasurementTuple, Arc<PsiResult>>,
    enabled: bool,
    timestep: Option<u32>,
    hits: u64,
    misses: u64,
}

impl PsiCache {
    pub fn new(enabled: bool) -> Self {
        PsiCache {
            entries: HashMap::new(),
            enabled,
            timestep: None,
            hits: 0,
            misses: 0,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops all entries and counters.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.timestep = None;
        self.hits = 0;
        self.misses = 0;
    }

    fn bind(&mut self, timestep: u32) {
        match self.timestep {
            Some(t) if t == timestep => {}
            Some(_) => {
                // measurement sets changed; nothing carries over
                self.entries.clear();
                self.timestep = Some(timestep);
            }
            None => self.timestep = Some(timestep),
        }
    }
}

impl PsiStore for PsiCache {
    fn lookup(&mut self, ctx: &PsiContext, tuple: &MeasurementTuple) -> Arc<PsiResult> {
        self.bind(ctx.timestep);
        if self.enabled {
            if let Some(hit) = self.entries.get(tuple) {
                self.hits += 1;
                return Arc::clone(hit);
            }
        }
        self.misses += 1;
        let res = Arc::new(estimate_psi(ctx, tuple).expect("sampler tuples are valid"));
        if self.enabled {
            self.entries.insert(tuple.clone(), Arc::clone(&res));
        }
        res
    }

    fn hits(&self) -> u64 {
        self.hits
    }

    fn misses(&self) -> u64 {
        self.misses
    }
}

/// Memoized lookup. Returns the stored result on a hit, computes and stores
/// on a miss.
pub fn psi_bar_cached(cache: &mut PsiCache, ctx: &PsiContext, tuple: &MeasurementTuple) -> Arc<PsiResult> {
    cache.lookup(ctx, tuple)
}

type Slot = Arc<OnceLock<Arc<PsiResult>>>;

/// Thread-safe memo table with at-most-once computation per tuple.
#[derive(Debug)]
pub struct SharedPsiCache {
    timestep: u32,
    entries: Mutex<HashMap<MeasurementTuple, Slot>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl SharedPsiCache {
    pub fn new(timestep: u32) -> Self {
        SharedPsiCache {
            timestep,
            entries: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn get_or_compute(&self, ctx: &PsiContext, tuple: &MeasurementTuple) -> Arc<PsiResult> {
        assert_eq!(ctx.timestep, self.timestep, "shared cache is bound to one timestep");
        let slot: Slot = {
            let mut map = self.entries.lock().expect("cache lock poisoned");
            Arc::clone(map.entry(tuple.clone()).or_default())
        };
        let mut computed_here = false;
        let res = slot.get_or_init(|| {
            computed_here = true;
            Arc::new(estimate_psi(ctx, tuple).expect("sampler tuples are valid"))
        });
        if computed_here {
            self.misses.fetch_add(1, Ordering::Relaxed);
        } else {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Arc::clone(res)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PsiStore for &SharedPsiCache {
    fn lookup(&mut self, ctx: &PsiContext, tuple: &MeasurementTuple) -> Arc<PsiResult> {
        self.get_or_compute(ctx, tuple)
    }

    fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Evaluation counters for one birth step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Average-pseudolikelihood evaluations actually performed, including
    /// those spent building a pseudolikelihood gate.
    pub computed: u64,
    pub memo_hits: u64,
    /// Sampler lookups avoided by the gate.
    pub gated_skips: u64,
    /// Sampler lookups avoided because the candidate was pre-pruned.
    pub preprune_removed: u64,
    /// Sampled tuples dropped for too many missed detections.
    pub component_skips: u64,
    /// Part of `computed` spent on the gate matrix.
    pub gate_evaluations: u64,
    /// Distinct tuples returned by the sampler.
    pub tuples_sampled: u64,
}

impl EvalStats {
    /// Lookups that needed a value, whether computed or served from memory.
    pub fn needed(&self) -> u64 {
        self.computed - self.gate_evaluations + self.memo_hits
    }

    pub fn accumulate(&mut self, other: &EvalStats) {
        self.computed += other.computed;
        self.memo_hits += other.memo_hits;
        self.gated_skips += other.gated_skips;
        self.preprune_removed += other.preprune_removed;
        self.component_skips += other.component_skips;
        self.gate_evaluations += other.gate_evaluations;
        self.tuples_sampled += other.tuples_sampled;
    }
}

/// Normalizes the importance weights and resamples `n_out` equally weighted
/// particles.
pub fn spatial_posterior<R: Rng + ?Sized>(res: &PsiResult, n_out: usize, rng: &mut R) -> Result<ParticleSet> {
    if !(res.psi_bar > 0.0) {
        return Err(Error::CannotNormalize);
    }
    res.weighted_particles.resample_systematic(n_out, rng)
}

/// Advances every particle one noisy NCV step; weights are unchanged.
pub fn predict_birth_spatial<R: Rng + ?Sized>(model: &NcvModel, p: &ParticleSet, rng: &mut R) -> ParticleSet {
    ParticleSet::new(
        p.particles
            .iter()
            .map(|q| Particle {
                state: ncv_step(model, &q.state, rng),
                weight: q.weight,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::models::{observe, Region};
    use crate::rng::substream;

    fn sensor(id: usize, x: f64, y: f64) -> BearingRangeSensor {
        BearingRangeSensor::new(id, [x, y])
    }

    fn ctx_with(sensors: Vec<BearingRangeSensor>, zs: Vec<Vec<Measurement>>, prior: BirthPrior) -> PsiContext {
        PsiContext::new(sensors, zs, prior, 3, 42).unwrap()
    }

    fn eight_sensor_ctx() -> PsiContext {
        let pos = [
            (0.0, 0.0),
            (5000.0, 0.0),
            (10000.0, 0.0),
            (10000.0, 5000.0),
            (10000.0, 10000.0),
            (5000.0, 10000.0),
            (0.0, 10000.0),
            (0.0, 5000.0),
        ];
        let sensors: Vec<_> = pos.iter().enumerate().map(|(i, &(x, y))| sensor(i, x, y)).collect();
        let target = KinematicState::new(4000.0, 0.0, 6000.0, 0.0);
        let zs = sensors
            .iter()
            .map(|s| vec![observe(s, &target).unwrap(), Measurement { bearing: 1.0, range: 3000.0 }])
            .collect();
        ctx_with(sensors, zs, BirthPrior::default())
    }

    #[test]
    fn per_sensor_miss_and_unit_ratio() {
        let mut s = sensor(0, 0.0, 0.0);
        let x = KinematicState::new(300.0, 0.0, 400.0, 0.0);
        let z = observe(&s, &x).unwrap();
        let ctx = ctx_with(vec![s.clone()], vec![vec![z]], BirthPrior::default());
        assert!((per_sensor_psi(&ctx, 0, MeasurementIndex::MISS, &x).unwrap() - 0.05).abs() < 1e-15);

        // choose the clutter rate so kappa equals the peak likelihood
        let peak = 1.0 / (2.0 * PI * 0.25 * 10.0);
        s.clutter_rate = peak * 2.0 * PI * s.range_max;
        let ctx = ctx_with(vec![s.clone()], vec![vec![z]], BirthPrior::default());
        let v = per_sensor_psi(&ctx, 0, MeasurementIndex(1), &x).unwrap();
        assert!((v - 0.95).abs() < 1e-12, "{v}");

        s.detect_prob = 0.0;
        let ctx = ctx_with(vec![s], vec![vec![z]], BirthPrior::default());
        assert_eq!(per_sensor_psi(&ctx, 0, MeasurementIndex::MISS, &x).unwrap(), 1.0);
    }

    #[test]
    fn zero_clutter_is_config_error() {
        let mut s = sensor(0, 0.0, 0.0);
        s.clutter_rate = 0.0;
        let z = Measurement { bearing: 0.0, range: 10.0 };
        assert!(matches!(
            PsiContext::new(vec![s], vec![vec![z]], BirthPrior::default(), 0, 0),
            Err(Error::ZeroClutter { .. })
        ));
    }

    #[test]
    fn joint_all_miss_product() {
        let ctx = eight_sensor_ctx();
        let all_miss = MeasurementTuple::all_miss(8).unwrap();
        let v = joint_psi(&ctx, &all_miss, &KinematicState::default()).unwrap();
        assert!((v - 0.05f64.powi(8)).abs() / 0.05f64.powi(8) < 1e-12);
        assert!((v - 3.9063e-11).abs() < 1e-15);
    }

    #[test]
    fn joint_equals_factor_product() {
        let ctx = eight_sensor_ctx();
        let x = KinematicState::new(4010.0, 0.0, 5990.0, 0.0);
        let mut rng = substream(5, "tuples");
        for _ in 0..50 {
            let raw: Vec<u32> = (0..8).map(|_| rng.random_range(0..3)).collect();
            let t = MeasurementTuple::from_raw(&raw);
            let direct: f64 = (0..8)
                .map(|s| per_sensor_psi(&ctx, s, t.get(s), &x).unwrap())
                .product();
            let joint = joint_psi(&ctx, &t, &x).unwrap();
            if direct == 0.0 {
                assert_eq!(joint, 0.0);
            } else {
                assert!((joint - direct).abs() / direct < 1e-12, "{t}: {joint} vs {direct}");
            }
        }
    }

    #[test]
    fn joint_two_factor_example() {
        // factors (0.05, 2.0): a miss on sensor 0 and a detection whose
        // likelihood-to-clutter ratio is 2 / 0.95
        let s0 = sensor(0, 0.0, 0.0);
        let mut s1 = sensor(1, 1000.0, 0.0);
        let x = KinematicState::new(500.0, 0.0, 500.0, 0.0);
        let z = observe(&s1, &x).unwrap();
        let peak = 1.0 / (2.0 * PI * 0.25 * 10.0);
        let kappa = 0.95 * peak / 2.0;
        s1.clutter_rate = kappa * 2.0 * PI * s1.range_max;
        let ctx = ctx_with(vec![s0, s1], vec![vec![], vec![z]], BirthPrior::default());
        let v = joint_psi(&ctx, &MeasurementTuple::from_raw(&[0, 1]), &x).unwrap();
        assert!((v - 0.1).abs() < 1e-12, "{v}");
    }

    #[test]
    fn all_miss_estimate_is_exact() {
        for v in 1..=8 {
            let sensors: Vec<_> = (0..v).map(|i| sensor(i, i as f64 * 100.0, 0.0)).collect();
            let zs = vec![vec![]; v];
            let ctx = ctx_with(sensors, zs, BirthPrior::default());
            let res = estimate_psi(&ctx, &MeasurementTuple::all_miss(v).unwrap()).unwrap();
            let exact = 0.05f64.powi(v as i32);
            assert!((res.psi_bar - exact).abs() / exact < 1e-12, "V={v}");
        }
    }

    #[test]
    fn estimate_is_pure() {
        let ctx = eight_sensor_ctx();
        let t = MeasurementTuple::from_raw(&[1, 1, 0, 1, 0, 0, 2, 0]);
        let a = estimate_psi(&ctx, &t).unwrap();
        let b = estimate_psi(&ctx, &t).unwrap();
        assert_eq!(a, b);
        // a different timestep draws a different stream
        let ctx2 = PsiContext::new(
            ctx.sensors().to_vec(),
            ctx.measurements().to_vec(),
            *ctx.prior(),
            ctx.timestep() + 1,
            ctx.base_seed(),
        )
        .unwrap();
        assert_ne!(a.weighted_particles, estimate_psi(&ctx2, &t).unwrap().weighted_particles);
    }

    #[test]
    fn psi_bar_is_mean_weight() {
        let ctx = eight_sensor_ctx();
        let t = MeasurementTuple::from_raw(&[1, 1, 1, 0, 0, 0, 0, 0]);
        let res = estimate_psi(&ctx, &t).unwrap();
        let mean = res.weighted_particles.total_weight() / res.weighted_particles.len() as f64;
        assert!((res.psi_bar - mean).abs() <= 1e-12 * mean.abs());
        assert!(res.psi_bar > 0.0);
    }

    #[test]
    fn single_particle_estimate() {
        let s = sensor(0, 0.0, 0.0);
        let z = Measurement { bearing: -2.5, range: 3000.0 };
        let prior = BirthPrior { num_particles: 1, ..BirthPrior::default() };
        let ctx = ctx_with(vec![s], vec![vec![z]], prior);
        let res = estimate_psi(&ctx, &MeasurementTuple::from_raw(&[1])).unwrap();
        assert_eq!(res.psi_bar, res.weighted_particles.particles[0].weight);
    }

    #[test]
    fn true_tuple_dominates_clutter_tuple() {
        let ctx = eight_sensor_ctx();
        let truth = estimate_psi(&ctx, &MeasurementTuple::from_raw(&[1; 8])).unwrap();
        let mixed = estimate_psi(&ctx, &MeasurementTuple::from_raw(&[1, 2, 1, 1, 1, 1, 1, 1])).unwrap();
        assert!(truth.psi_bar > 1e6 * mixed.psi_bar.max(1e-300));
    }

    /// Grid quadrature of `(1/A) * integral over the region of p_D g / kappa`.
    fn quadrature_single(s: &BearingRangeSensor, z: &Measurement, region: Region, cells: usize) -> f64 {
        let hx = (region.x[1] - region.x[0]) / cells as f64;
        let hy = (region.y[1] - region.y[0]) / cells as f64;
        let kappa = s.clutter_intensity(z);
        let mut sum = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                let x = KinematicState::new(
                    region.x[0] + (i as f64 + 0.5) * hx,
                    0.0,
                    region.y[0] + (j as f64 + 0.5) * hy,
                    0.0,
                );
                sum += s.detect_prob * crate::models::likelihood(s, z, &x) / kappa;
            }
        }
        sum * hx * hy / region.area()
    }

    #[test]
    fn single_detection_matches_quadrature() {
        let s = sensor(0, 0.0, -500.0);
        // likelihood ridge partly inside the region
        let z = Measurement { bearing: PI - 0.1, range: 900.0 };
        let region = Region { x: [-300.0, 700.0], y: [0.0, 1000.0] };
        let prior = BirthPrior { region, velocity_std: 35.0, num_particles: 10_000 };
        let ctx = ctx_with(vec![s.clone()], vec![vec![z]], prior);
        let est = estimate_psi(&ctx, &MeasurementTuple::from_raw(&[1])).unwrap().psi_bar;
        let oracle = quadrature_single(&s, &z, region, 1000);
        assert!(oracle > 0.0);
        assert!((est - oracle).abs() / oracle < 0.05, "estimate {est} vs quadrature {oracle}");
    }

    #[test]
    fn bound_on_constant_pd_tuple() {
        // psi_bar <= (1 - p_D)^(V - |D|) * prod_D sup (p_D g / kappa)
        let ctx = eight_sensor_ctx();
        let t = MeasurementTuple::from_raw(&[1, 0, 1, 0, 0, 0, 0, 0]);
        let res = estimate_psi(&ctx, &t).unwrap();
        let s = &ctx.sensors()[0];
        let sup = 0.95 * (-s.log_norm()).exp() / s.clutter_intensity(&ctx.measurements()[0][0]);
        let bound = 0.05f64.powi(6) * sup * sup;
        assert!(res.psi_bar <= bound);
    }

    #[test]
    fn cache_contract() {
        let ctx = eight_sensor_ctx();
        let t = MeasurementTuple::from_raw(&[1, 0, 0, 0, 0, 0, 0, 2]);
        let u = MeasurementTuple::from_raw(&[0, 1, 0, 0, 0, 0, 0, 0]);
        let mut cache = PsiCache::new(true);
        let first = psi_bar_cached(&mut cache, &ctx, &t);
        let second = psi_bar_cached(&mut cache, &ctx, &t);
        assert_eq!(*first, *second);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        psi_bar_cached(&mut cache, &ctx, &u);
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.misses(), 2);

        let mut cache = PsiCache::new(true);
        for _ in 0..100 {
            cache.lookup(&ctx, &t);
        }
        assert_eq!((cache.hits(), cache.misses()), (99, 1));
    }

    #[test]
    fn disabled_cache_recomputes_identically() {
        let ctx = eight_sensor_ctx();
        let t = MeasurementTuple::from_raw(&[1, 1, 0, 0, 0, 0, 0, 0]);
        let mut on = PsiCache::new(true);
        let mut off = PsiCache::new(false);
        for _ in 0..3 {
            assert_eq!(*on.lookup(&ctx, &t), *off.lookup(&ctx, &t));
        }
        assert_eq!((off.hits(), off.misses()), (0, 3));
        assert!(off.is_empty());
    }

    #[test]
    fn cache_clears_on_new_timestep() {
        let ctx = eight_sensor_ctx();
        let next = PsiContext::new(
            ctx.sensors().to_vec(),
            ctx.measurements().to_vec(),
            *ctx.prior(),
            ctx.timestep() + 1,
            ctx.base_seed(),
        )
        .unwrap();
        let t = MeasurementTuple::from_raw(&[1, 0, 0, 0, 0, 0, 0, 0]);
        let mut cache = PsiCache::new(true);
        cache.lookup(&ctx, &t);
        cache.lookup(&next, &t);
        assert_eq!(cache.misses(), 2);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn shared_cache_at_most_once() {
        let ctx = eight_sensor_ctx();
        let cache = SharedPsiCache::new(ctx.timestep());
        let t = MeasurementTuple::from_raw(&[1, 1, 1, 0, 0, 0, 0, 0]);
        let results: Vec<Arc<PsiResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4)
                .map(|_| scope.spawn(|| cache.get_or_compute(&ctx, &t)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.windows(2).all(|w| w[0] == w[1]));
        let store = &cache;
        assert_eq!(store.misses(), 1);
        assert_eq!(store.hits(), 3);
        assert_eq!(*results[0], estimate_psi(&ctx, &t).unwrap());
    }

    #[test]
    fn spatial_posterior_cases() {
        let states: Vec<_> = (0..5).map(|i| KinematicState::new(i as f64, 0.0, 0.0, 0.0)).collect();
        let uniform = PsiResult {
            psi_bar: 1.0,
            weighted_particles: ParticleSet::new(states.iter().map(|&state| Particle { state, weight: 1.0 }).collect()),
            degenerate: false,
        };
        let out = spatial_posterior(&uniform, 5, &mut substream(1, "sp")).unwrap();
        let mut xs: Vec<f64> = out.particles.iter().map(|p| p.state.px).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);

        let mut single = uniform.clone();
        for (i, p) in single.weighted_particles.particles.iter_mut().enumerate() {
            p.weight = if i == 2 { 0.7 } else { 0.0 };
        }
        let out = spatial_posterior(&single, 20, &mut substream(1, "sp")).unwrap();
        assert!(out.particles.iter().all(|p| p.state.px == 2.0));

        let zero = PsiResult { psi_bar: 0.0, ..single };
        assert!(matches!(
            spatial_posterior(&zero, 3, &mut substream(1, "sp")),
            Err(Error::CannotNormalize)
        ));
    }

    #[test]
    fn spatial_posterior_preserves_weighted_mean() {
        let mut rng = substream(9, "wm");
        let particles: Vec<Particle> = (0..2000)
            .map(|_| Particle {
                state: KinematicState::new(rng.random_range(0.0..100.0), 0.0, 0.0, 0.0),
                weight: rng.random_range(0.0..1.0),
            })
            .collect();
        let set = ParticleSet::new(particles);
        let res = PsiResult { psi_bar: 1.0, weighted_particles: set.clone(), degenerate: false };
        let n_out = 2000;
        let out = spatial_posterior(&res, n_out, &mut rng).unwrap();
        let m_in = set.mean().unwrap().px;
        let m_out = out.mean().unwrap().px;
        // multinomial resampling variance bounds the systematic one
        let total = set.total_weight();
        let var: f64 = set
            .particles
            .iter()
            .map(|p| p.weight / total * (p.state.px - m_in).powi(2))
            .sum();
        let sigma = (var / n_out as f64).sqrt();
        assert!((m_in - m_out).abs() < 3.0 * sigma, "{m_in} vs {m_out}");
    }

    #[test]
    fn predict_birth_spatial_cases() {
        let still = NcvModel { dt: 1.0, accel_noise_std: [0.0, 0.0] };
        let p = ParticleSet::uniform([KinematicState::new(0.0, 10.0, 0.0, 0.0)]);
        let out = predict_birth_spatial(&still, &p, &mut substream(0, "p"));
        assert_eq!(out.particles[0].state, KinematicState::new(10.0, 10.0, 0.0, 0.0));
        assert_eq!(out.particles[0].weight, 1.0);

        let model = NcvModel::default();
        let n = 4000;
        let start: Vec<_> = (0..n).map(|i| KinematicState::new(i as f64, 20.0, 0.0, -5.0)).collect();
        let p = ParticleSet::uniform(start);
        let out = predict_birth_spatial(&model, &p, &mut substream(2, "p"));
        assert!(p.particles.iter().zip(&out.particles).all(|(a, b)| a.weight == b.weight));
        let before = p.mean().unwrap();
        let after = out.mean().unwrap();
        let sigma = 2.5 / (n as f64).sqrt();
        assert!((after.px - before.px - 20.0).abs() < 3.0 * sigma);
        assert!((after.py - before.py + 5.0).abs() < 3.0 * sigma);
    }
}
