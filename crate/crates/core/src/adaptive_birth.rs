//! Measurement-adaptive birth: Gibbs sampling of multi-sensor measurement
//! tuples and construction of the newborn LMB density, with the five
//! efficiency mechanisms (pre-pruning, gating, memoization, prune-and-cap
//! and missed-detection skipping) individually switchable.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::birth_likelihood::{
    estimate_pair_psi, predict_birth_spatial, spatial_posterior, EvalStats, PsiCache, PsiContext, PsiStore,
    SharedPsiCache,
};
use crate::error::{Error, Result};
use crate::models::NcvModel;
use crate::rfs_core::{
    BernoulliComponent, Label, LmbDensity, MeasurementIndex, MeasurementTuple,
};
use crate::rng::SeedMixer;

/// Per-sensor association probabilities `r_A` of the current measurements
/// with already-tracked objects.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssociationInput {
    pub r_assoc: Vec<Vec<f64>>,
}

impl AssociationInput {
    /// All measurements unassociated.
    pub fn unassociated(counts: &[usize]) -> Self {
        AssociationInput {
            r_assoc: counts.iter().map(|&m| vec![0.0; m]).collect(),
        }
    }

    pub fn validate(&self, counts: &[usize]) -> Result<()> {
        if self.r_assoc.len() != counts.len()
            || self.r_assoc.iter().zip(counts).any(|(r, &m)| r.len() != m)
        {
            return Err(Error::config("association input does not match the measurement sets"));
        }
        if self.r_assoc.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("association probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `r_A(j)`; zero for the miss index.
    #[inline]
    pub fn r_a(&self, sensor: usize, index: MeasurementIndex) -> f64 {
        index.slot().map_or(0.0, |k| self.r_assoc[sensor][k])
    }

    /// Unnormalized non-association probability `prod_s (1 - r_A(j_s))`.
    pub fn r_u(&self, tuple: &MeasurementTuple) -> f64 {
        tuple
            .indices()
            .iter()
            .enumerate()
            .map(|(s, &j)| 1.0 - self.r_a(s, j))
            .product()
    }
}

/// Pairwise gate used to zero transition weights before any pseudolikelihood
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum GateMode {
    Off,
    /// Pass iff the two-sensor average pseudolikelihood is at least `threshold`.
    Pseudo { threshold: f64 },
    /// Pass iff the measurement position inverses are closer than `threshold` meters.
    Euclidean { threshold: f64 },
    /// Pass iff either cross-predicted measurement lies inside the chi-squared
    /// gate of probability `gate_prob`.
    Mahalanobis { gate_prob: f64 },
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateMode::Off => f.write_str("off"),
            GateMode::Pseudo { threshold } => write!(f, "pseudo:{threshold}"),
            GateMode::Euclidean { threshold } => write!(f, "euclidean:{threshold}"),
            GateMode::Mahalanobis { gate_prob } => write!(f, "mahalanobis:{gate_prob}"),
        }
    }
}

impl FromStr for GateMode {
    type Err = Error;

    /// Parses `off`, `pseudo:<t>`, `euclidean:<meters>` or `mahalanobis:<prob>`.
    fn from_str(s: &str) -> Result<Self> {
        let (mode, value) = match s.split_once(':') {
            Some((m, v)) => (m, Some(v)),
            None => (s, None),
        };
        let number = || -> Result<f64> {
            value
                .ok_or_else(|| Error::config(format!("gate mode `{mode}` needs a threshold")))?
                .parse::<f64>()
                .map_err(|e| Error::config(format!("gate threshold `{}`: {e}", value.unwrap_or(""))))
        };
        let gate = match mode {
            "off" => GateMode::Off,
            "pseudo" => GateMode::Pseudo { threshold: number()? },
            "euclidean" => GateMode::Euclidean { threshold: number()? },
            "mahalanobis" => GateMode::Mahalanobis { gate_prob: number()? },
            other => return Err(Error::config(format!("unknown gate mode `{other}`"))),
        };
        gate.validate()?;
        Ok(gate)
    }
}

impl GateMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GateMode::Mahalanobis { gate_prob } if !(0.0..1.0).contains(&gate_prob) => {
                Err(Error::config("mahalanobis gate probability must lie in [0, 1)"))
            }
            GateMode::Pseudo { threshold } | GateMode::Euclidean { threshold } if threshold.is_nan() => {
                Err(Error::config("gate threshold is NaN"))
            }
            _ => Ok(()),
        }
    }
}

/// Existence prune threshold and cardinality cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneCap {
    pub threshold: f64,
    pub cap: usize,
}

/// Effective birth configuration. `None` disables a mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirthConfig {
    pub num_chains: usize,
    pub chain_length: usize,
    pub r_b_max: f64,
    pub lambda_b: f64,
    pub tau_assoc: Option<f64>,
    pub gate: GateMode,
    pub memoize: bool,
    pub max_missed: Option<usize>,
    pub prune: Option<PruneCap>,
    /// Particles per newborn spatial density.
    pub posterior_particles: usize,
}

impl Default for BirthConfig {
    /// Every efficiency mechanism off.
    fn default() -> Self {
        BirthConfig {
            num_chains: 20,
            chain_length: 5,
            r_b_max: 1.0,
            lambda_b: 0.5,
            tau_assoc: None,
            gate: GateMode::Off,
            memoize: false,
            max_missed: None,
            prune: None,
            posterior_particles: 1000,
        }
    }
}

impl BirthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_chains == 0 || self.chain_length == 0 || self.posterior_particles == 0 {
            return Err(Error::config("chains, chain length and posterior particles must be positive"));
        }
        if !(0.0..=1.0).contains(&self.r_b_max) || !(self.lambda_b >= 0.0) {
            return Err(Error::config("r_b_max must lie in [0, 1] and lambda_b be nonnegative"));
        }
        if let Some(t) = self.tau_assoc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("tau_assoc must lie in [0, 1]"));
            }
        }
        if let Some(p) = self.prune {
            if !(0.0..=1.0).contains(&p.threshold) || p.cap == 0 {
                return Err(Error::config("prune threshold must lie in [0, 1] and cap be positive"));
            }
        }
        self.gate.validate()
    }
}

/// Candidate indices per sensor after pre-pruning. The miss index is always
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub per_sensor: Vec<Vec<MeasurementIndex>>,
    /// Measurement indices removed per sensor.
    pub removed: Vec<usize>,
}

impl Support {
    pub fn full(counts: &[usize]) -> Self {
        Support {
            per_sensor: counts
                .iter()
                .map(|&m| (0..=m as u32).map(MeasurementIndex).collect())
                .collect(),
            removed: vec![0; counts.len()],
        }
    }

    pub fn total_removed(&self) -> usize {
        self.removed.iter().sum()
    }
}

/// Keeps index `j` iff `r_A(j) <= tau_assoc`; the miss index always survives.
pub fn preprune(assoc: &AssociationInput, tau_assoc: f64) -> Support {
    let mut per_sensor = Vec::with_capacity(assoc.r_assoc.len());
    let mut removed = Vec::with_capacity(assoc.r_assoc.len());
    for r in &assoc.r_assoc {
        let mut keep = vec![MeasurementIndex::MISS];
        keep.extend(
            r.iter()
                .enumerate()
                .filter(|(_, &ra)| ra <= tau_assoc)
                .map(|(k, _)| MeasurementIndex(k as u32 + 1)),
        );
        removed.push(r.len() + 1 - keep.len());
        per_sensor.push(keep);
    }
    Support { per_sensor, removed }
}

/// Pairwise feasibility of detections on two different sensors, stored for
/// sensor pairs `a < b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    counts: Vec<usize>,
    blocks: Vec<Vec<bool>>,
    /// Pseudolikelihood evaluations spent building the matrix.
    pub evaluations: u64,
}

impl GateMatrix {
    fn block_index(&self, a: usize, b: usize) -> usize {
        // row-major over the strict upper triangle
        let v = self.counts.len();
        a * (2 * v - a - 1) / 2 + (b - a - 1)
    }

    fn filled(counts: &[usize], mut pass: impl FnMut(usize, usize, usize, usize) -> bool) -> Self {
        let v = counts.len();
        let mut blocks = Vec::with_capacity(v * v.saturating_sub(1) / 2);
        for a in 0..v {
            for b in a + 1..v {
                let mut block = Vec::with_capacity(counts[a] * counts[b]);
                for ka in 0..counts[a] {
                    for kb in 0..counts[b] {
                        block.push(pass(a, ka, b, kb));
                    }
                }
                blocks.push(block);
            }
        }
        GateMatrix {
            counts: counts.to_vec(),
            blocks,
            evaluations: 0,
        }
    }

    /// `M[a, b, ja, jb]`; pairs involving a miss always pass.
    pub fn passes(&self, a: usize, ja: MeasurementIndex, b: usize, jb: MeasurementIndex) -> bool {
        let (Some(ka), Some(kb)) = (ja.slot(), jb.slot()) else {
            return true;
        };
        if a == b {
            return true;
        }
        let (a, ka, b, kb) = if a < b { (a, ka, b, kb) } else { (b, kb, a, ka) };
        self.blocks[self.block_index(a, b)][ka * self.counts[b] + kb]
    }

    pub fn pass_fraction(&self) -> f64 {
        let total: usize = self.blocks.iter().map(Vec::len).sum();
        if total == 0 {
            return 1.0;
        }
        let passed: usize = self.blocks.iter().flatten().filter(|&&p| p).count();
        passed as f64 / total as f64
    }
}

/// Builds the gate matrix for `gate`. `GateMode::Off` yields an all-pass matrix.
pub fn build_gate_matrix(ctx: &PsiContext, gate: GateMode) -> GateMatrix {
    let counts = ctx.counts();
    let sensors = ctx.sensors();
    let zs = ctx.measurements();
    match gate {
        GateMode::Off => GateMatrix::filled(&counts, |_, _, _, _| true),
        GateMode::Pseudo { threshold } if threshold <= 0.0 => {
            // every average pseudolikelihood is >= 0
            GateMatrix::filled(&counts, |_, _, _, _| true)
        }
        GateMode::Pseudo { threshold } => {
            let mut evaluations = 0;
            let mut m = GateMatrix::filled(&counts, |a, ka, b, kb| {
                evaluations += 1;
                estimate_pair_psi(ctx, a, ka, b, kb).psi_bar >= threshold
            });
            m.evaluations = evaluations;
            m
        }
        GateMode::Euclidean { threshold } => {
            let inverses: Vec<Vec<[f64; 2]>> = sensors
                .iter()
                .zip(zs)
                .map(|(s, z)| z.iter().map(|z| s.invert(z)).collect())
                .collect();
            GateMatrix::filled(&counts, |a, ka, b, kb| {
                let [xa, ya] = inverses[a][ka];
                let [xb, yb] = inverses[b][kb];
                (xa - xb).hypot(ya - yb) < threshold
            })
        }
        GateMode::Mahalanobis { gate_prob } => {
            // chi-squared quantile for two degrees of freedom
            let tau = -2.0 * (1.0 - gate_prob).ln();
            let inverses: Vec<Vec<[f64; 2]>> = sensors
                .iter()
                .zip(zs)
                .map(|(s, z)| z.iter().map(|z| s.invert(z)).collect())
                .collect();
            let d2 = |s: usize, k: usize, from: [f64; 2]| -> f64 {
                match sensors[s].observe_position(from[0], from[1]) {
                    Some((b, r)) => sensors[s].mahalanobis_sq(&zs[s][k], b, r),
                    None => f64::INFINITY,
                }
            };
            GateMatrix::filled(&counts, |a, ka, b, kb| {
                d2(a, ka, inverses[b][kb]) < tau || d2(b, kb, inverses[a][ka]) < tau
            })
        }
    }
}

/// True iff `(sensor, index)` passes the gate against every detection in
/// `tuple` on the other sensors.
pub fn gate_check(m: &GateMatrix, sensor: usize, index: MeasurementIndex, tuple: &MeasurementTuple) -> bool {
    if index.is_miss() {
        return true;
    }
    tuple
        .indices()
        .iter()
        .enumerate()
        .filter(|&(b, jb)| b != sensor && !jb.is_miss())
        .all(|(b, &jb)| m.passes(sensor, index, b, jb))
}

/// Unnormalized transition weights for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub candidates: Vec<MeasurementIndex>,
    pub weights: Vec<f64>,
    pub total: f64,
    /// Every weight was zero and the miss index was given weight one.
    pub fallback: bool,
}

impl Conditional {
    pub fn probabilities(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.total).collect()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MeasurementIndex {
        let u = rng.random::<f64>() * self.total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last_positive = i;
                if u < acc {
                    return self.candidates[i];
                }
            }
        }
        self.candidates[last_positive]
    }
}

/// The pruned candidate space and optional gate the sampler walks.
#[derive(Debug, Clone, Copy)]
pub struct SampleSpace<'a> {
    pub support: &'a Support,
    pub gate: Option<&'a GateMatrix>,
}

/// Transition weights `(1 - r_A(j)) * psi_bar(J with slot s = j)` over the
/// surviving candidates of sensor `s`. Gated-out candidates get weight zero
/// without a lookup.
pub fn gibbs_conditional<S: PsiStore + ?Sized>(
    ctx: &PsiContext,
    store: &mut S,
    assoc: &AssociationInput,
    space: SampleSpace<'_>,
    sensor: usize,
    tuple: &MeasurementTuple,
    stats: &mut EvalStats,
) -> Conditional {
    let candidates = space.support.per_sensor[sensor].clone();
    let mut weights = Vec::with_capacity(candidates.len());
    let mut total = 0.0;
    for &j in &candidates {
        if let Some(gate) = space.gate {
            if !gate_check(gate, sensor, j, tuple) {
                stats.gated_skips += 1;
                weights.push(0.0);
                continue;
            }
        }
        let psi = store.lookup(ctx, &tuple.with(sensor, j)).psi_bar;
        let w = (1.0 - assoc.r_a(sensor, j)) * psi;
        total += w;
        weights.push(w);
    }
    let mut fallback = false;
    if !(total > 0.0) || !total.is_finite() {
        fallback = true;
        weights.iter_mut().for_each(|w| *w = 0.0);
        let miss = candidates
            .iter()
            .position(|j| j.is_miss())
            .expect("the miss index is always a candidate");
        weights[miss] = 1.0;
        total = 1.0;
    }
    Conditional {
        candidates,
        weights,
        total,
        fallback,
    }
}

/// One full sweep over sensors in index order.
pub fn gibbs_sweep<S: PsiStore + ?Sized, R: Rng + ?Sized>(
    ctx: &PsiContext,
    store: &mut S,
    assoc: &AssociationInput,
    space: SampleSpace<'_>,
    state: &mut MeasurementTuple,
    rng: &mut R,
    stats: &mut EvalStats,
) {
    for s in 0..state.len() {
        stats.preprune_removed += space.support.removed[s] as u64;
        let cond = gibbs_conditional(ctx, store, assoc, space, s, state, stats);
        state.set(s, cond.sample(rng));
    }
}

fn chain_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}

fn run_chain<S: PsiStore + ?Sized>(
    ctx: &PsiContext,
    store: &mut S,
    assoc: &AssociationInput,
    space: SampleSpace<'_>,
    chain_length: usize,
    seed: SeedMixer,
    stats: &mut EvalStats,
) -> Vec<MeasurementTuple> {
    let mut rng = seed.rng();
    let mut state = MeasurementTuple::all_miss(ctx.num_sensors()).expect("context has sensors");
    let mut visited = Vec::with_capacity(chain_length + 1);
    visited.push(state.clone());
    for _ in 0..chain_length {
        gibbs_sweep(ctx, store, assoc, space, &mut state, &mut rng, stats);
        visited.push(state.clone());
    }
    visited
}

/// Multi-short-run sampler: `num_chains` chains from the all-miss tuple, each
/// recording its initial state and the state after every full sweep. Returns
/// the distinct tuples visited.
pub fn run_birth_gibbs<S: PsiStore + ?Sized, R: Rng + ?Sized>(
    ctx: &PsiContext,
    store: &mut S,
    assoc: &AssociationInput,
    space: SampleSpace<'_>,
    cfg: &BirthConfig,
    rng: &mut R,
    stats: &mut EvalStats,
) -> BTreeSet<MeasurementTuple> {
    let root = chain_seed(rng);
    let mut out = BTreeSet::new();
    for c in 0..cfg.num_chains {
        let seed = SeedMixer::new(root).push(c as u64);
        out.extend(run_chain(ctx, store, assoc, space, cfg.chain_length, seed, stats));
    }
    out
}

/// Same sampler with chains on scoped threads sharing one cache. Produces
/// the tuple set of [`run_birth_gibbs`] for the same seed.
pub fn run_birth_gibbs_concurrent<R: Rng + ?Sized>(
    ctx: &PsiContext,
    cache: &SharedPsiCache,
    assoc: &AssociationInput,
    space: SampleSpace<'_>,
    cfg: &BirthConfig,
    rng: &mut R,
    stats: &mut EvalStats,
) -> BTreeSet<MeasurementTuple> {
    let root = chain_seed(rng);
    let results: Vec<(Vec<MeasurementTuple>, EvalStats)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.num_chains)
            .map(|c| {
                scope.spawn(move || {
                    let mut local = EvalStats::default();
                    let mut store = cache;
                    let seed = SeedMixer::new(root).push(c as u64);
                    let visited = run_chain(ctx, &mut store, assoc, space, cfg.chain_length, seed, &mut local);
                    (visited, local)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain panicked")).collect()
    });
    let mut out = BTreeSet::new();
    for (visited, local) in results {
        stats.accumulate(&local);
        out.extend(visited);
    }
    out
}

/// Runs one long chain for `sweeps` sweeps and counts the state after each
/// sweep. Used to check the sampler's stationary distribution.
pub fn gibbs_visit_counts<S: PsiStore + ?Sized, R: Rng + ?Sized>(
    ctx: &PsiContext,
    store: &mut S,
    assoc: &AssociationInput,
    space: SampleSpace<'_>,
    sweeps: usize,
    rng: &mut R,
) -> std::collections::BTreeMap<MeasurementTuple, u64> {
    let mut stats = EvalStats::default();
    let mut state = MeasurementTuple::all_miss(ctx.num_sensors()).expect("context has sensors");
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..sweeps {
        gibbs_sweep(ctx, store, assoc, space, &mut state, rng, &mut stats);
        *counts.entry(state.clone()).or_insert(0) += 1;
    }
    counts
}

/// True iff the tuple has more missed detections than allowed.
pub fn should_skip(tuple: &MeasurementTuple, max_missed: Option<usize>) -> bool {
    max_missed.is_some_and(|k| tuple.missed_count() > k)
}

/// Output of [`construct_birth_lmb`].
#[derive(Debug, Clone, PartialEq)]
pub struct BirthConstruction {
    pub lmb: LmbDensity,
    /// Effective birth probabilities, one per input tuple, summing to one
    /// unless `degenerate`.
    pub r_hat: Vec<f64>,
    /// Every tuple had zero weight; the density is empty.
    pub degenerate: bool,
}

/// Builds one labeled Bernoulli component per tuple. Birth probabilities are
/// `min(r_b_max, r_hat * lambda_b)` with `r_hat` normalized over `tuples`.
/// Spatial densities are drawn from the importance-weighted posterior and
/// predicted one step.
pub fn construct_birth_lmb<S: PsiStore + ?Sized, R: Rng + ?Sized>(
    ctx: &PsiContext,
    store: &mut S,
    assoc: &AssociationInput,
    tuples: &[MeasurementTuple],
    cfg: &BirthConfig,
    model: &NcvModel,
    rng: &mut R,
) -> Result<BirthConstruction> {
    if tuples.is_empty() {
        return Ok(BirthConstruction {
            lmb: LmbDensity::default(),
            r_hat: Vec::new(),
            degenerate: false,
        });
    }
    let weights: Vec<f64> = tuples
        .iter()
        .map(|t| assoc.r_u(t) * store.lookup(ctx, t).psi_bar)
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Ok(BirthConstruction {
            lmb: LmbDensity::default(),
            r_hat: vec![0.0; tuples.len()],
            degenerate: true,
        });
    }
    let r_hat: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let prior = ctx.prior();
    let mut components = Vec::with_capacity(tuples.len());
    for (tuple, &rh) in tuples.iter().zip(&r_hat) {
        let res = store.lookup(ctx, tuple);
        if !(res.psi_bar > 0.0) {
            // zero weight; the component would have existence zero
            continue;
        }
        let mut posterior = spatial_posterior(&res, cfg.posterior_particles, rng)?;
        // The pseudolikelihood does not depend on velocity, so the
        // posterior velocity given position is the prior velocity law.
        for p in &mut posterior.particles {
            let (vx, vy) = prior.sample_velocity(rng);
            p.state.vx = vx;
            p.state.vy = vy;
        }
        components.push(BernoulliComponent {
            label: Label::new(ctx.timestep() + 1, tuple.clone()),
            existence: cfg.r_b_max.min(rh * cfg.lambda_b),
            spatial: predict_birth_spatial(model, &posterior, rng),
        });
    }
    Ok(BirthConstruction {
        lmb: LmbDensity::new(components),
        r_hat,
        degenerate: false,
    })
}

/// Drops components with existence below `threshold`, then keeps the `cap`
/// most likely ones (ties to the earlier label). Survivor order is preserved.
pub fn prune_cap(lmb: LmbDensity, threshold: f64, cap: usize) -> LmbDensity {
    let mut kept: Vec<(usize, BernoulliComponent)> = lmb
        .components
        .into_iter()
        .filter(|c| c.existence >= threshold)
        .enumerate()
        .collect();
    if kept.len() > cap {
        kept.sort_by(|(_, a), (_, b)| {
            b.existence
                .total_cmp(&a.existence)
                .then_with(|| a.label.cmp(&b.label))
        });
        kept.truncate(cap);
        kept.sort_by_key(|(i, _)| *i);
    }
    LmbDensity::new(kept.into_iter().map(|(_, c)| c).collect())
}

/// Result of one adaptive birth step.
#[derive(Debug, Clone)]
pub struct BirthStep {
    pub lmb: LmbDensity,
    pub stats: EvalStats,
    pub sampling_time: Duration,
    pub construction_time: Duration,
    /// Sampled tuples carried into construction (after skipping).
    pub kept_tuples: usize,
    pub degenerate: bool,
}

/// Pre-prune, gate, sample, skip, construct and prune-cap, in that order.
pub fn adaptive_birth_step<R: Rng + ?Sized>(
    ctx: &PsiContext,
    assoc: &AssociationInput,
    cfg: &BirthConfig,
    model: &NcvModel,
    rng: &mut R,
) -> Result<BirthStep> {
    cfg.validate()?;
    let counts = ctx.counts();
    assoc.validate(&counts)?;
    let mut stats = EvalStats::default();
    let mut store = PsiCache::new(cfg.memoize);

    let sampling_start = Instant::now();
    let support = match cfg.tau_assoc {
        Some(tau) => preprune(assoc, tau),
        None => Support::full(&counts),
    };
    let gate = match cfg.gate {
        GateMode::Off => None,
        mode => Some(build_gate_matrix(ctx, mode)),
    };
    stats.gate_evaluations = gate.as_ref().map_or(0, |g| g.evaluations);
    let space = SampleSpace {
        support: &support,
        gate: gate.as_ref(),
    };
    let tuples = run_birth_gibbs(ctx, &mut store, assoc, space, cfg, rng, &mut stats);
    stats.tuples_sampled = tuples.len() as u64;
    let sampling_time = sampling_start.elapsed();

    let construction_start = Instant::now();
    let kept: Vec<MeasurementTuple> = tuples
        .into_iter()
        .filter(|t| {
            let skip = should_skip(t, cfg.max_missed);
            stats.component_skips += skip as u64;
            !skip
        })
        .collect();
    let built = construct_birth_lmb(ctx, &mut store, assoc, &kept, cfg, model, rng)?;
    let lmb = match cfg.prune {
        Some(p) => prune_cap(built.lmb, p.threshold, p.cap),
        None => built.lmb,
    };
    let construction_time = construction_start.elapsed();

    stats.computed = store.misses() + stats.gate_evaluations;
    stats.memo_hits = store.hits();
    Ok(BirthStep {
        lmb,
        stats,
        sampling_time,
        construction_time,
        kept_tuples: kept.len(),
        degenerate: built.degenerate,
    })
}
