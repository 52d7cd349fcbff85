//! Particle LMB recursion: prediction, iterated-corrector measurement update
//! with marginal association probabilities, belief pruning and extraction.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_birth::{prune_cap, AssociationInput};
use crate::error::{Error, Result};
use crate::models::{ncv_step, BearingRangeSensor, NcvModel};
use crate::rfs_core::{BernoulliComponent, KinematicState, Label, LmbDensity, Measurement, Particle, ParticleSet};

/// Range residuals beyond this many standard deviations count as zero likelihood.
const RANGE_GATE_SIGMAS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub survival_prob: f64,
    pub track_particles: usize,
    pub assoc_samples: usize,
    pub belief_prune: f64,
    pub belief_cap: usize,
    pub extract_threshold: f64,
    /// Clusters with at most this many tracks and measurements are
    /// enumerated exactly; larger ones are sampled.
    pub exact_max_tracks: usize,
    pub exact_max_measurements: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            survival_prob: 0.99,
            track_particles: 1000,
            assoc_samples: 1000,
            belief_prune: 1e-3,
            belief_cap: 100,
            extract_threshold: 0.5,
            exact_max_tracks: 6,
            exact_max_measurements: 6,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.survival_prob) || !unit.contains(&self.extract_threshold) {
            return Err(Error::config("survival and extraction probabilities must lie in [0, 1]"));
        }
        if self.track_particles == 0 || self.assoc_samples == 0 || self.belief_cap == 0 {
            return Err(Error::config("particle count, association samples and belief cap must be positive"));
        }
        if !(self.belief_prune >= 0.0) {
            return Err(Error::config("belief_prune must be nonnegative"));
        }
        Ok(())
    }
}

/// Posterior after one sensor and the association probabilities of its
/// measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorUpdateResult {
    pub posterior: LmbDensity,
    pub r_assoc: Vec<f64>,
}

/// Surviving components thinned by `p_s` and moved one step, then joined
/// with `birth`.
pub fn predict<R: Rng + ?Sized>(
    lmb: &LmbDensity,
    birth: LmbDensity,
    model: &NcvModel,
    p_s: f64,
    rng: &mut R,
) -> Result<LmbDensity> {
    let existing: HashSet<&Label> = lmb.labels().collect();
    if let Some(c) = birth.components.iter().find(|c| existing.contains(&c.label)) {
        return Err(Error::LabelCollision(c.label.clone()));
    }
    let mut components = Vec::with_capacity(lmb.len() + birth.len());
    for c in &lmb.components {
        let particles = c
            .spatial
            .particles
            .iter()
            .map(|p| Particle {
                state: ncv_step(model, &p.state, rng),
                weight: p.weight,
            })
            .collect();
        components.push(BernoulliComponent {
            label: c.label.clone(),
            existence: c.existence * p_s,
            spatial: ParticleSet::new(particles),
        });
    }
    components.extend(birth.components);
    Ok(LmbDensity::new(components))
}

/// Association weights of one track against one sensor's measurements.
struct TrackLikelihood {
    /// Normalized particle weights.
    weights: Vec<f64>,
    /// Per gated measurement: index and per-particle `p_D g(z | x_p)`.
    detections: Vec<(usize, Vec<f64>)>,
    /// `L_ij = sum_p w_p p_D g(z_j | x_p)` for gated measurements.
    totals: Vec<f64>,
}

fn track_likelihood(c: &BernoulliComponent, sensor: &BearingRangeSensor, zs: &[Measurement]) -> TrackLikelihood {
    let total = c.spatial.total_weight();
    let weights: Vec<f64> = c.spatial.particles.iter().map(|p| p.weight / total).collect();
    let predicted: Vec<Option<(f64, f64)>> = c
        .spatial
        .particles
        .iter()
        .map(|p| sensor.observe_position(p.state.px, p.state.py))
        .collect();
    let (lo, hi) = predicted
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, r)| (lo.min(r), hi.max(r)));
    let band = RANGE_GATE_SIGMAS * sensor.range_std;
    let p_d = sensor.detect_prob;
    let log_norm = sensor.log_norm();
    let mut detections = Vec::new();
    let mut totals = Vec::new();
    for (j, z) in zs.iter().enumerate() {
        if z.range < lo - band || z.range > hi + band {
            continue;
        }
        let lik: Vec<f64> = predicted
            .iter()
            .map(|pr| match pr {
                Some((b, r)) => p_d * (-0.5 * sensor.mahalanobis_sq(z, *b, *r) - log_norm).exp(),
                None => 0.0,
            })
            .collect();
        let l: f64 = lik.iter().zip(&weights).map(|(g, w)| g * w).sum();
        if l > 0.0 {
            detections.push((j, lik));
            totals.push(l);
        }
    }
    TrackLikelihood {
        weights,
        detections,
        totals,
    }
}

/// Marginal association probabilities of one cluster. `rho[i][0]` is the
/// miss marginal, `rho[i][1 + k]` the marginal of the cluster's k-th measurement.
fn enumerate_cluster(eta_miss: &[f64], eta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = eta_miss.len();
    let m = eta.first().map_or(0, Vec::len);
    let mut rho = vec![vec![0.0; m + 1]; n];
    let mut assignment = vec![0usize; n];
    let mut used = vec![false; m];
    let mut total = 0.0;

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        i: usize,
        weight: f64,
        eta_miss: &[f64],
        eta: &[Vec<f64>],
        assignment: &mut [usize],
        used: &mut [bool],
        rho: &mut [Vec<f64>],
        total: &mut f64,
    ) {
        if i == assignment.len() {
            *total += weight;
            for (t, &a) in assignment.iter().enumerate() {
                rho[t][a] += weight;
            }
            return;
        }
        assignment[i] = 0;
        recurse(i + 1, weight * eta_miss[i], eta_miss, eta, assignment, used, rho, total);
        for k in 0..used.len() {
            if !used[k] && eta[i][k] > 0.0 {
                used[k] = true;
                assignment[i] = k + 1;
                recurse(i + 1, weight * eta[i][k], eta_miss, eta, assignment, used, rho, total);
                used[k] = false;
            }
        }
    }

    recurse(0, 1.0, eta_miss, eta, &mut assignment, &mut used, &mut rho, &mut total);
    for row in &mut rho {
        row.iter_mut().for_each(|v| *v /= total);
    }
    rho
}

/// Gibbs sampler over injective track-to-measurement assignments. The
/// distinct assignments visited are weighted exactly, truncating the event
/// space to the sampled support.
fn sample_cluster<R: Rng + ?Sized>(eta_miss: &[f64], eta: &[Vec<f64>], sweeps: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = eta_miss.len();
    let m = eta.first().map_or(0, Vec::len);
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut state = vec![0usize; n];
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    seen.insert(state.clone());
    let mut weights = Vec::with_capacity(m + 1);
    for _ in 0..sweeps {
        for i in 0..n {
            if state[i] > 0 {
                owner[state[i] - 1] = None;
            }
            weights.clear();
            weights.push(eta_miss[i]);
            for k in 0..m {
                weights.push(if owner[k].is_none() { eta[i][k] } else { 0.0 });
            }
            let total: f64 = weights.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = 0;
            for (a, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = a;
                    if u < acc {
                        break;
                    }
                }
            }
            state[i] = pick;
            if pick > 0 {
                owner[pick - 1] = Some(i);
            }
        }
        seen.insert(state.clone());
    }
    let mut rho = vec![vec![0.0; m + 1]; n];
    let mut total = 0.0;
    for a in &seen {
        let w: f64 = a
            .iter()
            .enumerate()
            .map(|(i, &k)| if k == 0 { eta_miss[i] } else { eta[i][k - 1] })
            .product();
        total += w;
        for (i, &k) in a.iter().enumerate() {
            rho[i][k] += w;
        }
    }
    for row in &mut rho {
        row.iter_mut().for_each(|v| *v /= total);
    }
    rho
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-sensor particle LMB update.
pub fn update_sensor<R: Rng + ?Sized>(
    lmb: &LmbDensity,
    sensor: &BearingRangeSensor,
    zs: &[Measurement],
    cfg: &FilterConfig,
    rng: &mut R,
) -> SensorUpdateResult {
    let n = lmb.len();
    let m = zs.len();
    let p_d = sensor.detect_prob;
    let kappa: Vec<f64> = zs
        .iter()
        .map(|z| sensor.clutter_intensity(z).max(f64::MIN_POSITIVE))
        .collect();
    let liks: Vec<TrackLikelihood> = lmb
        .components
        .iter()
        .map(|c| track_likelihood(c, sensor, zs))
        .collect();

    let eta_miss: Vec<f64> = lmb
        .components
        .iter()
        .map(|c| 1.0 - c.existence + c.existence * (1.0 - p_d))
        .collect();

    // Tracks and measurements are linked when the track can explain the
    // measurement; each connected cluster is an independent association problem.
    let mut parent: Vec<usize> = (0..n + m).collect();
    for (i, tl) in liks.iter().enumerate() {
        for (j, _) in &tl.detections {
            let (a, b) = (find(&mut parent, i), find(&mut parent, n + j));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut clusters: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut root_slot = vec![usize::MAX; n + m];
    for x in 0..n + m {
        let r = find(&mut parent, x);
        if root_slot[r] == usize::MAX {
            root_slot[r] = clusters.len();
            clusters.push((Vec::new(), Vec::new()));
        }
        let slot = root_slot[r];
        if x < n {
            clusters[slot].0.push(x);
        } else {
            clusters[slot].1.push(x - n);
        }
    }

    // rho_det[i] pairs (measurement, marginal); rho_miss[i] the miss marginal
    let mut rho_miss = vec![1.0; n];
    let mut rho_det: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut r_assoc = vec![0.0; m];
    for (tracks, meas) in &clusters {
        if tracks.is_empty() || meas.is_empty() {
            continue;
        }
        let local: Vec<usize> = {
            let mut map = vec![usize::MAX; m];
            for (k, &j) in meas.iter().enumerate() {
                map[j] = k;
            }
            map
        };
        let c_miss: Vec<f64> = tracks.iter().map(|&i| eta_miss[i]).collect();
        let c_eta: Vec<Vec<f64>> = tracks
            .iter()
            .map(|&i| {
                let mut row = vec![0.0; meas.len()];
                let tl = &liks[i];
                for ((j, _), l) in tl.detections.iter().zip(&tl.totals) {
                    row[local[*j]] = lmb.components[i].existence * l / kappa[*j];
                }
                row
            })
            .collect();
        let rho = if tracks.len() <= cfg.exact_max_tracks && meas.len() <= cfg.exact_max_measurements {
            enumerate_cluster(&c_miss, &c_eta)
        } else {
            sample_cluster(&c_miss, &c_eta, cfg.assoc_samples, rng)
        };
        for (t, &i) in tracks.iter().enumerate() {
            rho_miss[i] = rho[t][0];
            for (k, &j) in meas.iter().enumerate() {
                let v = rho[t][k + 1];
                if v > 0.0 {
                    rho_det[i].push((j, v));
                    r_assoc[j] += v;
                }
            }
        }
    }
    r_assoc.iter_mut().for_each(|r| *r = r.clamp(0.0, 1.0));

    let mut components = Vec::with_capacity(n);
    for (i, c) in lmb.components.iter().enumerate() {
        let tl = &liks[i];
        let miss_mass = if eta_miss[i] > 0.0 {
            rho_miss[i] * c.existence * (1.0 - p_d) / eta_miss[i]
        } else {
            0.0
        };
        let det_mass: f64 = rho_det[i].iter().map(|(_, v)| v).sum();
        let existence = (miss_mass + det_mass).clamp(0.0, 1.0);

        let mut w: Vec<f64> = tl.weights.iter().map(|w| miss_mass * w).collect();
        for &(j, v) in &rho_det[i] {
            let k = tl.detections.iter().position(|(jj, _)| *jj == j).expect("gated measurement");
            let (_, lik) = &tl.detections[k];
            let scale = v / tl.totals[k];
            for (wp, (g, w0)) in w.iter_mut().zip(lik.iter().zip(&tl.weights)) {
                *wp += scale * g * w0;
            }
        }
        let reweighted = ParticleSet::new(
            c.spatial
                .particles
                .iter()
                .zip(&w)
                .map(|(p, &weight)| Particle { state: p.state, weight })
                .collect(),
        );
        let spatial = reweighted
            .resample_systematic(cfg.track_particles, rng)
            .unwrap_or_else(|_| c.spatial.clone());
        components.push(BernoulliComponent {
            label: c.label.clone(),
            existence,
            spatial,
        });
    }
    SensorUpdateResult {
        posterior: LmbDensity::new(components),
        r_assoc,
    }
}

/// Iterated corrector over sensors in index order.
pub fn update_all_sensors<R: Rng + ?Sized>(
    lmb: &LmbDensity,
    sensors: &[BearingRangeSensor],
    measurements: &[Vec<Measurement>],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<(LmbDensity, AssociationInput)> {
    if sensors.len() != measurements.len() {
        return Err(Error::config("one measurement set per sensor required"));
    }
    let mut current = lmb.clone();
    let mut r_assoc = Vec::with_capacity(sensors.len());
    for (sensor, zs) in sensors.iter().zip(measurements) {
        let out = update_sensor(&current, sensor, zs, cfg, rng);
        current = out.posterior;
        r_assoc.push(out.r_assoc);
    }
    Ok((current, AssociationInput { r_assoc }))
}

pub fn prune_cap_belief(lmb: LmbDensity, cfg: &FilterConfig) -> LmbDensity {
    prune_cap(lmb, cfg.belief_prune, cfg.belief_cap)
}

/// `(label, weighted mean)` of every component with existence above `threshold`.
pub fn extract_estimates(lmb: &LmbDensity, threshold: f64) -> Vec<(Label, KinematicState)> {
    lmb.components
        .iter()
        .filter(|c| c.existence > threshold)
        .filter_map(|c| c.spatial.mean().map(|m| (c.label.clone(), m)))
        .collect()
}
