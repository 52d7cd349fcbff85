//! OSPA between point sets and the windowed OSPA(2) between labeled track sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OspaParams {
    pub cutoff: f64,
    pub order: f64,
    pub window: usize,
    pub weight_power: f64,
}

impl Default for OspaParams {
    fn default() -> Self {
        OspaParams {
            cutoff: 200.0,
            order: 1.0,
            window: 5,
            weight_power: 0.0,
        }
    }
}

impl OspaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0) || !(self.order >= 1.0) || self.window == 0 || !self.weight_power.is_finite() {
            return Err(Error::config("OSPA needs cutoff > 0, order >= 1, window >= 1"));
        }
        Ok(())
    }
}

/// Minimal total cost of assigning every row of the smaller side to a
/// distinct column of the larger side. `costs` is row-major; an empty matrix
/// costs zero. The chosen costs are summed in ascending order so the result
/// does not depend on which side is the rows.
pub fn assignment_min(costs: &[Vec<f64>]) -> f64 {
    let mut chosen: Vec<f64> = assignment_pairs(costs).into_iter().map(|(i, j)| costs[i][j]).collect();
    chosen.sort_by(f64::total_cmp);
    chosen.into_iter().sum()
}

/// Optimal `(row, column)` pairs by shortest augmenting paths with potentials.
pub fn assignment_pairs(costs: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| costs[i][j]).collect()).collect();
        return assignment_pairs(&transposed).into_iter().map(|(j, i)| (i, j)).collect();
    }
    let (n, m) = (rows, cols);
    // 1-based potentials; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = costs[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| matched[j] != 0)
        .map(|j| (matched[j] - 1, j - 1))
        .collect()
}

/// OSPA over abstract sets of sizes `nx` and `ny` with a base distance.
fn ospa_generic(nx: usize, ny: usize, dist: impl Fn(usize, usize) -> f64, c: f64, p: f64) -> f64 {
    if nx == 0 && ny == 0 {
        return 0.0;
    }
    let (m, n) = (nx.min(ny), nx.max(ny));
    let costs: Vec<Vec<f64>> = (0..nx)
        .map(|i| (0..ny).map(|j| dist(i, j).min(c).powf(p)).collect())
        .collect();
    let assigned = if m == 0 { 0.0 } else { assignment_min(&costs) };
    ((assigned + c.powf(p) * (n - m) as f64) / n as f64).powf(1.0 / p)
}

/// OSPA distance between planar point sets.
pub fn ospa(x: &[[f64; 2]], y: &[[f64; 2]], c: f64, p: f64) -> f64 {
    ospa_generic(
        x.len(),
        y.len(),
        |i, j| (x[i][0] - y[j][0]).hypot(x[i][1] - y[j][1]),
        c,
        p,
    )
}

/// Labeled tracks as per-step positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrackSet<K: Ord> {
    pub tracks: BTreeMap<K, BTreeMap<usize, [f64; 2]>>,
}

impl<K: Ord> Default for LabeledTrackSet<K> {
    fn default() -> Self {
        LabeledTrackSet { tracks: BTreeMap::new() }
    }
}

impl<K: Ord> LabeledTrackSet<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: K, step: usize, position: [f64; 2]) {
        self.tracks.entry(label).or_default().insert(step, position);
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Tracks existing at some step of `window`.
    fn active(&self, window: &std::ops::RangeInclusive<usize>) -> Vec<&BTreeMap<usize, [f64; 2]>> {
        self.tracks
            .values()
            .filter(|t| t.range(window.clone()).next().is_some())
            .collect()
    }
}

/// Window weights for steps `start..=t`, normalized.
fn window_weights(start: usize, t: usize, power: f64) -> Vec<f64> {
    let raw: Vec<f64> = if power == 0.0 {
        vec![1.0; t - start + 1]
    } else {
        (start..=t).map(|tau| ((tau - start + 1) as f64).powf(power)).collect()
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// OSPA(2) at step `t` over the window ending at `t`.
pub fn ospa2<K: Ord, L: Ord>(x: &LabeledTrackSet<K>, y: &LabeledTrackSet<L>, params: &OspaParams, t: usize) -> f64 {
    let c = params.cutoff;
    let start = (t + 1).saturating_sub(params.window);
    let window = start..=t;
    let weights = window_weights(start, t, params.weight_power);
    let xs = x.active(&window);
    let ys = y.active(&window);
    let track_distance = |i: usize, j: usize| -> f64 {
        let (a, b) = (xs[i], ys[j]);
        window
            .clone()
            .zip(&weights)
            .map(|(tau, w)| {
                let d = match (a.get(&tau), b.get(&tau)) {
                    (None, None) => 0.0,
                    (Some(p), Some(q)) => (p[0] - q[0]).hypot(p[1] - q[1]).min(c),
                    _ => c,
                };
                w * d.powf(params.order)
            })
            .sum::<f64>()
            .powf(1.0 / params.order)
    };
    ospa_generic(xs.len(), ys.len(), track_distance, c, params.order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn brute_force(costs: &[Vec<f64>]) -> f64 {
        fn go(costs: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == costs.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(costs[row][j] + go(costs, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(costs, 0, &mut vec![false; costs[0].len()])
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(assignment_min(&[vec![7.0]]), 7.0);
        assert_eq!(assignment_min(&[vec![1.0, 10.0], vec![10.0, 1.0]]), 2.0);
        assert_eq!(assignment_min(&[vec![4.0, 1.0, 3.0]]), 1.0);
        assert_eq!(assignment_min(&[vec![4.0], vec![1.0], vec![3.0]]), 1.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = substream(11, "assign");
        for _ in 0..200 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(n..=6);
            let costs: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
            let fast = assignment_min(&costs);
            assert!((fast - brute_force(&costs)).abs() < 1e-9);
        }
    }

    #[test]
    fn ospa_examples() {
        assert_eq!(ospa(&[], &[], 200.0, 1.0), 0.0);
        assert_eq!(ospa(&[], &[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 200.0, 1.0), 200.0);
        assert!((ospa(&[[0.0, 0.0]], &[[3.0, 4.0]], 200.0, 1.0) - 5.0).abs() < 1e-12);
    }

    fn points<R: Rng>(rng: &mut R, k: usize) -> Vec<[f64; 2]> {
        (0..k).map(|_| [rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)]).collect()
    }

    #[test]
    fn ospa_axioms() {
        let mut rng = substream(12, "ospa");
        for _ in 0..100 {
            let nx = rng.random_range(0..6);
            let ny = rng.random_range(0..6);
            let x = points(&mut rng, nx);
            let y = points(&mut rng, ny);
            let d = ospa(&x, &y, 200.0, 1.0);
            assert_eq!(d, ospa(&y, &x, 200.0, 1.0));
            assert!((0.0..=200.0 + 1e-9).contains(&d));
            assert!(ospa(&x, &x, 200.0, 1.0).abs() < 1e-12);
        }
    }

    fn track(steps: impl IntoIterator<Item = (usize, [f64; 2])>) -> BTreeMap<usize, [f64; 2]> {
        steps.into_iter().collect()
    }

    #[test]
    fn ospa2_examples() {
        let params = OspaParams::default();
        let mut x = LabeledTrackSet::new();
        for t in 0..10 {
            x.insert(1u32, t, [t as f64, 0.0]);
        }
        assert_eq!(ospa2(&x, &x, &params, 9), 0.0);
        assert_eq!(ospa2(&x, &LabeledTrackSet::<u32>::new(), &params, 9), 200.0);

        // coincident for 4 of 5 steps; one step where only one exists
        let mut a = LabeledTrackSet::new();
        a.tracks.insert(1u32, track((0..5).map(|t| (t, [0.0, 0.0]))));
        let mut b = LabeledTrackSet::new();
        b.tracks.insert(7u32, track((0..4).map(|t| (t, [0.0, 0.0]))));
        assert!((ospa2(&a, &b, &params, 4) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn ospa2_window_one_is_ospa() {
        let params = OspaParams { window: 1, ..OspaParams::default() };
        let mut x = LabeledTrackSet::new();
        let mut y = LabeledTrackSet::new();
        x.insert(1, 3, [0.0, 0.0]);
        x.insert(2, 3, [100.0, 0.0]);
        y.insert(5, 3, [3.0, 4.0]);
        let expect = ospa(&[[0.0, 0.0], [100.0, 0.0]], &[[3.0, 4.0]], 200.0, 1.0);
        assert!((ospa2(&x, &y, &params, 3) - expect).abs() < 1e-12);
    }

    #[test]
    fn ospa2_drops_absent_tracks() {
        let params = OspaParams::default();
        let mut x = LabeledTrackSet::new();
        x.insert(1, 0, [0.0, 0.0]);
        x.insert(2, 20, [0.0, 0.0]);
        let mut y = LabeledTrackSet::new();
        y.insert(1, 20, [0.0, 0.0]);
        assert_eq!(ospa2(&x, &y, &params, 20), 0.0);
    }

    #[test]
    fn window_weights_normalized() {
        let w = window_weights(3, 7, 0.0);
        assert_eq!(w, vec![0.2; 5]);
        let w = window_weights(0, 2, 1.0);
        assert!((w[2] - 0.5).abs() < 1e-15);
    }
}
