//! Seeded end-to-end experiments, per-step instrumentation and comparison
//! reports.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adaptive_birth::{adaptive_birth_step, BirthConfig, GateMode, PruneCap};
use crate::birth_likelihood::{EvalStats, PsiContext};
use crate::error::{Error, Result};
use crate::lmb_filter::{extract_estimates, predict, prune_cap_belief, update_all_sensors, FilterConfig};
use crate::metrics::{ospa2, LabeledTrackSet, OspaParams};
use crate::models::BirthPrior;
use crate::rfs_core::{Label, LmbDensity};
use crate::rng::SeedMixer;
use crate::scenario::{Scenario, ScenarioConfig};

/// Birth sampler settings; each mechanism's parameter applies only when its
/// toggle is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BirthParams {
    pub num_chains: usize,
    pub chain_length: usize,
    pub r_b_max: f64,
    pub lambda_b: f64,
    pub posterior_particles: usize,
    pub prior: BirthPrior,
    pub tau_assoc: f64,
    pub gate: GateMode,
    pub max_missed: usize,
    pub prune_threshold: f64,
    pub cap: usize,
}

impl Default for BirthParams {
    fn default() -> Self {
        BirthParams {
            num_chains: 20,
            chain_length: 5,
            r_b_max: 1.0,
            lambda_b: 0.5,
            posterior_particles: 1000,
            prior: BirthPrior::default(),
            tau_assoc: 1e-4,
            gate: GateMode::Euclidean { threshold: 3000.0 },
            max_missed: 4,
            prune_threshold: 1e-3,
            cap: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub preprune: bool,
    pub gate: bool,
    pub memoize: bool,
    pub prune_cap: bool,
    pub skip_miss: bool,
}

impl Toggles {
    pub fn all_on() -> Self {
        Toggles {
            preprune: true,
            gate: true,
            memoize: true,
            prune_cap: true,
            skip_miss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub label: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            label: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub filter: FilterConfig,
    pub birth: BirthParams,
    pub toggles: Toggles,
    pub metrics: OspaParams,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.filter.validate()?;
        self.metrics.validate()?;
        self.birth.prior.validate()?;
        self.birth_config().validate()
    }

    /// Sampler configuration with disabled mechanisms mapped to `None`/off.
    pub fn birth_config(&self) -> BirthConfig {
        let b = &self.birth;
        let t = &self.toggles;
        BirthConfig {
            num_chains: b.num_chains,
            chain_length: b.chain_length,
            r_b_max: b.r_b_max,
            lambda_b: b.lambda_b,
            tau_assoc: t.preprune.then_some(b.tau_assoc),
            gate: if t.gate { b.gate } else { GateMode::Off },
            memoize: t.memoize,
            max_missed: t.skip_miss.then_some(b.max_missed),
            prune: t.prune_cap.then_some(PruneCap {
                threshold: b.prune_threshold,
                cap: b.cap,
            }),
            posterior_particles: b.posterior_particles,
        }
    }
}

/// Wall time per pipeline stage, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub birth_sampling: f64,
    pub birth_construction: f64,
    pub filter: f64,
    pub metrics: f64,
}

impl StageTimes {
    pub fn birth(&self) -> f64 {
        self.birth_sampling + self.birth_construction
    }

    pub fn total(&self) -> f64 {
        self.birth() + self.filter + self.metrics
    }

    fn accumulate(&mut self, o: &StageTimes) {
        self.birth_sampling += o.birth_sampling;
        self.birth_construction += o.birth_construction;
        self.filter += o.filter;
        self.metrics += o.metrics;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stats: EvalStats,
    pub birth_count: usize,
    pub ospa2: f64,
    pub estimates: usize,
    /// Hash over the bit patterns of the emitted birth density.
    pub birth_digest: u64,
    pub times: StageTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub seed: u64,
    pub toggles: Toggles,
    pub birth: BirthConfig,
    pub steps: Vec<StepRecord>,
    pub totals: EvalStats,
    pub times: StageTimes,
    pub wall_time: f64,
}

impl RunReport {
    pub fn mean_ospa2(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.ospa2).sum::<f64>() / self.steps.len() as f64
    }

    pub fn ospa2_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.ospa2).collect()
    }

    /// Counters summed over steps at or after `from`.
    pub fn totals_from(&self, from: usize) -> EvalStats {
        let mut t = EvalStats::default();
        for s in self.steps.iter().filter(|s| s.step >= from) {
            t.accumulate(&s.stats);
        }
        t
    }

    /// Fraction of wall time spent in the birth stages.
    pub fn birth_fraction(&self) -> f64 {
        let total = self.times.total();
        if total > 0.0 {
            self.times.birth() / total
        } else {
            0.0
        }
    }
}

/// Digest of every bit of an LMB density.
pub fn lmb_digest(lmb: &LmbDensity) -> u64 {
    let mut h = DefaultHasher::new();
    for c in &lmb.components {
        c.label.hash(&mut h);
        c.existence.to_bits().hash(&mut h);
        for p in &c.spatial.particles {
            for v in [p.state.px, p.state.vx, p.state.py, p.state.vy, p.weight] {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Runs the configured experiment on a freshly generated scenario.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let scenario = Scenario::generate(&cfg.scenario)?;
    run_on_scenario(cfg, &scenario)
}

/// Runs the filter and birth pipeline over fixed inputs. Runs are serialized
/// process-wide so wall times are not skewed by contention.
pub fn run_on_scenario(cfg: &RunConfig, scenario: &Scenario) -> Result<RunReport> {
    run_on_scenario_observed(cfg, scenario, |_, _| {})
}

/// [`run_on_scenario`] with a callback receiving every emitted birth density.
pub fn run_on_scenario_observed<F>(cfg: &RunConfig, scenario: &Scenario, mut on_birth: F) -> Result<RunReport>
where
    F: FnMut(usize, &LmbDensity),
{
    cfg.validate()?;
    if scenario.num_sensors() != cfg.scenario.sensors.len() {
        return Err(Error::config("scenario sensor count differs from the configuration"));
    }
    let _serial = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let birth_cfg = cfg.birth_config();
    let model = cfg.scenario.motion();
    let sensors = &cfg.scenario.sensors;
    let root = SeedMixer::new(cfg.scenario.seed);
    let psi_seed = root.push_str("psi").finish();

    let mut truth_tracks: LabeledTrackSet<usize> = LabeledTrackSet::new();
    let mut est_tracks: LabeledTrackSet<Label> = LabeledTrackSet::new();
    let mut predicted = LmbDensity::default();
    let mut steps = Vec::with_capacity(scenario.duration());
    let mut totals = EvalStats::default();
    let mut times = StageTimes::default();

    for t in 0..scenario.duration() {
        let zs = &scenario.measurements[t];
        let mut filter_rng = root.push_str("filter").push(t as u64).rng();
        let mut birth_rng = root.push_str("birth").push(t as u64).rng();

        let filter_start = Instant::now();
        let (posterior, assoc) = update_all_sensors(&predicted, sensors, zs, &cfg.filter, &mut filter_rng)?;
        let posterior = prune_cap_belief(posterior, &cfg.filter);
        let estimates = extract_estimates(&posterior, cfg.filter.extract_threshold);
        let mut filter_time = filter_start.elapsed();

        let ctx = PsiContext::new(sensors.clone(), zs.clone(), cfg.birth.prior, t as u32, psi_seed)?;
        let birth = adaptive_birth_step(&ctx, &assoc, &birth_cfg, &model, &mut birth_rng)?;
        let birth_count = birth.lmb.len();
        let birth_digest = lmb_digest(&birth.lmb);
        on_birth(t, &birth.lmb);

        let predict_start = Instant::now();
        predicted = predict(&posterior, birth.lmb, &model, cfg.filter.survival_prob, &mut filter_rng)?;
        filter_time += predict_start.elapsed();

        let metrics_start = Instant::now();
        for (k, tr) in scenario.truth.iter().enumerate() {
            if let Some(x) = tr.state_at(t) {
                truth_tracks.insert(k, t, x.position());
            }
        }
        for (label, x) in &estimates {
            est_tracks.insert(label.clone(), t, x.position());
        }
        let d = ospa2(&truth_tracks, &est_tracks, &cfg.metrics, t);
        let metrics_time = metrics_start.elapsed();

        let step_times = StageTimes {
            birth_sampling: secs(birth.sampling_time),
            birth_construction: secs(birth.construction_time),
            filter: secs(filter_time),
            metrics: secs(metrics_time),
        };
        totals.accumulate(&birth.stats);
        times.accumulate(&step_times);
        steps.push(StepRecord {
            step: t,
            stats: birth.stats,
            birth_count,
            ospa2: d,
            estimates: estimates.len(),
            birth_digest,
            times: step_times,
        });
    }

    Ok(RunReport {
        label: cfg.output.label.clone(),
        seed: cfg.scenario.seed,
        toggles: cfg.toggles,
        birth: birth_cfg,
        steps,
        totals,
        times,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// `(r1 - r2) / r1 * 100`.
pub fn percent_reduction(r1: f64, r2: f64) -> Result<f64> {
    if !(r1 > 0.0) {
        return Err(Error::config(format!("baseline value must be positive, got {r1}")));
    }
    Ok((r1 - r2) / r1 * 100.0)
}

/// Steps before this index are excluded from the warm evaluation reduction.
pub const WARMUP_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub wall_time_reduction: f64,
    pub birth_time_reduction: f64,
    pub eval_reduction: f64,
    /// Evaluation reduction over steps from [`WARMUP_STEPS`] on.
    pub eval_reduction_warm: f64,
    pub mean_ospa2: f64,
    pub ospa2_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub baseline_mean_ospa2: f64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,wall_time_reduction,birth_time_reduction,eval_reduction,eval_reduction_warm,mean_ospa2,ospa2_delta\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.label,
                r.wall_time_reduction,
                r.birth_time_reduction,
                r.eval_reduction,
                r.eval_reduction_warm,
                r.mean_ospa2,
                r.ospa2_delta
            )
            .unwrap();
        }
        s
    }
}

/// Percent reductions of every candidate relative to `baseline`.
pub fn compare_runs(baseline: &RunReport, candidates: &[RunReport]) -> Result<Comparison> {
    let base_warm = baseline.totals_from(WARMUP_STEPS).computed as f64;
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.seed != baseline.seed {
            return Err(Error::SeedMismatch {
                baseline: baseline.seed,
                candidate: c.seed,
            });
        }
        let warm = c.totals_from(WARMUP_STEPS).computed as f64;
        rows.push(ComparisonRow {
            label: c.label.clone(),
            wall_time_reduction: percent_reduction(baseline.wall_time, c.wall_time)?,
            birth_time_reduction: percent_reduction(baseline.times.birth(), c.times.birth())?,
            eval_reduction: percent_reduction(baseline.totals.computed as f64, c.totals.computed as f64)?,
            eval_reduction_warm: if base_warm > 0.0 {
                percent_reduction(base_warm, warm)?
            } else {
                0.0
            },
            mean_ospa2: c.mean_ospa2(),
            ospa2_delta: c.mean_ospa2() - baseline.mean_ospa2(),
        });
    }
    Ok(Comparison {
        baseline: baseline.label.clone(),
        baseline_mean_ospa2: baseline.mean_ospa2(),
        rows,
    })
}

pub const STEPS_HEADER: &str = "step,computed,memo_hits,gated_skips,preprune_removed,component_skips,birth_count,ospa2";

pub fn steps_csv(report: &RunReport) -> String {
    let mut s = String::from(STEPS_HEADER);
    s.push('\n');
    for r in &report.steps {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{:?}",
            r.step,
            r.stats.computed,
            r.stats.memo_hits,
            r.stats.gated_skips,
            r.stats.preprune_removed,
            r.stats.component_skips,
            r.birth_count,
            r.ospa2
        )
        .unwrap();
    }
    s
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const STEPS_FILE: &str = "steps.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the summary document and the per-step table into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = serde_json::to_string_pretty(report).expect("report serializes");
    Ok(vec![
        write_file(dir.join(SUMMARY_FILE), &summary)?,
        write_file(dir.join(STEPS_FILE), &steps_csv(report))?,
    ])
}

pub fn emit_comparison(cmp: &Comparison, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir.join(COMPARISON_FILE), &cmp.to_csv())
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}
