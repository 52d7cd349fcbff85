use lmbtrack::adaptive_birth::{adaptive_birth_step, AssociationInput, BirthConfig, PruneCap};
use lmbtrack::birth_likelihood::PsiContext;
use lmbtrack::harness::{emit_report, load_report, run_on_scenario, RunConfig, STEPS_HEADER};
use lmbtrack::rng::substream;
use lmbtrack::scenario::Scenario;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scenario.seed = 5;
    cfg.scenario.duration = 6;
    cfg.birth.prior.num_particles = 200;
    cfg.birth.posterior_particles = 200;
    cfg.filter.track_particles = 200;
    cfg.toggles.memoize = true;
    cfg
}

#[test]
fn dumped_scenario_reproduces_the_run() {
    let cfg = small_config();
    let scenario = Scenario::generate(&cfg.scenario).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.txt");
    scenario.write(&path).unwrap();
    let loaded = Scenario::read(&path).unwrap();
    assert_eq!(loaded, scenario);

    let a = run_on_scenario(&cfg, &scenario).unwrap();
    let b = run_on_scenario(&cfg, &loaded).unwrap();
    assert_eq!(a.ospa2_series(), b.ospa2_series());
    assert_eq!(a.totals, b.totals);
}

#[test]
fn report_round_trips_through_files() {
    let cfg = small_config();
    let report = run_on_scenario(&cfg, &Scenario::generate(&cfg.scenario).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    assert_eq!(load_report(dir.path()).unwrap(), report);
    let steps = std::fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert!(steps.starts_with(STEPS_HEADER));
    assert_eq!(steps.lines().count(), cfg.scenario.duration + 1);
}

#[test]
fn birth_on_simulated_measurements_respects_contracts() {
    let cfg = small_config();
    let scenario = Scenario::generate(&cfg.scenario).unwrap();
    let sensors = cfg.scenario.sensors.clone();
    let zs = scenario.measurements[0].clone();
    let counts: Vec<usize> = zs.iter().map(Vec::len).collect();
    let ctx = PsiContext::new(sensors, zs, cfg.birth.prior, 0, 3).unwrap();
    let birth_cfg = BirthConfig {
        memoize: true,
        max_missed: Some(4),
        prune: Some(PruneCap { threshold: 1e-3, cap: 10 }),
        posterior_particles: 100,
        ..BirthConfig::default()
    };
    let out = adaptive_birth_step(
        &ctx,
        &AssociationInput::unassociated(&counts),
        &birth_cfg,
        &cfg.scenario.motion(),
        &mut substream(0, "birth"),
    )
    .unwrap();
    assert!(out.lmb.len() <= 10);
    for c in &out.lmb.components {
        assert!(c.label.tuple.missed_count() <= 4);
        assert!(c.existence >= 1e-3 && c.existence <= 0.5);
        assert_eq!(c.label.birth_time, 1);
    }
    let s = out.stats;
    assert!(s.memo_hits > 0);
    assert_eq!(s.needed(), s.computed + s.memo_hits);
}
