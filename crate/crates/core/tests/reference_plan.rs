mod common;

use hgc::coarse::{BlockRole, CachePlan, ControlLatter, Decision};
use hgc::experiment::{self, ExperimentConfig, TauCMode};
use hgc::fine::FineCacheConfig;
use hgc::pipeline::Pipeline;

use common::{enumerate_control, enumerate_generative, expected_total};

#[test]
fn fixed_cached_step_plan_layout() {
    let cfg = ExperimentConfig {
        tau_c_mode: TauCMode::Fixed(6),
        ..ExperimentConfig::default()
    };
    let pipeline = Pipeline::new(cfg.pipeline.clone()).unwrap();
    let prepared = experiment::prepare(&cfg, &pipeline).unwrap();
    for role in BlockRole::CONTROL {
        let row: Vec<Decision> = (1..=20)
            .map(|s| prepared.control_plan.get(s, role).unwrap())
            .collect();
        assert!(row[..6].iter().all(|d| *d == Decision::Compute));
        assert!(row[6..10].iter().all(|d| *d == Decision::Reuse(6)));
        assert!(row[10..].iter().all(|d| *d == Decision::Skip));
    }
    assert_eq!(
        prepared.gen_plan.compute_steps(BlockRole::GenMid),
        vec![1, 3, 5, 7, 9, 10, 13, 16, 19]
    );
    assert_eq!(
        prepared.gen_plan.compute_steps(BlockRole::GenEncoder),
        vec![1, 6, 10, 13, 16, 19]
    );
}

#[test]
fn hand_derived_totals() {
    let cfg = ExperimentConfig::default();
    let pc = &cfg.pipeline;
    let baseline = expected_total(
        pc,
        &CachePlan::all_compute(20, &BlockRole::CONTROL),
        &CachePlan::all_compute(20, &BlockRole::GENERATIVE),
        &FineCacheConfig::disabled(),
    );
    let cached = expected_total(
        pc,
        &enumerate_control(20, 6, ControlLatter::Skip),
        &enumerate_generative(20, 5, 2, 3),
        &cfg.fine,
    );
    assert_eq!(baseline, 3_850_240);
    assert_eq!(cached, 1_134_592);

    let run = experiment::execute(&ExperimentConfig {
        tau_c_mode: TauCMode::Fixed(6),
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(run.report.ledger.total, cached);
    assert_eq!(run.report.baseline_macs, baseline);
}
