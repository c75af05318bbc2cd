use std::path::PathBuf;

use crl_core::envsuite::TaskKind;
use crl_core::harness::RunConfig;
use crl_core::replay::InsertionStrategy;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&configs_dir().join(name)).unwrap()
}

#[test]
fn every_shipped_config_validates() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let c = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

#[test]
fn four_task_config_has_full_budgets() {
    let c = load("full_four_task.toml");
    assert_eq!(c.schedule.tasks.len(), 4);
    assert!(c.schedule.tasks.iter().all(|t| t.budget == 1_000_000));
    assert_eq!(c.replay.capacity, 1_000_000);
    assert_eq!(c.schedule.total_steps(), 4_000_000);
}

#[test]
fn imbalance_config_has_one_to_six_budgets() {
    let c = load("full_imbalance.toml");
    let budgets: Vec<u64> = c.schedule.tasks.iter().map(|t| t.budget).collect();
    assert_eq!(budgets, vec![400_000, 2_400_000]);
    assert_eq!(c.replay.capacity, 400_000);
    assert_eq!(c.replay.insertion, InsertionStrategy::CoverageMax);
}

#[test]
fn desk_scenarios_have_their_shapes() {
    let three = load("desk_three_task.toml");
    assert_eq!(three.schedule.total_steps(), 150_000);
    assert_eq!(three.replay.capacity, 30_000);
    let four = load("desk_four_phase.toml");
    assert_eq!(four.schedule.tasks.len(), 4);
    let imb = load("desk_imbalance.toml");
    assert_eq!(imb.schedule.tasks[1].budget, 6 * imb.schedule.tasks[0].budget);
    assert_eq!(imb.replay.capacity as u64, imb.schedule.tasks[0].budget);
    let explore = load("desk_exploration.toml");
    assert_eq!(explore.schedule.tasks[0].kind, TaskKind::OpenRoom);
    assert_eq!(explore.schedule.tasks[0].size, 15);
}
