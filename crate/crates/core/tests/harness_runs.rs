use activecq::datagen::Generator;
use activecq::estimators::CqKind;
use activecq::harness::{run_active_loop, run_trials, ConditioningChoice, TrialConfig};

#[test]
fn random_strategy_reduces_error_on_visualization() {
    let mut c = TrialConfig::defaults(CqKind::Cate, Generator::Visualization, "random".parse().unwrap());
    c.budget = 100;
    // Several z values, so one lucky draw near z = 0 cannot decide a seed.
    c.interest.conditioning = ConditioningChoice::Random;
    let set = run_trials(&c, 1).unwrap();
    assert_eq!(set.aborted(), 0);
    let improved = set
        .trials
        .iter()
        .filter(|t| t.records[20].amse < t.records[0].amse)
        .count();
    assert!(improved >= 18, "improved in {improved}/20 seeds");
    for t in &set.trials {
        for (r, rec) in t.records.iter().enumerate() {
            assert_eq!(rec.labeled, 20 + 5 * r);
        }
    }
}

#[test]
fn oracle_truth_is_frozen_within_a_trial() {
    let mut c = TrialConfig::defaults(CqKind::Ate, Generator::Simulation, "tvr_cme".parse().unwrap());
    c.budget = 10;
    c.oracle_samples = 20_000;
    let a = run_active_loop(&c, 4).unwrap();
    let b = run_active_loop(&c, 4).unwrap();
    assert_eq!(a, b);
    let mut seen = std::collections::HashSet::new();
    for rec in &a {
        for s in &rec.selected {
            assert!(seen.insert(*s));
        }
    }
}
