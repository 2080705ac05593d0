use twofe_agent::scenario::{self, Verdict, DEFAULT_SEED};

fn lines(verdicts: &[Verdict]) -> Vec<String> {
    verdicts.iter().flat_map(Verdict::lines).collect()
}

#[test]
fn suite_matches_the_golden_verdicts() {
    let verdicts = scenario::run_all(DEFAULT_SEED);
    for v in &verdicts {
        for c in v.checks.iter().filter(|c| !c.pass) {
            println!("{}: {} ({})", v.scenario, c.name, c.detail);
        }
    }
    let golden = include_str!("../golden/scenarios.tsv");
    let expected: Vec<&str> = golden.lines().collect();
    assert_eq!(lines(&verdicts), expected);
    assert_eq!(verdicts.len(), 10);
    assert!(verdicts.iter().all(Verdict::passed));
}

#[test]
fn same_seed_same_verdicts() {
    let a = lines(&scenario::run_all(7));
    let b = lines(&scenario::run_all(7));
    assert_eq!(a, b);
}

#[test]
fn unknown_scenario_is_none() {
    assert!(scenario::run("stolen-laptop", 1).is_none());
    assert_eq!(scenario::names().len(), 10);
}
