use std::path::Path;

use proptest::prelude::*;

use auditfl_core::simulation::{prepare_data, run_with_data, DataConfig, RunOptions};
use auditfl_core::{full_audit, AdversaryKind, AggregationMode, MaliciousSpec, RunConfig, Stage};

fn config(participants: u32, rounds: u32, seed: u64) -> RunConfig {
    RunConfig {
        participants,
        rounds,
        batch_size: 8,
        pretrain_steps: 3,
        seed,
        eval_every: rounds,
        data: DataConfig::Synthetic {
            samples: (participants as usize + 1) * 24,
            test_samples: 60,
            features: 5,
            classes: 3,
        },
        ..RunConfig::default()
    }
}

fn run(config: &RunConfig, ledger: &Path, mode: AggregationMode) -> auditfl_core::RunSummary {
    let data = prepare_data(config).unwrap();
    let options = RunOptions {
        ledger: Some(ledger.to_path_buf()),
        keep_outcomes: true,
        ..RunOptions::default()
    };
    run_with_data(config, &data, mode, &options).unwrap()
}

#[test]
fn amplified_gradient_tops_the_audit_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(6, 4, 3);
    c.malicious = vec![MaliciousSpec {
        id: 4,
        kind: AdversaryKind::ScaleAmplify(50),
    }];
    let ledger = dir.path().join("ledger.bin");
    run(&c, &ledger, AggregationMode::Robust);
    let report = full_audit(&ledger);
    assert!(report.accepted(), "{:?}", report.first_failure);
    for round in &report.rounds {
        if round.derived_benign.contains(&4) {
            assert_eq!(round.ranking[0], 4, "round {}", round.round);
        }
    }
}

#[test]
fn clipping_removes_amplified_participant() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(6, 4, 3);
    c.clipping = true;
    c.malicious = vec![MaliciousSpec {
        id: 4,
        kind: AdversaryKind::ScaleAmplify(50),
    }];
    let ledger = dir.path().join("ledger.bin");
    let summary = run(&c, &ledger, AggregationMode::Robust);
    assert!(summary.outcomes.iter().all(|o| !o.benign.contains(&4)));
    assert!(full_audit(&ledger).accepted());
}

#[test]
fn sign_flippers_are_excluded_every_round() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(5, 5, 8);
    c.malicious = vec![MaliciousSpec {
        id: 2,
        kind: AdversaryKind::SignFlip,
    }];
    let ledger = dir.path().join("ledger.bin");
    let summary = run(&c, &ledger, AggregationMode::Robust);
    // A negated gradient can only pass when the honest one already failed.
    for (o, r) in summary.outcomes.iter().zip(&full_audit(&ledger).rounds) {
        assert_eq!(o.benign, r.derived_benign);
    }
    let flipped_rounds = summary
        .outcomes
        .iter()
        .filter(|o| o.benign.contains(&2))
        .count();
    assert!(flipped_rounds < summary.outcomes.len());
}

#[test]
fn plain_mode_ledger_is_audited_as_plain() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(4, 3, 5);
    c.malicious = vec![MaliciousSpec {
        id: 1,
        kind: AdversaryKind::SignFlip,
    }];
    let ledger = dir.path().join("ledger.bin");
    let summary = run(&c, &ledger, AggregationMode::Plain);
    assert!(summary
        .outcomes
        .iter()
        .all(|o| o.benign == vec![1, 2, 3, 4]));
    let report = full_audit(&ledger);
    assert!(report.accepted(), "{:?}", report.first_failure);
}

#[test]
fn truncated_ledger_is_rejected_at_chain_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.bin");
    run(&config(3, 2, 1), &ledger, AggregationMode::Robust);
    let bytes = std::fs::read(&ledger).unwrap();
    std::fs::write(&ledger, &bytes[..bytes.len() - 1]).unwrap();
    let report = full_audit(&ledger);
    assert!(!report.accepted());
    assert_eq!(report.first_failure.unwrap().stage, Stage::Chain);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_run_passes_its_own_audit(
        participants in 2u32..8,
        rounds in 1u32..6,
        seed in any::<u64>(),
        flippers in 0u32..3,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(participants, rounds, seed);
        c.malicious = (1..=flippers.min(participants))
            .map(|id| MaliciousSpec { id, kind: AdversaryKind::LabelFlip })
            .collect();
        let ledger = dir.path().join("ledger.bin");
        let summary = run(&c, &ledger, AggregationMode::Robust);
        let report = full_audit(&ledger);
        prop_assert!(report.accepted(), "{:?}", report.first_failure);
        prop_assert_eq!(report.rounds.len(), summary.outcomes.len());
        for (o, r) in summary.outcomes.iter().zip(&report.rounds) {
            prop_assert_eq!(&o.benign, &r.derived_benign);
        }
    }
}
