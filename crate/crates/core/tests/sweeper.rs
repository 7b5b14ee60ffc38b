use minent::sweeper::{
    run_asha, rung_budgets, sample_trial, AshaOutcome, AshaSettings, FixedScoreBackend, Range,
    SearchSpace, SweepStore, TrialStatus, SWEEP_STATE_FILE,
};
use proptest::prelude::*;

fn settings(
    n: usize,
    min: usize,
    max: usize,
    eta: usize,
    synchronous: bool,
    workers: usize,
) -> AshaSettings {
    AshaSettings {
        num_trials: n,
        max_resource: max,
        min_resource: min,
        reduction_factor: eta,
        seed: 11,
        workers,
        synchronous,
    }
}

const NINE: [f64; 9] = [0.5, 0.9, 0.1, 0.7, 0.3, 0.8, 0.2, 0.6, 0.4];

fn ids_reaching(outcome: &AshaOutcome, rung: usize) -> Vec<usize> {
    let mut v: Vec<usize> = outcome
        .ranking
        .iter()
        .filter(|t| t.rung_accuracies.len() > rung)
        .map(|t| t.trial_id)
        .collect();
    v.sort_unstable();
    v
}

/// Structural invariants that hold in every mode.
fn check_invariants(outcome: &AshaOutcome, s: &AshaSettings) {
    let top = outcome.rungs.len() - 1;
    assert_eq!(outcome.ranking.len(), s.num_trials);
    for t in &outcome.ranking {
        match t.status {
            TrialStatus::Stopped(k) => {
                assert!(k < top);
                assert_eq!(
                    t.rung_accuracies.len(),
                    k + 1,
                    "stopped trial has results through its rung"
                );
            }
            TrialStatus::Completed => assert_eq!(t.rung_accuracies.len(), top + 1),
            TrialStatus::Diverged => {}
            TrialStatus::Running => panic!("trial {} still running after sweep", t.trial_id),
        }
    }
    // Diverged trials rank below every finite one.
    let first_diverged = outcome
        .ranking
        .iter()
        .position(|t| t.status == TrialStatus::Diverged)
        .unwrap_or(outcome.ranking.len());
    assert!(outcome.ranking[first_diverged..]
        .iter()
        .all(|t| t.status == TrialStatus::Diverged));
    // Ranking: deeper rung first, then accuracy, then trial id.
    for w in outcome.ranking[..first_diverged].windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let key = |t: &minent::sweeper::TrialResult| t.rung_accuracies.len();
        assert!(
            key(a) > key(b)
                || (key(a) == key(b)
                    && (a.final_accuracy() > b.final_accuracy()
                        || (a.final_accuracy() == b.final_accuracy() && a.trial_id < b.trial_id))),
            "ranking order violated between {} and {}",
            a.trial_id,
            b.trial_id
        );
    }
    // Monotone promotion against trials that ended up stopped at that rung.
    for d in &outcome.decisions {
        for (id, acc) in &d.snapshot {
            let t = outcome.ranking.iter().find(|t| t.trial_id == *id).unwrap();
            if t.status == TrialStatus::Stopped(d.from_rung) {
                assert!(
                    d.accuracy >= *acc,
                    "trial {} promoted from rung {} with {} below stopped trial {id} ({acc})",
                    d.trial_id,
                    d.from_rung,
                    d.accuracy
                );
            }
        }
        assert!(d.rank < d.quota);
    }
    assert!(outcome.epochs_consumed <= s.num_trials * s.max_resource);
}

#[test]
fn nine_trials_hand_simulated() {
    let s = settings(9, 1, 9, 3, true, 1);
    let backend = FixedScoreBackend {
        scores: NINE.to_vec(),
    };
    let out = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
    assert_eq!(out.rungs, vec![1, 3, 9]);
    assert_eq!(out.rung_populations(), vec![9, 3, 1]);
    assert_eq!(ids_reaching(&out, 0), (0..9).collect::<Vec<_>>());
    assert_eq!(ids_reaching(&out, 1), vec![1, 3, 5]);
    assert_eq!(ids_reaching(&out, 2), vec![1]);
    let order: Vec<usize> = out.ranking.iter().map(|t| t.trial_id).collect();
    assert_eq!(order, vec![1, 5, 3, 7, 0, 8, 4, 6, 2]);
    assert_eq!(out.ranking[0].status, TrialStatus::Completed);
    assert_eq!(out.ranking[1].status, TrialStatus::Stopped(1));
    assert_eq!(out.ranking[3].status, TrialStatus::Stopped(0));
    // 9 x 1 + 3 x (3 - 1) + 1 x (9 - 3)
    assert_eq!(out.epochs_consumed, 21);
    check_invariants(&out, &s);
}

#[test]
fn asynchronous_single_worker_matches_hand_trace() {
    let s = settings(9, 1, 9, 3, false, 1);
    let backend = FixedScoreBackend {
        scores: NINE.to_vec(),
    };
    let out = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
    check_invariants(&out, &s);
    // One worker: t1 leaves rung 0 after three results, t5 after six, t3
    // after nine; t1 then wins rung 1.
    let promos: Vec<(usize, usize)> = out
        .decisions
        .iter()
        .map(|d| (d.trial_id, d.from_rung))
        .collect();
    assert_eq!(promos, vec![(1, 0), (5, 0), (3, 0), (1, 1)]);
    assert_eq!(out.ranking[0].trial_id, 1);
    assert_eq!(out.ranking[0].status, TrialStatus::Completed);
}

#[test]
fn ties_prefer_lower_trial_id() {
    let s = settings(9, 1, 9, 3, true, 1);
    let backend = FixedScoreBackend {
        scores: vec![0.5; 9],
    };
    let out = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
    assert_eq!(ids_reaching(&out, 1), vec![0, 1, 2]);
    assert_eq!(ids_reaching(&out, 2), vec![0]);
    assert_eq!(out.ranking[0].trial_id, 0);
}

#[test]
fn single_trial_runs_to_max() {
    for synchronous in [true, false] {
        let s = settings(1, 2, 18, 3, synchronous, 2);
        let backend = FixedScoreBackend { scores: vec![0.3] };
        let out = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
        assert_eq!(out.ranking.len(), 1);
        assert_eq!(out.ranking[0].status, TrialStatus::Completed);
        assert_eq!(out.ranking[0].rung_accuracies.len(), 3);
        assert_eq!(out.epochs_consumed, 18);
    }
}

#[test]
fn all_diverged_sweep_completes() {
    for synchronous in [true, false] {
        let s = settings(5, 1, 9, 3, synchronous, 3);
        let backend = FixedScoreBackend {
            scores: vec![f64::NAN; 5],
        };
        let out = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
        assert_eq!(out.ranking.len(), 5);
        assert!(out
            .ranking
            .iter()
            .all(|t| t.status == TrialStatus::Diverged));
        assert!(out.best().is_none());
    }
}

#[test]
fn diverged_trials_rank_last() {
    let mut scores = NINE.to_vec();
    scores[1] = f64::NAN;
    scores[4] = f64::NAN;
    let s = settings(9, 1, 9, 3, true, 1);
    let out = run_asha(
        &SearchSpace::default(),
        &s,
        &FixedScoreBackend { scores },
        None,
    )
    .unwrap();
    check_invariants(&out, &s);
    let tail: Vec<usize> = out.ranking[7..].iter().map(|t| t.trial_id).collect();
    assert_eq!(tail, vec![1, 4]);
    // Diverged results still count toward the rung population: top 3 of 9.
    assert_eq!(ids_reaching(&out, 1), vec![3, 5, 7]);
    assert_eq!(out.ranking[0].trial_id, 5);
}

#[test]
fn log_uniform_decades_are_balanced() {
    let space = SearchSpace {
        lr_model: Range::new(1e-5, 1e-1),
        ..SearchSpace::default()
    };
    let mut counts = [0usize; 4];
    for id in 0..1000 {
        let lr = sample_trial(&space, 2024, id).lr_model;
        assert!((1e-5..=1e-1).contains(&lr));
        let decade = ((lr.log10() + 5.0).floor() as usize).min(3);
        counts[decade] += 1;
    }
    for c in counts {
        assert!((150..=350).contains(&c), "decade counts {counts:?}");
    }
}

#[test]
fn resume_reuses_logged_results() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings(9, 1, 9, 3, true, 1);
    let backend = FixedScoreBackend {
        scores: NINE.to_vec(),
    };
    let store = SweepStore::open(dir.path()).unwrap();
    let full = run_asha(&SearchSpace::default(), &s, &backend, Some(&store)).unwrap();
    assert_eq!(full.epochs_consumed, 21);

    let again = run_asha(&SearchSpace::default(), &s, &backend, Some(&store)).unwrap();
    assert_eq!(again.ranking, full.ranking);
    assert_eq!(again.epochs_consumed, 0);

    // Interrupt after the first rung: keep the header and the nine rung-0 rows.
    let path = dir.path().join(SWEEP_STATE_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.split(',').nth(1) == Some("0"))
        .map(|(_, l)| l)
        .collect();
    assert_eq!(kept.len(), 10);
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    let resumed = run_asha(&SearchSpace::default(), &s, &backend, Some(&store)).unwrap();
    assert_eq!(resumed.ranking, full.ranking);
    // Promoted trials retrain from scratch to rung 1, then the winner continues.
    assert_eq!(resumed.epochs_consumed, 3 * 3 + (9 - 3));

    let header = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "trial_id,rung,epochs,accuracy,status"
    );
    assert_eq!(header.lines().count(), 1 + 9 + 3 + 1);
    assert!(dir.path().join("trials/trial_0008.txt").exists());
}

#[test]
fn resume_rejects_foreign_trial_files() {
    let dir = tempfile::tempdir().unwrap();
    let backend = FixedScoreBackend {
        scores: NINE.to_vec(),
    };
    let store = SweepStore::open(dir.path()).unwrap();
    run_asha(
        &SearchSpace::default(),
        &settings(9, 1, 9, 3, true, 1),
        &backend,
        Some(&store),
    )
    .unwrap();
    let mut other = settings(9, 1, 9, 3, true, 1);
    other.seed = 12;
    assert!(run_asha(&SearchSpace::default(), &other, &backend, Some(&store)).is_err());
}

#[test]
fn invalid_settings_rejected() {
    let backend = FixedScoreBackend {
        scores: NINE.to_vec(),
    };
    for s in [
        settings(9, 0, 9, 3, true, 1),
        settings(9, 5, 4, 3, true, 1),
        settings(9, 1, 9, 1, true, 1),
        settings(0, 1, 9, 3, true, 1),
    ] {
        assert!(run_asha(&SearchSpace::default(), &s, &backend, None).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scheduler_invariants(
        scores in prop::collection::vec(prop_oneof![9 => 0.0f64..1.0, 1 => Just(f64::NAN)], 1..30),
        eta in 2usize..5,
        min in 1usize..4,
        levels in 0u32..4,
        workers in 1usize..5,
        synchronous in any::<bool>(),
    ) {
        let max = min * eta.pow(levels);
        let s = settings(scores.len(), min, max, eta, synchronous, workers);
        let backend = FixedScoreBackend { scores: scores.clone() };
        let out = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
        check_invariants(&out, &s);
        prop_assert_eq!(out.rungs.clone(), rung_budgets(min, max, eta));
        // Halving budget bound, when the trial count covers every level.
        if scores.len() >= eta.pow(levels) {
            prop_assert!(out.epochs_consumed <= scores.len() * min * (levels as usize + 1));
        }
        if scores.iter().any(|s| !s.is_nan()) {
            prop_assert_eq!(out.ranking[0].status, TrialStatus::Completed);
        }
        if synchronous {
            let again = run_asha(&SearchSpace::default(), &s, &backend, None).unwrap();
            prop_assert_eq!(again.ranking, out.ranking);
        }
    }
}
