use stripbp::model::{build_example1, Model, PhaseSet, TypeId};
use stripbp::montecarlo::{estimate_q, run_trials, simulate_trial, Classification, TrialConfig};

fn ex1(x: f64) -> Model {
    build_example1(0.2, 0.0, 1.0, 0.2, x).unwrap()
}

fn cfg(seed: u64) -> TrialConfig {
    TrialConfig {
        seed,
        ..TrialConfig::default()
    }
}

#[test]
fn same_seed_reproduces_batches_across_pool_sizes() {
    let m = ex1(3.0);
    let a = PhaseSet::phases_of([2]);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_trials(&m, &a, &cfg(42), 400))
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_ne!(one, run_trials(&m, &a, &cfg(43), 400));
    assert_eq!(simulate_trial(&m, &a, &cfg(42), 17), one[17]);
}

#[test]
fn global_extinction_implies_extinction_in_every_set() {
    let m = ex1(3.0);
    let everything = run_trials(&m, &PhaseSet::all(2), &cfg(9), 1000);
    for phase in 1..=2 {
        let part = run_trials(&m, &PhaseSet::phases_of([phase]), &cfg(9), 1000);
        for (g, p) in everything.iter().zip(&part) {
            if g.classification == Classification::ExtinctGlobal {
                assert_eq!(
                    p.classification,
                    Classification::ExtinctGlobal,
                    "trial {}",
                    g.trial_id
                );
            }
        }
        let global = part
            .iter()
            .filter(|o| o.classification == Classification::ExtinctGlobal)
            .count();
        let in_a = part
            .iter()
            .filter(|o| o.classification.is_extinct_in_a())
            .count();
        assert!(global <= in_a);
    }
}

#[test]
fn nested_sets_give_ordered_estimates() {
    let m = ex1(3.0);
    let sets = [
        PhaseSet::all(2),
        PhaseSet::new(2, [1], [TypeId::new(0, 2)], []).unwrap(),
        PhaseSet::phases_of([1]),
    ];
    let estimates: Vec<_> = sets
        .iter()
        .map(|s| estimate_q(&m, s, &cfg(3), 4000).unwrap())
        .collect();
    for pair in estimates.windows(2) {
        let (big, small) = (&pair[0], &pair[1]);
        let sigma = (big.standard_error.powi(2) + small.standard_error.powi(2)).sqrt();
        assert!(big.estimate <= small.estimate + 3.0 * sigma);
    }
}

#[test]
fn binary_tree_extinction_is_two_thirds() {
    use stripbp::model::{build_custom, Atom, OffspringLaw, TailRule};
    let law = OffspringLaw::new(vec![
        Atom::monomial(TypeId::new(0, 1), 2, 0.6),
        Atom::empty(0.4),
    ])
    .unwrap();
    let m = build_custom("binary", 1, vec![vec![law]], TailRule::Sterile).unwrap();
    let est = estimate_q(&m, &PhaseSet::all(1), &cfg(1), 20_000).unwrap();
    assert!((est.estimate - 2.0 / 3.0).abs() < 3.0 * est.standard_error);
    assert_eq!(est.count(Classification::Censored), 0);
}
