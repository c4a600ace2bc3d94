use nalgebra::DMatrix;
use proptest::prelude::*;
use stripbp::model::{
    build_chain, build_custom, build_example1, build_example2, Atom, Model, OffspringLaw, PhaseSet,
    TailRule, TypeId,
};
use stripbp::moments::{convergence_norm_estimate, step_up_sequence};
use stripbp::montecarlo::{estimate_first_passage_means, TrialConfig};

/// Random single-child laws on levels `0..=k_top` with row sums at most 0.95.
fn random_model(d: usize, k_top: usize, entries: &[f64]) -> Model {
    let mut it = entries.iter().copied().cycle();
    let levels = (0..=k_top)
        .map(|k| {
            (1..=d)
                .map(|_| {
                    let lo = k.saturating_sub(1);
                    let mut children: Vec<(TypeId, f64)> = (lo..=k + 1)
                        .flat_map(|l| (1..=d).map(move |j| TypeId::new(l, j)))
                        .map(|t| (t, it.next().unwrap()))
                        .collect();
                    let total: f64 = children.iter().map(|c| c.1).sum();
                    if total > 0.95 {
                        children.iter_mut().for_each(|c| c.1 *= 0.95 / total);
                    }
                    let rest = 1.0 - children.iter().map(|c| c.1).sum::<f64>();
                    let mut atoms: Vec<Atom> = children
                        .into_iter()
                        .map(|(t, p)| Atom::monomial(t, 1, p))
                        .collect();
                    atoms.push(Atom::empty(rest));
                    OffspringLaw::new(atoms).unwrap()
                })
                .collect()
        })
        .collect();
    build_custom("random", d, levels, TailRule::Sterile).unwrap()
}

/// Level-`k` rows of `sum_{n <= terms} Q^n R`, with `Q` the mean matrix on
/// levels `<= k` and `R` the mean into level `k + 1`.
fn brute_force_step_up(m: &Model, k: usize, terms: usize) -> DMatrix<f64> {
    let d = m.d();
    let n = (k + 1) * d;
    let mut q = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, d);
    for level in 0..=k {
        for l in 0..=k {
            q.view_mut((level * d, l * d), (d, d))
                .copy_from(&m.mean_block(level, l));
        }
        r.view_mut((level * d, 0), (d, d))
            .copy_from(&m.mean_block(level, k + 1));
    }
    let mut power = r.clone();
    let mut sum = r;
    for _ in 0..terms {
        power = &q * power;
        sum += &power;
    }
    sum.rows(k * d, d).into_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_up_matches_truncated_series(
        d in 1usize..=2,
        k_top in 0usize..=5,
        entries in prop::collection::vec(0.0f64..0.4, 1..40),
    ) {
        let m = random_model(d, k_top, &entries);
        let seq = step_up_sequence(&m, k_top, None);
        for k in 0..=k_top {
            let got = seq.block(k).expect("finite step-up");
            let want = brute_force_step_up(&m, k, 3000);
            let err = (got - &want).abs().max();
            prop_assert!(err < 1e-8, "k={k}: error {err}");
        }
    }

    #[test]
    fn substitution_residual_is_small(x in 1.0f64..5.0, y in 0.0f64..0.5, k in 0usize..60) {
        let m = build_example1(0.2, 0.0, 1.0, y, x).unwrap();
        let seq = step_up_sequence(&m, k, None);
        if let (Some(mk), Some(aux)) = (seq.block(k), seq.aux(k)) {
            let d = m.d();
            let lhs = (DMatrix::identity(d, d) - aux) * mk;
            let err = (lhs - m.mean_block(k, k + 1)).abs().max();
            prop_assert!(err < 1e-10, "residual {err}");
        }
    }
}

#[test]
fn empty_taboo_matches_full_model() {
    for m in [
        build_example1(0.2, 0.0, 1.0, 0.2, 1.5).unwrap(),
        build_example2(0.2, 0.05, 1.0).unwrap(),
    ] {
        let full = step_up_sequence(&m, 100, None);
        let taboo = step_up_sequence(&m, 100, Some(&PhaseSet::empty()));
        for k in 0..=full.computed_to() {
            let err = (full.block(k).unwrap() - taboo.block(k).unwrap())
                .abs()
                .max();
            assert!(err < 1e-12, "{} k={k}: {err}", m.name());
        }
    }
}

#[test]
fn convergence_norm_estimate_grows_with_horizon() {
    for m in [
        build_example1(0.2, 0.0, 1.0, 0.2, 1.0).unwrap(),
        build_example2(0.2, 0.05, 1.0).unwrap(),
        build_chain(0.2, 0.0, 1.0).unwrap(),
    ] {
        let mut previous = 0.0;
        for k in [0, 5, 10, 25, 50, 100] {
            let est = convergence_norm_estimate(&m, k, None);
            assert!(est.lower_bounds.windows(2).all(|w| w[0] <= w[1]));
            assert!(est.estimate >= previous - 1e-12, "{} K={k}", m.name());
            previous = est.estimate;
        }
    }
}

#[test]
fn first_passage_means_match_step_up() {
    let m = build_example1(0.2, 0.0, 1.0, 0.2, 1.5).unwrap();
    let exact = step_up_sequence(&m, 1, None);
    let cfg = TrialConfig {
        seed: 11,
        ..TrialConfig::default()
    };
    let est = estimate_first_passage_means(&m, 1, 20_000, &cfg).unwrap();
    let want = exact.block(1).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let z = (est.mean[(i, j)] - want[(i, j)]) / est.standard_error[(i, j)];
            assert!(z.abs() < 3.0, "({i},{j}): z = {z}");
        }
    }
}
