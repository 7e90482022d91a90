use ladderwalk_core::oracle::{
    solve_exit, solve_exit_time_on, solve_expected_exit_time, AbsorbingSystem,
};
use ladderwalk_core::{run_ensemble, shift, EnvLaw, Environment, Error, SiteLaw};
use proptest::prelude::*;

fn law(q2: f64, q1: f64, p1: f64, p2: f64) -> SiteLaw {
    SiteLaw::new(q2, q1, p1, p2).unwrap()
}

#[test]
fn forced_step_takes_one_unit() {
    let env = Environment::homogeneous(law(0.0, 0.0, 1.0, 0.0));
    assert_eq!(solve_exit(&env, -4, 3, 2, 3).unwrap(), 1.0);
    assert_eq!(solve_expected_exit_time(&env, -4, 3, 2).unwrap(), 1.0);
}

#[test]
fn deep_ladder_time_of_row_one() {
    let env = Environment::homogeneous(law(0.08, 0.36, 0.21, 0.35));
    let t = solve_expected_exit_time(&env, -400, 1, 0).unwrap();
    assert!((t - 1.467727692 / 0.39).abs() < 1e-8, "{t}");
    let split = solve_exit_time_on(&env, -400, 1, 0, 1).unwrap()
        + solve_exit_time_on(&env, -400, 1, 0, 2).unwrap();
    assert!((split - t).abs() < 1e-9);
}

#[test]
fn ladder_time_agrees_with_simulation() {
    // Positive drift with equal one- and two-step weights.
    let env = Environment::homogeneous(law(0.15, 0.25, 0.3, 0.3));
    let t = solve_expected_exit_time(&env, -400, 1, 0).unwrap();
    let stats = run_ensemble(&env, 99, 1_000_000, 1, u64::MAX);
    assert!(
        (stats.t1.mean - t).abs() < 3.0 * stats.t1.std_error,
        "{} ± {} vs {t}",
        stats.t1.mean,
        stats.t1.std_error
    );
}

#[test]
fn start_and_target_are_checked() {
    let env = Environment::homogeneous(law(0.1, 0.2, 0.3, 0.4));
    assert!(solve_exit(&env, 0, 3, 0, 3).is_err());
    assert!(solve_exit(&env, 0, 3, 1, 2).is_err());
    assert!(matches!(
        AbsorbingSystem::new(&env, 0, 1),
        Err(Error::InvalidEnvironment(_))
    ));
}

fn arb_laws(n: usize) -> impl Strategy<Value = Vec<SiteLaw>> {
    // q2 may vanish: the oracle does not need it.
    prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.0f64..1.0), n).prop_map(|v| {
        v.into_iter()
            .map(|(a, b, c, d)| {
                let s = a + b + c + d;
                SiteLaw::from_array([a / s, b / s, c / s, d / s]).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exit_distribution_sums_to_one(laws in (1usize..30).prop_flat_map(arb_laws)) {
        let b = laws.len() as i64 + 1;
        let env = Environment::explicit(1, laws, SiteLaw::new(0.25, 0.25, 0.25, 0.25).unwrap());
        let m = AbsorbingSystem::new(&env, 0, b).unwrap().exit_matrix().unwrap();
        for r in 0..m.nrows() {
            prop_assert!((m.row(r).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn shifted_problems_agree(seed in any::<u64>(), m in -100i64..100, width in 1i64..15) {
        let env = Environment::iid(EnvLaw::dirichlet([1.0; 4], 1e-6).unwrap(), seed);
        let moved = shift(&env, m);
        for start in 1..=width {
            for target in [-1, 0, width + 1, width + 2] {
                let p = solve_exit(&env, 0, width + 1, start, target).unwrap();
                let q = solve_exit(&moved, -m, width + 1 - m, start - m, target - m).unwrap();
                prop_assert_eq!(p, q);
            }
        }
    }
}
