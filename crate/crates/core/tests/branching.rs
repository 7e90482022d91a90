#![allow(clippy::needless_range_loop)]

use ladderwalk_core::oracle::solve_expected_exit_time;
use ladderwalk_core::{
    excursion_indices, expected_t1, expected_tally, homogeneous_root, mean_matrix,
    offspring_scalars, run_ensemble, BranchingModel, EnvLaw, Environment, Error, ExcursionIndices,
    OffspringLaw, OffspringScalars, SiteLaw, WEIGHTS,
};
use nalgebra::{DMatrix, SMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn law(q2: f64, q1: f64, p1: f64, p2: f64) -> SiteLaw {
    SiteLaw::new(q2, q1, p1, p2).unwrap()
}

const ROWS: [(f64, f64, f64, f64); 5] = [
    (0.08, 0.36, 0.21, 0.35),
    (0.19, 0.30, 0.30, 0.21),
    (0.3199, 0.1801, 0.1789, 0.3211),
    (0.0001, 0.4999, 0.4998, 0.0002),
    (0.1372, 0.3628, 0.3627, 0.1373),
];

fn row(n: usize) -> SiteLaw {
    let (a, b, c, d) = ROWS[n - 1];
    law(a, b, c, d)
}

fn row_law(n: usize) -> OffspringLaw {
    let env = Environment::homogeneous(row(n));
    BranchingModel::build(&env, 0, 0, 1e-13, 1 << 20)
        .unwrap()
        .level(0)
        .law
}

fn q_matrix(sc: &OffspringScalars) -> SMatrix<f64, 9, 9> {
    let m = mean_matrix(sc);
    SMatrix::from_fn(|r, c| m.rows[r][c])
}

#[test]
fn homogeneous_indices_follow_the_closed_forms() {
    let l = row(1);
    let h = homogeneous_root(&l).unwrap().h;
    let env = Environment::homogeneous(l);
    let idx = excursion_indices(&env, 0, 1e-13).unwrap();
    assert!(
        (idx.alpha[0] - (-l.q1 * l.p1 * h / l.p2)).abs() < 1e-10,
        "{:?}",
        idx.alpha
    );
    assert!((idx.gamma[0] - (-l.q2 * l.p1 * h / l.p2)).abs() < 1e-10);
    assert!((idx.alpha.iter().sum::<f64>() - l.q1).abs() < 1e-10);
    assert!((idx.beta.iter().sum::<f64>() - l.q2).abs() < 1e-10);
    assert!((idx.gamma.iter().sum::<f64>() - l.q2).abs() < 1e-10);
    assert!(idx.as_array().iter().all(|e| *e >= 0.0));

    let sc = offspring_scalars(&idx, idx.beta[1]).unwrap();
    assert!((sc.s - l.q1 / (l.q1 + l.q2 * (1.0 + h))).abs() < 1e-10);
    assert!((sc.t - (-l.p1 * h / (l.p2 * (1.0 + h)))).abs() < 1e-10);
    let [a1, a2, _] = idx.alpha;
    let [b1, b2, _] = idx.beta;
    assert!((sc.x - a1 / (1.0 - a1 - a2 - b1 - b2)).abs() < 1e-12);
}

#[test]
fn sealed_lower_site_sends_everything_to_a2() {
    let below = law(0.5, 0.5, 0.0, 0.0);
    let here = law(0.2, 0.3, 0.25, 0.25);
    let idx = ExcursionIndices::from_laws(0, &below, &here, &here, 0.4, 0.3).unwrap();
    assert_eq!(idx.alpha, [0.0, 0.3, 0.0]);
    let sc = ExcursionIndices {
        alpha: [0.0, 0.1, 0.2],
        ..idx
    };
    assert!(
        matches!(offspring_scalars(&sc, 0.1), Ok(s) if s.x == 0.0)
            || offspring_scalars(&sc, 0.1).is_err()
    );
}

#[test]
fn zero_alpha_one_gives_zero_x() {
    let idx = ExcursionIndices {
        level: 0,
        alpha: [0.0, 0.2, 0.1],
        beta: [0.05, 0.1, 0.05],
        gamma: [0.05, 0.03, 0.02],
    };
    let sc = offspring_scalars(&idx, 0.1).unwrap();
    assert_eq!(sc.x, 0.0);
    assert!((sc.v - 0.8).abs() < 1e-15);
    let bad = ExcursionIndices {
        alpha: [0.1, 0.2, 0.0],
        beta: [0.05, 0.1, 0.0],
        ..idx
    };
    assert!(matches!(
        offspring_scalars(&bad, 0.1),
        Err(Error::DegenerateDenominator(_))
    ));
}

/// Sums `f` over tallies with negative-multinomial part of total size ≤ n.
fn sum_nm(n: u64, mut f: impl FnMut([u64; 4]) -> f64) -> f64 {
    let mut total = 0.0;
    for a in 0..=n {
        for b in 0..=n - a {
            for c in 0..=n - a - b {
                for d in 0..=n - a - b - c {
                    total += f([a, b, c, d]);
                }
            }
        }
    }
    total
}

fn tally(nm: [u64; 4], extra: &[(usize, u64)]) -> [u64; 9] {
    let mut t = [0u64; 9];
    t[0] = nm[0];
    t[1] = nm[1];
    t[3] = nm[2];
    t[4] = nm[3];
    for &(k, v) in extra {
        t[k] = v;
    }
    t
}

/// All tallies of one family's support, grouped by the split coordinates.
fn family_extras(parent: usize) -> Vec<Vec<(usize, u64)>> {
    match parent {
        1 | 3 | 7 | 9 => vec![vec![]],
        2 | 8 => vec![vec![(2, 1)], vec![(5, 1)]],
        4 | 6 => vec![vec![(6, 1)], vec![(7, 1)]],
        _ => {
            let mut v = Vec::new();
            for s in [2, 5] {
                for t in [6, 7] {
                    v.push(vec![(s, 1), (t, 1)]);
                }
            }
            v
        }
    }
}

#[test]
fn offspring_pmf_anchors() {
    let law = row_law(1);
    let [a1, a2, _] = law.indices.alpha;
    let [b1, b2, _] = law.indices.beta;
    assert!((law.pmf(1, &[0; 9]) - (1.0 - a1 - a2 - b1 - b2)).abs() < 1e-15);
    let mut e9 = [0u64; 9];
    e9[8] = 1;
    let g3 = law.indices.gamma[2];
    assert!((law.pmf(5, &e9) - g3 / law.indices.beta[1]).abs() < 1e-12);
    // The A3 branch of an A2 parent carries mass s, the B3 branch 1 - s.
    let s = law.scalars.s;
    let a3 = sum_nm(40, |nm| law.pmf(2, &tally(nm, &[(2, 1)])));
    let b3 = sum_nm(40, |nm| law.pmf(2, &tally(nm, &[(5, 1)])));
    assert!((a3 - s).abs() < 1e-9 && (b3 - (1.0 - s)).abs() < 1e-9);
    // Outside the family support.
    assert_eq!(law.pmf(1, &tally([0; 4], &[(2, 1)])), 0.0);
    assert_eq!(law.pmf(2, &[0; 9]), 0.0);
    assert_eq!(law.pmf(4, &tally([1, 0, 0, 0], &[(6, 1), (7, 1)])), 0.0);
}

#[test]
fn offspring_pmf_is_normalized_and_matches_the_mean_matrix() {
    for n in [1, 2, 3] {
        let law = row_law(n);
        let q = mean_matrix(&law.scalars);
        for parent in 1..=9 {
            let mut total = 0.0;
            let mut mean = [0.0; 9];
            for extra in family_extras(parent) {
                total += sum_nm(45, |nm| {
                    let t = tally(nm, &extra);
                    let p = law.pmf(parent, &t);
                    for k in 0..9 {
                        mean[k] += p * t[k] as f64;
                    }
                    p
                });
            }
            if parent == 5 {
                let mut e9 = [0u64; 9];
                e9[8] = 1;
                let p = law.pmf(5, &e9);
                total += p;
                mean[8] += p;
            }
            assert!(
                (total - 1.0).abs() < 1e-9,
                "row {n} parent {parent}: {total}"
            );
            for k in 0..9 {
                assert!(
                    (mean[k] - q.rows[parent - 1][k]).abs() < 1e-8,
                    "row {n} parent {parent} type {k}"
                );
            }
        }
    }
}

#[test]
fn sampler_means_match_the_mean_matrix() {
    let law = row_law(2);
    let q = mean_matrix(&law.scalars);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 200_000;
    for parent in 1..=9 {
        let mut sum = [0.0; 9];
        let mut sq = [0.0; 9];
        for _ in 0..n {
            let t = law.sample(parent, &mut rng);
            for k in 0..9 {
                let x = t.counts[k] as f64;
                sum[k] += x;
                sq[k] += x * x;
            }
        }
        for k in 0..9 {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            let want = q.rows[parent - 1][k];
            // 81 comparisons: Bonferroni band with the family-wise level of 3 SE.
            assert!(
                (mean - want).abs() <= 4.0 * se + 1e-12,
                "parent {parent} type {k}: {mean} vs {want} (se {se})"
            );
        }
    }
}

#[test]
fn degenerate_sampler_is_deterministic() {
    let idx = ExcursionIndices {
        level: 0,
        alpha: [0.0, 0.0, 0.3],
        beta: [0.0, 0.0, 0.2],
        gamma: [0.1, 0.1, 0.0],
    };
    let law = OffspringLaw::new(idx, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        assert_eq!(law.sample(1, &mut rng).counts, [0; 9]);
        let t = law.sample(2, &mut rng).counts;
        assert_eq!(t[2] + t[5], 1);
        assert_eq!(t.iter().sum::<u64>(), 1);
    }
}

#[test]
fn mean_matrix_layout() {
    let sc = row_law(1).scalars;
    let q = mean_matrix(&sc);
    assert_eq!(q.rows[0], [sc.x, sc.y, 0.0, sc.z, sc.w, 0.0, 0.0, 0.0, 0.0]);
    for (a, b) in [(0, 2), (0, 6), (0, 8), (1, 7), (3, 5)] {
        assert_eq!(q.rows[a], q.rows[b]);
    }
    assert_eq!(q.rows[4][8], 1.0 - sc.v);
    let mut pattern = q.rows[3];
    pattern[2] = sc.s;
    pattern[5] = 1.0 - sc.s;
    for k in 0..8 {
        assert!((q.rows[4][k] - sc.v * pattern[k]).abs() < 1e-15);
    }
}

#[test]
fn homogeneous_mean_matrix_has_four_nonzero_eigenvalues() {
    for n in 1..=3 {
        let q = q_matrix(&row_law(n).scalars);
        let eig = q.complex_eigenvalues();
        let nonzero = eig.iter().filter(|z| z.norm() > 1e-10).count();
        assert_eq!(nonzero, 4, "row {n}: {eig:?}");
    }
}

#[test]
fn homogeneous_tallies_are_matrix_powers() {
    let l = row(1);
    let env = Environment::homogeneous(l);
    let model = BranchingModel::build(&env, 0, 0, 1e-13, 1 << 20).unwrap();
    let q = q_matrix(model.level(0).scalars());
    let u1 = SMatrix::<f64, 1, 9>::from_row_slice(&model.level(1).immigration.mean());
    for i in [0i64, -1, -2, -5] {
        let want = u1 * q.pow((1 - i) as u32);
        let got = expected_tally(&env, i, 1e-13).unwrap();
        for k in 0..9 {
            assert!((got[k] - want[k]).abs() < 1e-12, "level {i} type {k}");
        }
    }
}

#[test]
fn ladder_time_series_for_the_table() {
    let env = Environment::homogeneous(row(1));
    let s = expected_t1(&env, 1e-13, 1_000_000).unwrap();
    assert!(s.converged);
    assert!((s.value - 3.763404338).abs() < 1e-8, "{}", s.value);
    let env4 = Environment::homogeneous(row(4));
    let s4 = expected_t1(&env4, 1e-15, 100_000_000).unwrap();
    assert!((s4.value - 10003.99840).abs() < 1e-4, "{}", s4.value);
}

#[test]
fn wald_identity_on_the_table() {
    for n in 1..=5 {
        let l = row(n);
        let a = expected_t1(&Environment::homogeneous(l), 1e-15, 100_000_000)
            .unwrap()
            .value
            * l.drift();
        let b = homogeneous_root(&l).unwrap().mean_overshoot();
        let tol = if n == 5 { 1e-4 } else { 1e-6 };
        assert!((a - b).abs() <= tol, "row {n}: {a} vs {b}");
    }
}

#[test]
fn zero_drift_diverges() {
    let env = Environment::homogeneous(law(0.2, 0.3, 0.3, 0.2));
    assert!(matches!(
        expected_t1(&env, 1e-12, 100_000),
        Err(Error::Diverging { .. })
    ));
}

#[test]
fn random_environment_ladder_time_matches_dense_solve() {
    let env = Environment::iid(EnvLaw::dirichlet([2.0, 2.0, 4.0, 4.0], 1e-6).unwrap(), 8);
    let s = expected_t1(&env, 1e-13, 1_000_000).unwrap();
    assert!(s.converged);
    let dense = solve_expected_exit_time(&env, -1500, 1, 0).unwrap();
    assert!(
        (s.value - dense).abs() < 1e-8 * dense,
        "{} vs {dense}",
        s.value
    );
}

#[test]
fn periodic_ladder_time_matches_simulation() {
    let env = Environment::periodic(vec![
        law(0.1, 0.3, 0.3, 0.3),
        law(0.3, 0.2, 0.2, 0.3),
        law(0.05, 0.45, 0.1, 0.4),
    ])
    .unwrap();
    let s = expected_t1(&env, 1e-13, 1_000_000).unwrap();
    let mc = run_ensemble(&env, 5, 1_000_000, 1, u64::MAX);
    assert!(
        (mc.t1.mean - s.value).abs() < 3.0 * mc.t1.std_error,
        "{} ± {} vs {}",
        mc.t1.mean,
        mc.t1.std_error,
        s.value
    );
}

#[test]
fn window_model_matches_level_products() {
    let env = Environment::iid(EnvLaw::dirichlet([1.0, 1.0, 2.0, 2.0], 1e-6).unwrap(), 77);
    let model = BranchingModel::build(&env, -6, 1, 1e-13, 1 << 20).unwrap();
    let mut u = model.level(1).immigration.mean();
    for i in (-6..=0).rev() {
        let q = DMatrix::from_fn(9, 9, |r, c| model.level(i).mean_matrix().rows[r][c]);
        let dense = DMatrix::from_row_slice(1, 9, &u) * q;
        u = model.level(i).scalars().left_mul(&u);
        for k in 0..9 {
            assert!((u[k] - dense[k]).abs() < 1e-14);
        }
        let direct = expected_tally(&env, i, 1e-13).unwrap();
        for k in 0..9 {
            assert!((direct[k] - u[k]).abs() < 1e-10, "level {i}");
        }
    }
    let w: f64 = WEIGHTS.iter().map(|w| *w as f64).sum();
    assert_eq!(w, 12.0);
}

fn arb_scalars() -> impl Strategy<Value = OffspringScalars> {
    (
        prop::array::uniform4(0.0f64..0.3),
        prop::array::uniform3(0.0f64..=1.0),
    )
        .prop_map(|([x, y, z, w], [s, t, v])| OffspringScalars {
            level: 0,
            x,
            y,
            z,
            w,
            s,
            t,
            v,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn structured_products_match_dense(sc in arb_scalars(), u in prop::array::uniform9(-2.0f64..2.0)) {
        let q = q_matrix(&sc);
        let row = SMatrix::<f64, 1, 9>::from_row_slice(&u) * q;
        let col = q * SMatrix::<f64, 9, 1>::from_column_slice(&u);
        let (l, r) = (sc.left_mul(&u), sc.right_mul(&u));
        for k in 0..9 {
            prop_assert!((l[k] - row[k]).abs() < 1e-12);
            prop_assert!((r[k] - col[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn indices_partition_the_down_steps(seed in any::<u64>(), i in -50i64..50) {
        let env = Environment::iid(EnvLaw::dirichlet([1.0, 1.0, 2.0, 2.0], 1e-6).unwrap(), seed);
        let idx = excursion_indices(&env, i, 1e-12).unwrap();
        prop_assert!((idx.alpha.iter().sum::<f64>() - env.law_at(i).q1).abs() < 1e-10);
        prop_assert!((idx.beta.iter().sum::<f64>() - env.law_at(i).q2).abs() < 1e-10);
        prop_assert!((idx.gamma.iter().sum::<f64>() - env.law_at(i + 1).q2).abs() < 1e-10);
        prop_assert!(idx.as_array().iter().all(|e| *e >= 0.0));
        let next = excursion_indices(&env, i + 1, 1e-12).unwrap();
        let sc = offspring_scalars(&idx, next.beta[1]).unwrap();
        for p in [sc.s, sc.t, sc.v] {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
