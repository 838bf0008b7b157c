//! Randomized property checks across the public API.

use std::collections::HashMap;

use nalgebra::DMatrix;
use proptest::prelude::*;

use symcert::certify::{Budgets, Route};
use symcert::edge_wedge::wedge_census;
use symcert::kernel::{EqualityPatternKernel, Kernel};
use symcert::kl;
use symcert::klr;
use symcert::linalg::{self, Mat, Vector};
use symcert::prompting;
use symcert::task::Token;

fn psd(entries: &[f64], n: usize, ridge: f64) -> Mat {
    let b = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    &b * b.transpose() / n as f64 + Mat::identity(n, n) * ridge
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_inverse_is_an_upper_envelope(n_eff in 1.0f64..500.0, q in 0.0f64..1.0, u in 0.0f64..10.0) {
        let v = kl::kl_inverse(n_eff, q, u);
        prop_assert!(v >= q - 1e-15 && v <= 1.0);
        prop_assert!(kl::bernstein_relax(n_eff, q, u) >= v - 1e-12);
        prop_assert!(kl::kl_inverse(n_eff, q, u + 0.5) >= v - 1e-15);
    }

    #[test]
    fn pattern_kernel_ignores_token_names(
        x in prop::collection::vec(0usize..5, 3),
        y in prop::collection::vec(0usize..5, 3),
        shift in 1usize..1000,
    ) {
        let k = EqualityPatternKernel::default();
        // any injective relabeling, here a cyclic shift of a large range
        let relabel = |s: &[Token]| -> Vec<Token> { s.iter().map(|t| (t * 7 + shift) % 1009).collect() };
        prop_assert_eq!(k.eval(&x, &y), k.eval(&relabel(&x), &relabel(&y)));
    }

    #[test]
    fn sample_dual_satisfies_kkt(
        entries in prop::collection::vec(-1.0f64..1.0, 64),
        signs in prop::collection::vec(any::<bool>(), 8),
        lambda in 0.01f64..1.0,
    ) {
        let g = psd(&entries, 8, 0.0);
        let y = Vector::from_iterator(8, signs.iter().map(|&s| if s { 1.0 } else { -1.0 }));
        let sol = klr::solve_dual(&g, &y, lambda).unwrap();
        prop_assert!(linalg::sup_norm(&klr::dual_gradient(&g, &y, lambda, &sol.c)) <= 1e-10);
        prop_assert!(sol.c.iter().all(|&c| c > 0.0 && c < 1.0));
    }

    #[test]
    fn margin_gain_is_linear(
        n_entries in prop::collection::vec(-1.0f64..1.0, 9),
        h1 in prop::collection::vec(-1.0f64..1.0, 9),
        h2 in prop::collection::vec(-1.0f64..1.0, 9),
        c in -3.0f64..3.0,
    ) {
        let n = psd(&n_entries, 3, 0.2);
        let sym = |v: &[f64]| { let m = DMatrix::from_row_slice(3, 3, v); (&m + m.transpose()) * 0.5 };
        let (a, b) = (sym(&h1), sym(&h2));
        let q = [0.3, 0.3, 0.4];
        let y = [1.0, -1.0, 1.0];
        let ga = prompting::margin_derivative(&n, &a, &q, 0.2, &y).unwrap().gains;
        let gb = prompting::margin_derivative(&n, &b, &q, 0.2, &y).unwrap().gains;
        let gs = prompting::margin_derivative(&n, &(&a * c + &b), &q, 0.2, &y).unwrap().gains;
        for i in 0..3 {
            prop_assert!((gs[i] - (c * ga[i] + gb[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn wedge_census_matches_direct_count(sizes in prop::collection::vec(0usize..5, 1..4)) {
        let census = wedge_census(&sizes);
        let colors: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
        let n = colors.len();
        let r = sizes.len();
        let mut count: HashMap<(usize, usize, usize), f64> = HashMap::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i != j && j != k && i != k {
                        *count.entry((colors[i], colors[j], colors[k])).or_default() += 1.0;
                    }
                }
            }
        }
        for b in 0..r {
            for c in 0..r {
                for d in 0..r {
                    prop_assert_eq!(census.p(b, c, d), count.get(&(b, c, d)).copied().unwrap_or(0.0));
                }
            }
        }
    }

    #[test]
    fn selection_returns_the_smallest_budget(v in prop::collection::vec(0.0f64..10.0, 5)) {
        let b = Budgets { cs: v[0], deg: v[1], bd: v[2], anova: v[3], bf: v[4] };
        let (best, route) = b.select();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!((best - min).abs() <= min * 1e-12);
        let route = route.unwrap();
        // no earlier route ties the winner
        for r in Route::ALL.iter().take_while(|&&r| r != route) {
            prop_assert!(b.get(*r) > best);
        }
    }
}
