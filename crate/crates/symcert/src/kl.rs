//! Bernoulli KL divergence, its upper inverse, the Bernstein relaxation, and the
//! edge partitions that turn dependent pair indicators into independent batches.

/// `D(p || q) = p log(p/q) + (1-p) log((1-p)/(1-q))` with `0 log 0 = 0`.
///
/// Returns `+inf` when `q` sits on the boundary and `p` differs from it.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    if p == q {
        return 0.0;
    }
    let term = |a: f64, b: f64| -> f64 {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Smallest `p` in `[q, 1]` with `n_eff * D(p || q) >= u`.
///
/// The value is 1 when `n_eff = 0` or when no such `p` exists, and `q` when `u <= 0`.
pub fn kl_inverse(n_eff: f64, q: f64, u: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if n_eff <= 0.0 || q >= 1.0 {
        return 1.0;
    }
    if u <= 0.0 {
        return q;
    }
    if q == 0.0 {
        // every p > 0 has infinite divergence from a point mass at zero
        return 0.0;
    }
    let f = |p: f64| n_eff * bernoulli_kl(p, q) - u;
    if f(1.0) < 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (q, 1.0);
    for _ in 0..200 {
        if hi - lo <= 1e-15 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Independent reference for [`kl_inverse`]: nested uniform grid scans, each level
/// locating the first feasible cell and rescanning it with `steps` points.
pub fn kl_inverse_scan(n_eff: f64, q: f64, u: f64, steps: usize, levels: usize) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if n_eff <= 0.0 || q >= 1.0 {
        return 1.0;
    }
    if u <= 0.0 {
        return q;
    }
    let feasible = |p: f64| n_eff * bernoulli_kl(p, q) >= u;
    if !feasible(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (q, 1.0);
    for _ in 0..levels {
        let h = (hi - lo) / steps as f64;
        let mut first = steps;
        for s in 1..=steps {
            if feasible(lo + h * s as f64) {
                first = s;
                break;
            }
        }
        let new_lo = lo + h * (first - 1) as f64;
        hi = if first == steps { hi } else { lo + h * first as f64 };
        lo = new_lo;
    }
    hi
}

/// Bernstein-type closed-form upper bound on [`kl_inverse`], clipped to 1.
pub fn bernstein_relax(n_eff: f64, q: f64, u: f64) -> f64 {
    if n_eff <= 0.0 {
        return 1.0;
    }
    let v = q + (2.0 * q * (1.0 - q) * u / n_eff).sqrt() + 2.0 * u / (3.0 * n_eff);
    v.min(1.0)
}

/// Proper edge coloring of the complete bipartite graph `K_{nb,nc}` into
/// `max(nb, nc)` matchings; edge `(i, j)` receives color `(i + j) mod max`.
pub fn bipartite_matchings(nb: usize, nc: usize) -> Vec<Vec<(usize, usize)>> {
    let m = nb.max(nc);
    let mut classes = vec![Vec::new(); m];
    for i in 0..nb {
        for j in 0..nc {
            classes[(i + j) % m].push((i, j));
        }
    }
    classes
}

/// Round-robin one-factorization of the complete graph on `n` vertices:
/// `n - 1` perfect matchings for even `n`, `n` near-perfect ones for odd `n`.
pub fn round_robin(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n == 0 {
        return Vec::new();
    }
    let m = if n.is_multiple_of(2) { n } else { n + 1 };
    let fixed = m - 1;
    let mut rounds = Vec::with_capacity(m - 1);
    for k in 0..m - 1 {
        let mut round = Vec::with_capacity(m / 2);
        let mut push = |a: usize, b: usize| {
            if a < n && b < n {
                round.push((a.min(b), a.max(b)));
            }
        };
        push(k, fixed);
        for i in 1..m / 2 {
            let a = (k + i) % (m - 1);
            let b = (k + m - 1 - i) % (m - 1);
            push(a, b);
        }
        rounds.push(round);
    }
    rounds
}

/// Number of matchings in the round-robin partition of `n` vertices.
pub fn matching_count(n: usize) -> usize {
    if n.is_multiple_of(2) {
        n.saturating_sub(1)
    } else {
        n
    }
}

/// Effective sample size for the block pair `(b, c)`: `min(nb, nc)` across
/// blocks, `binom(nb, 2) / m_nb` within a block, and 0 for a singleton block.
pub fn effective_sample(same_block: bool, nb: usize, nc: usize) -> f64 {
    if !same_block {
        return nb.min(nc) as f64;
    }
    if nb < 2 {
        return 0.0;
    }
    let pairs = (nb * (nb - 1) / 2) as f64;
    pairs / matching_count(nb) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn kl_boundary_values() {
        assert_eq!(bernoulli_kl(0.3, 0.3), 0.0);
        assert_abs_diff_eq!(bernoulli_kl(1.0, 0.5), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(bernoulli_kl(0.5, 0.0), f64::INFINITY);
        // 0.3 ln 3 + 0.7 ln(7/9)
        assert_abs_diff_eq!(bernoulli_kl(0.3, 0.1), 0.153663586803799, epsilon = 1e-13);
    }

    #[test]
    fn inverse_conventions() {
        assert_eq!(kl_inverse(0.0, 0.2, 1.0), 1.0);
        assert_abs_diff_eq!(kl_inverse(50.0, 0.2, 1e-14), 0.2, epsilon = 1e-6);
        assert_eq!(kl_inverse(10.0, 0.0, 1.0), 0.0);
        // infeasible: 2 * D(1 || 0.5) = 2 ln 2 < 5
        assert_eq!(kl_inverse(2.0, 0.5, 5.0), 1.0);
    }

    #[test]
    fn inverse_matches_nested_scan() {
        let a = kl_inverse(100.0, 0.1, 1.0);
        let b = kl_inverse_scan(100.0, 0.1, 1.0, 1000, 5);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        assert_abs_diff_eq!(100.0 * bernoulli_kl(a, 0.1), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn relaxation_edge_cases() {
        assert_abs_diff_eq!(bernstein_relax(30.0, 0.0, 1.5), 1.0 / 30.0, epsilon = 1e-15);
        assert_eq!(bernstein_relax(30.0, 0.25, 0.0), 0.25);
    }

    fn assert_partition(n_edges: usize, classes: &[Vec<(usize, usize)>]) {
        let mut seen = HashSet::new();
        for class in classes {
            let mut used = HashSet::new();
            for &(a, b) in class {
                assert!(seen.insert((a, b)), "edge {a}-{b} repeated");
                assert!(used.insert(('l', a)) && used.insert(('r', b)), "not a matching");
            }
        }
        assert_eq!(seen.len(), n_edges);
    }

    #[test]
    fn bipartite_k23() {
        let classes = bipartite_matchings(2, 3);
        assert_eq!(classes.len(), 3);
        assert!(classes.iter().all(|c| c.len() == 2));
        assert_partition(6, &classes);
    }

    #[test]
    fn round_robin_small_cases() {
        let four = round_robin(4);
        assert_eq!(four.len(), 3);
        assert!(four.iter().all(|m| m.len() == 2));
        let five = round_robin(5);
        assert_eq!(five.len(), 5);
        assert_eq!(five.iter().map(Vec::len).sum::<usize>(), 10);
    }

    #[test]
    fn partitions_are_exact_up_to_twelve() {
        for n in 1..=12 {
            let rr = round_robin(n);
            assert_eq!(rr.len(), matching_count(n));
            let mut seen = HashSet::new();
            for m in &rr {
                let mut verts = HashSet::new();
                for &(a, b) in m {
                    assert!(a < b && verts.insert(a) && verts.insert(b));
                    assert!(seen.insert((a, b)));
                }
            }
            assert_eq!(seen.len(), n * (n - 1) / 2);
            for nc in 1..=12 {
                assert_partition(n * nc, &bipartite_matchings(n, nc));
            }
        }
    }

    #[test]
    fn effective_sizes() {
        assert_eq!(effective_sample(false, 10, 4), 4.0);
        assert_eq!(effective_sample(true, 6, 6), 3.0);
        assert_eq!(effective_sample(true, 1, 1), 0.0);
        assert_eq!(effective_sample(true, 5, 5), 2.0);
    }

    proptest! {
        #[test]
        fn relaxation_dominates_inverse(n in 1.0f64..500.0, q in 0.0f64..0.99, u in 0.0f64..20.0) {
            prop_assert!(bernstein_relax(n, q, u) + 1e-12 >= kl_inverse(n, q, u));
        }

        #[test]
        fn inverse_is_monotone(n in 1.0f64..500.0, q in 0.001f64..0.99, u in 0.01f64..10.0) {
            let base = kl_inverse(n, q, u);
            prop_assert!(base >= q && base <= 1.0);
            prop_assert!(kl_inverse(n, q, u * 1.5) + 1e-14 >= base);
            prop_assert!(kl_inverse(n * 1.5, q, u) <= base + 1e-14);
        }
    }
}
