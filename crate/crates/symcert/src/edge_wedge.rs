//! Deterministic edge–wedge envelope: replaces the realized action terms of
//! the certificate by edge-density, wedge-density and maximum-degree bounds
//! that depend only on the template assignment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{score_curv, score_ord, u_delta, BinaryDuals, Budgets, Model, Route, SlotTerms};
use crate::error::Result;
use crate::kl::{effective_sample, kl_inverse};
use crate::linalg::Mat;
use crate::task::{bad_pair, falling_factorial, Policy, Split, SubstitutionScheme, TemplateFamily, Token, ENUMERATION_CAP};

/// Ordered colored triples `(i, j, k)` with `i` the wedge center.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WedgeCensus {
    pub r: usize,
    /// `P_{b;cd}` at index `(b * r + c) * r + d`.
    pub count: Vec<f64>,
    /// Largest number of triples of one class containing a single vertex.
    pub max_degree: Vec<f64>,
}

impl WedgeCensus {
    fn idx(&self, b: usize, c: usize, d: usize) -> usize {
        (b * self.r + c) * self.r + d
    }

    pub fn p(&self, b: usize, c: usize, d: usize) -> f64 {
        self.count[self.idx(b, c, d)]
    }

    pub fn delta(&self, b: usize, c: usize, d: usize) -> f64 {
        self.max_degree[self.idx(b, c, d)]
    }

    /// Effective size `P / (3 Delta + 1)`.
    pub fn n_eff(&self, b: usize, c: usize, d: usize) -> f64 {
        self.p(b, c, d) / (3.0 * self.delta(b, c, d) + 1.0)
    }
}

/// Number of ways to fill the color slots `colors` with distinct vertices
/// when the vertex `fixed` (of color `fixed.1`) is already placed at slot `fixed.0`.
fn fill_count(sizes: &[usize], colors: [usize; 3], fixed: Option<(usize, usize)>) -> f64 {
    let mut used = vec![0usize; sizes.len()];
    if let Some((_, x)) = fixed {
        used[x] += 1;
    }
    let mut total = 1.0;
    for (slot, &col) in colors.iter().enumerate() {
        if fixed.is_some_and(|(s, _)| s == slot) {
            continue;
        }
        let avail = sizes[col].saturating_sub(used[col]);
        if avail == 0 {
            return 0.0;
        }
        total *= avail as f64;
        used[col] += 1;
    }
    total
}

/// Exact triple counts and per-vertex triple degrees from the block sizes.
pub fn wedge_census(sizes: &[usize]) -> WedgeCensus {
    let r = sizes.len();
    let mut count = vec![0.0; r * r * r];
    let mut max_degree = vec![0.0; r * r * r];
    for b in 0..r {
        for c in 0..r {
            for d in 0..r {
                let cols = [b, c, d];
                let i = (b * r + c) * r + d;
                count[i] = fill_count(sizes, cols, None);
                max_degree[i] = (0..r)
                    .filter(|&x| sizes[x] > 0)
                    .map(|x| {
                        (0..3)
                            .filter(|&slot| cols[slot] == x)
                            .map(|slot| fill_count(sizes, cols, Some((slot, x))))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max);
            }
        }
    }
    WedgeCensus { r, count, max_degree }
}

/// `pi_{b->c}(s)`: probability that a fresh draw of template `c` collides
/// with the fixed substitution `s` of template `b`.
pub fn collision_profile(fam: &TemplateFamily, scheme: &SubstitutionScheme, b: usize, s: &[Token], c: usize) -> f64 {
    match &scheme.policy {
        Policy::Table(tables) => tables[c].iter().filter(|(t, _)| bad_pair(fam, b, s, c, t)).map(|(_, w)| w).sum(),
        Policy::UniformInjective => {
            let lc = fam.templates[c].literals();
            if s.iter().any(|t| lc.contains(t)) {
                return 1.0;
            }
            let wc = fam.templates[c].wildcard_count();
            let pool = scheme.admissible_tokens(fam, c, Split::Train);
            let lb = fam.templates[b].literals();
            let k = pool.iter().filter(|t| lb.contains(t) || s.contains(t)).count();
            let m = pool.len();
            1.0 - falling_factorial(m - k, wc) / falling_factorial(m, wc)
        }
    }
}

/// Per-pair maximum collision probabilities `kappa_bc`.
///
/// Uniform-injective laws use the closed form: the worst substitution puts as
/// many images as possible into the other template's pool.
pub fn kappa_profile(fam: &TemplateFamily, scheme: &SubstitutionScheme) -> Mat {
    let r = fam.r();
    Mat::from_fn(r, r, |b, c| match &scheme.policy {
        Policy::Table(tables) => tables[b]
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(s, _)| collision_profile(fam, scheme, b, s, c))
            .fold(0.0, f64::max),
        Policy::UniformInjective => {
            let wb = fam.templates[b].wildcard_count();
            let wc = fam.templates[c].wildcard_count();
            let ab = scheme.admissible_tokens(fam, b, Split::Train);
            let ac = scheme.admissible_tokens(fam, c, Split::Train);
            let lc = fam.templates[c].literals();
            let lb = fam.templates[b].literals();
            if wb > 0 && ab.iter().any(|t| lc.contains(t)) {
                return 1.0;
            }
            let shared = ab.iter().filter(|t| ac.contains(t)).count();
            let k = ac.iter().filter(|t| lb.contains(t)).count() + wb.min(shared);
            let m = ac.len();
            1.0 - falling_factorial(m.saturating_sub(k), wc) / falling_factorial(m, wc)
        }
    })
}

/// Anchored second moments `alpha_{b;cd}` or their product envelopes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaTable {
    pub r: usize,
    pub alpha: Vec<f64>,
    /// Per-center flag: exact enumeration (true) or `kappa_bc kappa_bd` (false).
    pub exact: Vec<bool>,
}

impl AlphaTable {
    pub fn get(&self, b: usize, c: usize, d: usize) -> f64 {
        self.alpha[(b * self.r + c) * self.r + d]
    }

    /// The trivial envelope `alpha_bar = 1`.
    pub fn ones(r: usize) -> Self {
        AlphaTable {
            r,
            alpha: vec![1.0; r * r * r],
            exact: vec![false; r],
        }
    }
}

/// Exact `alpha` by enumeration over each center's support, falling back to
/// `kappa_bc kappa_bd` where the support exceeds the enumeration cap.
pub fn wedge_alpha(fam: &TemplateFamily, scheme: &SubstitutionScheme, kappa: &Mat) -> AlphaTable {
    let r = fam.r();
    let mut alpha = vec![0.0; r * r * r];
    let mut exact = vec![false; r];
    for b in 0..r {
        match scheme.support(fam, b, ENUMERATION_CAP) {
            Some(table) => {
                exact[b] = true;
                let profiles: Vec<(Vec<f64>, f64)> = table
                    .par_iter()
                    .map(|(s, w)| ((0..r).map(|c| collision_profile(fam, scheme, b, s, c)).collect(), *w))
                    .collect();
                for c in 0..r {
                    for d in 0..r {
                        alpha[(b * r + c) * r + d] = profiles.iter().map(|(p, w)| w * p[c] * p[d]).sum::<f64>().min(1.0);
                    }
                }
            }
            None => {
                for c in 0..r {
                    for d in 0..r {
                        alpha[(b * r + c) * r + d] = kappa[(b, c)] * kappa[(b, d)];
                    }
                }
            }
        }
    }
    AlphaTable { r, alpha, exact }
}

/// Sample-independent inputs of the envelope, computed once per family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeWedgeModel {
    pub q: Mat,
    pub kappa: Mat,
    pub alpha: AlphaTable,
}

impl EdgeWedgeModel {
    pub fn new(fam: &TemplateFamily, scheme: &SubstitutionScheme, q: Mat) -> Self {
        let kappa = kappa_profile(fam, scheme);
        let alpha = wedge_alpha(fam, scheme, &kappa);
        EdgeWedgeModel { q, kappa, alpha }
    }
}

/// `Q_E(v)`: edge-density envelope.
pub fn edge_density_envelope(q: &Mat, sizes: &[usize], v: f64) -> f64 {
    let r = sizes.len();
    let n: usize = sizes.iter().sum();
    let p: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let mut total = 0.0;
    for b in 0..r {
        for c in 0..r {
            if b != c {
                total += p[b] * p[c] * kl_inverse(effective_sample(false, sizes[b], sizes[c]), q[(b, c)], v);
            } else if sizes[b] >= 2 {
                let nb = sizes[b] as f64;
                total += p[b] * p[b] * (1.0 - 1.0 / nb) * kl_inverse(effective_sample(true, sizes[b], sizes[b]), q[(b, b)], v);
            }
        }
    }
    total
}

/// `S_wedge(v)`: wedge-density envelope.
pub fn wedge_density_envelope(census: &WedgeCensus, alpha: &AlphaTable, n: usize, v: f64) -> f64 {
    let r = census.r;
    let n3 = (n as f64).powi(3);
    let mut total = 0.0;
    for b in 0..r {
        for c in 0..r {
            for d in 0..r {
                let p = census.p(b, c, d);
                if p > 0.0 {
                    total += p / n3 * kl_inverse(census.n_eff(b, c, d), alpha.get(b, c, d), v);
                }
            }
        }
    }
    total
}

/// `d_bar(v) = k + sqrt(2 k (v + log n)/n) + (v + log n)/(3n)` for `k = kappa_hat_*`.
pub fn degree_envelope(kappa: &Mat, sizes: &[usize], v: f64) -> (Vec<f64>, f64, f64) {
    let r = sizes.len();
    let n: usize = sizes.iter().sum();
    let nf = n as f64;
    let kappa_hat: Vec<f64> = (0..r).map(|b| (0..r).map(|c| sizes[c] as f64 / nf * kappa[(b, c)]).sum()).collect();
    let k_star = kappa_hat.iter().copied().fold(0.0, f64::max);
    let lv = v + nf.ln();
    let d_bar = k_star + (2.0 * k_star * lv / nf).sqrt() + lv / (3.0 * nf);
    (kappa_hat, k_star, d_bar)
}

/// `v_eta = log((r^2 + r^3 + 1)/eta)`.
pub fn v_eta(r: usize, eta: f64) -> f64 {
    let r = r as f64;
    ((r * r + r * r * r + 1.0) / eta).ln()
}

/// `R_{2,mu}` from the row sums `r_i = sum_{j != i} |mu_{tau(i) tau(j)}|`.
pub fn mu_row_norm(mu: &Mat, sizes: &[usize]) -> f64 {
    let r = sizes.len();
    (0..r)
        .map(|b| {
            let row: f64 = (0..r).map(|c| sizes[c] as f64 * mu[(b, c)].abs()).sum::<f64>() - mu[(b, b)].abs();
            sizes[b] as f64 * row * row
        })
        .sum::<f64>()
        .sqrt()
}

/// All envelope terms and the five enveloped budgets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeWedgeEnvelope {
    pub v: f64,
    pub u: f64,
    pub lambda: f64,
    pub q_e: f64,
    pub s_wedge: f64,
    pub a_ew: f64,
    pub kappa_hat: Vec<f64>,
    pub kappa_hat_star: f64,
    pub d_bar: f64,
    pub a_op: f64,
    pub a_0: f64,
    pub gamma_bar: f64,
    pub r2_mu: f64,
    pub a_corr: f64,
    pub budgets: Budgets,
    pub b_ew: f64,
    pub route: Option<Route>,
    pub slots: SlotTerms,
}

/// Envelope at edge–wedge level `v` for the block sizes of one realized
/// assignment; D/Z slots stay at `u_delta`.
#[allow(clippy::too_many_arguments)]
pub fn envelope(
    model: &Model,
    ew: &EdgeWedgeModel,
    sizes: &[usize],
    test_template: usize,
    y_r: &[f64],
    lambda: f64,
    delta: f64,
    v: f64,
) -> Result<EdgeWedgeEnvelope> {
    let tm = &model.tmat;
    let r = tm.r();
    let n: usize = sizes.iter().sum();
    let nf = n as f64;
    let p_hat: Vec<f64> = sizes.iter().map(|&s| s as f64 / nf).collect();
    let u = u_delta(r, delta);

    let q_e = edge_density_envelope(&ew.q, sizes, v);
    let census = wedge_census(sizes);
    let s_wedge = wedge_density_envelope(&census, &ew.alpha, n, v);
    let root = (q_e / nf + s_wedge).sqrt();
    let a_ew = tm.delta_star / nf + tm.l_star * root;
    let (kappa_hat, kappa_hat_star, d_bar) = degree_envelope(&ew.kappa, sizes, v);
    let a_op = tm.delta_star / nf + tm.l_star * d_bar;
    let a_0 = a_ew.min(a_op);
    let gamma_bar = a_op / (4.0 * lambda);
    let mu = &model.n_circ - &tm.n;
    let r2_mu = mu_row_norm(&mu, sizes);
    let a_corr = model.delta_star_circ / nf + tm.l_star * root + r2_mu / nf.powf(1.5);

    let duals = BinaryDuals::solve(model, &p_hat, y_r, test_template, lambda)?;
    let slots = model.slots_at(sizes, u);
    let st = crate::certify::slot_terms(model, sizes, test_template, &duals.inputs(), &slots, lambda)?;
    let env = &slots.env;
    let (k, l) = (tm.k_star, tm.l_star);
    let budgets = Budgets {
        cs: score_curv(k, l, lambda, a_0, env.e_star, env.x_star, gamma_bar),
        deg: score_ord(k, lambda, a_0, 0.0, env.z_star),
        bd: score_ord(k, lambda, a_0, st.d_bd, st.z_bd),
        anova: score_ord(k, lambda, a_0, st.d_anova, st.z_anova),
        bf: score_ord(k, lambda, a_corr, st.d_bf, st.z_bf) + st.b_bias,
    };
    let (b_ew, route) = budgets.select();
    Ok(EdgeWedgeEnvelope {
        v,
        u,
        lambda,
        q_e,
        s_wedge,
        a_ew,
        kappa_hat,
        kappa_hat_star,
        d_bar,
        a_op,
        a_0,
        gamma_bar,
        r2_mu,
        a_corr,
        budgets,
        b_ew,
        route,
        slots: st,
    })
}
