//! The five transfer budgets (CS, DEG, BD, ANOVA, BF) and their minimum.
//!
//! A [`Model`] holds everything that does not depend on the realized sample:
//! the template matrix, the literal-corrected target and the source of the
//! block-level slots. [`evaluate`] combines a model with one realized Gram
//! matrix at a given ridge and level.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BlockStats;
use crate::kernel::{Kernel, TemplateMatrix};
use crate::kl::{effective_sample, kl_inverse};
use crate::klr::{self, neg_entropy_curvature};
use crate::linalg::{self, Mat, Vector};
use crate::task::{Policy, Sample, SubTable, SubstitutionScheme, TemplateFamily, Token, ENUMERATION_CAP};

/// Route labels, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "CS")]
    Cs,
    #[serde(rename = "DEG")]
    Deg,
    #[serde(rename = "BD")]
    Bd,
    #[serde(rename = "ANOVA")]
    Anova,
    #[serde(rename = "BF")]
    Bf,
}

impl Route {
    pub const ALL: [Route; 5] = [Route::Cs, Route::Deg, Route::Bd, Route::Anova, Route::Bf];

    pub fn label(self) -> &'static str {
        match self {
            Route::Cs => "CS",
            Route::Deg => "DEG",
            Route::Bd => "BD",
            Route::Anova => "ANOVA",
            Route::Bf => "BF",
        }
    }

    pub fn parse(s: &str) -> Option<Route> {
        Route::ALL.into_iter().find(|r| r.label().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Relative tolerance under which two budgets count as tied; the earlier
/// route in [`Route::ALL`] wins a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// `u_delta = log((11 r^2 + 5 r) / delta)`.
pub fn u_delta(r: usize, delta: f64) -> f64 {
    let r = r as f64;
    ((11.0 * r * r + 5.0 * r) / delta).ln()
}

/// Level for the `L - 1` class contrasts of a multiclass certificate.
pub fn u_delta_multiclass(r: usize, delta: f64, classes: usize) -> f64 {
    u_delta(r, delta) + ((classes - 1) as f64).ln()
}

/// `Ord(A, D, Z) = K_* A / (4 lambda^2) + D / lambda^2 + Z / lambda`.
pub fn score_ord(k_star: f64, lambda: f64, a: f64, d: f64, z: f64) -> f64 {
    k_star * a / (4.0 * lambda * lambda) + d / (lambda * lambda) + z / lambda
}

/// `Curv(A, E, X, gamma)`, infinite when `gamma >= 1`.
pub fn score_curv(k_star: f64, l_star: f64, lambda: f64, a: f64, e: f64, x: f64, gamma: f64) -> f64 {
    if gamma >= 1.0 {
        return f64::INFINITY;
    }
    l_star * x / lambda + (k_star * e + (k_star + 2.0 * l_star * x.sqrt()) * a) / (8.0 * lambda * lambda * (1.0 - gamma))
}

/// Block-density envelopes at one level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvelopeInputs {
    pub e: Mat,
    pub t: Vector,
    pub x_star: f64,
    pub e_star: f64,
    pub z_star: f64,
    pub u: f64,
}

/// KL envelopes `E_bc(u)`, `T_b(u)`, `X_*(u)` for pair envelopes `q` and
/// test envelopes `q_test`.
pub fn kl_envelopes(q: &Mat, q_test: &Vector, sizes: &[usize], delta_star: f64, l_star: f64, u: f64) -> EnvelopeInputs {
    let r = sizes.len();
    let n: usize = sizes.iter().sum();
    let mut e = Mat::zeros(r, r);
    for b in 0..r {
        for c in 0..r {
            let (nb, nc) = (sizes[b], sizes[c]);
            let neff = effective_sample(b == c, nb, nc);
            e[(b, c)] = if b != c {
                l_star * kl_inverse(neff, q[(b, c)], u)
            } else {
                let nbf = nb as f64;
                let pair = if nb >= 2 {
                    2.0 * l_star * (nbf * (nbf - 1.0) / 2.0) / (nbf * nbf) * kl_inverse(neff, q[(b, b)], u)
                } else {
                    0.0
                };
                delta_star / nbf + pair
            };
        }
    }
    let ut: Vec<f64> = (0..r).map(|b| kl_inverse(sizes[b] as f64, q_test[b], u)).collect();
    let t = Vector::from_iterator(r, ut.iter().map(|v| l_star * v));
    let x_star = (0..r).map(|b| sizes[b] as f64 / n as f64 * ut[b]).sum::<f64>();
    EnvelopeInputs {
        e_star: e.max(),
        e,
        t,
        x_star,
        z_star: l_star * x_star,
        u,
    }
}

/// Block dual coordinates with the signs used for the curvature operator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockDual {
    pub theta: Vector,
    pub beta: Vector,
    pub y: Vec<f64>,
}

impl BlockDual {
    pub fn binary(ideal: &klr::IdealScore, y: &[f64]) -> Self {
        BlockDual {
            theta: ideal.theta.clone(),
            beta: ideal.beta.clone(),
            y: y.to_vec(),
        }
    }

    /// Signed residual `beta`, with `theta = |beta|` and `y = sign(beta)`.
    pub fn from_signed(beta: Vector) -> Self {
        let theta = beta.map(|b| b.abs().clamp(1e-12, 1.0 - 1e-12));
        let y = beta.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
        BlockDual { theta, beta, y }
    }
}

/// Sensitivity operator `A = diag(phi''(theta)) + (1/lambda) Y N Q Y` and the
/// representer `r = Y A^{-1} Y m`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sensitivity {
    pub a: Mat,
    pub r: Vector,
}

pub fn sensitivity(n: &Mat, dual: &BlockDual, p_hat: &[f64], lambda: f64, m_blk: &Vector) -> Result<Sensitivity> {
    let r = n.nrows();
    let y = &dual.y;
    let mut a = Mat::from_fn(r, r, |i, j| y[i] * n[(i, j)] * p_hat[j] * y[j] / lambda);
    for i in 0..r {
        a[(i, i)] += neg_entropy_curvature(dual.theta[i]);
    }
    let rhs = Vector::from_fn(r, |i, _| y[i] * m_blk[i]);
    let sol = a.clone().lu().solve(&rhs).ok_or(Error::NotPositiveDefinite)?;
    Ok(Sensitivity {
        r: Vector::from_fn(r, |i, _| y[i] * sol[i]),
        a,
    })
}

/// `(sum p_b p_c |r_b| |beta_c| A_bc, sum p_b |beta_b| T_b)`.
pub fn weighted_slots(r_a: &Vector, beta: &Vector, p_hat: &[f64], a_env: &Mat, t: &Vector) -> (f64, f64) {
    let r = p_hat.len();
    let mut d = 0.0;
    let mut z = 0.0;
    for b in 0..r {
        for c in 0..r {
            d += p_hat[b] * p_hat[c] * r_a[b].abs() * beta[c].abs() * a_env[(b, c)];
        }
        z += p_hat[b] * beta[b].abs() * t[b];
    }
    (d, z)
}

/// The deterministic bias of the literal-corrected target,
/// `K_* L_* / (4 lambda^2) ||Q^{1/2} Q_q Q^{1/2}||_op + (L_*/lambda) (sum p_b q_bx^2)^{1/2}`.
pub fn bias_envelope(k_star: f64, l_star: f64, lambda: f64, p_hat: &[f64], q: &Mat, q_test: &Vector) -> f64 {
    let r = p_hat.len();
    let scaled = Mat::from_fn(r, r, |b, c| p_hat[b].sqrt() * q[(b, c)] * p_hat[c].sqrt());
    let test: f64 = (0..r).map(|b| p_hat[b] * q_test[b] * q_test[b]).sum();
    k_star * l_star / (4.0 * lambda * lambda) * linalg::sym_op_norm(&scaled) + l_star / lambda * test.sqrt()
}

// ---------------------------------------------------------------------------
// Hoeffding–ANOVA components

/// Hoeffding decomposition of the collision deviations over the substitution laws.
///
/// Matrices indexed `[b, c]` hold the projection onto the `b` argument of the
/// `(b, c)` pair; the diagonal holds the one-sample quantities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnovaComponents {
    pub mu: Mat,
    pub sigma2: Mat,
    pub m_proj: Mat,
    pub omega2: Mat,
    pub nu: Vector,
    pub sigma2_x: Vector,
    pub m_x: Vector,
    pub test_template: usize,
    /// Whether every expectation was computed by exact enumeration.
    pub exact: bool,
}

impl AnovaComponents {
    pub fn zeros(r: usize, test_template: usize) -> Self {
        AnovaComponents {
            mu: Mat::zeros(r, r),
            sigma2: Mat::zeros(r, r),
            m_proj: Mat::zeros(r, r),
            omega2: Mat::zeros(r, r),
            nu: Vector::zeros(r),
            sigma2_x: Vector::zeros(r),
            m_x: Vector::zeros(r),
            test_template,
            exact: true,
        }
    }
}

/// How expectations over substitutions are computed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum AnovaMode {
    /// Full enumeration; fails when a support exceeds the cap.
    Exact,
    /// Empirical law of `draws` sampled substitutions per template.
    MonteCarlo { draws: usize, seed: u64 },
    /// Exact when enumerable, Monte Carlo otherwise.
    Auto { draws: usize, seed: u64 },
}

/// Pair-level cap on `|supp_b| * |supp_c|` for exact double enumeration.
pub const PAIR_CAP: f64 = 1e8;

fn supports(fam: &TemplateFamily, scheme: &SubstitutionScheme, mode: AnovaMode) -> Result<(Vec<SubTable>, bool)> {
    use rand::SeedableRng;
    let r = fam.r();
    let exact: Option<Vec<SubTable>> = (0..r).map(|b| scheme.support(fam, b, ENUMERATION_CAP)).collect();
    let fits = exact.as_ref().is_some_and(|s| {
        let max = s.iter().map(|t| t.len()).max().unwrap_or(0) as f64;
        max * max <= PAIR_CAP
    });
    let (draws, seed) = match mode {
        AnovaMode::Exact => {
            return if fits {
                Ok((exact.unwrap(), true))
            } else {
                Err(Error::Invalid("substitution support exceeds the enumeration cap".into()))
            }
        }
        AnovaMode::Auto { draws, seed } => {
            if fits {
                return Ok((exact.unwrap(), true));
            }
            (draws, seed)
        }
        AnovaMode::MonteCarlo { draws, seed } => (draws, seed),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(r);
    for b in 0..r {
        let mut table = Vec::with_capacity(draws);
        for _ in 0..draws {
            table.push((scheme.sample_sub(fam, b, crate::task::Split::Train, &mut rng)?, 1.0 / draws as f64));
        }
        out.push(table);
    }
    Ok((out, false))
}

struct PairDecomposition {
    mu: f64,
    row: Vec<f64>,
    col: Vec<f64>,
    omega2: f64,
}

fn decompose<K: Kernel + ?Sized>(
    kernel: &K,
    xs: &[Vec<Token>],
    ws: &[f64],
    ys: &[Vec<Token>],
    wt: &[f64],
    center: f64,
) -> PairDecomposition {
    let rows: Vec<(f64, Vec<f64>)> = xs
        .par_iter()
        .zip(ws.par_iter())
        .map(|(x, &wu)| {
            let mut rsum = 0.0;
            let mut col = vec![0.0; ys.len()];
            for (j, (y, &wv)) in ys.iter().zip(wt).enumerate() {
                let h = kernel.eval(x, y) - center;
                rsum += wv * h;
                col[j] = wu * h;
            }
            (rsum, col)
        })
        .collect();
    let row_mean: Vec<f64> = rows.iter().map(|(s, _)| *s).collect();
    let mut col_mean = vec![0.0; ys.len()];
    for (_, c) in &rows {
        for (acc, v) in col_mean.iter_mut().zip(c) {
            *acc += v;
        }
    }
    let mu: f64 = row_mean.iter().zip(ws).map(|(m, w)| m * w).sum();
    let row: Vec<f64> = row_mean.iter().map(|m| m - mu).collect();
    let col: Vec<f64> = col_mean.iter().map(|m| m - mu).collect();
    let omega2: f64 = xs
        .par_iter()
        .zip(ws.par_iter())
        .zip(row.par_iter())
        .map(|((x, &wu), &hr)| {
            ys.iter()
                .zip(wt)
                .zip(&col)
                .map(|((y, &wv), &hc)| {
                    let c = kernel.eval(x, y) - center - mu - hr - hc;
                    wu * wv * c * c
                })
                .sum::<f64>()
        })
        .sum();
    PairDecomposition { mu, row, col, omega2 }
}

fn moments(h: &[f64], w: &[f64]) -> (f64, f64) {
    let var = h.iter().zip(w).map(|(h, w)| w * h * h).sum();
    let sup = h.iter().zip(w).filter(|(_, &w)| w > 0.0).map(|(h, _)| h.abs()).fold(0.0, f64::max);
    (var, sup)
}

/// Computes the Hoeffding–ANOVA components of `H_bc = K - N_bc` and of the
/// test deviations `G_b = K(x, .) - N_ab`.
pub fn anova_components<K: Kernel + ?Sized>(
    fam: &TemplateFamily,
    scheme: &SubstitutionScheme,
    kernel: &K,
    tmat: &TemplateMatrix,
    test: &Sample,
    mode: AnovaMode,
) -> Result<AnovaComponents> {
    let r = fam.r();
    let a = test.template;
    let (supp, exact) = supports(fam, scheme, mode)?;
    let strings: Vec<Vec<Vec<Token>>> = (0..r)
        .map(|b| supp[b].iter().map(|(s, _)| fam.templates[b].instantiate(s)).collect())
        .collect();
    let weights: Vec<Vec<f64>> = supp.iter().map(|t| t.iter().map(|(_, w)| *w).collect()).collect();
    let mut out = AnovaComponents::zeros(r, a);
    out.exact = exact;
    for b in 0..r {
        for c in b..r {
            let dec = decompose(kernel, &strings[b], &weights[b], &strings[c], &weights[c], tmat.n[(b, c)]);
            let (s_b, m_b) = moments(&dec.row, &weights[b]);
            let (s_c, m_c) = moments(&dec.col, &weights[c]);
            out.mu[(b, c)] = dec.mu;
            out.mu[(c, b)] = dec.mu;
            out.omega2[(b, c)] = dec.omega2;
            out.omega2[(c, b)] = dec.omega2;
            out.sigma2[(b, c)] = s_b;
            out.m_proj[(b, c)] = m_b;
            out.sigma2[(c, b)] = s_c;
            out.m_proj[(c, b)] = m_c;
        }
        let g: Vec<f64> = strings[b].iter().map(|s| kernel.eval(&test.string, s) - tmat.n[(a, b)]).collect();
        let nu: f64 = g.iter().zip(&weights[b]).map(|(g, w)| g * w).sum();
        let centered: Vec<f64> = g.iter().map(|g| g - nu).collect();
        let (var, sup) = moments(&centered, &weights[b]);
        out.nu[b] = nu;
        out.sigma2_x[b] = var;
        out.m_x[b] = sup;
    }
    Ok(out)
}

/// Constant of the canonical-chaos quantile relaxation.
pub const DEFAULT_C_Q: f64 = 4.0;

/// Per-pair ANOVA envelopes and test envelopes at level `u`. With
/// `centered = true` the means are dropped (the corrected-target variant);
/// `diag` is the self-kernel gap used on same-block entries.
pub fn anova_envelopes(comp: &AnovaComponents, sizes: &[usize], diag: f64, l_star: f64, u: f64, c_q: f64, centered: bool) -> (Mat, Vector) {
    let r = sizes.len();
    let keep = if centered { 0.0 } else { 1.0 };
    let proj = |s2: f64, m: f64, nb: f64| (2.0 * s2 * u / nb).sqrt() + 2.0 * m * u / (3.0 * nb);
    let mut a = Mat::zeros(r, r);
    for b in 0..r {
        for c in 0..r {
            let (nb, nc) = (sizes[b] as f64, sizes[c] as f64);
            a[(b, c)] = if b != c {
                let q0 = c_q * (comp.omega2[(b, c)].sqrt() / (nb * nc).sqrt() * (u + 1.0) + l_star / (nb * nc) * (u + 1.0).powi(2));
                keep * comp.mu[(b, c)].abs()
                    + proj(comp.sigma2[(b, c)], comp.m_proj[(b, c)], nb)
                    + proj(comp.sigma2[(c, b)], comp.m_proj[(c, b)], nc)
                    + q0
            } else if sizes[b] >= 2 {
                let q0 = c_q * (comp.omega2[(b, b)].sqrt() / nb * (u + 1.0) + l_star / (nb * nb) * (u + 1.0).powi(2));
                diag / nb
                    + keep * comp.mu[(b, b)].abs()
                    + 2.0 * (2.0 * comp.sigma2[(b, b)] * u / nb).sqrt()
                    + 4.0 * comp.m_proj[(b, b)] * u / (3.0 * nb)
                    + q0
            } else {
                diag
            };
        }
    }
    let t = Vector::from_fn(r, |b, _| {
        keep * comp.nu[b].abs() + proj(comp.sigma2_x[b], comp.m_x[b], sizes[b] as f64)
    });
    (a, t)
}

// ---------------------------------------------------------------------------
// Models

/// Source of the block-level slots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SlotModel {
    /// High-probability envelopes from population collision rates and
    /// Hoeffding–ANOVA components.
    Envelope {
        q: Mat,
        q_test: Vector,
        anova: AnovaComponents,
        c_q: f64,
    },
    /// Realized block statistics plugged into every slot, with the
    /// literal-hit parts of the block averages as corrected means.
    Realized { stats: BlockStats, mu_lit: Mat, nu_lit: Vector },
}

/// Sample-independent inputs of the certificate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub tmat: TemplateMatrix,
    /// Literal-corrected template matrix `N°`.
    pub n_circ: Mat,
    /// Corrected test row `m°_x` over blocks.
    pub m_circ: Vector,
    pub delta_star_circ: f64,
    pub slots: SlotModel,
    /// Scalar proxy `w_max / rho`.
    pub b_rho: f64,
}

impl Model {
    /// Envelope model: `N° = N + mu`, `m° = N_a. + nu`.
    pub fn envelope(tmat: TemplateMatrix, q: Mat, q_test: Vector, anova: AnovaComponents, b_rho: f64) -> Self {
        let a = anova.test_template;
        let n_circ = &tmat.n + &anova.mu;
        let m_circ = Vector::from_fn(tmat.r(), |b, _| tmat.n[(a, b)] + anova.nu[b]);
        let delta_star_circ = (0..tmat.r()).map(|b| (tmat.d[b] - n_circ[(b, b)]).abs()).fold(0.0, f64::max);
        Model {
            n_circ,
            m_circ,
            delta_star_circ,
            slots: SlotModel::Envelope {
                q,
                q_test,
                anova,
                c_q: DEFAULT_C_Q,
            },
            b_rho,
            tmat,
        }
    }

    /// Realized model for an explicit sample: every slot uses the observed
    /// block statistics.
    pub fn realized(tmat: TemplateMatrix, a: usize, stats: BlockStats, mu_lit: Mat, nu_lit: Vector, b_rho: f64) -> Self {
        let n_circ = &tmat.n + &mu_lit;
        let m_circ = Vector::from_fn(tmat.r(), |b, _| tmat.n[(a, b)] + nu_lit[b]);
        let delta_star_circ = (0..tmat.r()).map(|b| (tmat.d[b] - n_circ[(b, b)]).abs()).fold(0.0, f64::max);
        Model {
            n_circ,
            m_circ,
            delta_star_circ,
            slots: SlotModel::Realized { stats, mu_lit, nu_lit },
            b_rho,
            tmat,
        }
    }

    /// All slot inputs at level `u` for the given block sizes.
    pub fn slots_at(&self, sizes: &[usize], u: f64) -> Slots {
        let tm = &self.tmat;
        let r = sizes.len();
        let n: usize = sizes.iter().sum();
        let p_hat: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
        match &self.slots {
            SlotModel::Envelope { q, q_test, anova, c_q } => {
                let env = kl_envelopes(q, q_test, sizes, tm.delta_star, tm.l_star, u);
                let (an_a, an_t) = anova_envelopes(anova, sizes, tm.delta_star, tm.l_star, u, *c_q, false);
                let (bf_a, bf_t) = anova_envelopes(anova, sizes, self.delta_star_circ, tm.l_star, u, *c_q, true);
                Slots {
                    env,
                    an_a,
                    an_t,
                    bf_a,
                    bf_t,
                    bias_q: q.clone(),
                    bias_q_test: q_test.clone(),
                }
            }
            SlotModel::Realized { stats, mu_lit, nu_lit } => {
                let l = tm.l_star;
                let mut e = Mat::zeros(r, r);
                for b in 0..r {
                    for c in 0..r {
                        e[(b, c)] = if b != c {
                            l * stats.q_hat[(b, c)]
                        } else {
                            let nb = sizes[b] as f64;
                            tm.delta_star / nb + 2.0 * l * (nb * (nb - 1.0) / 2.0) / (nb * nb) * stats.q_hat[(b, b)]
                        };
                    }
                }
                let t = &stats.q_hat_test * l;
                let x_star: f64 = (0..r).map(|b| p_hat[b] * stats.q_hat_test[b]).sum();
                let env = EnvelopeInputs {
                    e_star: e.max(),
                    e,
                    t,
                    x_star,
                    z_star: l * x_star,
                    u,
                };
                Slots {
                    env,
                    an_a: stats.delta_bar.abs(),
                    an_t: stats.zeta_bar.abs(),
                    bf_a: (&stats.delta_bar - mu_lit).abs(),
                    bf_t: (&stats.zeta_bar - nu_lit).abs(),
                    bias_q: stats.q_hat.clone(),
                    bias_q_test: stats.q_hat_test.clone(),
                }
            }
        }
    }
}

/// Slot inputs at one level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Slots {
    pub env: EnvelopeInputs,
    pub an_a: Mat,
    pub an_t: Vector,
    pub bf_a: Mat,
    pub bf_t: Vector,
    pub bias_q: Mat,
    pub bias_q_test: Vector,
}

/// The five budget values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub cs: f64,
    pub deg: f64,
    pub bd: f64,
    pub anova: f64,
    pub bf: f64,
}

impl Budgets {
    pub fn get(&self, route: Route) -> f64 {
        match route {
            Route::Cs => self.cs,
            Route::Deg => self.deg,
            Route::Bd => self.bd,
            Route::Anova => self.anova,
            Route::Bf => self.bf,
        }
    }

    pub fn infinite() -> Self {
        Budgets {
            cs: f64::INFINITY,
            deg: f64::INFINITY,
            bd: f64::INFINITY,
            anova: f64::INFINITY,
            bf: f64::INFINITY,
        }
    }

    /// Minimum budget and its route under the fixed tie-break order.
    pub fn select(&self) -> (f64, Option<Route>) {
        let mut best: Option<(f64, Route)> = None;
        for route in Route::ALL {
            let v = self.get(route);
            if !v.is_finite() {
                continue;
            }
            match best {
                Some((b, _)) if v >= b * (1.0 - TIE_TOLERANCE) => {}
                _ => best = Some((v, route)),
            }
        }
        match best {
            Some((v, r)) => (v, Some(r)),
            None => (f64::INFINITY, None),
        }
    }
}

/// Every named term of one certificate evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateReport {
    pub budgets: Budgets,
    pub b_sharp: f64,
    pub route: Option<Route>,
    pub b_rho: f64,
    pub u: f64,
    pub lambda: f64,
    pub k_star: f64,
    pub l_star: f64,
    pub delta_star: f64,
    pub a_delta: f64,
    pub a_delta_op: f64,
    pub a_delta_degree: f64,
    pub a_realized: f64,
    pub gamma_cspec: f64,
    pub e_star: f64,
    pub x_star: f64,
    pub z_star: f64,
    pub d_bd: f64,
    pub z_bd: f64,
    pub d_anova: f64,
    pub z_anova: f64,
    pub d_bf: f64,
    pub z_bf: f64,
    pub a_delta_circ: f64,
    pub b_bias: f64,
    pub delta_star_circ: f64,
    /// Ideal fresh-test score `S^id`.
    pub ideal_score: f64,
    /// Corrected score `S°`.
    pub corrected_score: f64,
    /// Representer `r_a` of the fresh-target sensitivity.
    pub r_a: Vec<f64>,
    pub beta: Vec<f64>,
    pub e_rep: bool,
    /// Set when the curvature route wins with `gamma` in `[0.99, 1)`.
    pub near_singular: bool,
}

/// Realized sample-level inputs.
pub struct SampleInputs<'a> {
    pub khat: &'a Mat,
    pub colors: &'a [usize],
    pub sizes: &'a [usize],
    pub test_template: usize,
    pub d2: f64,
}

/// Dual inputs for one scalar score: the fresh and corrected block duals.
pub struct DualInputs<'a> {
    pub fresh: &'a BlockDual,
    pub corrected: &'a BlockDual,
    pub ideal_score: f64,
    pub corrected_score: f64,
}

/// The sample-independent slot values of the ordered budgets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlotTerms {
    pub d_bd: f64,
    pub z_bd: f64,
    pub d_anova: f64,
    pub z_anova: f64,
    pub d_bf: f64,
    pub z_bf: f64,
    pub b_bias: f64,
    pub r_a: Vec<f64>,
    pub r_circ: Vec<f64>,
}

/// Weighted D/Z slots and the bias envelope; these depend on the sample only
/// through the block sizes.
pub fn slot_terms(model: &Model, sizes: &[usize], a: usize, duals: &DualInputs, slots: &Slots, lambda: f64) -> Result<SlotTerms> {
    let tm = &model.tmat;
    let r = tm.r();
    let n: usize = sizes.iter().sum();
    let p_hat: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let fresh = duals.fresh;
    let n_a = Vector::from_fn(r, |b, _| tm.n[(a, b)]);
    let sens = sensitivity(&tm.n, fresh, &p_hat, lambda, &n_a)?;
    let env = &slots.env;
    let (d_bd, z_bd) = weighted_slots(&sens.r, &fresh.beta, &p_hat, &env.e, &env.t);
    let (d_anova, z_anova) = weighted_slots(&sens.r, &fresh.beta, &p_hat, &slots.an_a, &slots.an_t);
    let corr = duals.corrected;
    let sens_c = sensitivity(&model.n_circ, corr, &p_hat, lambda, &model.m_circ)?;
    let (d_bf, z_bf) = weighted_slots(&sens_c.r, &corr.beta, &p_hat, &slots.bf_a, &slots.bf_t);
    Ok(SlotTerms {
        d_bd,
        z_bd,
        d_anova,
        z_anova,
        d_bf,
        z_bf,
        b_bias: bias_envelope(tm.k_star, tm.l_star, lambda, &p_hat, &slots.bias_q, &slots.bias_q_test),
        r_a: sens.r.iter().copied().collect(),
        r_circ: sens_c.r.iter().copied().collect(),
    })
}

/// Evaluates the five budgets for one scalar score.
pub fn evaluate(model: &Model, sample: &SampleInputs, duals: &DualInputs, slots: &Slots, lambda: f64) -> Result<CertificateReport> {
    let tm = &model.tmat;
    let (k_star, l_star, delta_star) = (tm.k_star, tm.l_star, tm.delta_star);
    let colors = sample.colors;
    let n = colors.len();
    let nf = n as f64;
    let a = sample.test_template;

    let m_n = linalg::expand_blocks(&tm.n, colors);
    let delta = sample.khat - &m_n;
    let fresh = duals.fresh;
    let y = Vector::from_iterator(n, colors.iter().map(|&c| fresh.y[c]));
    let c_m = Vector::from_iterator(n, colors.iter().map(|&c| fresh.theta[c]));
    let a_realized = (&delta * y.component_mul(&c_m)).norm() / nf.powf(1.5);
    let a_op = linalg::sym_op_norm(&delta) / nf;
    let a_degree = delta_star / nf + l_star * sample.d2 / nf.powf(1.5);
    let a_delta = a_op.min(a_degree);
    let cop = klr::curvature_operator(&m_n, &y, lambda);
    let gamma = klr::relative_curvature(&cop, &delta, &y, lambda);

    let st = slot_terms(model, sample.sizes, a, duals, slots, lambda)?;
    let env = &slots.env;
    let SlotTerms {
        d_bd,
        z_bd,
        d_anova: d_an,
        z_anova: z_an,
        d_bf,
        z_bf,
        b_bias,
        ..
    } = st;
    let corr = duals.corrected;
    let m_circ_n = linalg::expand_blocks(&model.n_circ, colors);
    let delta_circ = sample.khat - &m_circ_n;
    let signed_circ = Vector::from_iterator(n, colors.iter().map(|&c| corr.beta[c]));
    let a_delta_circ = (&delta_circ * signed_circ).norm() / nf.powf(1.5);

    let budgets = Budgets {
        cs: score_curv(k_star, l_star, lambda, a_delta, env.e_star, env.x_star, gamma),
        deg: score_ord(k_star, lambda, a_delta, 0.0, env.z_star),
        bd: score_ord(k_star, lambda, a_delta, d_bd, z_bd),
        anova: score_ord(k_star, lambda, a_delta, d_an, z_an),
        bf: score_ord(k_star, lambda, a_delta_circ, d_bf, z_bf) + b_bias,
    };
    let (b_sharp, route) = budgets.select();
    Ok(CertificateReport {
        budgets,
        b_sharp,
        route,
        b_rho: model.b_rho,
        u: env.u,
        lambda,
        k_star,
        l_star,
        delta_star,
        a_delta,
        a_delta_op: a_op,
        a_delta_degree: a_degree,
        a_realized,
        gamma_cspec: gamma,
        e_star: env.e_star,
        x_star: env.x_star,
        z_star: env.z_star,
        d_bd,
        z_bd,
        d_anova: d_an,
        z_anova: z_an,
        d_bf,
        z_bf,
        a_delta_circ,
        b_bias,
        delta_star_circ: model.delta_star_circ,
        ideal_score: duals.ideal_score,
        corrected_score: duals.corrected_score,
        r_a: st.r_a,
        beta: fresh.beta.iter().copied().collect(),
        e_rep: true,
        near_singular: route == Some(Route::Cs) && (0.99..1.0).contains(&gamma),
    })
}

/// Report for a sample outside the representativeness event.
pub fn unrepresentative(model: &Model, lambda: f64, u: f64) -> CertificateReport {
    let tm = &model.tmat;
    CertificateReport {
        budgets: Budgets::infinite(),
        b_sharp: f64::INFINITY,
        route: None,
        b_rho: model.b_rho,
        u,
        lambda,
        k_star: tm.k_star,
        l_star: tm.l_star,
        delta_star: tm.delta_star,
        a_delta: f64::NAN,
        a_delta_op: f64::NAN,
        a_delta_degree: f64::NAN,
        a_realized: f64::NAN,
        gamma_cspec: f64::NAN,
        e_star: f64::NAN,
        x_star: f64::NAN,
        z_star: f64::NAN,
        d_bd: f64::NAN,
        z_bd: f64::NAN,
        d_anova: f64::NAN,
        z_anova: f64::NAN,
        d_bf: f64::NAN,
        z_bf: f64::NAN,
        a_delta_circ: f64::NAN,
        b_bias: f64::NAN,
        delta_star_circ: model.delta_star_circ,
        ideal_score: f64::NAN,
        corrected_score: f64::NAN,
        r_a: vec![],
        beta: vec![],
        e_rep: false,
        near_singular: false,
    }
}

/// Solves the block dual on `n` without requiring invertibility.
pub fn block_dual(n: &Mat, p_hat: &[f64], lambda: f64, y: &[f64]) -> Result<(BlockDual, Vector)> {
    let id = klr::solve_ideal_psd(n, p_hat, lambda, y)?;
    let g = id.g.clone();
    Ok((BlockDual::binary(&id, y), g))
}

/// `E_rep`: every block holds at least half its expected share.
pub fn representative(sizes: &[usize], masses: &[f64]) -> bool {
    let n: usize = sizes.iter().sum();
    sizes.iter().zip(masses).all(|(&s, &m)| s > 0 && s as f64 >= 0.5 * m * n as f64)
}

/// Binary certificate for a realized sample with masses `masses` (for the
/// representativeness check), ridge `lambda` and confidence `delta`.
pub fn certify(model: &Model, sample: &SampleInputs, y_r: &[f64], masses: &[f64], lambda: f64, delta: f64) -> Result<CertificateReport> {
    let r = model.tmat.r();
    let u = u_delta(r, delta);
    let n: usize = sample.sizes.iter().sum();
    let p_hat: Vec<f64> = sample.sizes.iter().map(|&s| s as f64 / n as f64).collect();
    if !representative(sample.sizes, masses) {
        return Ok(unrepresentative(model, lambda, u));
    }
    let duals = BinaryDuals::solve(model, &p_hat, y_r, sample.test_template, lambda)?;
    let slots = model.slots_at(sample.sizes, u);
    evaluate(model, sample, &duals.inputs(), &slots, lambda)
}

/// Fresh and corrected block duals of a binary problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinaryDuals {
    pub fresh: BlockDual,
    pub corrected: BlockDual,
    pub ideal_score: f64,
    pub corrected_score: f64,
}

impl BinaryDuals {
    pub fn solve(model: &Model, p_hat: &[f64], y_r: &[f64], a: usize, lambda: f64) -> Result<Self> {
        let r = model.tmat.r();
        let (fresh, g) = block_dual(&model.tmat.n, p_hat, lambda, y_r)?;
        let (corrected, _) = block_dual(&model.n_circ, p_hat, lambda, y_r)?;
        let corrected_score = (0..r).map(|b| model.m_circ[b] * p_hat[b] * corrected.beta[b]).sum::<f64>() / lambda;
        Ok(BinaryDuals {
            fresh,
            corrected,
            ideal_score: g[a],
            corrected_score,
        })
    }

    pub fn inputs(&self) -> DualInputs<'_> {
        DualInputs {
            fresh: &self.fresh,
            corrected: &self.corrected,
            ideal_score: self.ideal_score,
            corrected_score: self.corrected_score,
        }
    }
}

/// Outcome of the margin-transfer test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferDecision {
    pub guaranteed: bool,
    pub ideal_margin: f64,
    pub b_sharp: f64,
    pub epsilon: f64,
    pub s: f64,
}

/// Guarantees `y_a f(x) > epsilon` when the ideal margin exceeds
/// `epsilon + s` and the certificate is at most `s`.
pub fn margin_transfer(b_sharp: f64, ideal_margin: f64, epsilon: f64, s: f64) -> TransferDecision {
    TransferDecision {
        guaranteed: b_sharp.is_finite() && b_sharp <= s && ideal_margin > epsilon + s,
        ideal_margin,
        b_sharp,
        epsilon,
        s,
    }
}

/// Per-contrast multiclass certificates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MulticlassReport {
    /// `(class l, report)` for every `l != y_a`.
    pub contrasts: Vec<(usize, CertificateReport)>,
    pub max_b_sharp: f64,
    pub u: f64,
}

/// Multiclass certificate: each contrast `v = e_{y_a} - e_l` is certified by
/// the binary budgets at ridge `lambda / 2` with signed block residual
/// `B v / 2`, at level `u_{delta,L}`.
pub fn certify_multiclass(
    model: &Model,
    sample: &SampleInputs,
    classes: &[usize],
    n_classes: usize,
    masses: &[f64],
    lambda: f64,
    delta: f64,
) -> Result<MulticlassReport> {
    let r = model.tmat.r();
    let u = u_delta_multiclass(r, delta, n_classes);
    let n: usize = sample.sizes.iter().sum();
    let p_hat: Vec<f64> = sample.sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let a = sample.test_template;
    let ya = classes[a];
    let rep = representative(sample.sizes, masses);
    let mut contrasts = Vec::new();
    if !rep {
        for l in (0..n_classes).filter(|&l| l != ya) {
            contrasts.push((l, unrepresentative(model, lambda / 2.0, u)));
        }
        return Ok(MulticlassReport {
            contrasts,
            max_b_sharp: f64::INFINITY,
            u,
        });
    }
    let fresh = klr::solve_softmax_ideal_psd(&model.tmat.n, &p_hat, lambda, classes, n_classes)?;
    let corr = klr::solve_softmax_ideal_psd(&model.n_circ, &p_hat, lambda, classes, n_classes)?;
    let slots = model.slots_at(sample.sizes, u);
    let mut max_b = 0.0f64;
    for l in (0..n_classes).filter(|&l| l != ya) {
        let contrast = |b: &Mat| Vector::from_fn(r, |i, _| (b[(i, ya)] - b[(i, l)]) / 2.0);
        let fd = BlockDual::from_signed(contrast(&fresh.b));
        let cd = BlockDual::from_signed(contrast(&corr.b));
        let ideal_score = fresh.g[(a, ya)] - fresh.g[(a, l)];
        let corrected_score = (0..r).map(|b| model.m_circ[b] * p_hat[b] * cd.beta[b]).sum::<f64>() / (lambda / 2.0);
        let rep = evaluate(
            model,
            sample,
            &DualInputs {
                fresh: &fd,
                corrected: &cd,
                ideal_score,
                corrected_score,
            },
            &slots,
            lambda / 2.0,
        )?;
        max_b = max_b.max(rep.b_sharp);
        contrasts.push((l, rep));
    }
    Ok(MulticlassReport {
        contrasts,
        max_b_sharp: max_b,
        u,
    })
}

/// Checks that a family's substitution law is a plain uniform or table law.
pub fn policy_name(scheme: &SubstitutionScheme) -> &'static str {
    match scheme.policy {
        Policy::UniformInjective => "uniform-injective",
        Policy::Table(_) => "table",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn score_functionals() {
        assert_eq!(score_ord(1.0, 0.1, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(score_curv(1.0, 2.0, 0.1, 0.0, 0.0, 0.0, 0.0), 0.0);
        assert!(score_curv(1.0, 2.0, 0.1, 0.1, 0.1, 0.1, 1.0).is_infinite());
        assert_abs_diff_eq!(score_ord(2.0, 0.5, 0.3, 0.0, 0.2), 2.0 * 0.3 / 1.0 + 0.4, epsilon = 1e-15);
    }

    #[test]
    fn envelopes_at_small_level_approach_rates() {
        let q = Mat::from_row_slice(2, 2, &[0.1, 0.2, 0.2, 0.05]);
        let qt = Vector::from_column_slice(&[0.0, 0.0]);
        let env = kl_envelopes(&q, &qt, &[30, 40], 0.0, 2.0, 1e-12);
        assert_abs_diff_eq!(env.e[(0, 1)], 2.0 * 0.2, epsilon = 1e-5);
        assert_eq!(env.x_star, 0.0);
        let single = kl_envelopes(&q, &qt, &[1, 40], 0.3, 2.0, 1.0);
        assert_abs_diff_eq!(single.e[(0, 0)], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn slots_vanish_without_signal() {
        let e = Mat::from_element(2, 2, 0.7);
        let t = Vector::from_element(2, 0.3);
        let (d, z) = weighted_slots(&Vector::from_element(2, 1.0), &Vector::zeros(2), &[0.5, 0.5], &e, &t);
        assert_eq!((d, z), (0.0, 0.0));
    }

    #[test]
    fn anova_envelope_shapes() {
        let mut comp = AnovaComponents::zeros(2, 0);
        comp.mu[(0, 1)] = 0.1;
        comp.mu[(1, 0)] = 0.1;
        let (a, t) = anova_envelopes(&comp, &[10, 10], 0.0, 1.0, 0.0, 4.0, false);
        assert_abs_diff_eq!(a[(0, 1)], 0.1 + 4.0 * (1.0 / 100.0), epsilon = 1e-15);
        assert_eq!(t[0], 0.0);
        let (a1, _) = anova_envelopes(&comp, &[1, 10], 0.25, 1.0, 2.0, 4.0, false);
        assert_eq!(a1[(0, 0)], 0.25);
    }

    #[test]
    fn tie_break_prefers_earlier_route() {
        let b = Budgets {
            cs: 1.0,
            deg: 1.0 - 1e-14,
            bd: 2.0,
            anova: 1.0,
            bf: 0.5,
        };
        assert_eq!(b.select(), (0.5, Some(Route::Bf)));
        let tied = Budgets { bf: 3.0, ..b };
        assert_eq!(tied.select().1, Some(Route::Cs));
        assert_eq!(Budgets::infinite().select().1, None);
    }

    #[test]
    fn transfer_rule() {
        assert!(margin_transfer(0.1, 1.2, 0.5, 0.5).guaranteed);
        assert!(!margin_transfer(0.1, 1.0, 0.5, 0.5).guaranteed);
        assert!(!margin_transfer(f64::INFINITY, 1.0, 0.5, 0.5).guaranteed);
        assert!(!margin_transfer(0.6, 1.0, 0.5, 0.5).guaranteed);
    }

    #[test]
    fn levels() {
        assert_abs_diff_eq!(u_delta(2, 0.1), (54.0f64 / 0.1).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(u_delta_multiclass(2, 0.1, 2), u_delta(2, 0.1), epsilon = 1e-15);
        assert_abs_diff_eq!(u_delta_multiclass(3, 0.1, 4), (3.0 * 114.0f64 / 0.1).ln(), epsilon = 1e-12);
    }
}
