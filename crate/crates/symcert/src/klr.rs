//! Kernel logistic regression through the entropy dual.
//!
//! The binary dual minimizes `(1/n) sum phi(c_i) + (1/(2 lambda n^2)) (y*c)' G (y*c)`
//! over `c in (0,1)^n`, with `phi(c) = c log c + (1-c) log(1-c)`. The same
//! weighted core also solves the ideal block problem, whose weights are the
//! empirical template masses. The multiclass dual replaces `phi` by the
//! negative entropy of a probability row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Newton settings shared by every dual solver.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stopping threshold on the gradient sup-norm.
    pub tol: f64,
    pub max_iters: usize,
    /// Step shrink factor of the backtracking line search.
    pub backtrack: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iters: 200,
            backtrack: 0.5,
        }
    }
}

/// Minimizer of a binary entropy dual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualSolution {
    pub c: Vector,
    pub objective: f64,
    /// Sup-norm of the gradient at `c` (the KKT residual).
    pub grad_norm: f64,
    pub iters: usize,
}

/// Binary logistic loss `log(1 + e^{-t})`, overflow-safe.
pub fn logistic_loss(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli negative entropy `c log c + (1-c) log(1-c)`.
pub fn neg_entropy(c: f64) -> f64 {
    let xlx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    xlx(c) + xlx(1.0 - c)
}

/// `phi''(c) = 1/c + 1/(1-c)`.
pub fn neg_entropy_curvature(c: f64) -> f64 {
    1.0 / (c * (1.0 - c))
}

/// Weighted binary core: minimize `sum w_i phi(c_i) + (1/2) (y*c)' S (y*c)`
/// over the open cube, parametrized by logits `c = sigmoid(t)`.
///
/// Coordinates with zero weight and a zero row of `S` are left at `1/2`.
fn solve_weighted(w: &[f64], s: &Mat, y: &[f64], cfg: &SolverConfig) -> Result<DualSolution> {
    let n = w.len();
    if s.nrows() != n || s.ncols() != n || y.len() != n {
        return Err(Error::Dimension(format!(
            "weights {n}, matrix {}x{}, labels {}",
            s.nrows(),
            s.ncols(),
            y.len()
        )));
    }
    let active: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    let m = active.len();
    let sa = Mat::from_fn(m, m, |i, j| s[(active[i], active[j])]);
    let wa: Vec<f64> = active.iter().map(|&i| w[i]).collect();
    let ya: Vec<f64> = active.iter().map(|&i| y[i]).collect();

    let objective = |t: &[f64]| -> f64 {
        let c: Vec<f64> = t.iter().map(|&x| sigmoid(x)).collect();
        let yc = Vector::from_iterator(m, c.iter().zip(&ya).map(|(c, y)| c * y));
        let ent: f64 = c.iter().zip(&wa).map(|(c, w)| w * neg_entropy(*c)).sum();
        ent + 0.5 * yc.dot(&(&sa * &yc))
    };
    // gradient in c: w_i t_i + y_i (S (y*c))_i, since phi'(c) = logit(c) = t
    let gradient = |t: &[f64]| -> (Vec<f64>, Vector) {
        let c: Vec<f64> = t.iter().map(|&x| sigmoid(x)).collect();
        let yc = Vector::from_iterator(m, c.iter().zip(&ya).map(|(c, y)| c * y));
        let syc = &sa * &yc;
        let g = Vector::from_fn(m, |i, _| wa[i] * t[i] + ya[i] * syc[i]);
        (c, g)
    };

    let mut t = vec![0.0; m];
    let mut f = objective(&t);
    let (mut c, mut g) = gradient(&t);
    let mut gnorm = linalg::sup_norm(&g);
    let mut iters = 0;
    while gnorm > cfg.tol {
        if iters >= cfg.max_iters {
            return Err(Error::NonConvergence { iters, residual: gnorm });
        }
        iters += 1;
        let mut h = Mat::from_fn(m, m, |i, j| ya[i] * ya[j] * sa[(i, j)]);
        for i in 0..m {
            h[(i, i)] += wa[i] * neg_entropy_curvature(c[i]);
        }
        let dc = -linalg::solve_spd(&h, &g)?;
        // logit-space step from the first-order map dt = dc / (c (1-c))
        let dt: Vec<f64> = (0..m).map(|i| dc[i] / (c[i] * (1.0 - c[i]))).collect();
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = t.iter().zip(&dt).map(|(t, d)| t + step * d).collect();
            let fc = objective(&cand);
            let (cc, gc) = gradient(&cand);
            let gc_norm = linalg::sup_norm(&gc);
            // near the optimum objective differences drown in rounding, so a
            // decrease of the gradient also accepts the step
            if fc <= f + 1e-15 * f.abs().max(1.0) || gc_norm < gnorm || step < 1e-12 {
                t = cand;
                f = fc;
                c = cc;
                g = gc;
                gnorm = gc_norm;
                break;
            }
            step *= cfg.backtrack;
        }
    }
    let mut full = Vector::from_element(n, 0.5);
    for (k, &i) in active.iter().enumerate() {
        full[i] = c[k];
    }
    Ok(DualSolution {
        c: full,
        objective: f,
        grad_norm: gnorm,
        iters,
    })
}

/// Solves the sample dual for Gram `g`, labels `y` in {-1, +1} and ridge `lambda`.
pub fn solve_dual(g: &Mat, y: &Vector, lambda: f64) -> Result<DualSolution> {
    solve_dual_with(g, y, lambda, &SolverConfig::default())
}

pub fn solve_dual_with(g: &Mat, y: &Vector, lambda: f64, cfg: &SolverConfig) -> Result<DualSolution> {
    if lambda <= 0.0 {
        return Err(Error::Invalid(format!("lambda must be positive, got {lambda}")));
    }
    let n = g.nrows();
    if n == 0 {
        return Err(Error::Invalid("empty Gram matrix".into()));
    }
    linalg::check_psd(g, 1e-9)?;
    let nf = n as f64;
    let s = g / (lambda * nf * nf);
    let w = vec![1.0 / nf; n];
    solve_weighted(&w, &s, y.as_slice(), cfg)
}

/// Gradient of the sample dual at `c`; its sup-norm is the KKT residual.
pub fn dual_gradient(g: &Mat, y: &Vector, lambda: f64, c: &Vector) -> Vector {
    let n = c.len() as f64;
    let yc = y.component_mul(c);
    let gyc = g * &yc;
    Vector::from_fn(c.len(), |i, _| (c[i] / (1.0 - c[i])).ln() / n + y[i] * gyc[i] / (lambda * n * n))
}

/// Fitted score `(1/(lambda n)) k'(y*c)`.
pub fn primal_score(c: &Vector, y: &Vector, k: &Vector, lambda: f64) -> Result<f64> {
    if c.len() != y.len() || c.len() != k.len() {
        return Err(Error::Dimension(format!("c {}, y {}, k {}", c.len(), y.len(), k.len())));
    }
    let n = c.len() as f64;
    Ok(k.dot(&y.component_mul(c)) / (lambda * n))
}

/// Fitted scores at the training points, `(1/(lambda n)) G (y*c)`.
pub fn training_scores(g: &Mat, c: &Vector, y: &Vector, lambda: f64) -> Vector {
    let n = c.len() as f64;
    (g * y.component_mul(c)) / (lambda * n)
}

/// Minimizer of the ideal template problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdealScore {
    /// Ideal template scores `g`.
    pub g: Vector,
    /// Block dual coordinates; `1/2` on empty blocks.
    pub theta: Vector,
    /// Signed coordinates `y * theta`.
    pub beta: Vector,
    /// `min_a y_a g_a` over nonempty blocks.
    pub margin: f64,
    /// Sup-norm of `q*y*l'(y*g) + lambda N^{-1} g`.
    pub stationarity: f64,
    pub iters: usize,
}

/// Solves the ideal problem `sum_a q_a l(y_a g_a) + (lambda/2) g' N^{-1} g`
/// through its block dual and maps back by `g = (1/lambda) N Q beta`.
pub fn solve_ideal(n: &Mat, q: &[f64], lambda: f64, y: &[f64]) -> Result<IdealScore> {
    if n.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    solve_ideal_psd(n, q, lambda, y)
}

/// Same as [`solve_ideal`] for a merely symmetric `N`; the stationarity
/// residual is `NaN` when `N` is singular.
pub fn solve_ideal_psd(n: &Mat, q: &[f64], lambda: f64, y: &[f64]) -> Result<IdealScore> {
    let r = n.nrows();
    if q.len() != r || y.len() != r {
        return Err(Error::Dimension(format!("N is {r}x{r}, q {}, y {}", q.len(), y.len())));
    }
    if lambda <= 0.0 {
        return Err(Error::Invalid(format!("lambda must be positive, got {lambda}")));
    }
    let qm = Mat::from_diagonal(&Vector::from_column_slice(q));
    let s = &qm * n * &qm / lambda;
    let sol = solve_weighted(q, &s, y, &SolverConfig::default())?;
    let theta = sol.c;
    let beta = Vector::from_fn(r, |a, _| y[a] * theta[a]);
    let g = n * (&qm * &beta) / lambda;
    let margin = (0..r).filter(|&a| q[a] > 0.0).map(|a| y[a] * g[a]).fold(f64::INFINITY, f64::min);
    let stationarity = match n.clone().try_inverse() {
        Some(n_inv) => {
            let ng = &n_inv * &g;
            // l'(t) = -sigmoid(-t)
            let stat = Vector::from_fn(r, |a, _| -q[a] * y[a] * sigmoid(-y[a] * g[a]) + lambda * ng[a]);
            linalg::sup_norm(&stat)
        }
        None => f64::NAN,
    };
    Ok(IdealScore {
        margin,
        stationarity,
        iters: sol.iters,
        g,
        theta,
        beta,
    })
}

/// Result of comparing the sample dual on `M_n` with the ideal problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockReductionReport {
    pub sample_score: f64,
    pub ideal_score: f64,
    pub gap: f64,
    /// Largest spread of `c` within one block.
    pub block_spread: f64,
}

/// Solves the sample dual on `M_n = P N P'` and the ideal problem, and
/// compares the fresh-test scores for template `a`.
pub fn block_reduction_check(n: &Mat, colors: &[usize], lambda: f64, y: &[f64], a: usize) -> Result<BlockReductionReport> {
    let r = n.nrows();
    let nn = colors.len();
    let mut sizes = vec![0usize; r];
    for &c in colors {
        sizes[c] += 1;
    }
    if let Some(b) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyBlock(b));
    }
    let m_n = linalg::expand_blocks(n, colors);
    let ys = Vector::from_iterator(nn, colors.iter().map(|&c| y[c]));
    let sol = solve_dual(&m_n, &ys, lambda)?;
    let m_a = Vector::from_iterator(nn, colors.iter().map(|&c| n[(a, c)]));
    let sample_score = primal_score(&sol.c, &ys, &m_a, lambda)?;
    let q: Vec<f64> = sizes.iter().map(|&s| s as f64 / nn as f64).collect();
    let ideal = solve_ideal(n, &q, lambda, y)?;
    let mut lo = vec![f64::INFINITY; r];
    let mut hi = vec![f64::NEG_INFINITY; r];
    for (i, &c) in colors.iter().enumerate() {
        lo[c] = lo[c].min(sol.c[i]);
        hi[c] = hi[c].max(sol.c[i]);
    }
    let block_spread = (0..r).map(|b| hi[b] - lo[b]).fold(0.0, f64::max);
    Ok(BlockReductionReport {
        sample_score,
        ideal_score: ideal.g[a],
        gap: (sample_score - ideal.g[a]).abs(),
        block_spread,
    })
}

/// `R_*^2 = min { h' (Y N^{-1} Y) h : h >= 1 }`, the squared RKHS radius of
/// the cheapest unit-margin template score vector.
pub fn unit_margin_radius(n: &Mat, y: &[f64]) -> Result<f64> {
    let r = n.nrows();
    let n_inv = linalg::inverse_spd(n)?;
    let a = Mat::from_fn(r, r, |i, j| y[i] * y[j] * n_inv[(i, j)]);
    if r <= 12 {
        Ok(active_set_qp(&a))
    } else {
        Ok(projected_gradient_qp(&a))
    }
}

/// Exhaustive active-set solve of `min h'Ah` subject to `h >= 1`: every
/// candidate fixes a subset at 1 and minimizes over the rest; the best
/// feasible candidate is optimal.
fn active_set_qp(a: &Mat) -> f64 {
    let r = a.nrows();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1u32 << r) {
        let fixed: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
        let free: Vec<usize> = (0..r).filter(|i| mask & (1 << i) == 0).collect();
        let mut h = Vector::from_element(r, 1.0);
        if !free.is_empty() {
            let aff = Mat::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])]);
            let rhs = Vector::from_fn(free.len(), |i, _| -fixed.iter().map(|&k| a[(free[i], k)]).sum::<f64>());
            let Ok(hf) = linalg::solve_spd(&aff, &rhs) else { continue };
            if hf.iter().any(|&v| v < 1.0 - 1e-12) {
                continue;
            }
            for (k, &i) in free.iter().enumerate() {
                h[i] = hf[k];
            }
        }
        best = best.min(h.dot(&(a * &h)));
    }
    best
}

fn projected_gradient_qp(a: &Mat) -> f64 {
    let r = a.nrows();
    let step = 1.0 / linalg::sym_op_norm(a).max(1e-300);
    let mut h = Vector::from_element(r, 1.0);
    for _ in 0..100_000 {
        let grad = a * &h * 2.0;
        let next = (&h - grad * (0.5 * step)).map(|v| v.max(1.0));
        let moved = (&next - &h).amax();
        h = next;
        if moved < 1e-14 {
            break;
        }
    }
    h.dot(&(a * &h))
}

/// Ridge threshold below which the ideal margin exceeds `gamma`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaThreshold {
    pub lambda: f64,
    pub radius_sq: f64,
    pub t: f64,
}

/// `lambda_Gamma = 2 (p l(Gamma) - l(t)) / (t^2 R_*^2)` with `t` the smallest
/// power of two above `gamma` whose loss is below half of `p l(Gamma)`.
pub fn lambda_threshold(gamma: f64, p_lower: f64, n: &Mat, y: &[f64]) -> Result<LambdaThreshold> {
    let radius_sq = unit_margin_radius(n, y)?;
    assert!(radius_sq.is_finite() && radius_sq > 0.0, "g = y is always feasible");
    let target = p_lower * logistic_loss(gamma);
    let t = (0..=40)
        .map(|k| 2f64.powi(k))
        .find(|&t| t > gamma && logistic_loss(t) < target / 2.0)
        .ok_or_else(|| Error::Invalid(format!("no grid point t <= 2^40 satisfies the loss condition for Gamma = {gamma}")))?;
    Ok(LambdaThreshold {
        lambda: 2.0 * (target - logistic_loss(t)) / (t * t * radius_sq),
        radius_sq,
        t,
    })
}

// ---------------------------------------------------------------------------
// Multiclass

/// Minimizer of a softmax entropy dual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoftmaxDual {
    /// Row-stochastic dual matrix.
    pub p: Mat,
    pub objective: f64,
    /// Sup-norm of the reduced gradient.
    pub grad_norm: f64,
    pub iters: usize,
}

fn one_hot(labels: &[usize], l: usize) -> Mat {
    let mut e = Mat::zeros(labels.len(), l);
    for (i, &c) in labels.iter().enumerate() {
        e[(i, c)] = 1.0;
    }
    e
}

fn softmax_row(t: &[f64]) -> Vec<f64> {
    let mx = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = t.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Weighted softmax core: minimize `sum w_i psi(P_i) + (1/2) tr(R' S R)` with
/// `R = E - P`, by Newton on the sum-zero tangent space of each row.
fn solve_softmax_weighted(w: &[f64], s: &Mat, e: &Mat, cfg: &SolverConfig) -> Result<SoftmaxDual> {
    let n = w.len();
    let l = e.ncols();
    let active: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    let m = active.len();
    let sa = Mat::from_fn(m, m, |i, j| s[(active[i], active[j])]);
    let ea = Mat::from_fn(m, l, |i, k| e[(active[i], k)]);
    let wa: Vec<f64> = active.iter().map(|&i| w[i]).collect();
    let rows = |t: &Mat| -> Mat {
        let mut p = Mat::zeros(m, l);
        for i in 0..m {
            let row: Vec<f64> = (0..l).map(|k| t[(i, k)]).collect();
            for (k, v) in softmax_row(&row).into_iter().enumerate() {
                p[(i, k)] = v;
            }
        }
        p
    };
    let objective = |p: &Mat| -> f64 {
        let ent: f64 = (0..m)
            .map(|i| {
                wa[i]
                    * (0..l)
                        .map(|k| if p[(i, k)] > 0.0 { p[(i, k)] * p[(i, k)].ln() } else { 0.0 })
                        .sum::<f64>()
            })
            .sum();
        let r = &ea - p;
        ent + 0.5 * (r.transpose() * &sa * &r).trace()
    };
    // reduced gradient with respect to the basis e_k - e_L, k < L
    let gradient = |p: &Mat| -> Vector {
        let r = &ea - p;
        let sr = &sa * &r;
        let full = Mat::from_fn(m, l, |i, k| wa[i] * (p[(i, k)].ln() + 1.0) - sr[(i, k)]);
        Vector::from_fn(m * (l - 1), |idx, _| {
            let (i, k) = (idx / (l - 1), idx % (l - 1));
            full[(i, k)] - full[(i, l - 1)]
        })
    };
    let mut t = Mat::zeros(m, l);
    let mut p = rows(&t);
    let mut f = objective(&p);
    let mut g = gradient(&p);
    let mut gnorm = linalg::sup_norm(&g);
    let mut iters = 0;
    let d = l - 1;
    while gnorm > cfg.tol {
        if iters >= cfg.max_iters {
            return Err(Error::NonConvergence { iters, residual: gnorm });
        }
        iters += 1;
        // Hessian in P coordinates is diag(w_i / P_ik) + S (x) I_L; reduce by Z
        let mut h = Mat::zeros(m * d, m * d);
        for i in 0..m {
            for j in 0..m {
                for a in 0..d {
                    for b in 0..d {
                        let zz = if a == b { 2.0 } else { 1.0 };
                        let mut v = sa[(i, j)] * zz;
                        if i == j {
                            v += wa[i] * (if a == b { 1.0 / p[(i, a)] } else { 0.0 } + 1.0 / p[(i, l - 1)]);
                        }
                        h[(i * d + a, j * d + b)] = v;
                    }
                }
            }
        }
        let dz = -linalg::solve_spd(&h, &g)?;
        let dp = Mat::from_fn(m, l, |i, k| {
            if k < d {
                dz[i * d + k]
            } else {
                -(0..d).map(|a| dz[i * d + a]).sum::<f64>()
            }
        });
        let dt = Mat::from_fn(m, l, |i, k| dp[(i, k)] / p[(i, k)]);
        let mut step = 1.0;
        loop {
            let cand = &t + &dt * step;
            let pc = rows(&cand);
            let fc = objective(&pc);
            let gc = gradient(&pc);
            let gc_norm = linalg::sup_norm(&gc);
            if fc <= f + 1e-15 * f.abs().max(1.0) || gc_norm < gnorm || step < 1e-12 {
                t = cand;
                p = pc;
                f = fc;
                g = gc;
                gnorm = gc_norm;
                break;
            }
            step *= cfg.backtrack;
        }
    }
    let mut full = Mat::from_element(n, l, 1.0 / l as f64);
    for (k, &i) in active.iter().enumerate() {
        for c in 0..l {
            full[(i, c)] = p[(k, c)];
        }
    }
    Ok(SoftmaxDual {
        p: full,
        objective: f,
        grad_norm: gnorm,
        iters,
    })
}

/// Solves the multiclass sample dual for class labels in `0..l`.
pub fn solve_softmax_dual(g: &Mat, labels: &[usize], l: usize, lambda: f64) -> Result<SoftmaxDual> {
    if l < 2 {
        return Err(Error::Invalid("at least two classes are required".into()));
    }
    if lambda <= 0.0 {
        return Err(Error::Invalid(format!("lambda must be positive, got {lambda}")));
    }
    let n = g.nrows();
    if labels.len() != n || labels.iter().any(|&c| c >= l) {
        return Err(Error::Dimension("labels must have one class in 0..L per sample".into()));
    }
    linalg::check_psd(g, 1e-9)?;
    let nf = n as f64;
    let s = g / (lambda * nf * nf);
    solve_softmax_weighted(&vec![1.0 / nf; n], &s, &one_hot(labels, l), &SolverConfig::default())
}

/// Score vector `(1/(lambda n)) R(P)' k`.
pub fn softmax_scores(p: &Mat, labels: &[usize], k: &Vector, lambda: f64) -> Vector {
    let n = p.nrows() as f64;
    let r = one_hot(labels, p.ncols()) - p;
    r.transpose() * k / (lambda * n)
}

/// Ideal multiclass solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoftmaxIdeal {
    pub theta: Mat,
    /// `B = E_y - Theta`.
    pub b: Mat,
    /// Quotient scores `(1/lambda) N Q B`.
    pub g: Mat,
    /// Sup-norm of `Q(softmax(G) - E_y) + lambda N^{-1} G`.
    pub stationarity: f64,
    /// `min_a min_{l != y_a} G_{a,y_a} - G_{a,l}` over nonempty blocks.
    pub margin: f64,
}

pub fn solve_softmax_ideal(n: &Mat, q: &[f64], lambda: f64, labels: &[usize], l: usize) -> Result<SoftmaxIdeal> {
    if n.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    solve_softmax_ideal_psd(n, q, lambda, labels, l)
}

/// Same as [`solve_softmax_ideal`] for a merely symmetric `N`; the
/// stationarity residual is `NaN` when `N` is singular.
pub fn solve_softmax_ideal_psd(n: &Mat, q: &[f64], lambda: f64, labels: &[usize], l: usize) -> Result<SoftmaxIdeal> {
    let r = n.nrows();
    if q.len() != r || labels.len() != r {
        return Err(Error::Dimension(format!("N is {r}x{r}, q {}, labels {}", q.len(), labels.len())));
    }
    let qm = Mat::from_diagonal(&Vector::from_column_slice(q));
    let s = &qm * n * &qm / lambda;
    let e = one_hot(labels, l);
    let sol = solve_softmax_weighted(q, &s, &e, &SolverConfig::default())?;
    let b = &e - &sol.p;
    let g = n * &qm * &b / lambda;
    let mut sm = Mat::zeros(r, l);
    for a in 0..r {
        let row: Vec<f64> = (0..l).map(|k| g[(a, k)]).collect();
        for (k, v) in softmax_row(&row).into_iter().enumerate() {
            sm[(a, k)] = v;
        }
    }
    let stationarity = match n.clone().try_inverse() {
        Some(n_inv) => (&qm * (sm - &e) + &n_inv * &g * lambda).amax(),
        None => f64::NAN,
    };
    let margin = (0..r)
        .filter(|&a| q[a] > 0.0)
        .flat_map(|a| {
            let g = &g;
            (0..l).filter(move |&k| k != labels[a]).map(move |k| g[(a, labels[a])] - g[(a, k)])
        })
        .fold(f64::INFINITY, f64::min);
    Ok(SoftmaxIdeal {
        theta: sol.p,
        b,
        g,
        stationarity,
        margin,
    })
}

// ---------------------------------------------------------------------------
// Deterministic perturbation bounds

/// `kappa^2 ||G - M||_op / (4 lambda^2 n) + ||k - m||_2 / (lambda sqrt n)`.
pub fn stability_bound(g: &Mat, m: &Mat, k: &Vector, mv: &Vector, lambda: f64, kappa_sq: f64) -> f64 {
    let n = g.nrows() as f64;
    kappa_sq * linalg::sym_op_norm(&(g - m)) / (4.0 * lambda * lambda * n) + (k - mv).norm() / (lambda * n.sqrt())
}

/// Components of the curvature-spectral perturbation bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureTerms {
    pub gamma: f64,
    /// `|zeta' Y c_M| / (lambda n)`.
    pub direct: f64,
    pub e_m: f64,
    pub e_zeta: f64,
    /// Sum of the three terms; infinite when `gamma >= 1`.
    pub bound: f64,
}

/// `E_M(a; b) = (|a'C^{-1}b| + sqrt(a'C^{-1}a) sqrt(b'C^{-1}b)) / (2 (1 - gamma))`.
pub fn curvature_envelope(c_inv: &Mat, a: &Vector, b: &Vector, gamma: f64) -> f64 {
    if gamma >= 1.0 {
        return f64::INFINITY;
    }
    let cia = c_inv * a;
    let cib = c_inv * b;
    (a.dot(&cib).abs() + a.dot(&cia).max(0.0).sqrt() * b.dot(&cib).max(0.0).sqrt()) / (2.0 * (1.0 - gamma))
}

/// The curvature operator `C_M = (4/n) I + Y M Y / (lambda n^2)`.
pub fn curvature_operator(m: &Mat, y: &Vector, lambda: f64) -> Mat {
    let n = m.nrows();
    let nf = n as f64;
    let mut c = Mat::from_fn(n, n, |i, j| y[i] * y[j] * m[(i, j)] / (lambda * nf * nf));
    for i in 0..n {
        c[(i, i)] += 4.0 / nf;
    }
    c
}

/// `||C^{-1/2} E C^{-1/2}||_op` for `E = Y Delta Y / (lambda n^2)`.
pub fn relative_curvature(c_m: &Mat, delta: &Mat, y: &Vector, lambda: f64) -> f64 {
    let n = delta.nrows();
    let nf = n as f64;
    let e = Mat::from_fn(n, n, |i, j| y[i] * y[j] * delta[(i, j)] / (lambda * nf * nf));
    let half = linalg::inv_sqrt_spd(c_m, 4.0 / nf - 1e-12);
    linalg::sym_op_norm(&(&half * e * &half))
}

/// Evaluates the curvature-spectral bound for the score difference between
/// `(G, k)` and `(M, m)`.
pub fn curvature_error(g: &Mat, m: &Mat, k: &Vector, mv: &Vector, lambda: f64, y: &Vector) -> Result<CurvatureTerms> {
    let c_m = solve_dual(m, y, lambda)?.c;
    Ok(curvature_error_at(g, m, k, mv, lambda, y, &c_m))
}

/// As [`curvature_error`] with a precomputed dual minimizer `c_m` of `M`.
pub fn curvature_error_at(g: &Mat, m: &Mat, k: &Vector, mv: &Vector, lambda: f64, y: &Vector, c_m: &Vector) -> CurvatureTerms {
    let n = g.nrows();
    let nf = n as f64;
    let delta = g - m;
    let cop = curvature_operator(m, y, lambda);
    let gamma = relative_curvature(&cop, &delta, y, lambda);
    let yc = y.component_mul(c_m);
    let b = Vector::from_fn(n, |i, _| y[i] * (&delta * &yc)[i] / (lambda * nf * nf));
    let zeta = k - mv;
    let a_m = y.component_mul(mv) / (lambda * nf);
    let a_z = y.component_mul(&zeta) / (lambda * nf);
    let c_inv = linalg::inverse_spd(&cop).expect("C_M is positive definite");
    let direct = zeta.dot(&yc).abs() / (lambda * nf);
    let e_m = curvature_envelope(&c_inv, &a_m, &b, gamma);
    let e_zeta = curvature_envelope(&c_inv, &a_z, &b, gamma);
    CurvatureTerms {
        gamma,
        direct,
        e_m,
        e_zeta,
        bound: direct + e_m + e_zeta,
    }
}

/// Both sides of the three template identities for the curvature quadratic forms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateIdentities {
    pub amm: (f64, f64),
    pub amb: (f64, f64),
    pub bb: (f64, f64),
}

impl TemplateIdentities {
    pub fn max_gap(&self) -> f64 {
        [self.amm, self.amb, self.bb].iter().map(|(l, r)| (l - r).abs()).fold(0.0, f64::max)
    }
}

/// Checks the quotient forms of `a_m'C^{-1}a_m`, `a_m'C^{-1}b` and `b'C^{-1}b`
/// for `M = M_n`, `m = m_a`, `c_M = P theta` and a Gram perturbation `delta`.
pub fn template_identities(n_mat: &Mat, colors: &[usize], y_r: &[f64], delta: &Mat, lambda: f64, a: usize) -> Result<TemplateIdentities> {
    let r = n_mat.nrows();
    let n = colors.len();
    let nf = n as f64;
    let mut sizes = vec![0usize; r];
    for &c in colors {
        sizes[c] += 1;
    }
    if let Some(b) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyBlock(b));
    }
    let q: Vec<f64> = sizes.iter().map(|&s| s as f64 / nf).collect();
    let ideal = solve_ideal(n_mat, &q, lambda, y_r)?;
    let m_n = linalg::expand_blocks(n_mat, colors);
    let y = Vector::from_iterator(n, colors.iter().map(|&c| y_r[c]));
    let c_m = Vector::from_iterator(n, colors.iter().map(|&c| ideal.theta[c]));
    let m_a = Vector::from_iterator(n, colors.iter().map(|&c| n_mat[(a, c)]));
    let cop = curvature_operator(&m_n, &y, lambda);
    let c_inv = linalg::inverse_spd(&cop)?;
    let a_m = y.component_mul(&m_a) / (lambda * nf);
    let yc = y.component_mul(&c_m);
    let dyc = delta * &yc;
    let b = Vector::from_fn(n, |i, _| y[i] * dyc[i] / (lambda * nf * nf));

    // quotient side
    let mut dbar = Mat::zeros(r, r);
    for i in 0..n {
        for j in 0..n {
            dbar[(colors[i], colors[j])] += delta[(i, j)];
        }
    }
    for bb in 0..r {
        for cc in 0..r {
            dbar[(bb, cc)] /= (sizes[bb] * sizes[cc]) as f64;
        }
    }
    let qbeta = Vector::from_fn(r, |c, _| q[c] * ideal.beta[c]);
    let db = &dbar * qbeta;
    let g_delta = Vector::from_fn(r, |c, _| y_r[c] * db[c]);
    let s_a = Vector::from_fn(r, |c, _| y_r[c] * n_mat[(a, c)]);
    let qh = Vector::from_iterator(r, q.iter().map(|v| v.sqrt()));
    let mut a0 = Mat::from_fn(r, r, |i, j| y_r[i] * qh[i] * n_mat[(i, j)] * qh[j] * y_r[j] / lambda);
    for i in 0..r {
        a0[(i, i)] += 4.0;
    }
    let a0_inv = linalg::inverse_spd(&a0)?;
    let r0 = Mat::from_fn(r, r, |i, j| qh[i] * a0_inv[(i, j)] * qh[j]);
    let bbar = &g_delta / (lambda * nf);
    let b_perp = Vector::from_fn(n, |i, _| b[i] - bbar[colors[i]]);
    let l2 = lambda * lambda;
    Ok(TemplateIdentities {
        amm: (a_m.dot(&(&c_inv * &a_m)), s_a.dot(&(&r0 * &s_a)) / l2),
        amb: (a_m.dot(&(&c_inv * &b)), s_a.dot(&(&r0 * &g_delta)) / l2),
        bb: (
            b.dot(&(&c_inv * &b)),
            g_delta.dot(&(&r0 * &g_delta)) / l2 + nf / 4.0 * b_perp.norm_squared(),
        ),
    })
}
