//! First-order effect of an abstraction prompt on the ideal template margin.
//!
//! A prompt of strength `eta` changes the template matrix to
//! `N_eta = N + eta H + o(eta)`. The ideal scorer then moves by
//! `lambda J_0^{-1} N^{-1} H N^{-1} g_0`, where `J_0` is the Hessian of the
//! ideal objective at `g_0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{joint_pattern, Kernel};
use crate::klr::{self, sigmoid};
use crate::linalg::{self, Mat, Vector};
use crate::task::{Split, SubstitutionScheme, TemplateFamily, Token};
use crate::transformer::{trans_kernel_limit, AttnConfig, SeqGrams};

/// Second derivative of the logistic loss, `sigmoid(t) sigmoid(-t)`.
pub fn logistic_curvature(t: f64) -> f64 {
    sigmoid(t) * sigmoid(-t)
}

/// Ideal scorer polished by Newton steps on the primal stationarity
/// equation, to near machine precision.
pub fn ideal_scores(n: &Mat, q: &[f64], lambda: f64, y: &[f64]) -> Result<Vector> {
    let r = n.nrows();
    let n_inv = linalg::inverse_spd(n)?;
    let mut g = klr::solve_ideal(n, q, lambda, y)?.g;
    for _ in 0..8 {
        let grad = Vector::from_fn(r, |a, _| -q[a] * y[a] * sigmoid(-y[a] * g[a])) + &n_inv * &g * lambda;
        let mut j = &n_inv * lambda;
        for a in 0..r {
            j[(a, a)] += q[a] * logistic_curvature(y[a] * g[a]);
        }
        let step = j.lu().solve(&grad).ok_or(Error::NotPositiveDefinite)?;
        g -= &step;
        if step.amax() <= 1e-16 * g.amax().max(1.0) {
            break;
        }
    }
    Ok(g)
}

/// Derivative of the ideal scorer and the per-template margin gains.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptReport {
    pub g0: Vector,
    pub j0: Mat,
    pub derivative: Vector,
    /// `C_a(H) = y_a e_a' derivative`.
    pub gains: Vec<f64>,
}

/// `d g_eta / d eta` at zero for the direction `H` (symmetrized first).
pub fn margin_derivative(n: &Mat, h: &Mat, q: &[f64], lambda: f64, y: &[f64]) -> Result<PromptReport> {
    let r = n.nrows();
    if h.shape() != (r, r) {
        return Err(Error::Dimension(format!("N is {r}x{r}, H is {:?}", h.shape())));
    }
    let h = linalg::symmetrize(h);
    let g0 = ideal_scores(n, q, lambda, y)?;
    let n_inv = linalg::inverse_spd(n)?;
    let mut j0 = &n_inv * lambda;
    for a in 0..r {
        j0[(a, a)] += q[a] * logistic_curvature(y[a] * g0[a]);
    }
    let rhs = &n_inv * (&h * (&n_inv * &g0)) * lambda;
    let derivative = linalg::solve_spd(&j0, &rhs)?;
    let gains = (0..r).map(|a| y[a] * derivative[a]).collect();
    Ok(PromptReport { g0, j0, derivative, gains })
}

/// One step of the finite-difference comparison.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FdPoint {
    pub eta: f64,
    /// `||fd - formula|| / ||formula||`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdReport {
    pub points: Vec<FdPoint>,
    pub max_rel_error: f64,
    /// Error ratio between consecutive grid points; about `(eta_1/eta_2)^2`
    /// for a second-order scheme.
    pub ratios: Vec<f64>,
}

/// Central differences `(g_{+eta} - g_{-eta}) / (2 eta)` against the formula.
pub fn fd_check(n: &Mat, h: &Mat, q: &[f64], lambda: f64, y: &[f64], etas: &[f64]) -> Result<FdReport> {
    let rep = margin_derivative(n, h, q, lambda, y)?;
    let h = linalg::symmetrize(h);
    let norm = rep.derivative.norm();
    let mut points = Vec::with_capacity(etas.len());
    for &eta in etas {
        let plus = ideal_scores(&(n + &h * eta), q, lambda, y)?;
        let minus = ideal_scores(&(n - &h * eta), q, lambda, y)?;
        let fd = (plus - minus) / (2.0 * eta);
        let err = (&fd - &rep.derivative).norm();
        points.push(FdPoint {
            eta,
            rel_error: if norm > 0.0 { err / norm } else { err },
        });
    }
    let ratios = points.windows(2).map(|w| w[0].rel_error / w[1].rel_error).collect();
    Ok(FdReport {
        max_rel_error: points.iter().map(|p| p.rel_error).fold(0.0, f64::max),
        points,
        ratios,
    })
}

/// Derivative of the certified margin `y_a g_eta - B_eta` from a gain and a
/// central difference of the certificate.
pub fn certified_margin_derivative(gain: f64, b_plus: f64, b_minus: f64, eta: f64) -> f64 {
    gain - (b_plus - b_minus) / (2.0 * eta)
}

// ---------------------------------------------------------------------------
// Estimating H from a prompted kernel

/// Kernel on augmented inputs `(x, a)` indexed by the prompt strength.
pub trait PromptedKernel: Sync {
    fn eval(&self, eta: f64, x: &[Token], ax: &[Token], y: &[Token], ay: &[Token]) -> f64;
    /// The kernel without any prompt.
    fn base(&self, x: &[Token], y: &[Token]) -> f64;
}

/// Abstraction channel `A ~ nu_a(. | x)`.
pub trait AbstractionChannel: Sync {
    fn sample(&self, x: &[Token], template: usize, rng: &mut ChaCha8Rng) -> Vec<Token>;
}

/// Base of the abstraction vocabulary, disjoint from concrete tokens.
pub const ABSTRACT_BASE: Token = 1 << 30;

/// Emits the equality pattern of `x` as abstract placeholder tokens, replacing
/// each position by a uniformly random placeholder with probability `noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternChannel {
    pub noise: f64,
}

impl AbstractionChannel for PatternChannel {
    fn sample(&self, x: &[Token], _template: usize, rng: &mut ChaCha8Rng) -> Vec<Token> {
        joint_pattern(x, &[])
            .into_iter()
            .map(|p| {
                let p = if self.noise > 0.0 && rng.random::<f64>() < self.noise {
                    rng.random_range(0..x.len() as u32)
                } else {
                    p
                };
                ABSTRACT_BASE + p as Token
            })
            .collect()
    }
}

/// `K + eta E` for a base kernel `K` and a perturbation kernel `E` on the
/// abstractions.
pub struct AdditivePrompt<K, E> {
    pub base: K,
    pub perturbation: E,
}

impl<K: Kernel, E: Kernel> PromptedKernel for AdditivePrompt<K, E> {
    fn eval(&self, eta: f64, x: &[Token], ax: &[Token], y: &[Token], ay: &[Token]) -> f64 {
        self.base.eval(x, y) + eta * self.perturbation.eval(ax, ay)
    }
    fn base(&self, x: &[Token], y: &[Token]) -> f64 {
        self.base.eval(x, y)
    }
}

/// Transformer kernel limit on the gated embedding: position `i` carries
/// `e_{x_i}` plus `sqrt(eta) e_{a_i}` on a disjoint abstraction vocabulary,
/// so every row Gram equals `X X' + eta A A'` and extends smoothly to
/// negative `eta`. The CLS position carries no abstraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerPrompt {
    pub cfg: AttnConfig,
    pub cls: Token,
    pub samples: usize,
    pub order: usize,
    pub seed: u64,
}

impl TransformerPrompt {
    fn grams(&self, eta: f64, x: &[Token], ax: &[Token], y: &[Token], ay: &[Token]) -> SeqGrams {
        let with = |s: &[Token], tail: Token| {
            let mut v = s.to_vec();
            v.push(tail);
            v
        };
        let base = SeqGrams::from_tokens(&with(x, self.cls), &with(y, self.cls)).expect("equal lengths");
        // CLS abstraction slots are distinct sentinels that never match
        let abs = SeqGrams::from_tokens(&with(ax, Token::MAX), &with(ay, Token::MAX - 1)).expect("equal lengths");
        let k = base.k();
        let mut drop_cls = Mat::identity(k, k);
        drop_cls[(k - 1, k - 1)] = 0.0;
        let mask = |m: &Mat| &drop_cls * m * &drop_cls;
        SeqGrams {
            xx: &base.xx + mask(&abs.xx) * eta,
            xy: &base.xy + mask(&abs.xy) * eta,
            yy: &base.yy + mask(&abs.yy) * eta,
        }
    }
}

impl PromptedKernel for TransformerPrompt {
    fn eval(&self, eta: f64, x: &[Token], ax: &[Token], y: &[Token], ay: &[Token]) -> f64 {
        let g = self.grams(eta, x, ax, y, ay);
        trans_kernel_limit(&g, &self.cfg, self.samples, self.order, self.seed).map_or(f64::NAN, |t| t.value)
    }
    fn base(&self, x: &[Token], y: &[Token]) -> f64 {
        let with = |s: &[Token]| {
            let mut v = s.to_vec();
            v.push(self.cls);
            v
        };
        let g = SeqGrams::from_tokens(&with(x), &with(y)).expect("equal lengths");
        trans_kernel_limit(&g, &self.cfg, self.samples, self.order, self.seed).map_or(f64::NAN, |t| t.value)
    }
}

/// Difference stencil for `H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stencil {
    Central,
    /// Richardson-extrapolated five-point stencil.
    FivePoint,
}

/// Estimate of `H` with Monte Carlo standard errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HEstimate {
    pub h: Mat,
    pub stderr: Mat,
    pub draws: usize,
    /// Largest `|K_0 - K_base|` seen on the gate check.
    pub gate_gap: f64,
}

/// Tolerance of the prompt gate `K_0 = K_base`.
pub const GATE_TOLERANCE: f64 = 1e-9;

fn stencil_value<P: PromptedKernel + ?Sized>(p: &P, eta: f64, st: Stencil, x: &[Token], ax: &[Token], y: &[Token], ay: &[Token]) -> f64 {
    let k = |e: f64| p.eval(e, x, ax, y, ay);
    match st {
        Stencil::Central => (k(eta) - k(-eta)) / (2.0 * eta),
        Stencil::FivePoint => (-k(2.0 * eta) + 8.0 * k(eta) - 8.0 * k(-eta) + k(-2.0 * eta)) / (12.0 * eta),
    }
}

/// Estimates `H_ab = E[d/d eta K_eta((X_a, A_a), (X'_b, A'_b))]` at zero.
/// The two instantiations use the training and test splits, so they are
/// jointly fresh; every entry averages `draws` independent augmented pairs.
#[allow(clippy::too_many_arguments)]
pub fn estimate_h<P: PromptedKernel + ?Sized, C: AbstractionChannel + ?Sized>(
    prompt: &P,
    fam: &TemplateFamily,
    scheme: &SubstitutionScheme,
    channel: &C,
    eta0: f64,
    draws: usize,
    stencil: Stencil,
    seed: u64,
) -> Result<HEstimate> {
    let r = fam.r();
    let mut pairs = Vec::new();
    for a in 0..r {
        for b in a..r {
            pairs.push((a, b));
        }
    }
    let results: Vec<Result<(f64, f64, f64)>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((a * r + b) as u64);
            let (mut s1, mut s2, mut gate) = (0.0, 0.0, 0.0f64);
            for d in 0..draws {
                let x = fam.templates[a].instantiate(&scheme.sample_sub(fam, a, Split::Train, &mut rng)?);
                let y = fam.templates[b].instantiate(&scheme.sample_sub(fam, b, Split::Test, &mut rng)?);
                let ax = channel.sample(&x, a, &mut rng);
                let ay = channel.sample(&y, b, &mut rng);
                if d == 0 {
                    gate = gate.max((prompt.eval(0.0, &x, &ax, &y, &ay) - prompt.base(&x, &y)).abs());
                }
                let v = stencil_value(prompt, eta0, stencil, &x, &ax, &y, &ay);
                s1 += v;
                s2 += v * v;
            }
            Ok((s1, s2, gate))
        })
        .collect();
    let mut h = Mat::zeros(r, r);
    let mut se = Mat::zeros(r, r);
    let mut gate_gap = 0.0f64;
    let nf = draws as f64;
    for (&(a, b), res) in pairs.iter().zip(results) {
        let (s1, s2, gate) = res?;
        gate_gap = gate_gap.max(gate);
        let mean = s1 / nf;
        let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
        h[(a, b)] = mean;
        h[(b, a)] = mean;
        se[(a, b)] = (var / nf).sqrt();
        se[(b, a)] = se[(a, b)];
    }
    if gate_gap > GATE_TOLERANCE {
        return Err(Error::PromptGate(gate_gap));
    }
    Ok(HEstimate {
        h,
        stderr: se,
        draws,
        gate_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{EqualityPatternKernel, FnKernel};
    use crate::task::Alphabet;
    use approx::assert_abs_diff_eq;

    fn setup() -> (Mat, Vec<f64>, Vec<f64>) {
        (Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]), vec![0.5, 0.5], vec![1.0, -1.0])
    }

    #[test]
    fn zero_direction_has_zero_gain() {
        let (n, q, y) = setup();
        let rep = margin_derivative(&n, &Mat::zeros(2, 2), &q, 0.1, &y).unwrap();
        assert!(rep.gains.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gain_is_linear_in_h() {
        let (n, q, y) = setup();
        let h1 = Mat::from_row_slice(2, 2, &[0.2, -0.1, -0.1, 0.4]);
        let h2 = Mat::from_row_slice(2, 2, &[-0.3, 0.5, 0.5, 0.1]);
        let a = margin_derivative(&n, &h1, &q, 0.1, &y).unwrap();
        let b = margin_derivative(&n, &h2, &q, 0.1, &y).unwrap();
        let c = margin_derivative(&n, &(&h1 + &h2), &q, 0.1, &y).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(c.gains[i], a.gains[i] + b.gains[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn finite_differences_agree() {
        let (n, q, y) = setup();
        let rep = fd_check(&n, &n, &q, 0.1, &y, &[1e-3, 1e-4]).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn additive_prompt_recovers_perturbation_mean() {
        let fam = TemplateFamily::equality();
        let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, 20, 0, 20));
        let prompt = AdditivePrompt {
            base: EqualityPatternKernel::default(),
            perturbation: FnKernel(|a: &[Token], b: &[Token]| if a == b { 1.0 } else { 0.0 }),
        };
        let est = estimate_h(
            &prompt,
            &fam,
            &scheme,
            &PatternChannel { noise: 0.0 },
            1e-3,
            20,
            Stencil::Central,
            1,
        )
        .unwrap();
        // deterministic pattern abstractions agree exactly when the templates agree
        for a in 0..fam.r() {
            for b in 0..fam.r() {
                assert_abs_diff_eq!(est.h[(a, b)], if a == b { 1.0 } else { 0.0 }, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constant_prompt_has_zero_h() {
        let fam = TemplateFamily::equality();
        let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, 20, 0, 20));
        let prompt = AdditivePrompt {
            base: EqualityPatternKernel::default(),
            perturbation: FnKernel(|_: &[Token], _: &[Token]| 0.0),
        };
        let est = estimate_h(
            &prompt,
            &fam,
            &scheme,
            &PatternChannel { noise: 0.3 },
            1e-3,
            5,
            Stencil::FivePoint,
            2,
        )
        .unwrap();
        assert_eq!(est.h.amax(), 0.0);
    }

    #[test]
    fn second_order_scaling_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let r = 4;
            let b = Mat::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
            let n = &b * b.transpose() + Mat::identity(r, r) * 0.5;
            let hr = Mat::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
            let h = (&hr + hr.transpose()) * 0.5;
            let q = vec![0.25; r];
            let y = vec![1.0, -1.0, 1.0, -1.0];
            let rep = fd_check(&n, &h, &q, 0.1, &y, &[1e-3, 1e-4]).unwrap();
            assert!((rep.ratios[0] - 100.0).abs() <= 20.0, "{rep:?}");
        }
    }
}
