//! Depth-one frozen-feature transformer kernel: the attention-kernel limit,
//! the full kernel limit through the MLP covariance map, and finite-width
//! random features.
//!
//! Inputs are embedded sequences: `k x m` matrices whose rows are token
//! embeddings (one-hot for plain strings). The limits depend on the inputs
//! only through the row Gram matrices `X X'`, `X Y'` and `Y Y'`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{self, Mat, Vector};
use crate::task::Token;

/// Pointwise MLP nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    /// `log(1 + exp(s t)) / s`, a smooth surrogate of ReLU.
    Softplus {
        sharpness: f64,
    },
    Tanh,
}

impl Activation {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Identity => t,
            Activation::Relu => t.max(0.0),
            Activation::Softplus { sharpness: s } => {
                let z = s * t;
                // log1p(exp(z)) without overflow
                (z.max(0.0) + (-z.abs()).exp().ln_1p()) / s
            }
            Activation::Tanh => t.tanh(),
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Softplus { sharpness: 20.0 }
    }
}

/// Attention hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    /// Inverse temperature `beta >= 0`.
    pub beta: f64,
    /// Positional strength `gamma >= 0`.
    pub gamma: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            beta: 1.0,
            gamma: 1.0,
            activation: Activation::default(),
        }
    }
}

/// Finite-width architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub heads: usize,
    pub d_emb: usize,
    pub d_head: usize,
    pub d_mlp: usize,
}

impl WidthConfig {
    /// Square-root scaling `H = d_head = round(sqrt(d))`, `d_mlp = d_emb = d`.
    pub fn square_root(d: usize) -> Self {
        let h = ((d as f64).sqrt().round() as usize).max(1);
        WidthConfig {
            heads: h,
            d_emb: d,
            d_head: h,
            d_mlp: d,
        }
    }
}

/// One-hot embedding of a token string.
pub fn one_hot(tokens: &[Token], vocab: usize) -> Result<Mat> {
    let mut x = Mat::zeros(tokens.len(), vocab);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Invalid(format!("token {t} outside vocabulary of size {vocab}")));
        }
        x[(i, t)] = 1.0;
    }
    Ok(x)
}

/// Row Gram matrices of an input pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqGrams {
    pub xx: Mat,
    pub xy: Mat,
    pub yy: Mat,
}

impl SeqGrams {
    pub fn from_embeddings(x: &Mat, y: &Mat) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!("inputs are {:?} and {:?}", x.shape(), y.shape())));
        }
        Ok(SeqGrams {
            xx: x * x.transpose(),
            xy: x * y.transpose(),
            yy: y * y.transpose(),
        })
    }

    /// Grams of two token strings, which only see token equalities.
    pub fn from_tokens(x: &[Token], y: &[Token]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("lengths {} and {}", x.len(), y.len())));
        }
        let k = x.len();
        let eq = |a: &[Token], b: &[Token]| Mat::from_fn(k, k, |i, j| f64::from(u8::from(a[i] == b[j])));
        Ok(SeqGrams {
            xx: eq(x, x),
            xy: eq(x, y),
            yy: eq(y, y),
        })
    }

    pub fn k(&self) -> usize {
        self.xx.nrows()
    }

    fn swap(&self) -> Self {
        SeqGrams {
            xx: self.yy.clone(),
            xy: self.xy.transpose(),
            yy: self.xx.clone(),
        }
    }

    fn diag_x(&self) -> Self {
        SeqGrams {
            xx: self.xx.clone(),
            xy: self.xx.clone(),
            yy: self.xx.clone(),
        }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

fn softmax(v: &[f64], beta: f64) -> Vec<f64> {
    let m = v.iter().map(|x| beta * x).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (beta * x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Jitter added to the score covariance before factorization.
pub const COVARIANCE_JITTER: f64 = 1e-12;

/// Attention-kernel limit
/// `E[softmax(beta m_X)' (X Y' + gamma^2 I) softmax(beta m_Y)]` over the
/// Gaussian score pair, with antithetic sampling. At `beta = 0` the value is
/// computed in closed form without sampling.
pub fn attn_kernel_limit(g: &SeqGrams, cfg: &AttnConfig, samples: usize, seed: u64) -> Result<Estimate> {
    let k = g.k();
    let g2 = cfg.gamma * cfg.gamma;
    let c = &g.xy + Mat::identity(k, k) * g2;
    if cfg.beta == 0.0 {
        return Ok(Estimate {
            mean: c.sum() / (k * k) as f64,
            stderr: 0.0,
            samples: 0,
        });
    }
    let mut cov = Mat::zeros(2 * k, 2 * k);
    let id = Mat::identity(k, k) * g2;
    cov.view_mut((0, 0), (k, k)).copy_from(&(&g.xx + &id));
    cov.view_mut((0, k), (k, k)).copy_from(&(&g.xy + &id));
    cov.view_mut((k, 0), (k, k)).copy_from(&(g.xy.transpose() + &id));
    cov.view_mut((k, k), (k, k)).copy_from(&(&g.yy + &id));
    cov *= 1.0 + g2;
    let scale = cov.diagonal().amax().max(1.0);
    let mut jittered = cov.clone();
    for i in 0..2 * k {
        jittered[(i, i)] += COVARIANCE_JITTER * scale;
    }
    let chol = match jittered.cholesky() {
        Some(ch) => ch.l(),
        None => {
            if linalg::min_eigenvalue(&cov) < -1e-9 * scale {
                return Err(Error::Invalid("covariance-error: score covariance is not PSD".into()));
            }
            linalg::sqrt_psd(&cov)
        }
    };
    let pairs = samples.div_ceil(2).max(1);
    const CHUNK: usize = 4096;
    let chunks = pairs.div_ceil(CHUNK);
    let (s1, s2) = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64);
            let count = CHUNK.min(pairs - ci * CHUNK);
            let mut z = Vector::zeros(2 * k);
            let (mut a1, mut a2) = (0.0, 0.0);
            for _ in 0..count {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let m = &chol * &z;
                let mut val = 0.0;
                for sign in [1.0, -1.0] {
                    let mx: Vec<f64> = (0..k).map(|i| sign * m[i]).collect();
                    let my: Vec<f64> = (0..k).map(|i| sign * m[k + i]).collect();
                    let sx = softmax(&mx, cfg.beta);
                    let sy = softmax(&my, cfg.beta);
                    let mut v = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            v += sx[i] * c[(i, j)] * sy[j];
                        }
                    }
                    val += 0.5 * v;
                }
                a1 += val;
                a2 += val * val;
            }
            (a1, a2)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = pairs as f64;
    let mean = s1 / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    Ok(Estimate {
        mean,
        stderr: (var / nf).sqrt(),
        samples: 2 * pairs,
    })
}

/// Gauss–Hermite nodes and weights for `int f(x) exp(-x^2) dx`
/// (Golub–Welsch).
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = Mat::zeros(order, order);
    for i in 1..order {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[sigma(u) sigma(v)]` for a centered Gaussian pair with the given
/// covariance, by tensor Gauss–Hermite quadrature.
pub fn gaussian_expectation(sigma: Activation, kxx: f64, kxy: f64, kyy: f64, order: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(order);
    let a = kxx.max(0.0).sqrt();
    let b = kyy.max(0.0).sqrt();
    let rho = if a > 0.0 && b > 0.0 {
        (kxy / (a * b)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let r2 = std::f64::consts::SQRT_2;
    let mut total = 0.0;
    for (x1, w1) in nodes.iter().zip(&weights) {
        let z1 = r2 * x1;
        let su = sigma.apply(a * z1);
        for (x2, w2) in nodes.iter().zip(&weights) {
            let z2 = r2 * x2;
            total += w1 * w2 * su * sigma.apply(b * (rho * z1 + s * z2));
        }
    }
    total / std::f64::consts::PI
}

/// `E[relu(u) relu(v)]` in closed form (arc-cosine kernel of degree one).
pub fn relu_arccos(kxx: f64, kxy: f64, kyy: f64) -> f64 {
    let (a, b) = (kxx.sqrt(), kyy.sqrt());
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    let rho = (kxy / (a * b)).clamp(-1.0, 1.0);
    let theta = rho.acos();
    a * b / (2.0 * std::f64::consts::PI) * (theta.sin() + (std::f64::consts::PI - theta) * rho)
}

/// The full kernel limit together with its attention covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransLimit {
    pub value: f64,
    pub k_xx: Estimate,
    pub k_xy: Estimate,
    pub k_yy: Estimate,
    /// The estimated cross term exceeded the Cauchy–Schwarz bound and was clamped.
    pub clamped: bool,
}

/// Default Gauss–Hermite order of the outer MLP stage.
pub const DEFAULT_QUADRATURE: usize = 40;
/// Default attention Monte Carlo budget.
pub const DEFAULT_MC_SAMPLES: usize = 200_000;

/// `K_trans(X, Y) = E[sigma(u) sigma(v)]` with the attention covariance
/// estimated by [`attn_kernel_limit`].
pub fn trans_kernel_limit(g: &SeqGrams, cfg: &AttnConfig, samples: usize, order: usize, seed: u64) -> Result<TransLimit> {
    let k_xy = attn_kernel_limit(g, cfg, samples, seed)?;
    let k_xx = attn_kernel_limit(&g.diag_x(), cfg, samples, seed.wrapping_add(1))?;
    let k_yy = attn_kernel_limit(&g.swap().diag_x(), cfg, samples, seed.wrapping_add(2))?;
    Ok(trans_from_attn(cfg.activation, k_xx, k_xy, k_yy, order))
}

/// Outer stage for given attention covariances.
pub fn trans_from_attn(sigma: Activation, k_xx: Estimate, k_xy: Estimate, k_yy: Estimate, order: usize) -> TransLimit {
    let bound = (k_xx.mean.max(0.0) * k_yy.mean.max(0.0)).sqrt();
    let clamped = k_xy.mean.abs() > bound * (1.0 + 1e-9);
    let kxy = k_xy.mean.clamp(-bound, bound);
    TransLimit {
        value: gaussian_expectation(sigma, k_xx.mean, kxy, k_yy.mean, order),
        k_xx,
        k_xy,
        k_yy,
        clamped,
    }
}

/// The kernel limit on template strings, with a CLS token appended.
///
/// Common random numbers make the estimate a deterministic function of the
/// row Grams, so it is exactly invariant under token relabeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerKernel {
    pub cfg: AttnConfig,
    pub cls: Token,
    pub samples: usize,
    pub order: usize,
    pub seed: u64,
}

impl TransformerKernel {
    pub fn new(cfg: AttnConfig, cls: Token) -> Self {
        TransformerKernel {
            cfg,
            cls,
            samples: DEFAULT_MC_SAMPLES,
            order: DEFAULT_QUADRATURE,
            seed: 0,
        }
    }

    fn with_cls(&self, x: &[Token]) -> Vec<Token> {
        let mut v = x.to_vec();
        v.push(self.cls);
        v
    }
}

impl Kernel for TransformerKernel {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        let g = SeqGrams::from_tokens(&self.with_cls(x), &self.with_cls(y)).expect("equal-length inputs");
        trans_kernel_limit(&g, &self.cfg, self.samples, self.order, self.seed)
            .map(|t| t.value)
            .unwrap_or(f64::NAN)
    }
}

// ---------------------------------------------------------------------------
// Finite width

/// Frozen random-feature map, sampled stream by stream so that no
/// `d_emb x d_emb` parameter block is held in memory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteWidth {
    pub cfg: AttnConfig,
    pub widths: WidthConfig,
    pub seed: u64,
}

// Stream ids: 0 heads and MLP, 1 positional table, 2.. embedding rows.
const STREAM_MAIN: u64 = 0;
const STREAM_POS: u64 = 1;
const STREAM_EMB: u64 = 2;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

impl FiniteWidth {
    /// Features `z_2(X)` for a batch of embedded inputs of equal length.
    pub fn features(&self, inputs: &[Mat]) -> Result<Vec<Vector>> {
        let Some(first) = inputs.first() else {
            return Ok(vec![]);
        };
        let (k, m) = first.shape();
        if inputs.iter().any(|x| x.shape() != (k, m)) {
            return Err(Error::Dimension("inputs must share one shape".into()));
        }
        let WidthConfig {
            heads,
            d_emb,
            d_head,
            d_mlp,
        } = self.widths;
        let d = d_emb as f64;
        let dh = d_head as f64;

        // W_E rows come from per-row streams so any vocabulary index is reproducible.
        let mut w_e = Mat::zeros(m, d_emb);
        for t in 0..m {
            if inputs.iter().any(|x| x.column(t).iter().any(|&v| v != 0.0)) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(STREAM_EMB + t as u64);
                for j in 0..d_emb {
                    w_e[(t, j)] = StandardNormal.sample(&mut rng);
                }
            }
        }
        let mut pos_rng = ChaCha8Rng::seed_from_u64(self.seed);
        pos_rng.set_stream(STREAM_POS);
        let pos = gaussian_matrix(&mut pos_rng, k, d_emb);
        let z0: Vec<Mat> = inputs.iter().map(|x| x * &w_e + &pos * self.cfg.gamma).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(STREAM_MAIN);
        let mut z1: Vec<Vector> = vec![Vector::zeros(d_emb); inputs.len()];
        for _ in 0..heads {
            let w_k = gaussian_matrix(&mut rng, d_head, d_emb);
            let w_q = gaussian_matrix(&mut rng, d_head, d_emb);
            let w_v = gaussian_matrix(&mut rng, d_head, d_emb);
            let w_o = gaussian_matrix(&mut rng, d_head, d_emb);
            z1.par_iter_mut().zip(z0.par_iter()).for_each(|(acc, z)| {
                let cls = z.row(k - 1).transpose();
                let key = &w_k * cls;
                let queries = &w_q * z.transpose();
                let scores: Vec<f64> = (0..k).map(|j| key.dot(&queries.column(j)) / (d * dh.sqrt())).collect();
                let s = softmax(&scores, self.cfg.beta);
                let mixed = z.transpose() * Vector::from_vec(s);
                let out = w_o.transpose() * (&w_v * mixed) / (dh * d).sqrt();
                *acc += out;
            });
        }
        let hs = (heads as f64).sqrt();
        for v in z1.iter_mut() {
            *v /= hs;
        }

        let mut z2: Vec<Vector> = vec![Vector::zeros(d_emb); inputs.len()];
        const ROWS: usize = 64;
        let mut done = 0;
        while done < d_mlp {
            let rows = ROWS.min(d_mlp - done);
            let w_a = gaussian_matrix(&mut rng, rows, d_emb);
            let w_b = gaussian_matrix(&mut rng, rows, d_emb);
            z2.par_iter_mut().zip(z1.par_iter()).for_each(|(acc, z)| {
                let pre = &w_a * z / d.sqrt();
                let act = pre.map(|t| self.cfg.activation.apply(t));
                *acc += w_b.transpose() * act;
            });
            done += rows;
        }
        let dm = (d_mlp as f64).sqrt();
        for v in z2.iter_mut() {
            *v /= dm;
        }
        Ok(z2)
    }

    /// Empirical kernel matrix `z_2(X)' z_2(Y) / d_emb` over a batch.
    pub fn gram(&self, inputs: &[Mat]) -> Result<Mat> {
        let f = self.features(inputs)?;
        let d = self.widths.d_emb as f64;
        Ok(Mat::from_fn(f.len(), f.len(), |i, j| f[i].dot(&f[j]) / d))
    }

    pub fn kernel(&self, x: &Mat, y: &Mat) -> Result<f64> {
        let f = self.features(&[x.clone(), y.clone()])?;
        Ok(f[0].dot(&f[1]) / self.widths.d_emb as f64)
    }
}

/// Limit kernel matrix over a finite input set.
pub fn limit_gram(inputs: &[Mat], cfg: &AttnConfig, samples: usize, order: usize, seed: u64) -> Result<Mat> {
    let n = inputs.len();
    let mut attn = Mat::zeros(n, n);
    let mut pairs = vec![];
    for i in 0..n {
        for j in i..n {
            pairs.push((i, j));
        }
    }
    let vals: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let g = SeqGrams::from_embeddings(&inputs[i], &inputs[j])?;
            Ok(attn_kernel_limit(&g, cfg, samples, seed)?.mean)
        })
        .collect();
    for (&(i, j), v) in pairs.iter().zip(vals) {
        let v = v?;
        attn[(i, j)] = v;
        attn[(j, i)] = v;
    }
    let est = |v: f64| Estimate {
        mean: v,
        stderr: 0.0,
        samples,
    };
    Ok(Mat::from_fn(n, n, |i, j| {
        trans_from_attn(cfg.activation, est(attn[(i, i)]), est(attn[(i, j)]), est(attn[(j, j)]), order).value
    }))
}

/// One row of the width-convergence probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub width: usize,
    pub trial: usize,
    /// `max_ab |K_hat(a, b) - K(a, b)|`.
    pub max_error: f64,
    /// Smallest eigenvalue of the finite-width Gram over its trace.
    pub min_eig_ratio: f64,
}

/// Width-convergence probe of the finite-width kernel against the limit.
pub fn convergence_probe(
    inputs: &[Mat],
    cfg: &AttnConfig,
    widths: &[usize],
    trials: usize,
    limit: &Mat,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for &w in widths {
        for t in 0..trials {
            let fw = FiniteWidth {
                cfg: *cfg,
                widths: WidthConfig::square_root(w),
                seed: seed.wrapping_add((w as u64) << 20).wrapping_add(t as u64),
            };
            let g = fw.gram(inputs)?;
            let max_error = (&g - limit).amax();
            let tr = g.trace();
            let min_eig_ratio = if tr > 0.0 { linalg::min_eigenvalue(&g) / tr } else { 0.0 };
            rows.push(ProbeRow {
                width: w,
                trial: t,
                max_error,
                min_eig_ratio,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(beta: f64, gamma: f64, activation: Activation) -> AttnConfig {
        AttnConfig { beta, gamma, activation }
    }

    #[test]
    fn uniform_attention_closed_form() {
        let g = SeqGrams::from_tokens(&[1, 2, 9], &[1, 3, 9]).unwrap();
        let est = attn_kernel_limit(&g, &cfg(0.0, 0.5, Activation::Identity), 1000, 0).unwrap();
        // X Y' has ones at (0,0) and (2,2); gamma^2 I adds 0.75
        assert_abs_diff_eq!(est.mean, (2.0 + 0.75) / 9.0, epsilon = 1e-12);
        assert_eq!(est.samples, 0);
    }

    #[test]
    fn equal_inputs_count_equal_position_pairs() {
        let g = SeqGrams::from_tokens(&[4, 4, 9], &[4, 4, 9]).unwrap();
        let est = attn_kernel_limit(&g, &cfg(0.0, 0.0, Activation::Identity), 10, 0).unwrap();
        assert_abs_diff_eq!(est.mean, 5.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_reproduces_moments() {
        let (x, w) = gauss_hermite(40);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), std::f64::consts::PI.sqrt(), epsilon = 1e-12);
        let second: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_abs_diff_eq!(second, std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gaussian_expectation(Activation::Identity, 2.0, 0.7, 1.5, 40), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn softplus_tracks_relu_closed_form() {
        let sharp = Activation::Softplus { sharpness: 200.0 };
        let v = gaussian_expectation(sharp, 1.0, 0.3, 2.0, 40);
        assert_abs_diff_eq!(v, relu_arccos(1.0, 0.3, 2.0), epsilon = 5e-3);
        assert_abs_diff_eq!(relu_arccos(1.0, 1.0, 1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn identity_activation_collapses_to_attention() {
        let g = SeqGrams::from_tokens(&[1, 2, 9], &[2, 1, 9]).unwrap();
        let c = cfg(1.5, 1.0, Activation::Identity);
        let t = trans_kernel_limit(&g, &c, 4000, 40, 3).unwrap();
        assert_abs_diff_eq!(t.value, t.k_xy.mean, epsilon = 1e-10);
    }

    #[test]
    fn relabeling_is_exact_with_common_random_numbers() {
        let c = cfg(2.0, 1.0, Activation::default());
        let k = TransformerKernel {
            samples: 2000,
            ..TransformerKernel::new(c, 99)
        };
        let a = k.eval(&[1, 2, 1], &[3, 2, 3]);
        let b = k.eval(&[7, 5, 7], &[8, 5, 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn finite_width_is_symmetric_and_nonnegative_on_diagonal() {
        let fw = FiniteWidth {
            cfg: cfg(1.0, 1.0, Activation::Relu),
            widths: WidthConfig::square_root(64),
            seed: 5,
        };
        let x = one_hot(&[0, 1, 4], 5).unwrap();
        let y = one_hot(&[2, 1, 4], 5).unwrap();
        let g = fw.gram(&[x.clone(), y.clone()]).unwrap();
        assert!(g[(0, 0)] >= 0.0);
        assert_abs_diff_eq!(g[(0, 1)], g[(1, 0)], epsilon = 1e-12);
        assert_abs_diff_eq!(fw.kernel(&x, &y).unwrap(), fw.kernel(&y, &x).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0], 1.0);
        let b = softmax(&[101.0, 102.0, 103.0], 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }
}
