//! Token-symmetric kernels, the template matrix `N`, and Gram bundles.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::task::{fresh_pair, Dataset, Sample, TemplateFamily, Token};

/// A kernel on equal-length token strings.
pub trait Kernel: Send + Sync {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64;

    /// Declared invariance under vocabulary permutations.
    fn token_symmetric(&self) -> bool {
        true
    }
}

impl<K: Kernel + ?Sized> Kernel for &K {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        (**self).eval(x, y)
    }
    fn token_symmetric(&self) -> bool {
        (**self).token_symmetric()
    }
}

impl<K: Kernel + ?Sized> Kernel for Box<K> {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        (**self).eval(x, y)
    }
    fn token_symmetric(&self) -> bool {
        (**self).token_symmetric()
    }
}

/// First-occurrence labels of the concatenation `x ++ y`.
pub fn joint_pattern(x: &[Token], y: &[Token]) -> Vec<u32> {
    let mut seen: Vec<Token> = Vec::with_capacity(x.len() + y.len());
    x.iter()
        .chain(y)
        .map(|t| match seen.iter().position(|s| s == t) {
            Some(i) => i as u32,
            None => {
                seen.push(*t);
                (seen.len() - 1) as u32
            }
        })
        .collect()
}

/// Table key such as `"0,0|1,2"` for the joint pattern of `(x, y)`.
pub fn pattern_key(x: &[Token], y: &[Token]) -> String {
    let p = joint_pattern(x, y);
    let fmt = |s: &[u32]| s.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    format!("{}|{}", fmt(&p[..x.len()]), fmt(&p[x.len()..]))
}

/// Kernel whose value depends only on the joint equality pattern.
///
/// The default rule is
/// `w_c + w_p * (shared equal position pairs) / binom(k, 2) + w_d * (positions with equal tokens) / k`,
/// a sum of feature inner products
/// and therefore positive semidefinite. A user table keyed by [`pattern_key`]
/// overrides the rule on the listed patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityPatternKernel {
    pub w_const: f64,
    pub w_pairs: f64,
    pub w_diag: f64,
    #[serde(default)]
    pub table: HashMap<String, f64>,
}

impl Default for EqualityPatternKernel {
    fn default() -> Self {
        EqualityPatternKernel {
            w_const: 0.25,
            w_pairs: 0.5,
            w_diag: 0.25,
            table: HashMap::new(),
        }
    }
}

impl EqualityPatternKernel {
    pub fn with_table(table: HashMap<String, f64>) -> Self {
        EqualityPatternKernel {
            table,
            ..Default::default()
        }
    }

    fn rule(&self, x: &[Token], y: &[Token]) -> f64 {
        let k = x.len();
        let mut v = self.w_const;
        if k >= 2 {
            let mut shared = 0usize;
            for p in 0..k {
                for q in p + 1..k {
                    if x[p] == x[q] && y[p] == y[q] {
                        shared += 1;
                    }
                }
            }
            v += self.w_pairs * shared as f64 / (k * (k - 1) / 2) as f64;
        }
        if k >= 1 {
            let diag = x.iter().zip(y).filter(|(a, b)| a == b).count();
            v += self.w_diag * diag as f64 / k as f64;
        }
        v
    }
}

impl Kernel for EqualityPatternKernel {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        if !self.table.is_empty() {
            if let Some(v) = self.table.get(&pattern_key(x, y)) {
                return *v;
            }
        }
        self.rule(x, y)
    }
}

/// A user table keyed by raw string pairs, falling back to an inner kernel.
/// Nothing forces such a table to be token-symmetric.
pub struct RawTableKernel<K> {
    pub entries: HashMap<(Vec<Token>, Vec<Token>), f64>,
    pub fallback: K,
}

impl<K: Kernel> Kernel for RawTableKernel<K> {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        if let Some(v) = self.entries.get(&(x.to_vec(), y.to_vec())) {
            return *v;
        }
        if let Some(v) = self.entries.get(&(y.to_vec(), x.to_vec())) {
            return *v;
        }
        self.fallback.eval(x, y)
    }

    fn token_symmetric(&self) -> bool {
        false
    }
}

/// A kernel given by a closure; used for constant and perturbed kernels.
pub struct FnKernel<F>(pub F);

impl<F: Fn(&[Token], &[Token]) -> f64 + Send + Sync> Kernel for FnKernel<F> {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        (self.0)(x, y)
    }
}

/// Memoizes a token-symmetric kernel per joint equality pattern. Every pair
/// with the same pattern gets the value computed on the canonical
/// representative, so stochastic kernels stay exactly token-symmetric.
pub struct PatternCache<K> {
    inner: K,
    cache: RwLock<HashMap<Vec<u32>, f64>>,
}

impl<K: Kernel> PatternCache<K> {
    pub fn new(inner: K) -> Self {
        PatternCache {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &K {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<K: Kernel> Kernel for PatternCache<K> {
    fn eval(&self, x: &[Token], y: &[Token]) -> f64 {
        let key = joint_pattern(x, y);
        if let Some(v) = self.cache.read().unwrap().get(&key) {
            return *v;
        }
        let cx: Vec<Token> = key[..x.len()].iter().map(|&l| l as Token).collect();
        let cy: Vec<Token> = key[x.len()..].iter().map(|&l| l as Token).collect();
        let v = self.inner.eval(&cx, &cy);
        self.cache.write().unwrap().insert(key, v);
        v
    }
}

/// Witness of a token-symmetry violation.
#[derive(Clone, Debug, Serialize)]
pub struct SymmetryWitness {
    pub x: Vec<Token>,
    pub y: Vec<Token>,
    pub permutation: Vec<(Token, Token)>,
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SymmetryReport {
    pub trials: usize,
    pub max_gap: f64,
    pub witness: Option<SymmetryWitness>,
}

impl SymmetryReport {
    pub fn passed(&self) -> bool {
        self.witness.is_none()
    }
}

/// Compares `K(x, y)` with `K(pi x, pi y)` for random pairs drawn from
/// `strings` and random permutations of `vocab`.
pub fn check_token_symmetry<K: Kernel + ?Sized>(
    kernel: &K,
    strings: &[Vec<Token>],
    vocab: &[Token],
    trials: usize,
    tol: f64,
    seed: u64,
) -> SymmetryReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap = 0.0f64;
    let mut witness = None;
    for _ in 0..trials {
        let x = &strings[rng.random_range(0..strings.len())];
        let y = &strings[rng.random_range(0..strings.len())];
        let mut image = vocab.to_vec();
        image.shuffle(&mut rng);
        let perm: HashMap<Token, Token> = vocab.iter().copied().zip(image).collect();
        let apply = |s: &[Token]| -> Vec<Token> { s.iter().map(|t| *perm.get(t).unwrap_or(t)).collect() };
        let gap = (kernel.eval(x, y) - kernel.eval(&apply(x), &apply(y))).abs();
        max_gap = max_gap.max(gap);
        if gap > tol && witness.is_none() {
            let mut permutation: Vec<(Token, Token)> = perm.into_iter().filter(|(a, b)| a != b).collect();
            permutation.sort_unstable();
            witness = Some(SymmetryWitness {
                x: x.clone(),
                y: y.clone(),
                permutation,
                gap,
            });
        }
    }
    SymmetryReport { trials, max_gap, witness }
}

/// Quotient-level Gram `N` with self-kernel constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateMatrix {
    pub n: Mat,
    /// `D_a = K(x, x)` for an instantiation `x` of template `a`.
    pub d: Vec<f64>,
    pub delta_star: f64,
    pub k_star: f64,
    pub l_star: f64,
}

impl TemplateMatrix {
    pub fn r(&self) -> usize {
        self.n.nrows()
    }

    /// Constants for an explicitly given `N` and diagonal.
    pub fn from_parts(n: Mat, d: Vec<f64>) -> Self {
        let delta_star = d.iter().enumerate().map(|(a, da)| (da - n[(a, a)]).abs()).fold(0.0, f64::max);
        let k_star = d.iter().copied().fold(0.0, f64::max);
        TemplateMatrix {
            n,
            d,
            delta_star,
            k_star,
            l_star: 2.0 * k_star,
        }
    }
}

/// Evaluates `N_ab` on canonical fresh pairs drawn from `vocab`.
pub fn template_matrix<K: Kernel + ?Sized>(kernel: &K, fam: &TemplateFamily, vocab: &[Token]) -> Result<TemplateMatrix> {
    let r = fam.r();
    let mut n = Mat::zeros(r, r);
    let mut d = vec![0.0; r];
    for a in 0..r {
        for b in a..r {
            let (s, t) = fresh_pair(fam, vocab, a, b)?;
            let x = fam.templates[a].instantiate(&s);
            let y = fam.templates[b].instantiate(&t);
            let v = kernel.eval(&x, &y);
            n[(a, b)] = v;
            n[(b, a)] = v;
            if a == b {
                d[a] = kernel.eval(&x, &x);
            }
        }
    }
    linalg::check_psd(&n, 1e-9)?;
    for a in 0..r {
        if d[a] - n[(a, a)] < -1e-12 {
            return Err(Error::Invalid(format!(
                "self-kernel D_{a} = {} is below N_aa = {}",
                d[a],
                n[(a, a)]
            )));
        }
    }
    Ok(TemplateMatrix::from_parts(n, d))
}

/// Empirical Gram objects and their discrepancies from the block model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GramBundle {
    pub khat: Mat,
    pub kx: Vector,
    pub m_n: Mat,
    pub m_a: Vector,
    pub delta: Mat,
    pub zeta: Vector,
    pub colors: Vec<usize>,
    pub y: Vector,
    pub p_hat: Vec<f64>,
    pub test_template: usize,
    /// Realized sup of the diagonal entries and the template constants.
    pub k_star: f64,
}

impl GramBundle {
    pub fn n(&self) -> usize {
        self.colors.len()
    }

    pub fn r(&self) -> usize {
        self.p_hat.len()
    }

    pub fn membership(&self) -> Mat {
        linalg::membership(&self.colors, self.r())
    }
}

pub fn gram_bundle<K: Kernel + ?Sized>(
    kernel: &K,
    ds: &Dataset,
    test: &Sample,
    fam: &TemplateFamily,
    tmat: &TemplateMatrix,
) -> Result<GramBundle> {
    if ds.n() == 0 {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let a = fam
        .classify(&test.string)?
        .ok_or_else(|| Error::TestNotInFamily(test.string.clone()))?;
    let n = ds.n();
    let colors = ds.colors();
    let mut khat = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&ds.samples[i].string, &ds.samples[j].string);
            khat[(i, j)] = v;
            khat[(j, i)] = v;
        }
    }
    let kx = Vector::from_iterator(n, ds.samples.iter().map(|s| kernel.eval(&test.string, &s.string)));
    let m_n = linalg::expand_blocks(&tmat.n, &colors);
    let m_a = Vector::from_iterator(n, colors.iter().map(|&b| tmat.n[(a, b)]));
    let delta = &khat - &m_n;
    let zeta = &kx - &m_a;
    let diag_max = (0..n).map(|i| khat[(i, i)]).fold(0.0, f64::max);
    Ok(GramBundle {
        k_star: diag_max.max(tmat.k_star),
        khat,
        kx,
        m_n,
        m_a,
        delta,
        zeta,
        y: Vector::from_iterator(n, ds.samples.iter().map(|s| s.label as f64)),
        p_hat: ds.p_hat().unwrap(),
        colors,
        test_template: a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Alphabet, SubstitutionScheme};
    use approx::assert_abs_diff_eq;

    #[test]
    fn pattern_keys() {
        assert_eq!(pattern_key(&[5, 5], &[7, 9]), "0,0|1,2");
        assert_eq!(pattern_key(&[5, 6], &[6, 5]), "0,1|1,0");
        assert_eq!(joint_pattern(&[3, 4], &[3, 3]), vec![0, 1, 0, 0]);
    }

    #[test]
    fn equality_template_matrix() {
        let fam = TemplateFamily::equality();
        let vocab: Vec<Token> = (0..10).collect();
        let tm = template_matrix(&EqualityPatternKernel::default(), &fam, &vocab).unwrap();
        // fresh copies share no tokens, so only the constant and pattern terms remain
        assert_abs_diff_eq!(tm.n[(0, 0)], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(tm.n[(0, 1)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(tm.n[(1, 1)], 0.25, epsilon = 1e-15);
        assert_eq!(tm.d, vec![1.0, 0.5]);
        assert_abs_diff_eq!(tm.delta_star, 0.25, epsilon = 1e-15);
        assert_eq!(tm.k_star, 1.0);
        assert_eq!(tm.l_star, 2.0);
    }

    #[test]
    fn table_overrides_the_fresh_entries() {
        let fam = TemplateFamily::equality();
        let vocab: Vec<Token> = (0..10).collect();
        let mut table = HashMap::new();
        table.insert("0,0|1,2".to_string(), 0.1);
        let tm = template_matrix(&EqualityPatternKernel::with_table(table), &fam, &vocab).unwrap();
        assert_abs_diff_eq!(tm.n[(0, 1)], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn constant_kernel_matrix() {
        let fam = TemplateFamily::equality();
        let vocab: Vec<Token> = (0..10).collect();
        let tm = template_matrix(&FnKernel(|_: &[Token], _: &[Token]| 0.7), &fam, &vocab).unwrap();
        assert!(tm.n.iter().all(|&v| v == 0.7));
        assert_eq!(tm.delta_star, 0.0);
    }

    #[test]
    fn indefinite_table_is_rejected() {
        let fam = TemplateFamily::equality();
        let vocab: Vec<Token> = (0..10).collect();
        let mut table = HashMap::new();
        table.insert("0,0|1,2".to_string(), 5.0);
        assert!(matches!(
            template_matrix(&EqualityPatternKernel::with_table(table), &fam, &vocab),
            Err(Error::KernelNotPsd { .. })
        ));
    }

    #[test]
    fn symmetry_checks() {
        let strings: Vec<Vec<Token>> = vec![vec![0, 0], vec![0, 1], vec![2, 3], vec![1, 1]];
        let vocab: Vec<Token> = (0..6).collect();
        let k = EqualityPatternKernel::default();
        assert!(check_token_symmetry(&k, &strings, &vocab, 200, 1e-9, 1).passed());
        let mut entries = HashMap::new();
        entries.insert((vec![0, 1], vec![2, 3]), 0.9);
        let bad = RawTableKernel { entries, fallback: k };
        let rep = check_token_symmetry(&bad, &strings, &vocab, 400, 1e-9, 1);
        let w = rep.witness.expect("asymmetric entry must be caught");
        assert!(w.gap > 0.5);
    }

    #[test]
    fn cached_kernel_agrees_with_inner() {
        let k = PatternCache::new(EqualityPatternKernel::default());
        let base = EqualityPatternKernel::default();
        for (x, y) in [([1, 1], [1, 2]), ([3, 4], [4, 3]), ([5, 5], [6, 6])] {
            assert_eq!(k.eval(&x, &y), base.eval(&x, &y));
        }
        assert_eq!(k.eval(&[9, 9], &[7, 7]), k.eval(&[5, 5], &[6, 6]));
        assert_eq!(k.len(), 3);
    }

    #[test]
    fn bundle_single_fresh_sample() {
        let fam = TemplateFamily::equality();
        let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, 10, 0, 4));
        let kern = EqualityPatternKernel::default();
        let tm = template_matrix(&kern, &fam, &scheme.alphabet.train).unwrap();
        let ds = Dataset {
            r: 2,
            samples: vec![crate::task::Sample::new(&fam, 1, vec![0, 1])],
        };
        let test = crate::task::Sample::new(&fam, 0, vec![12]);
        let gb = gram_bundle(&kern, &ds, &test, &fam, &tm).unwrap();
        assert_eq!(gb.zeta[0], 0.0);
        assert!(gb.delta[(0, 0)].abs() <= tm.delta_star);
        let outside = crate::task::Sample {
            template: 0,
            sub: vec![],
            string: vec![1, 2, 3],
            label: 1,
        };
        assert!(matches!(
            gram_bundle(&kern, &ds, &outside, &fam, &tm),
            Err(Error::TestNotInFamily(_))
        ));
    }
}
