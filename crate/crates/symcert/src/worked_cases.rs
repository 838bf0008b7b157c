//! Eight hand-built collision geometries over a three-template family, and
//! the signed-cancellation ledger for the `aba` / `abb` task.
//!
//! Each case is a real dataset: listed tokens fill wildcard slots of the
//! listed vertices and every other slot receives a unique fresh token. The
//! collision graph is then computed from the substitutions, and each edge
//! carries the weight of the heaviest token responsible for it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::certify::{certify, CertificateReport, Model, Route, SampleInputs};
use crate::error::{Error, Result};
use crate::graph::{block_stats, build_graph, CollisionGraph};
use crate::kernel::TemplateMatrix;
use crate::linalg::{self, Mat, Vector};
use crate::task::{Dataset, Sample, Template, TemplateFamily, Token};

/// Template-matrix scale: `N = K_* I` with `K_* = 1/2`, so `L_* = 1`.
pub const K_STAR: f64 = 0.5;
/// Literal tokens of the three templates.
pub const LITERALS: [Token; 3] = [1000, 1001, 1002];
const NAMED_BASE: Token = 2000;
const FRESH_BASE: Token = 5000;

/// Tokens shared by a set of vertices, with the edge weight they induce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedToken {
    pub name: String,
    pub vertices: Vec<usize>,
    pub weight: f64,
}

/// One worked case: block sizes, shared tokens and the published outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub name: String,
    pub sizes: [usize; 3],
    pub tokens: Vec<SharedToken>,
    pub expected_route: Route,
    pub expected_b_rho: f64,
}

fn tok(name: &str, vertices: &[usize], weight: f64) -> SharedToken {
    SharedToken {
        name: name.to_string(),
        vertices: vertices.to_vec(),
        weight,
    }
}

/// The eight cases C1..C8.
pub fn cases() -> Vec<CaseSpec> {
    let spec = |name: &str, n: usize, tokens: Vec<SharedToken>, route: Route, b_rho: f64| CaseSpec {
        name: name.to_string(),
        sizes: [n; 3],
        tokens,
        expected_route: route,
        expected_b_rho: b_rho,
    };
    vec![
        spec(
            "C1",
            4,
            vec![tok("A", &[0, 4], 1.0), tok("B", &[1, 8], 1.0), tok("TX", &[5, 9], 1.0)],
            Route::Bd,
            0.5,
        ),
        spec(
            "C2",
            10,
            vec![tok("LB", &[0], 1.0), tok("core", &[0, 1, 2, 3, 4, 10, 11, 12, 13, 14], 1.0)],
            Route::Deg,
            1.0,
        ),
        spec(
            "C3",
            16,
            vec![
                tok("l0", &[0, 16, 32], 1.0),
                tok("l1", &[2, 18, 34], 1.0),
                tok("l2", &[4, 20, 36], 1.0),
                tok("l3", &[6, 22, 38], 1.0),
                tok("TX", &[9, 25], 1.0),
            ],
            Route::Bd,
            0.125,
        ),
        spec(
            "C4",
            12,
            vec![
                tok("p1", &[0, 12, 24], 1.0),
                tok("m1", &[1, 13, 25], -1.0),
                tok("p2", &[2, 14], 1.0),
                tok("m2", &[3, 15], -1.0),
                tok("TX", &[4], 1.0),
                tok("TY", &[16], -1.0),
            ],
            Route::Anova,
            1.0 / 6.0,
        ),
        spec("C5", 14, vec![tok("w", &[14, 28], 0.6)], Route::Cs, 1.0 / 7.0),
        spec(
            "C6",
            12,
            vec![
                tok("a", &[12, 24], 1.0),
                tok("b", &[14, 26], 1.0),
                tok("c", &[16, 28], 1.0),
                tok("TX", &[19], 1.0),
            ],
            Route::Bd,
            1.0 / 6.0,
        ),
        spec(
            "C7",
            12,
            vec![
                tok("c0", &[0, 12, 24], 1.0),
                tok("c1", &[1, 13, 25], -1.0),
                tok("c2", &[2, 14, 26], 1.0),
                tok("c3", &[3, 15, 27], -1.0),
                tok("TX", &[5], 1.0),
                tok("TY", &[17], -1.0),
            ],
            Route::Anova,
            1.0 / 6.0,
        ),
        spec(
            "C8",
            12,
            vec![
                tok("LB", &[0, 1], 1.0),
                tok("LA", &[12, 13], 1.0),
                tok("res", &[16, 28], 0.7),
                tok("TX", &[12, 28], 1.0),
            ],
            Route::Bf,
            1.0 / 3.0,
        ),
    ]
}

/// A case realized as a dataset with its kernel discrepancies.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuiltCase {
    pub family: TemplateFamily,
    pub dataset: Dataset,
    pub test: Sample,
    pub graph: CollisionGraph,
    pub tmat: TemplateMatrix,
    pub khat: Mat,
    pub delta: Mat,
    pub zeta: Vector,
    /// Block means of the discrepancy on literal-hit edges.
    pub mu_lit: Mat,
    pub nu_lit: Vector,
    pub b_rho: f64,
}

/// The family `(L_b, alpha, beta)` with labels `(+1, -1, +1)`.
pub fn case_family(masses: Vec<f64>) -> Result<TemplateFamily> {
    let templates = LITERALS
        .iter()
        .map(|l| Template::parse(&format!("#{l}ab")))
        .collect::<Result<Vec<_>>>()?;
    TemplateFamily::new(templates, vec![1, -1, 1], masses)
}

fn token_id(name: &str, names: &mut HashMap<String, Token>) -> Token {
    match name {
        "LA" => LITERALS[0],
        "LB" => LITERALS[1],
        "LC" => LITERALS[2],
        _ => {
            let next = NAMED_BASE + names.len();
            *names.entry(name.to_string()).or_insert(next)
        }
    }
}

/// Builds the dataset, graph and discrepancies of one case.
pub fn build_case(spec: &CaseSpec) -> Result<BuiltCase> {
    let sizes = spec.sizes;
    let n: usize = sizes.iter().sum();
    let masses = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let fam = case_family(masses)?;
    let colors: Vec<usize> = (0..3).flat_map(|b| std::iter::repeat_n(b, sizes[b])).collect();

    let mut names = HashMap::new();
    let mut weight: HashMap<Token, f64> = HashMap::new();
    let mut slots: Vec<Vec<Token>> = vec![Vec::new(); n];
    for t in &spec.tokens {
        let id = token_id(&t.name, &mut names);
        weight.insert(id, t.weight);
        for &v in &t.vertices {
            if v >= n {
                return Err(Error::Invalid(format!("{}: vertex {v} outside 0..{n}", spec.name)));
            }
            slots[v].push(id);
        }
    }
    let tx = token_id("TX", &mut names);
    let ty = token_id("TY", &mut names);
    let mut fresh = FRESH_BASE;
    let mut samples = Vec::with_capacity(n);
    for (i, mut sub) in slots.into_iter().enumerate() {
        if sub.len() > 2 {
            return Err(Error::Invalid(format!("{}: vertex {i} holds more than two tokens", spec.name)));
        }
        while sub.len() < 2 {
            sub.push(fresh);
            fresh += 1;
        }
        samples.push(Sample::new(&fam, colors[i], sub));
    }
    let dataset = Dataset { r: 3, samples };
    let test = Sample::new(&fam, 0, vec![tx, ty]);
    let graph = build_graph(&dataset, &test, &fam);

    // heaviest responsible token; literal hits are flagged separately
    let heaviest = |cands: &mut dyn Iterator<Item = Token>| -> Option<f64> {
        let mut best: Option<f64> = None;
        for t in cands {
            let w = weight.get(&t).copied().unwrap_or(1.0);
            if best.is_none_or(|b| w.abs() > b.abs()) {
                best = Some(w);
            }
        }
        best
    };
    let s = &dataset.samples;
    let mut delta = Mat::zeros(n, n);
    let mut lit = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let li = LITERALS[colors[i]];
            let lj = LITERALS[colors[j]];
            let hits_i: Vec<Token> = s[i].sub.iter().copied().filter(|&t| t == lj).collect();
            let hits_j: Vec<Token> = s[j].sub.iter().copied().filter(|&t| t == li).collect();
            let shared = s[i].sub.iter().copied().filter(|t| s[j].sub.contains(t));
            let mut all = shared.chain(hits_i.iter().copied()).chain(hits_j.iter().copied());
            if let Some(w) = heaviest(&mut all) {
                delta[(i, j)] = w;
                delta[(j, i)] = w;
                if !hits_i.is_empty() || !hits_j.is_empty() {
                    lit[(i, j)] = w;
                    lit[(j, i)] = w;
                }
            }
        }
    }
    let mut zeta = Vector::zeros(n);
    let mut zeta_lit = Vector::zeros(n);
    for i in 0..n {
        let lit_hit = s[i].sub.contains(&LITERALS[0]);
        let mut cands = s[i].sub.iter().copied().filter(|&t| t == tx || t == ty || t == LITERALS[0]);
        if let Some(w) = heaviest(&mut cands) {
            zeta[i] = w;
            if lit_hit {
                zeta_lit[i] = w;
            }
        }
    }

    let tmat = TemplateMatrix::from_parts(Mat::identity(3, 3) * K_STAR, vec![K_STAR; 3]);
    let khat = linalg::expand_blocks(&tmat.n, &colors) + &delta;
    let mut mu_lit = Mat::zeros(3, 3);
    let mut nu_lit = Vector::zeros(3);
    for i in 0..n {
        for j in 0..n {
            mu_lit[(colors[i], colors[j])] += lit[(i, j)];
        }
        nu_lit[colors[i]] += zeta_lit[i];
    }
    for b in 0..3 {
        for c in 0..3 {
            mu_lit[(b, c)] /= (sizes[b] * sizes[c]) as f64;
        }
        nu_lit[b] /= sizes[b] as f64;
    }
    let b_rho = 2.0 * max_block_frequency(&dataset);
    Ok(BuiltCase {
        family: fam,
        dataset,
        test,
        graph,
        tmat,
        khat,
        delta,
        zeta,
        mu_lit,
        nu_lit,
        b_rho,
    })
}

/// Largest within-block frequency of any token in a wildcard slot.
pub fn max_block_frequency(ds: &Dataset) -> f64 {
    let sizes = ds.block_sizes();
    let mut counts: HashMap<(usize, Token), usize> = HashMap::new();
    for s in &ds.samples {
        let mut seen = s.sub.clone();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *counts.entry((s.template, t)).or_insert(0) += 1;
        }
    }
    counts.iter().map(|(&(b, _), &c)| c as f64 / sizes[b] as f64).fold(0.0, f64::max)
}

impl BuiltCase {
    /// Realized model: every slot uses the observed block statistics.
    pub fn model(&self) -> Result<Model> {
        let stats = block_stats(&self.graph, &self.delta, &self.zeta)?;
        Ok(Model::realized(
            self.tmat.clone(),
            0,
            stats,
            self.mu_lit.clone(),
            self.nu_lit.clone(),
            self.b_rho,
        ))
    }

    pub fn certify(&self, model: &Model, lambda: f64, delta: f64) -> Result<CertificateReport> {
        let colors = self.dataset.colors();
        let sizes = self.dataset.block_sizes();
        let p_hat = self.dataset.p_hat().unwrap_or_default();
        let signs: Vec<f64> = self.family.labels.iter().map(|&l| l as f64).collect();
        certify(
            model,
            &SampleInputs {
                khat: &self.khat,
                colors: &colors,
                sizes: &sizes,
                test_template: 0,
                d2: self.graph.d2(),
            },
            &signs,
            &p_hat,
            lambda,
            delta,
        )
    }
}

/// Ridge grid `logspace(-3, 0, 13)`.
pub fn lambda_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-3.0 + 0.25 * i as f64)).collect()
}

/// Level used for the worked cases; realized slots do not depend on it.
pub const CASE_DELTA: f64 = 0.1;

/// Outcome of one case over the ridge grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub lambdas: Vec<f64>,
    pub routes: Vec<Option<Route>>,
    /// Route on the widest contiguous run of the grid.
    pub stable_route: Option<Route>,
    /// Middle of that run.
    pub stable_lambda: f64,
    pub b_sharp: f64,
    pub b_rho: f64,
    pub expected_route: Route,
    pub expected_b_rho: f64,
    pub edges: usize,
    pub test_edges: usize,
    pub report: CertificateReport,
}

impl CaseReport {
    pub fn route_matches(&self) -> bool {
        self.stable_route == Some(self.expected_route)
    }

    pub fn b_rho_matches(&self) -> bool {
        (self.b_rho - self.expected_b_rho).abs() < 5e-5
    }
}

/// Widest run of equal entries; the earliest run wins ties.
pub fn widest_run<T: PartialEq + Copy>(xs: &[T]) -> Option<(T, usize, usize)> {
    let mut best: Option<(T, usize, usize)> = None;
    let mut start = 0;
    for i in 1..=xs.len() {
        if i == xs.len() || xs[i] != xs[start] {
            if best.is_none_or(|(_, s, e)| i - start > e - s) {
                best = Some((xs[start], start, i));
            }
            start = i;
        }
    }
    best
}

pub fn run_case(spec: &CaseSpec) -> Result<CaseReport> {
    let built = build_case(spec)?;
    let model = built.model()?;
    let lambdas = lambda_grid();
    let reports = lambdas
        .iter()
        .map(|&l| built.certify(&model, l, CASE_DELTA))
        .collect::<Result<Vec<_>>>()?;
    let routes: Vec<Option<Route>> = reports.iter().map(|r| r.route).collect();
    let (stable_route, s, e) = widest_run(&routes).ok_or_else(|| Error::Invalid("empty ridge grid".into()))?;
    let mid = (s + e - 1) / 2;
    Ok(CaseReport {
        name: spec.name.clone(),
        stable_route,
        stable_lambda: lambdas[mid],
        b_sharp: reports[mid].b_sharp,
        b_rho: built.b_rho,
        expected_route: spec.expected_route,
        expected_b_rho: spec.expected_b_rho,
        edges: built.graph.edge_count(),
        test_edges: built.graph.test_edge_count(),
        report: reports[mid].clone(),
        routes,
        lambdas,
    })
}

pub fn run_all() -> Result<Vec<CaseReport>> {
    cases().iter().map(run_case).collect()
}

// ---------------------------------------------------------------------------
// Signed cancellation ledger

/// Wildcard pairs `(a,b), (a,c), (d,b), (d,c)` on tokens `a=1, b=2, c=3, d=4`.
pub const LEDGER_PAIRS: [(Token, Token); 4] = [(1, 2), (1, 3), (4, 2), (4, 3)];

/// The two-channel residual between positive and negative wildcard pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CancellationLedger {
    pub residual: Mat,
    pub support: Mat,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub total: f64,
    pub density: f64,
}

/// `R_ij = 1{u_i = s_j} - 1{v_i = t_j}` over the four pair realizations.
pub fn cancellation_ledger() -> CancellationLedger {
    let channel = |p: (Token, Token), q: (Token, Token)| f64::from(u8::from(p.0 == q.0)) - f64::from(u8::from(p.1 == q.1));
    let residual = Mat::from_fn(4, 4, |i, j| channel(LEDGER_PAIRS[i], LEDGER_PAIRS[j]));
    let support = residual.map(|v| f64::from(u8::from(v != 0.0)));
    CancellationLedger {
        row_sums: residual.row_iter().map(|r| r.sum()).collect(),
        col_sums: residual.column_iter().map(|c| c.sum()).collect(),
        total: residual.sum(),
        density: support.sum() / 16.0,
        support,
        residual,
    }
}

/// Certificate on the signed-cancellation configuration: four positives
/// `aba` and four negatives `abb` over the ledger pairs, with kernel
/// discrepancy equal to the two-channel residual on every pair.
pub fn cancellation_certificate(lambda: f64) -> Result<CertificateReport> {
    let fam = TemplateFamily::new(vec![Template::parse("aba")?, Template::parse("abb")?], vec![1, -1], vec![0.5, 0.5])?;
    let mut samples = Vec::new();
    for b in 0..2 {
        for &(u, v) in &LEDGER_PAIRS {
            samples.push(Sample::new(&fam, b, vec![u, v]));
        }
    }
    let dataset = Dataset { r: 2, samples };
    let test = Sample::new(&fam, 0, vec![50, 51]);
    let graph = build_graph(&dataset, &test, &fam);
    let s = &dataset.samples;
    let n = s.len();
    let delta = Mat::from_fn(n, n, |i, j| {
        f64::from(u8::from(s[i].sub[0] == s[j].sub[0])) - f64::from(u8::from(s[i].sub[1] == s[j].sub[1]))
    });
    let zeta = Vector::zeros(n);
    let tmat = TemplateMatrix::from_parts(Mat::identity(2, 2) * K_STAR, vec![K_STAR; 2]);
    let colors = dataset.colors();
    let khat = linalg::expand_blocks(&tmat.n, &colors) + &delta;
    let stats = block_stats(&graph, &delta, &zeta)?;
    let model = Model::realized(
        tmat,
        0,
        stats,
        Mat::zeros(2, 2),
        Vector::zeros(2),
        2.0 * max_block_frequency(&dataset),
    );
    let sizes = dataset.block_sizes();
    certify(
        &model,
        &SampleInputs {
            khat: &khat,
            colors: &colors,
            sizes: &sizes,
            test_template: 0,
            d2: graph.d2(),
        },
        &[1.0, -1.0],
        &[0.5, 0.5],
        lambda,
        CASE_DELTA,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widest_run_prefers_first_on_ties() {
        assert_eq!(widest_run(&[1, 1, 2, 2, 3]), Some((1, 0, 2)));
        assert_eq!(widest_run(&[1, 2, 2, 2, 3]), Some((2, 1, 4)));
        assert_eq!(widest_run::<u8>(&[]), None);
    }

    #[test]
    fn grid_endpoints() {
        let g = lambda_grid();
        assert_eq!(g.len(), 13);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[12] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_case_graph() {
        let built = build_case(&cases()[0]).unwrap();
        assert_eq!(built.graph.edge_count(), 3);
        assert_eq!(built.graph.test_edge_count(), 2);
        assert_eq!(built.delta[(0, 4)], 1.0);
        assert_eq!(built.zeta[5], 1.0);
        assert_eq!(built.b_rho, 0.5);
    }

    #[test]
    fn literal_hits_become_edges() {
        // vertex 0 (template 0) carries template 1's literal
        let built = build_case(&cases()[1]).unwrap();
        for j in 10..20 {
            assert!(built.graph.edge(0, j));
        }
        assert!(built.mu_lit[(0, 1)] > 0.0);
    }

    #[test]
    fn ledger_cancels() {
        let l = cancellation_ledger();
        assert_eq!(l.density, 0.5);
        assert!(l.row_sums.iter().chain(&l.col_sums).all(|&s| s == 0.0));
        assert_eq!(l.total, 0.0);
        assert_eq!(l.residual[(0, 1)], 1.0);
        assert_eq!(l.residual[(0, 2)], -1.0);
    }
}
