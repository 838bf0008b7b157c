//! End-to-end pipeline, Monte Carlo coverage studies and parameter sweeps.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{self, AnovaMode, CertificateReport, Model, Route, SampleInputs};
use crate::edge_wedge::{self, EdgeWedgeEnvelope, EdgeWedgeModel};
use crate::error::{Error, Result};
use crate::graph::build_graph;
use crate::kernel::{gram_bundle, template_matrix, EqualityPatternKernel, Kernel, PatternCache, TemplateMatrix};
use crate::klr;
use crate::linalg::{Mat, Vector};
use crate::task::{
    collision_primitives, sample_dataset_with, sample_test, Alphabet, Dataset, Sample, SubstitutionScheme, TemplateFamily, Token,
};
use crate::transformer::{self, AttnConfig, TransformerKernel, WidthConfig};

/// Serializable kernel choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    /// Equality-pattern kernel, optionally overridden per joint pattern.
    EqualityTable {
        #[serde(default)]
        table: HashMap<String, f64>,
    },
    /// Infinite-width transformer kernel, memoized per joint pattern.
    Transformer {
        config: AttnConfig,
        #[serde(default)]
        cls: Token,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_samples() -> usize {
    20_000
}

fn default_order() -> usize {
    transformer::DEFAULT_QUADRATURE
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::EqualityTable { table: HashMap::new() }
    }
}

impl KernelSpec {
    pub fn build(&self) -> Arc<dyn Kernel> {
        match self {
            KernelSpec::EqualityTable { table } => Arc::new(EqualityPatternKernel::with_table(table.clone())),
            KernelSpec::Transformer {
                config,
                cls,
                samples,
                order,
                seed,
            } => Arc::new(PatternCache::new(TransformerKernel {
                cfg: *config,
                cls: *cls,
                samples: *samples,
                order: *order,
                seed: *seed,
            })),
        }
    }
}

/// Family, substitution law and kernel of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub family: TemplateFamily,
    pub scheme: SubstitutionScheme,
    #[serde(default)]
    pub kernel: KernelSpec,
}

impl TaskConfig {
    /// Equality task with `m` training and `m_test` test tokens.
    pub fn equality(m: usize, m_test: usize) -> Self {
        TaskConfig {
            family: TemplateFamily::equality(),
            scheme: SubstitutionScheme::uniform(Alphabet::ranges(0, m, 0, m_test)),
            kernel: KernelSpec::default(),
        }
    }

    pub fn pipeline(&self, mode: AnovaMode) -> Result<Pipeline> {
        Pipeline::new(self.family.clone(), self.scheme.clone(), self.kernel.build(), mode)
    }
}

/// Sample-independent state for one family, scheme and kernel: template
/// constants plus one envelope model per test template.
pub struct Pipeline {
    pub fam: TemplateFamily,
    pub scheme: SubstitutionScheme,
    pub kernel: Arc<dyn Kernel>,
    pub tmat: TemplateMatrix,
    pub models: Vec<Model>,
    pub edge_wedge: EdgeWedgeModel,
    pub y_r: Vec<f64>,
}

impl Pipeline {
    pub fn new(fam: TemplateFamily, scheme: SubstitutionScheme, kernel: Arc<dyn Kernel>, mode: AnovaMode) -> Result<Self> {
        scheme.check(&fam)?;
        let tmat = template_matrix(kernel.as_ref(), &fam, &scheme.alphabet.test)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut models = Vec::with_capacity(fam.r());
        let mut q_mat = None;
        // the test split is disjoint from every training token, so the
        // model depends on the test string only through its template
        for a in 0..fam.r() {
            let test = sample_test(&fam, &scheme, a, &mut rng)?;
            let prim = collision_primitives(&fam, &scheme, &test)?;
            let r = fam.r();
            let q = Mat::from_fn(r, r, |b, c| prim.q[b][c]);
            let q_test = Vector::from_vec(prim.q_test.clone());
            let anova = certify::anova_components(&fam, &scheme, kernel.as_ref(), &tmat, &test, mode)?;
            let b_rho = prim.w_max as f64 / prim.rho;
            models.push(Model::envelope(tmat.clone(), q.clone(), q_test, anova, b_rho));
            q_mat.get_or_insert(q);
        }
        let edge_wedge = EdgeWedgeModel::new(&fam, &scheme, q_mat.expect("nonempty family"));
        let y_r = fam.signs()?;
        Ok(Pipeline {
            fam,
            scheme,
            kernel,
            tmat,
            models,
            edge_wedge,
            y_r,
        })
    }

    /// Fits the sample dual and evaluates both certificates at one test string.
    pub fn run(&self, ds: &Dataset, test: &Sample, lambda: f64, delta: f64, v: f64) -> Result<TrialOutcome> {
        let a = test.template;
        let model = &self.models[a];
        let bundle = gram_bundle(self.kernel.as_ref(), ds, test, &self.fam, &self.tmat)?;
        let sol = klr::solve_dual(&bundle.khat, &bundle.y, lambda)?;
        let f_hat = klr::primal_score(&sol.c, &bundle.y, &bundle.kx, lambda)?;
        let graph = build_graph(ds, test, &self.fam);
        let sizes = ds.block_sizes();
        let colors = ds.colors();
        let sample = SampleInputs {
            khat: &bundle.khat,
            colors: &colors,
            sizes: &sizes,
            test_template: a,
            d2: graph.d2(),
        };
        let report = certify::certify(model, &sample, &self.y_r, &self.fam.masses, lambda, delta)?;
        let envelope = if report.e_rep {
            Some(edge_wedge::envelope(
                model,
                &self.edge_wedge,
                &sizes,
                a,
                &self.y_r,
                lambda,
                delta,
                v,
            )?)
        } else {
            None
        };
        let nf = ds.n() as f64;
        let (q_e, s_e) = (graph.edge_density(), graph.wedge_density());
        let lhs = graph.d2().powi(2);
        let rhs = nf * nf * q_e + nf * nf * nf * s_e;
        Ok(TrialOutcome {
            f_hat,
            report,
            envelope,
            q_hat_e: q_e,
            s_hat_e: s_e,
            d2_sq: lhs,
            identity_gap: (lhs - rhs).abs(),
            edges: graph.edge_count(),
            label: test.label,
        })
    }
}

/// One pipeline evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub f_hat: f64,
    pub report: CertificateReport,
    pub envelope: Option<EdgeWedgeEnvelope>,
    pub q_hat_e: f64,
    pub s_hat_e: f64,
    pub d2_sq: f64,
    /// `|d_2^2 - (n^2 q_E + n^3 s_E)|`.
    pub identity_gap: f64,
    pub edges: usize,
    pub label: i32,
}

impl TrialOutcome {
    pub fn error(&self) -> f64 {
        (self.f_hat - self.report.ideal_score).abs()
    }

    /// `|f - S^id| <= B#`; vacuous outside the representativeness event.
    pub fn covered(&self) -> bool {
        !self.report.e_rep || self.error() <= self.report.b_sharp
    }

    /// `B# <= B^ew(v)`; vacuous outside the representativeness event.
    pub fn dominated(&self) -> bool {
        self.envelope.as_ref().is_none_or(|e| self.report.b_sharp <= e.b_ew)
    }

    /// The integer identity, checked to floating-point rounding.
    pub fn identity_holds(&self) -> bool {
        self.identity_gap <= 1e-9 * self.d2_sq.max(1.0)
    }
}

/// Coverage study on an equality-style task with uniform-injective
/// substitutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    /// Training tokens.
    pub m: usize,
    /// Test tokens.
    pub m_test: usize,
    pub n: usize,
    pub lambda: f64,
    pub delta: f64,
    pub eta: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            m: 40,
            m_test: 40,
            n: 96,
            lambda: 0.05,
            delta: 0.1,
            eta: 0.1,
            trials: 10_000,
            seed: 0,
        }
    }
}

/// Frequency with a normal-approximation standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Frequency {
    pub hits: usize,
    pub trials: usize,
    pub rate: f64,
    pub stderr: f64,
}

impl Frequency {
    pub fn new(hits: usize, trials: usize) -> Self {
        let rate = if trials > 0 { hits as f64 / trials as f64 } else { f64::NAN };
        Frequency {
            hits,
            trials,
            rate,
            stderr: (rate * (1.0 - rate) / trials as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub config: CoverageConfig,
    pub v: f64,
    pub representative: Frequency,
    /// `|f - S^id| <= B#`.
    pub covered: Frequency,
    /// `B# <= B^ew(v)`.
    pub dominated: Frequency,
    /// `|f - S^id| <= B^ew(v)`.
    pub covered_ew: Frequency,
    pub identity_violations: usize,
    /// `sign(f) != y` among trials where `B^ew < |S^id|`.
    pub misclassified_when_fired: Frequency,
    /// Theorem-level floor `1 - r exp(-n p_min / 8) - delta`.
    pub floor: f64,
    /// Same floor with `eta` subtracted as well.
    pub floor_ew: f64,
    pub routes: Vec<(Route, usize)>,
}

/// Uniform-injective equality pipeline with the default pattern kernel.
pub fn equality_pipeline(m: usize, m_test: usize) -> Result<Pipeline> {
    TaskConfig::equality(m, m_test).pipeline(AnovaMode::Exact)
}

/// Draws a template index from the family masses.
pub fn draw_template<R: rand::Rng + ?Sized>(fam: &TemplateFamily, rng: &mut R) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (b, &m) in fam.masses.iter().enumerate() {
        acc += m;
        if x < acc {
            return b;
        }
    }
    fam.r() - 1
}

/// A training set of size `n` and a test string from stream `stream` of
/// `seed`; the test template is drawn from the masses unless given.
pub fn draw_sample(
    fam: &TemplateFamily,
    scheme: &SubstitutionScheme,
    n: usize,
    test_template: Option<usize>,
    seed: u64,
    stream: u64,
) -> Result<(Dataset, Sample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let ds = sample_dataset_with(fam, scheme, n, &mut rng)?;
    let a = match test_template {
        Some(a) if a < fam.r() => a,
        Some(a) => return Err(Error::Invalid(format!("test template {a} outside a family of {}", fam.r()))),
        None => draw_template(fam, &mut rng),
    };
    let test = sample_test(fam, scheme, a, &mut rng)?;
    Ok((ds, test))
}

/// Runs one trial from its own seeded stream.
pub fn coverage_trial(p: &Pipeline, cfg: &CoverageConfig, trial: usize) -> Result<TrialOutcome> {
    let (ds, test) = draw_sample(&p.fam, &p.scheme, cfg.n, None, cfg.seed, trial as u64)?;
    p.run(&ds, &test, cfg.lambda, cfg.delta, edge_wedge::v_eta(p.fam.r(), cfg.eta))
}

/// Resamples `trials` datasets and tallies every coverage event.
pub fn run_coverage(cfg: &CoverageConfig) -> Result<CoverageSummary> {
    let p = equality_pipeline(cfg.m, cfg.m_test)?;
    coverage_with(&p, cfg)
}

pub fn coverage_with(p: &Pipeline, cfg: &CoverageConfig) -> Result<CoverageSummary> {
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| coverage_trial(p, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(p, cfg, &outcomes))
}

pub fn summarize(p: &Pipeline, cfg: &CoverageConfig, outcomes: &[TrialOutcome]) -> CoverageSummary {
    let t = outcomes.len();
    let count = |f: &dyn Fn(&TrialOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let fired: Vec<&TrialOutcome> = outcomes
        .iter()
        .filter(|o| o.envelope.as_ref().is_some_and(|e| e.b_ew < o.report.ideal_score.abs()))
        .collect();
    let wrong = fired.iter().filter(|o| o.f_hat.signum() != o.label as f64).count();
    let r = p.fam.r();
    let tail = r as f64 * (-(cfg.n as f64) * p.fam.p_min() / 8.0).exp();
    let routes: Vec<(Route, usize)> = Route::ALL
        .iter()
        .map(|&rt| (rt, count(&|o| o.report.route == Some(rt))))
        .filter(|&(_, c)| c > 0)
        .collect();
    CoverageSummary {
        config: cfg.clone(),
        v: edge_wedge::v_eta(r, cfg.eta),
        representative: Frequency::new(count(&|o| o.report.e_rep), t),
        covered: Frequency::new(count(&TrialOutcome::covered), t),
        dominated: Frequency::new(count(&TrialOutcome::dominated), t),
        covered_ew: Frequency::new(count(&|o| o.envelope.as_ref().is_none_or(|e| o.error() <= e.b_ew)), t),
        identity_violations: t - count(&TrialOutcome::identity_holds),
        misclassified_when_fired: Frequency::new(wrong, fired.len()),
        floor: 1.0 - tail - cfg.delta,
        floor_ew: 1.0 - tail - cfg.delta - cfg.eta,
        routes,
    }
}

// ---------------------------------------------------------------------------
// Sweeps

/// Swept parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    Lambda,
    M,
    Width,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n" => Some(SweepAxis::N),
            "lambda" => Some(SweepAxis::Lambda),
            "m" => Some(SweepAxis::M),
            "width" => Some(SweepAxis::Width),
            _ => None,
        }
    }
}

/// One certificate sweep row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub n: usize,
    pub m: usize,
    pub lambda: f64,
    pub e_rep: bool,
    pub route: String,
    pub b_sharp: f64,
    pub cs: f64,
    pub deg: f64,
    pub bd: f64,
    pub anova: f64,
    pub bf: f64,
    pub b_ew: f64,
    pub a_delta: f64,
    pub gamma_cspec: f64,
    pub d_bd: f64,
    pub z_bd: f64,
    pub b_bias: f64,
    pub b_rho: f64,
    pub f_hat: f64,
    pub ideal_score: f64,
    pub error: f64,
    pub edges: usize,
}

impl SweepRow {
    fn from_outcome(value: f64, n: usize, m: usize, lambda: f64, o: &TrialOutcome) -> Self {
        let rep = &o.report;
        SweepRow {
            value,
            n,
            m,
            lambda,
            e_rep: rep.e_rep,
            route: rep.route.map_or("none".into(), |r| r.label().into()),
            b_sharp: rep.b_sharp,
            cs: rep.budgets.cs,
            deg: rep.budgets.deg,
            bd: rep.budgets.bd,
            anova: rep.budgets.anova,
            bf: rep.budgets.bf,
            b_ew: o.envelope.as_ref().map_or(f64::INFINITY, |e| e.b_ew),
            a_delta: rep.a_delta,
            gamma_cspec: rep.gamma_cspec,
            d_bd: rep.d_bd,
            z_bd: rep.z_bd,
            b_bias: rep.b_bias,
            b_rho: rep.b_rho,
            f_hat: o.f_hat,
            ideal_score: rep.ideal_score,
            error: o.error(),
            edges: o.edges,
        }
    }
}

/// One width sweep row: finite-width error against the infinite-width limit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WidthRow {
    pub width: usize,
    pub median_error: f64,
    pub max_error: f64,
    pub min_eig_ratio: f64,
}

/// Sweep output; width sweeps report kernel convergence instead of budgets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepOutput {
    Certificate(Vec<SweepRow>),
    Width(Vec<WidthRow>),
}

/// Sweeps one axis on the equality task, holding the others at `base`.
/// Every grid point reuses the dataset stream of trial 0.
pub fn sweep(axis: SweepAxis, grid: &[f64], base: &CoverageConfig) -> Result<SweepOutput> {
    match axis {
        SweepAxis::Width => width_sweep(grid, base.seed).map(SweepOutput::Width),
        _ => {
            let shared = if axis == SweepAxis::M {
                None
            } else {
                Some(equality_pipeline(base.m, base.m_test)?)
            };
            let rows = grid
                .par_iter()
                .map(|&value| {
                    let mut cfg = base.clone();
                    match axis {
                        SweepAxis::N => cfg.n = value as usize,
                        SweepAxis::Lambda => cfg.lambda = value,
                        SweepAxis::M => cfg.m = value as usize,
                        SweepAxis::Width => unreachable!(),
                    }
                    let own;
                    let p = match &shared {
                        Some(p) => p,
                        None => {
                            own = equality_pipeline(cfg.m, cfg.m_test)?;
                            &own
                        }
                    };
                    let o = coverage_trial(p, &cfg, 0)?;
                    Ok(SweepRow::from_outcome(value, cfg.n, cfg.m, cfg.lambda, &o))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepOutput::Certificate(rows))
        }
    }
}

/// Finite-width transformer features on the four equality-pattern strings,
/// compared with the limit kernel, 20 trials per width.
pub fn width_sweep(grid: &[f64], seed: u64) -> Result<Vec<WidthRow>> {
    if grid.is_empty() {
        return Ok(vec![]);
    }
    let cfg = AttnConfig::default();
    let inputs = [[1, 1], [1, 2], [3, 3], [3, 4]]
        .iter()
        .map(|s| transformer::one_hot(&[s[0], s[1], 0], 8))
        .collect::<Result<Vec<Mat>>>()?;
    let limit = transformer::limit_gram(
        &inputs,
        &cfg,
        transformer::DEFAULT_MC_SAMPLES,
        transformer::DEFAULT_QUADRATURE,
        seed,
    )?;
    let widths: Vec<usize> = grid.iter().map(|&d| d as usize).collect();
    let rows = transformer::convergence_probe(&inputs, &cfg, &widths, 20, &limit, seed)?;
    Ok(widths
        .iter()
        .map(|&d| {
            let w = WidthConfig::square_root(d);
            let mut errs: Vec<f64> = rows.iter().filter(|r| r.width == w.d_emb).map(|r| r.max_error).collect();
            errs.sort_by(f64::total_cmp);
            let min_eig = rows
                .iter()
                .filter(|r| r.width == w.d_emb)
                .map(|r| r.min_eig_ratio)
                .fold(f64::INFINITY, f64::min);
            WidthRow {
                width: w.d_emb,
                median_error: errs.get(errs.len() / 2).copied().unwrap_or(f64::NAN),
                max_error: errs.last().copied().unwrap_or(f64::NAN),
                min_eig_ratio: min_eig,
            }
        })
        .collect())
}

/// Rejects grids that cannot be used on an axis.
pub fn check_grid(axis: SweepAxis, grid: &[f64]) -> Result<()> {
    for &g in grid {
        let ok = match axis {
            SweepAxis::Lambda => g > 0.0,
            SweepAxis::N | SweepAxis::M | SweepAxis::Width => g >= 1.0 && g.fract() == 0.0,
        };
        if !ok {
            return Err(Error::Invalid(format!("grid value {g} is not valid for {axis:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equality_template_constants() {
        let p = equality_pipeline(40, 40).unwrap();
        let n = &p.tmat.n;
        assert_eq!((n[(0, 0)], n[(0, 1)], n[(1, 1)]), (0.75, 0.25, 0.25));
        assert_eq!(p.tmat.d, vec![1.0, 0.5]);
        assert_eq!((p.tmat.delta_star, p.tmat.k_star, p.tmat.l_star), (0.25, 1.0, 2.0));
    }

    #[test]
    fn small_coverage_run() {
        let cfg = CoverageConfig {
            trials: 40,
            ..CoverageConfig::default()
        };
        let s = run_coverage(&cfg).unwrap();
        assert_eq!(s.identity_violations, 0);
        assert_eq!(s.covered.trials, 40);
        assert!(s.covered.rate >= 0.9);
    }

    #[test]
    fn vacuous_delta_one() {
        let cfg = CoverageConfig {
            trials: 10,
            delta: 1.0,
            ..CoverageConfig::default()
        };
        let s = run_coverage(&cfg).unwrap();
        assert!(s.covered.rate >= s.floor);
    }

    #[test]
    fn sweep_shapes() {
        let base = CoverageConfig::default();
        match sweep(SweepAxis::N, &[32.0, 64.0, 128.0], &base).unwrap() {
            SweepOutput::Certificate(rows) => assert_eq!(rows.len(), 3),
            SweepOutput::Width(_) => panic!("wrong output"),
        }
        match sweep(SweepAxis::Lambda, &[], &base).unwrap() {
            SweepOutput::Certificate(rows) => assert!(rows.is_empty()),
            SweepOutput::Width(_) => panic!("wrong output"),
        }
        assert!(check_grid(SweepAxis::N, &[1.5]).is_err());
    }
}
