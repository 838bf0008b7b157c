//! `symcert`: fit, certify and study fresh-symbol generalization from the
//! command line.

mod io;

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use symcert::certify::{self, AnovaMode, Route, SampleInputs};
use symcert::edge_wedge;
use symcert::experiments::{self, CoverageConfig, Pipeline, SweepAxis, SweepOutput, TaskConfig};
use symcert::graph::build_graph;
use symcert::kernel::{check_token_symmetry, gram_bundle};
use symcert::kl;
use symcert::klr;
use symcert::prompting;
use symcert::task::{sample_dataset, Split, Token};
use symcert::transformer::{self, AttnConfig, SeqGrams};
use symcert::worked_cases;

#[derive(Parser)]
#[command(
    name = "symcert",
    version,
    about = "Fresh-symbol generalization certificates for kernel logistic regression"
)]
struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Emit JSON even for tabular outputs.
    #[arg(long, global = true)]
    json: bool,
    /// Output file; stdout when omitted. A manifest is written beside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Task configuration JSON (family, scheme, kernel). Defaults to the
    /// equality task with 40 training and 40 test tokens.
    #[arg(long)]
    task: Option<PathBuf>,
}

impl TaskArgs {
    fn load(&self) -> Result<TaskConfig> {
        match &self.task {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing task config {}", p.display()))
            }
            None => Ok(TaskConfig::equality(40, 40)),
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        self.task.iter().cloned().collect()
    }
}

#[derive(Args, Clone)]
struct SampleArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Training sample size.
    #[arg(long, default_value_t = 96)]
    n: usize,
    /// Template of the test string; drawn from the masses when omitted.
    #[arg(long)]
    test_template: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Template families and datasets.
    #[command(subcommand)]
    Task(TaskCmd),
    /// Template matrices, Gram bundles and symmetry checks.
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Transformer kernel limit and width probes.
    #[command(subcommand)]
    Tkernel(TkernelCmd),
    /// Sample and ideal logistic-regression solvers.
    #[command(subcommand)]
    Klr(KlrCmd),
    /// Collision graph of one sample.
    Graph {
        #[command(flatten)]
        sample: SampleArgs,
        /// Emit the degree table instead of the node/edge list.
        #[arg(long)]
        degrees: bool,
    },
    /// Certificate for one sampled dataset and test string.
    Certify {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Edge–wedge level; defaults to the level for failure rate 0.1.
        #[arg(long)]
        v: Option<f64>,
        /// Certify the softmax contrasts instead of the binary score.
        #[arg(long)]
        multiclass: bool,
    },
    /// Edge–wedge envelope for the block sizes of one sampled dataset.
    Envelope {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, default_value_t = 3.0)]
        v: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 0.02)]
        lambda: f64,
    },
    /// Monte Carlo coverage of both certificates.
    Coverage {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 96)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
    },
    /// Worked collision-graph cases over a ridge grid.
    Cases {
        /// Case name (C1 to C8) or `all`.
        #[arg(long, default_value = "all")]
        case: String,
    },
    /// One certificate per grid point along an axis.
    Sweep {
        /// n, lambda, m or width.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        grid: Vec<f64>,
    },
    /// Prompt-strength derivative of the ideal margin.
    #[command(subcommand)]
    Prompting(PromptCmd),
    /// KL upper envelope and its Bernstein relaxation.
    Klbound {
        #[arg(long)]
        n_eff: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        u: f64,
    },
}

#[derive(Subcommand)]
enum TaskCmd {
    /// Draws a dataset and a test string.
    Sample(SampleArgs),
    /// Checks scheme feasibility and family disjointness.
    Validate {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

#[derive(Subcommand)]
enum KernelCmd {
    /// Template matrix `N` and its constants.
    Template(TaskArgs),
    /// Gram matrix of a sampled dataset (CSV with a JSON header line).
    Gram(SampleArgs),
    /// Randomized token-relabeling check.
    Symmetry {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

#[derive(Subcommand)]
enum TkernelCmd {
    /// Limit kernel for one pair of token strings.
    Limit {
        /// Attention configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// JSON object `{"x": [...], "y": [...]}` of equal-length token strings.
        #[arg(long)]
        pair: PathBuf,
        #[arg(long, default_value_t = transformer::DEFAULT_MC_SAMPLES)]
        samples: usize,
    },
    /// Finite-width error against the limit on four equality strings.
    Probe {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

#[derive(Subcommand)]
enum KlrCmd {
    /// Sample dual for a Gram matrix and labels.
    Fit {
        /// Square Gram matrix CSV.
        #[arg(long)]
        gram: PathBuf,
        /// Labels in {-1, +1}, one per row of the Gram matrix.
        #[arg(long)]
        labels: PathBuf,
        /// Ridge parameter.
        #[arg(long)]
        lambda: f64,
    },
    /// Ideal template problem.
    Ideal {
        /// Template kernel matrix CSV.
        #[arg(long = "N")]
        n: PathBuf,
        /// Template probabilities.
        #[arg(long)]
        q: PathBuf,
        /// Template labels in {-1, +1}.
        #[arg(long)]
        labels: PathBuf,
        /// Ridge parameter.
        #[arg(long)]
        lambda: f64,
    },
}

#[derive(Subcommand)]
enum PromptCmd {
    /// Margin derivative for a direction `H`.
    Derivative {
        /// Template kernel matrix CSV.
        #[arg(long = "N")]
        n: PathBuf,
        /// Symmetric perturbation direction CSV.
        #[arg(long = "H")]
        h: PathBuf,
        /// Template probabilities.
        #[arg(long)]
        q: PathBuf,
        /// Template labels in {-1, +1}.
        #[arg(long)]
        labels: PathBuf,
        /// Ridge parameter.
        #[arg(long)]
        lambda: f64,
        /// Also compare against central differences at these step sizes.
        #[arg(long, value_delimiter = ',')]
        fd: Vec<f64>,
    },
}

/// Flat worked-case row.
#[derive(Serialize)]
struct CaseRow {
    case: String,
    route: String,
    expected_route: String,
    route_matches: bool,
    lambda: f64,
    b_sharp: f64,
    b_rho: f64,
    expected_b_rho: f64,
    edges: usize,
    test_edges: usize,
    route_flips: usize,
    cs: f64,
    deg: f64,
    bd: f64,
    anova: f64,
    bf: f64,
}

fn route_label(r: Option<Route>) -> String {
    r.map_or("none".into(), |r| r.label().into())
}

struct Run {
    seed: u64,
    json: bool,
    out: Option<PathBuf>,
    started: Instant,
}

impl Run {
    fn emit(&self, text: &str, inputs: &[PathBuf]) -> Result<()> {
        io::emit(text, self.out.as_deref(), self.seed, inputs, self.started)
    }

    fn json<T: Serialize>(&self, v: &T, inputs: &[PathBuf]) -> Result<()> {
        self.emit(&io::to_json(v)?, inputs)
    }

    fn table<T: Serialize>(&self, rows: &[T], header: &[&str], inputs: &[PathBuf]) -> Result<()> {
        if self.json {
            self.emit(&(serde_json::to_string_pretty(rows)? + "\n"), inputs)
        } else {
            self.emit(&io::rows_csv(rows, header)?, inputs)
        }
    }
}

struct Drawn {
    cfg: TaskConfig,
    ds: symcert::task::Dataset,
    test: symcert::task::Sample,
}

fn draw(args: &SampleArgs, seed: u64) -> Result<Drawn> {
    let cfg = args.task.load()?;
    let (ds, test) = experiments::draw_sample(&cfg.family, &cfg.scheme, args.n, args.test_template, seed, 0)?;
    Ok(Drawn { cfg, ds, test })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let run = Run {
        seed: cli.seed,
        json: cli.json,
        out: cli.out.clone(),
        started: Instant::now(),
    };
    dispatch(cli.command, &run)
}

fn dispatch(command: Command, run: &Run) -> Result<()> {
    let seed = run.seed;
    match command {
        Command::Task(TaskCmd::Sample(args)) => {
            let d = draw(&args, seed)?;
            #[derive(Serialize)]
            struct Out<'a> {
                dataset: &'a symcert::task::Dataset,
                test: &'a symcert::task::Sample,
            }
            run.json(
                &Out {
                    dataset: &d.ds,
                    test: &d.test,
                },
                &args.task.inputs(),
            )
        }
        Command::Task(TaskCmd::Validate { task, trials }) => {
            let cfg = task.load()?;
            cfg.family.validate(&cfg.scheme, trials, seed)?;
            run.json(&serde_json::json!({ "valid": true, "trials": trials }), &task.inputs())
        }
        Command::Kernel(KernelCmd::Template(task)) => {
            let cfg = task.load()?;
            let tm = symcert::kernel::template_matrix(cfg.kernel.build().as_ref(), &cfg.family, &cfg.scheme.alphabet.test)?;
            run.json(&tm, &task.inputs())
        }
        Command::Kernel(KernelCmd::Gram(args)) => {
            let d = draw(&args, seed)?;
            let kernel = d.cfg.kernel.build();
            let tm = symcert::kernel::template_matrix(kernel.as_ref(), &d.cfg.family, &d.cfg.scheme.alphabet.test)?;
            let bundle = gram_bundle(kernel.as_ref(), &d.ds, &d.test, &d.cfg.family, &tm)?;
            if run.json {
                run.json(&bundle, &args.task.inputs())
            } else {
                run.emit(&io::gram_csv(&bundle)?, &args.task.inputs())
            }
        }
        Command::Kernel(KernelCmd::Symmetry { task, trials }) => {
            let cfg = task.load()?;
            let ds = sample_dataset(&cfg.family, &cfg.scheme, 64, seed)?;
            let strings: Vec<Vec<Token>> = ds.samples.iter().map(|s| s.string.clone()).collect();
            let vocab: Vec<Token> = [Split::Train, Split::Val, Split::Test]
                .iter()
                .flat_map(|&s| cfg.scheme.alphabet.split(s).to_vec())
                .collect();
            let rep = check_token_symmetry(cfg.kernel.build().as_ref(), &strings, &vocab, trials, 1e-12, seed);
            run.json(&rep, &task.inputs())
        }
        Command::Tkernel(TkernelCmd::Limit { config, pair, samples }) => {
            let cfg: AttnConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            #[derive(serde::Deserialize)]
            struct Pair {
                x: Vec<Token>,
                y: Vec<Token>,
            }
            let p: Pair = serde_json::from_str(&fs::read_to_string(&pair)?)?;
            let g = SeqGrams::from_tokens(&p.x, &p.y)?;
            let lim = transformer::trans_kernel_limit(&g, &cfg, samples, transformer::DEFAULT_QUADRATURE, seed)?;
            run.json(&lim, &[config, pair])
        }
        Command::Tkernel(TkernelCmd::Probe { widths, trials }) => {
            let cfg = AttnConfig::default();
            let inputs = [[1, 1], [1, 2], [3, 3], [3, 4]]
                .iter()
                .map(|s| transformer::one_hot(&[s[0], s[1], 0], 8))
                .collect::<symcert::Result<Vec<_>>>()?;
            let limit = transformer::limit_gram(
                &inputs,
                &cfg,
                transformer::DEFAULT_MC_SAMPLES,
                transformer::DEFAULT_QUADRATURE,
                seed,
            )?;
            let rows = transformer::convergence_probe(&inputs, &cfg, &widths, trials, &limit, seed)?;
            run.table(&rows, &["width", "trial", "max_error", "min_eig_ratio"], &[])
        }
        Command::Klr(KlrCmd::Fit { gram, labels, lambda }) => {
            let g = io::read_matrix(&gram)?;
            let y = io::read_vector(&labels)?;
            let sol = klr::solve_dual(&g, &y, lambda)?;
            let scores = klr::training_scores(&g, &sol.c, &y, lambda);
            run.json(
                &serde_json::json!({ "dual": sol, "training_scores": scores.as_slice() }),
                &[gram, labels],
            )
        }
        Command::Klr(KlrCmd::Ideal { n, q, labels, lambda }) => {
            let nm = io::read_matrix(&n)?;
            let qv = io::read_vector(&q)?;
            let y = io::read_vector(&labels)?;
            let id = klr::solve_ideal(&nm, qv.as_slice(), lambda, y.as_slice())?;
            run.json(&id, &[n, q, labels])
        }
        Command::Graph { sample, degrees } => {
            let d = draw(&sample, seed)?;
            let graph = build_graph(&d.ds, &d.test, &d.cfg.family);
            if degrees {
                #[derive(Serialize)]
                struct DegreeRow {
                    vertex: usize,
                    color: usize,
                    degree: usize,
                    test_edge: bool,
                }
                let rows: Vec<DegreeRow> = (0..graph.n())
                    .map(|i| DegreeRow {
                        vertex: i,
                        color: graph.colors[i],
                        degree: (0..graph.n()).filter(|&j| graph.edge(i, j)).count(),
                        test_edge: graph.test_edges[i],
                    })
                    .collect();
                run.table(&rows, &["vertex", "color", "degree", "test_edge"], &sample.task.inputs())
            } else {
                let kernel = d.cfg.kernel.build();
                let tm = symcert::kernel::template_matrix(kernel.as_ref(), &d.cfg.family, &d.cfg.scheme.alphabet.test)?;
                let bundle = gram_bundle(kernel.as_ref(), &d.ds, &d.test, &d.cfg.family, &tm)?;
                run.json(&graph.export(Some(&bundle)), &sample.task.inputs())
            }
        }
        Command::Certify {
            sample,
            lambda,
            delta,
            v,
            multiclass,
        } => {
            let d = draw(&sample, seed)?;
            let p = d.cfg.pipeline(AnovaMode::Auto { draws: 4096, seed })?;
            let v = v.unwrap_or_else(|| edge_wedge::v_eta(p.fam.r(), 0.1));
            if multiclass {
                run.json(&multiclass_report(&p, &d, lambda, delta)?, &sample.task.inputs())
            } else {
                run.json(&p.run(&d.ds, &d.test, lambda, delta, v)?, &sample.task.inputs())
            }
        }
        Command::Envelope { sample, v, delta, lambda } => {
            let d = draw(&sample, seed)?;
            let p = d.cfg.pipeline(AnovaMode::Auto { draws: 4096, seed })?;
            let a = d.test.template;
            let env = edge_wedge::envelope(&p.models[a], &p.edge_wedge, &d.ds.block_sizes(), a, &p.y_r, lambda, delta, v)?;
            run.json(&env, &sample.task.inputs())
        }
        Command::Coverage {
            task,
            trials,
            n,
            lambda,
            delta,
            eta,
        } => {
            let cfg = task.load()?;
            let p = cfg.pipeline(AnovaMode::Auto { draws: 4096, seed })?;
            let cov = CoverageConfig {
                n,
                lambda,
                delta,
                eta,
                trials,
                seed,
                ..CoverageConfig::default()
            };
            run.json(&experiments::coverage_with(&p, &cov)?, &task.inputs())
        }
        Command::Cases { case } => {
            let specs: Vec<_> = worked_cases::cases()
                .into_iter()
                .filter(|c| case.eq_ignore_ascii_case("all") || c.name.eq_ignore_ascii_case(&case))
                .collect();
            if specs.is_empty() {
                bail!("unknown case {case:?}; expected C1..C8 or all");
            }
            let reports = specs.iter().map(worked_cases::run_case).collect::<symcert::Result<Vec<_>>>()?;
            if run.json {
                return run.json(&serde_json::json!({ "cases": reports }), &[]);
            }
            let rows: Vec<CaseRow> = reports
                .iter()
                .map(|r| CaseRow {
                    case: r.name.clone(),
                    route: route_label(r.stable_route),
                    expected_route: r.expected_route.label().into(),
                    route_matches: r.route_matches(),
                    lambda: r.stable_lambda,
                    b_sharp: r.b_sharp,
                    b_rho: r.b_rho,
                    expected_b_rho: r.expected_b_rho,
                    edges: r.edges,
                    test_edges: r.test_edges,
                    route_flips: r.routes.windows(2).filter(|w| w[0] != w[1]).count(),
                    cs: r.report.budgets.cs,
                    deg: r.report.budgets.deg,
                    bd: r.report.budgets.bd,
                    anova: r.report.budgets.anova,
                    bf: r.report.budgets.bf,
                })
                .collect();
            run.table(&rows, &[], &[])
        }
        Command::Sweep { axis, grid } => {
            let ax = SweepAxis::parse(&axis).with_context(|| format!("unknown axis {axis:?}; expected n, lambda, m or width"))?;
            experiments::check_grid(ax, &grid)?;
            let base = CoverageConfig {
                seed,
                ..CoverageConfig::default()
            };
            match experiments::sweep(ax, &grid, &base)? {
                SweepOutput::Certificate(rows) => run.table(&rows, SWEEP_HEADER, &[]),
                SweepOutput::Width(rows) => run.table(&rows, &["width", "median_error", "max_error", "min_eig_ratio"], &[]),
            }
        }
        Command::Prompting(PromptCmd::Derivative {
            n,
            h,
            q,
            labels,
            lambda,
            fd,
        }) => {
            let nm = io::read_matrix(&n)?;
            let hm = io::read_matrix(&h)?;
            let qv = io::read_vector(&q)?;
            let y = io::read_vector(&labels)?;
            let rep = prompting::margin_derivative(&nm, &hm, qv.as_slice(), lambda, y.as_slice())?;
            let check = if fd.is_empty() {
                None
            } else {
                Some(prompting::fd_check(&nm, &hm, qv.as_slice(), lambda, y.as_slice(), &fd)?)
            };
            run.json(&serde_json::json!({ "report": rep, "fd_check": check }), &[n, h, q, labels])
        }
        Command::Klbound { n_eff, q, u } => run.json(
            &serde_json::json!({
                "n_eff": n_eff,
                "q": q,
                "u": u,
                "kl_inverse": kl::kl_inverse(n_eff, q, u),
                "bernstein": kl::bernstein_relax(n_eff, q, u),
            }),
            &[],
        ),
    }
}

const SWEEP_HEADER: &[&str] = &[
    "value",
    "n",
    "m",
    "lambda",
    "e_rep",
    "route",
    "b_sharp",
    "cs",
    "deg",
    "bd",
    "anova",
    "bf",
    "b_ew",
    "a_delta",
    "gamma_cspec",
    "d_bd",
    "z_bd",
    "b_bias",
    "b_rho",
    "f_hat",
    "ideal_score",
    "error",
    "edges",
];

fn multiclass_report(p: &Pipeline, d: &Drawn, lambda: f64, delta: f64) -> Result<certify::MulticlassReport> {
    let a = d.test.template;
    let classes: Vec<usize> = {
        let mut seen: Vec<i32> = Vec::new();
        p.fam
            .labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(i) => i,
                None => {
                    seen.push(*l);
                    seen.len() - 1
                }
            })
            .collect()
    };
    let n_classes = classes.iter().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        bail!("multiclass certification needs at least two classes");
    }
    let kernel = p.kernel.as_ref();
    let bundle = gram_bundle(kernel, &d.ds, &d.test, &p.fam, &p.tmat)?;
    let graph = build_graph(&d.ds, &d.test, &p.fam);
    let sizes = d.ds.block_sizes();
    let colors = d.ds.colors();
    let sample = SampleInputs {
        khat: &bundle.khat,
        colors: &colors,
        sizes: &sizes,
        test_template: a,
        d2: graph.d2(),
    };
    Ok(certify::certify_multiclass(
        &p.models[a],
        &sample,
        &classes,
        n_classes,
        &p.fam.masses,
        lambda,
        delta,
    )?)
}
